#include "hompix/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "hompix/error.hpp"

namespace hompix {

namespace {

constexpr double kYMax = 30.0;

// sinc^2(y^2); the series branch avoids 0/0 near the origin.
double integrand_weight(double y) {
  const double y2 = y * y;
  if (y2 < 1e-4) {
    const double y4 = y2 * y2;
    const double s = 1.0 - y4 / 6.0;
    return s * s;
  }
  const double s = std::sin(y2) / y2;
  return s * s;
}

double trapezoid(double s, double base_step) {
  // Keep at least ~24 samples per period of cos(s y); scales with base_step.
  double h = base_step;
  if (s > 65.0) h *= 65.0 / s;
  const auto n = static_cast<std::size_t>(std::ceil(kYMax / h));
  h = kYMax / static_cast<double>(n);
  double sum = 0.5 * (integrand_weight(0.0) + integrand_weight(kYMax) * std::cos(s * kYMax));
  for (std::size_t i = 1; i < n; ++i) {
    const double y = h * static_cast<double>(i);
    sum += integrand_weight(y) * std::cos(s * y);
  }
  return sum * h;
}

}  // namespace

void SplitterSpec::validate(double tol) const {
  if (!std::isfinite(t2) || !std::isfinite(r2) || t2 < 0.0 || t2 > 1.0 || r2 < 0.0 || r2 > 1.0)
    throw InvalidParameter("splitter: t2 and r2 must lie in [0,1]");
  if (std::abs(t2 + r2 - 1.0) > tol)
    throw InvalidParameter("splitter: t2 + r2 must equal 1 (got " + std::to_string(t2 + r2) + ")");
}

void DipShape::validate() const {
  if (!std::isfinite(fwhm_mm) || fwhm_mm <= 0.0)
    throw InvalidParameter("dip.fwhm_mm: must be finite and positive");
  if (!std::isfinite(visibility) || visibility < 0.0 || visibility > 1.0)
    throw InvalidParameter("dip.visibility: must lie in [0,1]");
  if (!std::isfinite(d0_mm)) throw InvalidParameter("dip.d0_mm: must be finite");
}

double kernel_norm_integral(double base_step) { return 2.0 * trapezoid(0.0, base_step); }

double kernel_transform(double s, double base_step) {
  s = std::abs(s);
  return trapezoid(s, base_step) / trapezoid(0.0, base_step);
}

double kernel_argument_scale() {
  static const double scale = [] {
    double lo = 0.5, hi = 3.0;  // g(lo) > 1/2 > g(hi)
    for (int i = 0; i < 60; ++i) {
      const double mid = 0.5 * (lo + hi);
      (kernel_transform(mid) > 0.5 ? lo : hi) = mid;
    }
    return 2.0 * 0.5 * (lo + hi);
  }();
  return scale;
}

double hom_kernel(double delta_mm, double fwhm_mm, double base_step) {
  if (!std::isfinite(fwhm_mm) || fwhm_mm <= 0.0)
    throw InvalidParameter("hom_kernel: fwhm must be finite and positive");
  if (!std::isfinite(delta_mm)) throw InvalidParameter("hom_kernel: delay offset must be finite");
  if (delta_mm == 0.0) return 1.0;
  return kernel_transform(kernel_argument_scale() * delta_mm / fwhm_mm, base_step);
}

KernelTable::KernelTable() {
  const auto n = static_cast<std::size_t>(kMaxU / kStep) + 3;
  values_.resize(n);
  const double scale = kernel_argument_scale();
  // One fixed grid fine enough for the largest tabulated argument; cos(s y_i)
  // is advanced by rotation instead of being re-evaluated.
  const double s_max = scale * kMaxU * 1.01;
  const auto m = static_cast<std::size_t>(std::ceil(kYMax / (0.002 * 65.0 / s_max)));
  const double h = kYMax / static_cast<double>(m);
  std::vector<double> w(m + 1);
  for (std::size_t j = 0; j <= m; ++j)
    w[j] = integrand_weight(h * static_cast<double>(j)) * (j == 0 || j == m ? 0.5 : 1.0);
  double norm = 0.0;
  for (double v : w) norm += v;
  values_[0] = 1.0;
  for (std::size_t i = 1; i < n; ++i) {
    const double s = scale * static_cast<double>(i) * kStep;
    const double cd = std::cos(s * h), sd = std::sin(s * h);
    double c = 1.0, sn = 0.0, acc = 0.0;
    for (std::size_t j = 0; j <= m; ++j) {
      acc += w[j] * c;
      const double c_next = c * cd - sn * sd;
      sn = sn * cd + c * sd;
      c = c_next;
    }
    values_[i] = acc / norm;
  }
}

const KernelTable& KernelTable::instance() {
  static const KernelTable table;
  return table;
}

double KernelTable::at_scaled(double u) const {
  u = std::abs(u);
  if (u >= kMaxU) return 0.0;
  const double pos = u / kStep;
  const auto i = static_cast<std::size_t>(pos);
  const double t = pos - static_cast<double>(i);
  const double p0 = i == 0 ? values_[1] : values_[i - 1];  // even function
  const double p1 = values_[i];
  const double p2 = values_[i + 1];
  const double p3 = values_[i + 2];
  return p1 + 0.5 * t *
                  (p2 - p0 + t * (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3 +
                                  t * (3.0 * (p1 - p2) + p3 - p0)));
}

double KernelTable::operator()(double delta_mm, double fwhm_mm) const {
  return at_scaled(delta_mm / fwhm_mm);
}

CoincidenceRates coincidence_rates_from_overlap(const SplitterSpec& splitter, double overlap,
                                                double n_far) {
  splitter.validate();
  if (!(n_far >= 0.0)) throw InvalidParameter("coincidence_rates: n_far must be >= 0");
  const double t2 = splitter.t2;
  const double r2 = splitter.r2;
  const double tr = t2 * r2;
  CoincidenceRates out;
  out.n_cross = n_far * (t2 * t2 + r2 * r2 - 2.0 * tr * overlap);
  out.n_fib1 = n_far * tr * (1.0 + overlap);
  out.n_fib2 = out.n_fib1;
  return out;
}

CoincidenceRates coincidence_rates(const SplitterSpec& splitter, const DipShape& dip,
                                   double delay_mm, double n_far) {
  dip.validate();
  const double overlap = dip.visibility * hom_kernel(delay_mm - dip.d0_mm, dip.fwhm_mm);
  return coincidence_rates_from_overlap(splitter, overlap, n_far);
}

FwhmResult fwhm_from_bandwidth(const SourceSpectrum& spectrum) {
  if (!(spectrum.lambda_pump_nm > 0.0) || !std::isfinite(spectrum.lambda_pump_nm))
    throw InvalidParameter("spectrum: pump wavelength must be positive");
  if (!(spectrum.delta_lambda_spdc_nm > 0.0) || !std::isfinite(spectrum.delta_lambda_spdc_nm))
    throw InvalidParameter("spectrum: SPDC bandwidth must be positive");
  constexpr double c = kSpeedOfLight_m_per_s;
  const double omega_p = 2.0 * std::numbers::pi * c / (spectrum.lambda_pump_nm * 1e-9);
  const double d_omega = spectrum.delta_lambda_spdc_nm * 1e-9 * omega_p * omega_p /
                         (8.0 * std::numbers::pi * c);
  const double fwhm_m = std::sqrt(2.0 * std::numbers::pi * std::numbers::ln2) * c / d_omega;
  return {fwhm_m * 1e3, fwhm_m / c * 1e15};
}

double bandwidth_from_fwhm(double lambda_pump_nm, double fwhm_mm) {
  if (!(fwhm_mm > 0.0)) throw InvalidParameter("bandwidth_from_fwhm: fwhm must be positive");
  // FWHM is inversely proportional to the bandwidth.
  const auto ref = fwhm_from_bandwidth({lambda_pump_nm, 1.0});
  return ref.fwhm_mm / fwhm_mm;
}

}  // namespace hompix
