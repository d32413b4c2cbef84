#include "hompix/fit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include <boost/math/special_functions/gamma.hpp>

#include "hompix/error.hpp"
#include "hompix/lsq.hpp"

namespace hompix {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double phi(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }
double big_phi(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

std::string format_trace(const std::vector<double>& trace) {
  std::ostringstream os;
  os.precision(10);
  for (std::size_t i = 0; i < trace.size(); ++i) os << (i ? " " : "") << trace[i];
  return "objective trace: " + os.str();
}

// Bin content of a unit-area Gaussian and its derivatives in mu and sigma.
struct BinMass {
  double m = 0.0, d_mu = 0.0, d_sigma = 0.0;
};

BinMass gauss_bin(double a, double b, double mu, double sigma, bool folded) {
  const double za = (a - mu) / sigma, zb = (b - mu) / sigma;
  BinMass out;
  out.m = big_phi(zb) - big_phi(za);
  out.d_mu = -(phi(zb) - phi(za)) / sigma;
  out.d_sigma = -(phi(zb) * zb - phi(za) * za) / sigma;
  if (folded) {
    const double ya = (-a - mu) / sigma, yb = (-b - mu) / sigma;
    out.m += big_phi(ya) - big_phi(yb);
    out.d_mu += -(phi(ya) - phi(yb)) / sigma;
    out.d_sigma += -(phi(ya) * ya - phi(yb) * yb) / sigma;
  }
  return out;
}

enum DgIndex { kA = 0, kMu, kS1, kS2, kP, kC, kDgParams };

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  return *mid;
}

}  // namespace

// --- CoincidenceHistogram --------------------------------------------------

CoincidenceHistogram CoincidenceHistogram::uniform(double lo_ns, double hi_ns, double bin_ns,
                                                   PairKind kind) {
  if (!(bin_ns > 0.0) || !(hi_ns > lo_ns))
    throw InvalidParameter("CoincidenceHistogram: need hi > lo and a positive bin width");
  const auto n = static_cast<std::size_t>(std::ceil((hi_ns - lo_ns) / bin_ns - 1e-9));
  CoincidenceHistogram h;
  h.kind = kind;
  h.edges.resize(n + 1);
  for (std::size_t i = 0; i <= n; ++i) h.edges[i] = lo_ns + bin_ns * static_cast<double>(i);
  h.counts.assign(n, 0.0);
  return h;
}

bool CoincidenceHistogram::fill(double dt_ns, double weight) {
  if (edges.size() < 2 || !(dt_ns >= edges.front()) || !(dt_ns <= edges.back())) return false;
  auto it = std::upper_bound(edges.begin(), edges.end(), dt_ns);
  auto idx = static_cast<std::size_t>(it - edges.begin());
  idx = idx == 0 ? 0 : idx - 1;
  if (idx >= counts.size()) idx = counts.size() - 1;
  counts[idx] += weight;
  return true;
}

double CoincidenceHistogram::total() const {
  double s = 0.0;
  for (double c : counts) s += c;
  return s;
}

void CoincidenceHistogram::validate() const {
  if (edges.size() < 2 || counts.size() + 1 != edges.size())
    throw InvalidParameter("CoincidenceHistogram: counts must have one entry per bin");
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (!(edges[i] > edges[i - 1])) throw InvalidParameter("CoincidenceHistogram: edges must increase");
  for (double c : counts)
    if (!(c >= 0.0)) throw InvalidParameter("CoincidenceHistogram: counts must be >= 0");
}

// --- Double Gaussian --------------------------------------------------------

DoubleGaussianFit fit_double_gaussian(const CoincidenceHistogram& hist,
                                      const DoubleGaussianOptions& options) {
  hist.validate();
  const std::size_t nb = hist.size();
  std::size_t non_empty = 0;
  for (double c : hist.counts) non_empty += c > 0.0;
  if (non_empty < 8) throw InvalidParameter("fit_double_gaussian: fewer than 8 non-empty bins");

  DoubleGaussianFit out;
  out.folded = options.folded;
  const double lo = hist.edges.front(), hi = hist.edges.back();
  const double range = hi - lo;
  const double bin_w = range / static_cast<double>(nb);

  if (std::all_of(hist.counts.begin(), hist.counts.end(),
                  [&](double c) { return c == hist.counts.front(); })) {
    out.background_only = true;
    out.converged = true;
    out.background_per_bin = hist.counts.front();
    out.background_err = std::sqrt(std::max(out.background_per_bin, 1.0) / static_cast<double>(nb));
    out.n_signal_err = std::sqrt(std::max(out.background_per_bin, 1.0) * static_cast<double>(nb));
    out.ndf = static_cast<int>(nb) - 1;
    if (options.fixed_shape) {
      const auto& s = *options.fixed_shape;
      out.mu = s.mu;
      out.sigma1 = s.sigma1;
      out.sigma2 = s.sigma2;
      out.frac1 = s.frac1;
    }
    return out;
  }

  Eigen::VectorXd y(static_cast<Eigen::Index>(nb)), sig(static_cast<Eigen::Index>(nb));
  for (std::size_t i = 0; i < nb; ++i) {
    y[static_cast<Eigen::Index>(i)] = hist.counts[i];
    sig[static_cast<Eigen::Index>(i)] = std::sqrt(std::max(hist.counts[i], 1.0));
  }

  const bool folded = options.folded;
  ModelFn model = [&hist, nb, folded](const Eigen::VectorXd& p, Eigen::VectorXd& mu, Eigen::MatrixXd& jac) {
    mu.resize(static_cast<Eigen::Index>(nb));
    jac.setZero(static_cast<Eigen::Index>(nb), kDgParams);
    for (std::size_t i = 0; i < nb; ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      const double a = hist.edges[i], b = hist.edges[i + 1];
      const BinMass g1 = gauss_bin(a, b, p[kMu], p[kS1], folded);
      const BinMass g2 = gauss_bin(a, b, p[kMu], p[kS2], folded);
      const double frac = p[kP];
      const double shape = frac * g1.m + (1.0 - frac) * g2.m;
      mu[r] = p[kA] * shape + p[kC];
      jac(r, kA) = shape;
      jac(r, kMu) = p[kA] * (frac * g1.d_mu + (1.0 - frac) * g2.d_mu);
      jac(r, kS1) = p[kA] * frac * g1.d_sigma;
      jac(r, kS2) = p[kA] * (1.0 - frac) * g2.d_sigma;
      jac(r, kP) = p[kA] * (g1.m - g2.m);
      jac(r, kC) = 1.0;
    }
  };

  // Background from the outer bins, peak position and width from the rest.
  std::vector<double> outer;
  for (std::size_t i = 0; i < nb; ++i) {
    const double c = hist.center(i);
    const bool is_outer = folded ? c > lo + 0.6 * range
                                 : (c < lo + 0.2 * range || c > hi - 0.2 * range);
    if (is_outer) outer.push_back(hist.counts[i]);
  }
  const double c0 = median(outer);
  std::size_t peak = 0;
  for (std::size_t i = 1; i < nb; ++i)
    if (hist.counts[i] > hist.counts[peak]) peak = i;
  const double mu0 = folded ? 0.0 : hist.center(peak);
  double sw = 0.0, sww = 0.0, signal = 0.0;
  for (std::size_t i = 0; i < nb; ++i) {
    const double s = hist.counts[i] - c0;
    signal += s;
    const double d = hist.center(i) - mu0;
    if (s <= 0.0 || std::abs(d) > 0.25 * range) continue;
    sw += s;
    sww += s * d * d;
  }
  const double rms = std::clamp(sw > 0.0 ? std::sqrt(sww / sw) : bin_w, bin_w, 0.25 * range);
  const double a0 = std::max(signal, 1.0);

  CurveFitProblem pr;
  pr.model = model;
  pr.y = y;
  pr.sigma = sig;
  pr.objective = options.statistic == FitStatistic::poisson ? Objective::poisson : Objective::chi2;
  pr.lower.resize(kDgParams);
  pr.upper.resize(kDgParams);
  pr.lower << 0.0, lo, 0.1 * bin_w, 0.1 * bin_w, 0.0, 0.0;
  pr.upper << 10.0 * hist.total() + 10.0, hi, range, range, 1.0, 10.0 * (*std::max_element(hist.counts.begin(), hist.counts.end())) + 10.0;
  pr.fixed.assign(kDgParams, false);
  if (folded) pr.fixed[kMu] = true;

  std::vector<Eigen::VectorXd> starts;
  auto start_vec = [&](double m, double s1, double s2, double p) {
    Eigen::VectorXd v(kDgParams);
    v << a0, m, s1, s2, p, std::max(c0, 0.0);
    return v;
  };
  if (options.fixed_shape) {
    const auto& s = *options.fixed_shape;
    pr.fixed[kMu] = pr.fixed[kS1] = pr.fixed[kS2] = pr.fixed[kP] = true;
    pr.lower[kS1] = pr.lower[kS2] = 1e-9;
    pr.upper[kS1] = pr.upper[kS2] = kInf;
    pr.lower[kMu] = -kInf;
    pr.upper[kMu] = kInf;
    starts.push_back(start_vec(folded ? 0.0 : s.mu, s.sigma1, s.sigma2, s.frac1));
  } else {
    starts.push_back(start_vec(mu0, 0.7 * rms, 1.8 * rms, 0.7));
    starts.push_back(start_vec(mu0, 0.5 * rms, 1.3 * rms, 0.5));
    starts.push_back(start_vec(mu0, 0.9 * rms, 3.0 * rms, 0.9));
  }

  std::optional<CurveFitResult> best;
  for (const auto& s : starts) {
    pr.start = s;
    auto r = fit_curve(pr);
    if (!best || (r.converged && (!best->converged || r.objective < best->objective))) best = std::move(r);
  }
  if (!best->converged)
    throw FitFailure("fit_double_gaussian: no convergence", format_trace(best->trace));

  const auto& p = best->params;
  const auto& e = best->errors;
  out.converged = true;
  out.n_signal = p[kA];
  out.n_signal_err = e[kA];
  out.mu = p[kMu];
  out.mu_err = e[kMu];
  out.sigma1 = p[kS1];
  out.sigma1_err = e[kS1];
  out.sigma2 = p[kS2];
  out.sigma2_err = e[kS2];
  out.frac1 = p[kP];
  out.frac1_err = e[kP];
  out.background_per_bin = p[kC];
  out.background_err = e[kC];
  out.chi2 = best->chi2;
  out.ndf = best->ndf;
  if (out.sigma1 > out.sigma2) {
    std::swap(out.sigma1, out.sigma2);
    std::swap(out.sigma1_err, out.sigma2_err);
    out.frac1 = 1.0 - out.frac1;
  }
  return out;
}

// --- Delay binning ----------------------------------------------------------

std::vector<const DipBin*> DipCurve::valid_bins() const {
  std::vector<const DipBin*> out;
  for (const auto& b : bins)
    if (b.valid) out.push_back(&b);
  return out;
}

DipCurve bin_by_delay(std::span<const ScanPair> pairs, const ScanPlan& plan,
                      std::span<const std::array<std::uint64_t, 2>> singles_per_position,
                      const AnalysisConfig& analysis, const HistogramShapes* shapes) {
  const std::size_t np = plan.positions_mm.size();
  if (!singles_per_position.empty() && singles_per_position.size() != np)
    throw ContractViolation("bin_by_delay: singles must have one entry per scan position");
  const auto per_bin = static_cast<std::size_t>(std::max(1, analysis.positions_per_bin));
  const std::size_t nbins = (np + per_bin - 1) / per_bin;
  const double w = analysis.coincidence_window_ns;

  std::vector<std::array<CoincidenceHistogram, 3>> hists(nbins);
  for (auto& h : hists) {
    h[0] = CoincidenceHistogram::uniform(-w, w, analysis.hist_bin_ns, PairKind::cross);
    h[1] = CoincidenceHistogram::uniform(0.0, w, analysis.hist_bin_ns, PairKind::same_fiber1);
    h[2] = CoincidenceHistogram::uniform(0.0, w, analysis.hist_bin_ns, PairKind::same_fiber2);
  }
  for (const auto& pair : pairs) {
    if (pair.position >= np) throw ContractViolation("bin_by_delay: pair position outside the scan");
    hists[pair.position / per_bin][static_cast<std::size_t>(pair.kind)].fill(pair.dt_ns);
  }

  DipCurve curve;
  curve.bins.resize(nbins);
  for (std::size_t b = 0; b < nbins; ++b) {
    auto& bin = curve.bins[b];
    const std::size_t first = b * per_bin;
    const std::size_t last = std::min(np, first + per_bin);
    bin.first_position = static_cast<std::uint32_t>(first);
    bin.positions = static_cast<std::uint32_t>(last - first);
    for (std::size_t k = first; k < last; ++k) {
      bin.delay_mm += plan.positions_mm[k];
      if (!singles_per_position.empty()) {
        bin.singles_fib1 += static_cast<double>(singles_per_position[k][0]);
        bin.singles_fib2 += static_cast<double>(singles_per_position[k][1]);
      }
    }
    bin.delay_mm /= static_cast<double>(bin.positions);
    bin.exposure_s = plan.dwell_s * static_cast<double>(bin.positions);

    std::array<double*, 3> value{&bin.n_cross, &bin.n_fib1, &bin.n_fib2};
    std::array<double*, 3> error{&bin.n_cross_err, &bin.n_fib1_err, &bin.n_fib2_err};
    for (std::size_t k = 0; k < 3 && bin.valid; ++k) {
      DoubleGaussianOptions opt;
      opt.statistic = analysis.histogram_statistic;
      opt.folded = k != 0;
      if (shapes) opt.fixed_shape = k == 0 ? shapes->cross : (k == 1 ? shapes->fiber1 : shapes->fiber2);
      try {
        const auto fit = fit_double_gaussian(hists[b][k], opt);
        if (fit.background_only) {
          bin.valid = false;
          bin.flag = std::string(to_string(static_cast<PairKind>(k))) + ": no signal";
          break;
        }
        *value[k] = fit.n_signal;
        *error[k] = fit.n_signal_err;
        if (!(fit.n_signal_err > 0.0)) {
          bin.valid = false;
          bin.flag = std::string(to_string(static_cast<PairKind>(k))) + ": zero fit error";
        }
      } catch (const Error& e) {
        bin.valid = false;
        bin.flag = std::string(to_string(static_cast<PairKind>(k))) + ": " + e.what();
      }
    }
  }
  return curve;
}

// --- Dip fit ----------------------------------------------------------------

namespace {

enum DipIndex { kN = 0, kN1, kN2, kD0, kW, kV, kT2, kDipParams };

struct DipPoint {
  int curve;  // 0 cross, 1 fib1, 2 fib2
  double delay;
  double value;
  double error;
};

void dip_model(const std::vector<DipPoint>& pts, bool shared, const Eigen::VectorXd& p,
               Eigen::VectorXd& mu, Eigen::MatrixXd& jac) {
  const auto& kernel = KernelTable::instance();
  const auto m = static_cast<Eigen::Index>(pts.size());
  mu.resize(m);
  jac.setZero(m, kDipParams);
  const double t2 = p[kT2], r2 = 1.0 - t2;
  const double tr = t2 * r2, far = t2 * t2 + r2 * r2;
  const double w = p[kW], v = p[kV];
  const double h = 1e-4 * w;
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto& pt = pts[static_cast<std::size_t>(i)];
    const double delta = pt.delay - p[kD0];
    const double f = kernel(delta, w);
    const double df_ddelta = (kernel(delta + h, w) - kernel(delta - h, w)) / (2.0 * h);
    const double df_dw = (kernel(delta, w + h) - kernel(delta, w - h)) / (2.0 * h);
    if (shared) {
      // N (T^4 + R^4 - 2 T^2 R^2 V f) and N T^2 R^2 (1 + V f).
      const double d_tr = 1.0 - 2.0 * t2;      // d(t2 r2)/dt2
      const double d_far = 2.0 * t2 - 2.0 * r2;  // d(t2^2 + r2^2)/dt2
      if (pt.curve == 0) {
        const double g = far - 2.0 * tr * v * f;
        mu[i] = p[kN] * g;
        jac(i, kN) = g;
        jac(i, kV) = -p[kN] * 2.0 * tr * f;
        jac(i, kD0) = p[kN] * 2.0 * tr * v * df_ddelta;
        jac(i, kW) = -p[kN] * 2.0 * tr * v * df_dw;
        jac(i, kT2) = p[kN] * (d_far - 2.0 * d_tr * v * f);
      } else {
        const double g = tr * (1.0 + v * f);
        mu[i] = p[kN] * g;
        jac(i, kN) = g;
        jac(i, kV) = p[kN] * tr * f;
        jac(i, kD0) = -p[kN] * tr * v * df_ddelta;
        jac(i, kW) = p[kN] * tr * v * df_dw;
        jac(i, kT2) = p[kN] * d_tr * (1.0 + v * f);
      }
    } else if (pt.curve == 0) {
      // Cross normalization is the far-from-dip count; depth scales with 2TR/(T^2+R^2).
      const double kappa = 2.0 * tr / far;
      const double g = 1.0 - kappa * v * f;
      mu[i] = p[kN] * g;
      jac(i, kN) = g;
      jac(i, kV) = -p[kN] * kappa * f;
      jac(i, kD0) = p[kN] * kappa * v * df_ddelta;
      jac(i, kW) = -p[kN] * kappa * v * df_dw;
    } else {
      const auto idx = pt.curve == 1 ? kN1 : kN2;
      const double g = 1.0 + v * f;
      mu[i] = p[idx] * g;
      jac(i, idx) = g;
      jac(i, kV) = p[idx] * f;
      jac(i, kD0) = -p[idx] * v * df_ddelta;
      jac(i, kW) = p[idx] * v * df_dw;
    }
  }
}

}  // namespace

CoincidenceRates DipFit::predict(double delay_mm) const {
  const double f = KernelTable::instance()(delay_mm - d0_mm, fwhm_mm);
  const double r2 = 1.0 - t2;
  const double kappa = 2.0 * t2 * r2 / (t2 * t2 + r2 * r2);
  CoincidenceRates out;
  out.n_cross = n_far * (1.0 - kappa * visibility * f);
  out.n_fib1 = norm_fib1 * (1.0 + visibility * f);
  out.n_fib2 = norm_fib2 * (1.0 + visibility * f);
  return out;
}

DipFit fit_dip_curves(const DipCurve& curve, const DipFitOptions& options) {
  const auto bins = curve.valid_bins();
  if (bins.size() < 8) throw InvalidParameter("fit_dip_curves: fewer than 8 valid delay bins");
  if (!options.use[0] && !options.use[1] && !options.use[2])
    throw InvalidParameter("fit_dip_curves: no curve selected");
  if (options.fit_t2 && !(options.use[0] && (options.use[1] || options.use[2])))
    throw InvalidParameter("fit_dip_curves: fitting t2 needs the cross curve and a same-fiber curve");

  std::vector<DipPoint> pts;
  for (const auto* b : bins) {
    const std::array<double, 3> val{b->n_cross, b->n_fib1, b->n_fib2};
    const std::array<double, 3> err{b->n_cross_err, b->n_fib1_err, b->n_fib2_err};
    for (int c = 0; c < 3; ++c)
      if (options.use[c] && err[c] > 0.0) pts.push_back({c, b->delay_mm, val[c], err[c]});
  }

  double dmin = kInf, dmax = -kInf, min_step = kInf;
  for (std::size_t i = 0; i < bins.size(); ++i) {
    dmin = std::min(dmin, bins[i]->delay_mm);
    dmax = std::max(dmax, bins[i]->delay_mm);
    if (i > 0) min_step = std::min(min_step, std::abs(bins[i]->delay_mm - bins[i - 1]->delay_mm));
  }
  const double span = dmax - dmin;

  // Starting values: d0 at the deepest smoothed cross point (or highest
  // same-fiber point), normalizations from medians, V from the dip depth.
  const int lead = options.use[0] ? 0 : (options.use[1] ? 1 : 2);
  std::vector<double> lead_vals(bins.size());
  for (std::size_t i = 0; i < bins.size(); ++i)
    lead_vals[i] = lead == 0 ? bins[i]->n_cross : (lead == 1 ? bins[i]->n_fib1 : bins[i]->n_fib2);
  std::size_t extreme = 0;
  double extreme_val = lead == 0 ? kInf : -kInf;
  for (std::size_t i = 0; i < bins.size(); ++i) {
    const std::size_t a = i == 0 ? 0 : i - 1, b = std::min(bins.size() - 1, i + 1);
    const double s = (lead_vals[a] + lead_vals[i] + lead_vals[b]) / 3.0;
    if ((lead == 0 && s < extreme_val) || (lead != 0 && s > extreme_val)) {
      extreme_val = s;
      extreme = i;
    }
  }
  std::array<std::vector<double>, 3> per_curve;
  for (const auto* b : bins) {
    per_curve[0].push_back(b->n_cross);
    per_curve[1].push_back(b->n_fib1);
    per_curve[2].push_back(b->n_fib2);
  }
  const double m_cross = median(per_curve[0]), m1 = median(per_curve[1]), m2 = median(per_curve[2]);
  const double t2 = options.t2, r2 = 1.0 - t2;
  const double tr = t2 * r2, far = t2 * t2 + r2 * r2;
  double v0 = 0.5;
  if (lead == 0 && m_cross > 0.0) v0 = (1.0 - extreme_val / m_cross) * far / (2.0 * tr);
  else if (lead != 0) v0 = extreme_val / (lead == 1 ? m1 : m2) - 1.0;
  v0 = std::clamp(v0, 0.05, 0.95);

  CurveFitProblem pr;
  const bool shared = options.fit_t2;
  pr.model = [&pts, shared](const Eigen::VectorXd& p, Eigen::VectorXd& mu, Eigen::MatrixXd& jac) {
    dip_model(pts, shared, p, mu, jac);
  };
  pr.y.resize(static_cast<Eigen::Index>(pts.size()));
  pr.sigma.resize(static_cast<Eigen::Index>(pts.size()));
  for (std::size_t i = 0; i < pts.size(); ++i) {
    pr.y[static_cast<Eigen::Index>(i)] = pts[i].value;
    pr.sigma[static_cast<Eigen::Index>(i)] = pts[i].error;
  }
  pr.objective = Objective::chi2;
  const double w_lo = 0.25 * min_step, w_hi = span;
  pr.lower.resize(kDipParams);
  pr.upper.resize(kDipParams);
  pr.lower << 0.0, 0.0, 0.0, dmin, w_lo, 0.0, 0.05;
  pr.upper << kInf, kInf, kInf, dmax, w_hi, 1.0, 0.95;
  pr.fixed.assign(kDipParams, false);
  if (shared) {
    pr.fixed[kN1] = pr.fixed[kN2] = true;
  } else {
    pr.fixed[kT2] = true;
    if (!options.use[0]) pr.fixed[kN] = true;
    if (!options.use[1]) pr.fixed[kN1] = true;
    if (!options.use[2]) pr.fixed[kN2] = true;
  }
  const double n0 = shared ? (m_cross + m1 + m2) : m_cross;
  auto make_start = [&](double w) {
    Eigen::VectorXd s(kDipParams);
    s << n0, m1, m2, bins[extreme]->delay_mm, w, v0, t2;
    return s;
  };

  // Coarse grid in fwhm with the width held fixed, then the full fit.
  double best_w = std::clamp(0.1 * span, w_lo, w_hi);
  {
    double best_obj = kInf;
    auto grid = pr;
    grid.fixed[kW] = true;
    grid.max_iterations = 50;
    const double g_lo = std::max(w_lo, 0.5 * min_step), g_hi = std::max(g_lo, span / 3.0);
    for (int k = 0; k < 24; ++k) {
      const double w = g_lo * std::pow(g_hi / g_lo, k / 23.0);
      grid.start = make_start(w);
      const auto r = fit_curve(grid);
      if (r.objective < best_obj) {
        best_obj = r.objective;
        best_w = w;
      }
    }
  }
  pr.start = make_start(best_w);
  const auto res = fit_curve(pr);
  if (!res.converged) throw FitFailure("fit_dip_curves: no convergence", format_trace(res.trace));

  const auto& p = res.params;
  const auto& e = res.errors;
  DipFit out;
  out.converged = true;
  out.d0_mm = p[kD0];
  out.d0_err = e[kD0];
  out.fwhm_mm = p[kW];
  out.fwhm_err = e[kW];
  out.visibility = p[kV];
  out.visibility_err = e[kV];
  out.t2 = p[kT2];
  out.t2_err = e[kT2];
  out.t2_fitted = shared;
  out.chi2 = res.chi2;
  out.ndf = res.ndf;
  out.fwhm_at_bound = res.at_bound[kW];
  out.trace = res.trace;
  if (shared) {
    const double rr = 1.0 - out.t2;
    const double g_far = out.t2 * out.t2 + rr * rr, g_tr = out.t2 * rr;
    out.n_far = p[kN] * g_far;
    out.n_far_err = e[kN] * g_far;
    out.norm_fib1 = out.norm_fib2 = p[kN] * g_tr;
    out.norm_fib1_err = out.norm_fib2_err = e[kN] * g_tr;
  } else {
    out.n_far = p[kN];
    out.n_far_err = e[kN];
    out.norm_fib1 = p[kN1];
    out.norm_fib1_err = e[kN1];
    out.norm_fib2 = p[kN2];
    out.norm_fib2_err = e[kN2];
  }
  return out;
}

// --- Afterpulses ------------------------------------------------------------

AfterpulseEstimate estimate_afterpulse_probability(std::span<const CoincidencePair> cross,
                                                   std::span<const double> t1_ns,
                                                   std::span<const double> t2_ns,
                                                   const DoubleGaussianShape& peak,
                                                   const AfterpulseOptions& options) {
  if (!(options.window_ns > 0.0) || !(options.sideband_lo_ns >= options.window_ns) ||
      !(options.sideband_hi_ns > options.sideband_lo_ns))
    throw InvalidParameter("estimate_afterpulse_probability: invalid windows");
  const double cut = options.peak_cut_sigmas * peak.sigma1;

  auto count_in = [](std::span<const double> t, double a, double b) {
    const auto lo = std::lower_bound(t.begin(), t.end(), a);
    const auto hi = std::upper_bound(t.begin(), t.end(), b);
    return static_cast<std::uint64_t>(hi - lo);
  };

  AfterpulseEstimate out;
  std::uint64_t sideband = 0;
  auto examine = [&](std::span<const double> t, std::uint32_t idx, std::uint64_t& companions) {
    if (idx >= t.size()) throw ContractViolation("estimate_afterpulse_probability: pair index out of range");
    const double t0 = t[idx];
    companions += count_in(t, t0 - options.window_ns, t0 + options.window_ns) - 1;
    sideband += count_in(t, t0 + options.sideband_lo_ns, t0 + options.sideband_hi_ns);
    sideband += count_in(t, t0 - options.sideband_hi_ns, t0 - options.sideband_lo_ns);
  };
  // Nearest-time matching can reuse a fiber-2 photon (a fiber-1 photon and
  // its afterpulse both pick it); keep only the closest pair per photon.
  std::vector<const CoincidencePair*> kept;
  for (const auto& pair : cross) {
    if (pair.kind != PairKind::cross || std::abs(pair.dt_ns - peak.mu) >= cut) continue;
    if (!kept.empty() && kept.back()->second == pair.second) {
      if (std::abs(pair.dt_ns - peak.mu) < std::abs(kept.back()->dt_ns - peak.mu)) kept.back() = &pair;
      continue;
    }
    kept.push_back(&pair);
  }
  for (const auto* pair : kept) {
    ++out.cross_pairs;
    examine(t1_ns, pair->first, out.companions_fib1);
    examine(t2_ns, pair->second, out.companions_fib2);
  }
  if (out.cross_pairs == 0)
    throw InvalidParameter("estimate_afterpulse_probability: no cross pairs inside the peak cut");
  out.photons = 2 * out.cross_pairs;
  const double scale = options.window_ns / (options.sideband_hi_ns - options.sideband_lo_ns);
  out.accidentals = static_cast<double>(sideband) * scale;
  const double n = static_cast<double>(out.photons);
  const double raw = static_cast<double>(out.companions_fib1 + out.companions_fib2);
  out.probability = (raw - out.accidentals) / n;
  const double p_raw = std::max(raw, 1.0) / n;
  out.error = std::sqrt(p_raw * (1.0 - p_raw) / n + static_cast<double>(sideband) * scale * scale / (n * n));
  return out;
}

// --- Corrections --------------------------------------------------------------

DipCurve apply_corrections(const DipCurve& curve, const CurveCorrections& c) {
  for (double b : c.blend)
    if (!(b >= 0.0 && b < 1.0)) throw InvalidParameter("apply_corrections: blend must lie in [0,1)");
  DipCurve out = curve;
  const double p = c.afterpulse_prob;
  for (auto& bin : out.bins) {
    if (!bin.valid) continue;
    const double x = bin.n_cross;
    bin.n_cross = x * (1.0 - p);
    bin.n_cross_err = std::hypot(bin.n_cross_err * (1.0 - p), x * c.afterpulse_err);
    std::array<double*, 2> val{&bin.n_fib1, &bin.n_fib2};
    std::array<double*, 2> err{&bin.n_fib1_err, &bin.n_fib2_err};
    const std::array<double, 2> singles{bin.singles_fib1, bin.singles_fib2};
    for (int k = 0; k < 2; ++k) {
      const double keep = 1.0 - c.blend[k];
      const double v = (*val[k] - p * singles[k]) / keep;
      const double e_stat = std::hypot(*err[k], singles[k] * c.afterpulse_err) / keep;
      *err[k] = std::hypot(e_stat, v * c.blend_err[k] / keep);
      *val[k] = v;
    }
  }
  return out;
}

RatioReport correct_and_check_ratios(const DipCurve& raw, const CurveCorrections& c, double d0_mm,
                                     double fwhm_mm, double off_dip_fwhms, double t2) {
  RatioReport rep;
  double x = 0, vx = 0, f1 = 0, v1 = 0, f2 = 0, v2 = 0, s1 = 0, s2 = 0;
  for (const auto* b : raw.valid_bins()) {
    if (std::abs(b->delay_mm - d0_mm) <= off_dip_fwhms * fwhm_mm) continue;
    ++rep.bins_used;
    x += b->n_cross;
    vx += b->n_cross_err * b->n_cross_err;
    f1 += b->n_fib1;
    v1 += b->n_fib1_err * b->n_fib1_err;
    f2 += b->n_fib2;
    v2 += b->n_fib2_err * b->n_fib2_err;
    s1 += b->singles_fib1;
    s2 += b->singles_fib2;
  }
  if (rep.bins_used == 0) throw InvalidParameter("correct_and_check_ratios: no off-dip bins");

  const double p = c.afterpulse_prob;
  const double k1 = 1.0 - c.blend[0], k2 = 1.0 - c.blend[1];
  rep.afterpulse_fib1 = p * s1;
  rep.afterpulse_fib2 = p * s2;
  rep.afterpulse_cross = p * x;
  Eigen::Vector3d s;
  s << (f1 - p * s1) / k1, (f2 - p * s2) / k2, x * (1.0 - p);

  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  cov(0, 0) = v1 / (k1 * k1) + std::pow(s[0] * c.blend_err[0] / k1, 2);
  cov(1, 1) = v2 / (k2 * k2) + std::pow(s[1] * c.blend_err[1] / k2, 2);
  cov(2, 2) = vx * (1.0 - p) * (1.0 - p);
  Eigen::Vector3d g;  // d s / d p
  g << -s1 / k1, -s2 / k2, -x;
  cov += c.afterpulse_err * c.afterpulse_err * g * g.transpose();

  const double r2 = 1.0 - t2;
  Eigen::Vector3d expect;
  expect << t2 * r2, t2 * r2, t2 * t2 + r2 * r2;
  rep.expected_fib_over_cross = expect[0] / expect[2];
  const Eigen::Matrix3d inv = cov.inverse();
  const double scale = expect.dot(inv * s) / expect.dot(inv * expect);
  const Eigen::Vector3d r = s - scale * expect;
  rep.chi2 = r.dot(inv * r);
  rep.ndf = 2;
  rep.p_value = std::exp(-0.5 * rep.chi2);
  rep.fib1 = s[0];
  rep.fib1_err = std::sqrt(cov(0, 0));
  rep.fib2 = s[1];
  rep.fib2_err = std::sqrt(cov(1, 1));
  rep.cross = s[2];
  rep.cross_err = std::sqrt(cov(2, 2));
  return rep;
}

// --- Unitarity --------------------------------------------------------------

double chi2_survival(double chi2, int ndf) {
  if (ndf <= 0) throw InvalidParameter("chi2_survival: ndf must be positive");
  if (!(chi2 > 0.0)) return 1.0;
  return boost::math::gamma_q(0.5 * ndf, 0.5 * chi2);
}

double UnitarityReport::p_value() const { return ndf > 0 ? chi2_survival(chi2, ndf) : 1.0; }

UnitarityReport unitarity_sum(const DipCurve& curve) {
  UnitarityReport rep;
  std::vector<double> rate, rate_err;
  for (const auto* b : curve.valid_bins()) {
    const double t = b->n_cross + b->n_fib1 + b->n_fib2;
    const double e = std::sqrt(b->n_cross_err * b->n_cross_err + b->n_fib1_err * b->n_fib1_err +
                               b->n_fib2_err * b->n_fib2_err);
    rep.delay_mm.push_back(b->delay_mm);
    rep.total.push_back(t);
    rep.total_err.push_back(e);
    const double expo = b->exposure_s > 0.0 ? b->exposure_s : 1.0;
    rate.push_back(t / expo);
    rate_err.push_back(e / expo);
  }
  if (rate.size() < 2) throw InvalidParameter("unitarity_sum: need at least two valid bins");
  double sw = 0.0, swx = 0.0;
  for (std::size_t i = 0; i < rate.size(); ++i) {
    if (!(rate_err[i] > 0.0)) throw InvalidParameter("unitarity_sum: bin without an error estimate");
    const double w = 1.0 / (rate_err[i] * rate_err[i]);
    sw += w;
    swx += w * rate[i];
  }
  const double mean_rate = swx / sw;
  for (std::size_t i = 0; i < rate.size(); ++i) {
    const double z = (rate[i] - mean_rate) / rate_err[i];
    rep.chi2 += z * z;
  }
  rep.ndf = static_cast<int>(rate.size()) - 1;
  // Report the constant in counts per bin of the mean exposure.
  double expo = 0.0;
  for (const auto* b : curve.valid_bins()) expo += b->exposure_s > 0.0 ? b->exposure_s : 1.0;
  expo /= static_cast<double>(rate.size());
  rep.mean = mean_rate * expo;
  rep.mean_err = expo / std::sqrt(sw);
  return rep;
}

// --- Monte Carlo estimators ---------------------------------------------------

BlendEstimate estimate_blend_probability(const SensorConfig& sensor, const SpotSpec& spot,
                                         std::uint64_t trials, std::uint64_t seed) {
  if (!(spot.sigma_px >= 0.0)) throw InvalidParameter("estimate_blend_probability: sigma must be >= 0");
  Rng rng(seed);
  std::normal_distribution<double> landing(0.0, 1.0);
  const double g = sensor.grid_size;
  const ClusterParams params{sensor.grid_size, sensor.cluster_window_ticks()};
  constexpr double kT0 = 1.0e6;
  BlendEstimate out;
  std::vector<PixelHit> hits;
  while (out.trials < trials) {
    PhotonImpact a{spot.x + spot.sigma_px * landing(rng), spot.y + spot.sigma_px * landing(rng), kT0};
    PhotonImpact b{spot.x + spot.sigma_px * landing(rng), spot.y + spot.sigma_px * landing(rng), kT0};
    auto inside = [g](const PhotonImpact& p) {
      return p.x >= -0.5 && p.x < g - 0.5 && p.y >= -0.5 && p.y < g - 0.5;
    };
    if (!inside(a) || !inside(b)) continue;
    hits.clear();
    // A photon below threshold everywhere leaves no cluster to blend.
    if (render_impact(rng, sensor, a, hits) == 0) continue;
    if (render_impact(rng, sensor, b, hits) == 0) continue;
    std::sort(hits.begin(), hits.end(), stream_less);
    const auto kept = apply_deadtime(sensor, hits);
    const auto labels = cluster_labels(kept, params);
    std::size_t clusters = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) clusters += labels[i] == i;
    ++out.trials;
    out.blended += clusters == 1;
  }
  if (out.trials > 0) {
    const double n = static_cast<double>(out.trials);
    out.probability = static_cast<double>(out.blended) / n;
    out.error = std::sqrt(std::max(out.probability * (1.0 - out.probability), 1.0 / n) / n);
  }
  return out;
}

namespace {

// Clusters per photon for a Poisson flux of `photons` at `rate_hz`.
std::pair<std::uint64_t, std::uint64_t> flux_clusters(const SensorConfig& sensor, const SpotSpec& spot,
                                                      double rate_hz, std::uint64_t photons,
                                                      std::uint64_t seed) {
  Rng rng(seed);
  std::exponential_distribution<double> gap(rate_hz * 1e-9);
  std::vector<PixelHit> hits;
  hits.reserve(photons * 12);
  double t = 1.0e6;
  std::uint64_t rendered = 0;
  for (std::uint64_t i = 0; i < photons; ++i) {
    t += gap(rng);
    const auto photon = render_photon(rng, sensor, spot, t);
    if (!photon.inside) continue;
    ++rendered;
    hits.insert(hits.end(), photon.hits.begin(), photon.hits.end());
  }
  std::sort(hits.begin(), hits.end(), stream_less);
  const auto kept = apply_deadtime(sensor, hits);
  const ClusterParams params{sensor.grid_size, sensor.cluster_window_ticks()};
  std::uint64_t clusters = 0;
  StreamClusterer sc(params, [&](Cluster&&) { ++clusters; });
  sc.push(kept);
  sc.flush();
  return {rendered, clusters};
}

}  // namespace

RateStudy deadtime_rate_study(const SensorConfig& sensor, const SpotSpec& spot, double rate_hz,
                              double duration_s, std::uint64_t seed, double baseline_rate_hz) {
  if (!(rate_hz > 0.0) || !(duration_s > 0.0) || !(baseline_rate_hz > 0.0))
    throw InvalidParameter("deadtime_rate_study: rates and duration must be positive");
  const auto photons = static_cast<std::uint64_t>(std::llround(rate_hz * duration_s));
  if (photons == 0) throw InvalidParameter("deadtime_rate_study: no photons in the requested duration");
  RateStudy out;
  out.rate_hz = rate_hz;
  out.baseline_rate_hz = baseline_rate_hz;
  const auto [n, c] = flux_clusters(sensor, spot, rate_hz, photons, seed);
  const auto [n0, c0] = flux_clusters(sensor, spot, baseline_rate_hz, photons, seed ^ 0x5bd1e995u);
  out.photons = n;
  out.clusters = c;
  out.efficiency = n ? static_cast<double>(c) / static_cast<double>(n) : 0.0;
  out.baseline_efficiency = n0 ? static_cast<double>(c0) / static_cast<double>(n0) : 0.0;
  const double rel = out.baseline_efficiency > 0.0 ? out.efficiency / out.baseline_efficiency : 0.0;
  out.pair_inefficiency = 1.0 - rel * rel;
  return out;
}

}  // namespace hompix
