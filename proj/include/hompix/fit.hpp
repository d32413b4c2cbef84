#pragma once
// Statistical analysis of reconstructed coincidences.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hompix/experiment.hpp"
#include "hompix/model.hpp"
#include "hompix/recon.hpp"
#include "hompix/sensor.hpp"

namespace hompix {

// --- Time-difference histograms --------------------------------------------

struct CoincidenceHistogram {
  std::vector<double> edges;   ///< ns, strictly increasing
  std::vector<double> counts;  ///< one per bin
  PairKind kind = PairKind::cross;

  /// Bins of width `bin_ns` covering [lo, hi] (hi rounded up to a whole bin).
  static CoincidenceHistogram uniform(double lo_ns, double hi_ns, double bin_ns, PairKind kind);

  /// Adds one entry; values outside the edges are ignored. Returns whether it was counted.
  bool fill(double dt_ns, double weight = 1.0);

  std::size_t size() const { return counts.size(); }
  double width(std::size_t i) const { return edges[i + 1] - edges[i]; }
  double center(std::size_t i) const { return 0.5 * (edges[i] + edges[i + 1]); }
  double total() const;
  /// Throws InvalidParameter if the invariants do not hold.
  void validate() const;
};

/// Shape of the coincidence peak: a two-Gaussian mixture with shared mean.
struct DoubleGaussianShape {
  double mu = 0.0;
  double sigma1 = 7.3;
  double sigma2 = 17.8;
  double frac1 = 0.75;
};

struct DoubleGaussianFit {
  double n_signal = 0.0, n_signal_err = 0.0;
  double mu = 0.0, mu_err = 0.0;
  double sigma1 = 0.0, sigma1_err = 0.0;
  double sigma2 = 0.0, sigma2_err = 0.0;
  double frac1 = 1.0, frac1_err = 0.0;
  double background_per_bin = 0.0, background_err = 0.0;
  double chi2 = 0.0;  ///< Pearson chi2 at the solution
  int ndf = 0;
  bool converged = false;
  bool background_only = false;  ///< degenerate input; only the constant was fitted
  bool folded = false;

  DoubleGaussianShape shape() const { return {mu, sigma1, sigma2, frac1}; }
};

struct DoubleGaussianOptions {
  FitStatistic statistic = FitStatistic::poisson;
  /// Same-fiber histograms hold |dt| only: the model is mirrored about 0 and mu is fixed there.
  bool folded = false;
  /// When set, only the signal count and the background float.
  std::optional<DoubleGaussianShape> fixed_shape;
};

/// Fits A * [p G(mu, s1) + (1-p) G(mu, s2)] integrated over each bin + C.
/// Throws InvalidParameter for fewer than 8 non-empty bins and FitFailure on
/// non-convergence. sigma1 <= sigma2 on return.
DoubleGaussianFit fit_double_gaussian(const CoincidenceHistogram& hist,
                                      const DoubleGaussianOptions& options = {});

// --- Delay-binned curves ----------------------------------------------------

/// One coincidence pair tagged with the scan position of its earlier photon.
struct ScanPair {
  PairKind kind = PairKind::cross;
  double dt_ns = 0.0;
  std::uint32_t position = 0;
};

struct HistogramShapes {
  DoubleGaussianShape cross;
  DoubleGaussianShape fiber1;
  DoubleGaussianShape fiber2;
};

struct DipBin {
  double delay_mm = 0.0;  ///< mean of the merged positions
  double exposure_s = 0.0;
  std::uint32_t first_position = 0;
  std::uint32_t positions = 0;
  double n_cross = 0.0, n_cross_err = 0.0;
  double n_fib1 = 0.0, n_fib1_err = 0.0;
  double n_fib2 = 0.0, n_fib2_err = 0.0;
  double singles_fib1 = 0.0;  ///< photons reconstructed in region 1
  double singles_fib2 = 0.0;
  bool valid = true;
  std::string flag;  ///< reason the bin is excluded
};

struct DipCurve {
  std::vector<DipBin> bins;

  std::vector<const DipBin*> valid_bins() const;
};

/// Histograms the pairs of each group of `analysis.positions_per_bin` scan
/// positions and fits the three peaks. With `shapes` the peak shapes are held
/// fixed and only signal and background float per bin. Failed fits are flagged.
DipCurve bin_by_delay(std::span<const ScanPair> pairs, const ScanPlan& plan,
                      std::span<const std::array<std::uint64_t, 2>> singles_per_position,
                      const AnalysisConfig& analysis, const HistogramShapes* shapes = nullptr);

struct DipFitOptions {
  bool fit_t2 = false;
  double t2 = 0.5;
  /// Curves used: cross, fiber 1, fiber 2.
  std::array<bool, 3> use{true, true, true};
};

struct DipFit {
  double n_far = 0.0, n_far_err = 0.0;  ///< cross count far from the dip
  double norm_fib1 = 0.0, norm_fib1_err = 0.0;
  double norm_fib2 = 0.0, norm_fib2_err = 0.0;
  double d0_mm = 0.0, d0_err = 0.0;
  double fwhm_mm = 0.0, fwhm_err = 0.0;
  double visibility = 0.0, visibility_err = 0.0;
  double t2 = 0.5, t2_err = 0.0;
  bool t2_fitted = false;
  double chi2 = 0.0;
  int ndf = 0;
  bool converged = false;
  bool fwhm_at_bound = false;
  std::vector<double> trace;

  CoincidenceRates predict(double delay_mm) const;
};

/// Simultaneous weighted least squares of the selected curves with shared
/// d0, fwhm and visibility. Throws InvalidParameter below 8 valid bins and FitFailure with
/// the objective trace if the fit does not converge.
DipFit fit_dip_curves(const DipCurve& curve, const DipFitOptions& options = {});

// --- Corrections and checks -------------------------------------------------

struct AfterpulseEstimate {
  std::uint64_t cross_pairs = 0;     ///< pairs inside the peak cut
  std::uint64_t photons = 0;         ///< 2 * cross_pairs
  std::uint64_t companions_fib1 = 0;
  std::uint64_t companions_fib2 = 0;
  double accidentals = 0.0;  ///< expected random companions from the sideband
  double probability = 0.0;
  double error = 0.0;  ///< binomial
};

struct AfterpulseOptions {
  double window_ns = 50.0;
  double sideband_lo_ns = 500.0;
  double sideband_hi_ns = 1500.0;
  double peak_cut_sigmas = 3.0;
};

/// Counts same-region photons within the window of every cross-pair photon in
/// the peak |dt - mu| < cut * sigma1, subtracts accidentals measured in the
/// sideband and divides by the number of photons examined. Throws
/// InvalidParameter when no pair survives the cut.
AfterpulseEstimate estimate_afterpulse_probability(std::span<const CoincidencePair> cross,
                                                   std::span<const double> t1_ns,
                                                   std::span<const double> t2_ns,
                                                   const DoubleGaussianShape& peak,
                                                   const AfterpulseOptions& options = {});

struct CurveCorrections {
  double afterpulse_prob = 0.0;
  double afterpulse_err = 0.0;
  std::array<double, 2> blend{0.0, 0.0};  ///< same-fiber pair loss per fiber
  std::array<double, 2> blend_err{0.0, 0.0};
};

/// Removes afterpulse pairs (prob x singles from each same-fiber count and
/// prob x n_cross from the cross count) and scales same-fiber counts by 1 / (1 - blend).
DipCurve apply_corrections(const DipCurve& curve, const CurveCorrections& corr);

struct RatioReport {
  std::size_t bins_used = 0;
  double cross = 0.0, cross_err = 0.0;
  double fib1 = 0.0, fib1_err = 0.0;
  double fib2 = 0.0, fib2_err = 0.0;
  double afterpulse_fib1 = 0.0, afterpulse_fib2 = 0.0, afterpulse_cross = 0.0;
  double expected_fib_over_cross = 0.5;
  double chi2 = 0.0;
  int ndf = 2;
  double p_value = 1.0;
};

/// Sums the off-dip bins (|d - d0| > off_dip_fwhms * fwhm) of the raw curve,
/// applies the corrections and tests fib1 : fib2 : cross against
/// T^2R^2 : T^2R^2 : T^4+R^4 with a 3x3 covariance including the correction errors.
RatioReport correct_and_check_ratios(const DipCurve& raw, const CurveCorrections& corr, double d0_mm,
                                     double fwhm_mm, double off_dip_fwhms, double t2 = 0.5);

struct UnitarityReport {
  std::vector<double> delay_mm;
  std::vector<double> total;
  std::vector<double> total_err;
  double mean = 0.0, mean_err = 0.0;
  double chi2 = 0.0;
  int ndf = 0;

  double chi2_per_ndf() const { return ndf > 0 ? chi2 / ndf : 0.0; }
  /// Upper tail probability of chi2 with ndf degrees of freedom.
  double p_value() const;
};

/// Per-bin n_cross + n_fib1 + n_fib2, fitted to a constant (errors per bin
/// are divided by the exposure so unequal dwell is allowed).
UnitarityReport unitarity_sum(const DipCurve& curve);

/// Regularized upper incomplete gamma Q(ndf/2, chi2/2).
double chi2_survival(double chi2, int ndf);

// --- Monte Carlo estimators ------------------------------------------------

struct BlendEstimate {
  std::uint64_t trials = 0;
  std::uint64_t blended = 0;
  double probability = 0.0;
  double error = 0.0;
};

/// Renders two simultaneous photons from `spot` per trial, applies dead time
/// and clusters them; a blend is a trial that yields a single cluster. Trials
/// where either photon fires no pixel are redrawn.
BlendEstimate estimate_blend_probability(const SensorConfig& sensor, const SpotSpec& spot,
                                         std::uint64_t trials, std::uint64_t seed);

struct RateStudy {
  double rate_hz = 0.0;
  double baseline_rate_hz = 0.0;
  std::uint64_t photons = 0;
  std::uint64_t clusters = 0;
  double efficiency = 0.0;           ///< clusters / photons at rate_hz
  double baseline_efficiency = 0.0;  ///< same at the baseline rate
  double pair_inefficiency = 0.0;    ///< 1 - (eff / baseline)^2
};

/// Continuous Poisson flux into one spot for `duration_s`, rendered with dead
/// time and clustered, compared with the same measurement at a low rate.
RateStudy deadtime_rate_study(const SensorConfig& sensor, const SpotSpec& spot, double rate_hz,
                              double duration_s, std::uint64_t seed,
                              double baseline_rate_hz = 1000.0);

}  // namespace hompix
