#pragma once
// Aggregate experiment description: source, optics, sensor, scan, analysis.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "hompix/model.hpp"
#include "hompix/sensor.hpp"

namespace hompix {

inline constexpr int kConfigSchemaVersion = 1;

/// CW photon-pair source as seen at the camera.
struct SourceConfig {
  double pair_rate_hz = 10000.0;
  double detection_eff = 0.3;  ///< per photon
  // Per-photon timing jitter. The mixture component is drawn once per pair,
  // so the pair time difference is a two-Gaussian mixture with widths sqrt(2)
  // times the per-photon sigmas (convolved with the sensor resolution).
  double jitter_core_sigma_ns = 5.0;
  double jitter_tail_sigma_ns = 12.62;
  double jitter_tail_frac = 0.223;

  std::vector<std::string> problems(const std::string& path) const;
};

/// Delay positions visited in order, each for `dwell_s`.
struct ScanPlan {
  std::vector<double> positions_mm;
  double dwell_s = 6.0;

  static ScanPlan linear(double start_mm, double step_mm, std::size_t count, double dwell_s);

  /// Time (ns) at which position `index` starts.
  double start_ns(std::size_t index) const;
  double dwell_ns() const { return dwell_s * 1e9; }
  /// Position index for a time, or -1 outside the scan.
  long index_at(double t_ns) const;
  double total_s() const { return dwell_s * static_cast<double>(positions_mm.size()); }

  std::vector<std::string> problems(const std::string& path) const;
};

/// Scan time origin: leaves room for negative jitter before the first position.
inline constexpr double kScanStartNs = 10000.0;

/// Circular sensor area assigned to one fiber. The boundary is inside.
struct Region {
  double x = 0.0;
  double y = 0.0;
  double radius = 1.0;

  bool contains(double px, double py) const {
    const double dx = px - x, dy = py - y;
    return dx * dx + dy * dy <= radius * radius;
  }
};

enum class FitStatistic { poisson, least_squares };

struct AnalysisConfig {
  std::array<Region, 2> regions{Region{72.0, 128.0, 40.5}, Region{184.0, 128.0, 49.5}};
  double coincidence_window_ns = 250.0;
  double hist_bin_ns = 2.5;
  double afterpulse_window_ns = 50.0;
  double afterpulse_sideband_lo_ns = 500.0;
  double afterpulse_sideband_hi_ns = 1500.0;
  double peak_cut_sigmas = 3.0;
  double off_dip_fwhms = 3.0;
  double pair_separation_max_dt_ns = 25.0;
  /// Scan positions merged into one delay bin.
  int positions_per_bin = 1;
  bool fit_t2 = false;
  FitStatistic histogram_statistic = FitStatistic::poisson;
  /// Monte Carlo trials per fiber for the blending correction (0 disables it).
  int blend_trials = 200000;
  /// Optional time-walk override; when absent the sensor's parameters are used.
  bool walk_override = false;
  double walk_w0_ns2 = 0.0;
  double walk_w1_ns = 1.0;

  std::vector<std::string> problems(const std::string& path) const;
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  SourceConfig source;
  SplitterSpec splitter;
  DipShape dip;
  SensorConfig sensor;
  std::array<SpotSpec, 2> spots{SpotSpec{72.0, 128.0, 9.0}, SpotSpec{184.0, 128.0, 11.0}};
  ScanPlan scan;
  AnalysisConfig analysis;

  /// Paper-scale delay scan: 0.3 mm around the dip in 1.5 um steps, 20 minutes.
  static ExperimentConfig defaults();

  /// Every violated invariant as "field.path: message". Empty when valid.
  std::vector<std::string> problems() const;
  /// Throws ConfigError listing every problem.
  void validate() const;
};

}  // namespace hompix
