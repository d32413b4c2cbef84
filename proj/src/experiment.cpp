#include "hompix/experiment.hpp"

#include <cmath>

#include "hompix/error.hpp"

namespace hompix {

namespace {

void check(std::vector<std::string>& out, bool ok, const std::string& path, const char* what) {
  if (!ok) out.push_back(path + ": " + what);
}

void append(std::vector<std::string>& out, std::vector<std::string> more) {
  out.insert(out.end(), std::make_move_iterator(more.begin()), std::make_move_iterator(more.end()));
}

bool finite_nonneg(double v) { return std::isfinite(v) && v >= 0.0; }

}  // namespace

std::vector<std::string> SourceConfig::problems(const std::string& path) const {
  std::vector<std::string> out;
  check(out, finite_nonneg(pair_rate_hz), path + ".pair_rate_hz", "must be >= 0");
  check(out, detection_eff >= 0.0 && detection_eff <= 1.0, path + ".detection_eff",
        "must lie in [0,1]");
  check(out, jitter_core_sigma_ns >= 0.0 && jitter_core_sigma_ns <= 1000.0,
        path + ".jitter_core_sigma_ns", "must lie in [0, 1000]");
  check(out, jitter_tail_sigma_ns >= 0.0 && jitter_tail_sigma_ns <= 1000.0,
        path + ".jitter_tail_sigma_ns", "must lie in [0, 1000]");
  check(out, jitter_tail_frac >= 0.0 && jitter_tail_frac <= 1.0, path + ".jitter_tail_frac",
        "must lie in [0,1]");
  return out;
}

ScanPlan ScanPlan::linear(double start_mm, double step_mm, std::size_t count, double dwell_s) {
  ScanPlan plan;
  plan.dwell_s = dwell_s;
  plan.positions_mm.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    plan.positions_mm.push_back(start_mm + step_mm * static_cast<double>(i));
  return plan;
}

double ScanPlan::start_ns(std::size_t index) const {
  return kScanStartNs + dwell_ns() * static_cast<double>(index);
}

long ScanPlan::index_at(double t_ns) const {
  if (positions_mm.empty() || dwell_s <= 0.0) return -1;
  const double rel = (t_ns - kScanStartNs) / dwell_ns();
  if (rel < 0.0) return -1;
  const auto idx = static_cast<long>(std::floor(rel));
  return idx < static_cast<long>(positions_mm.size()) ? idx : -1;
}

std::vector<std::string> ScanPlan::problems(const std::string& path) const {
  std::vector<std::string> out;
  check(out, finite_nonneg(dwell_s), path + ".dwell_s", "must be >= 0");
  if (positions_mm.size() >= 2) {
    const bool up = positions_mm[1] > positions_mm[0];
    for (std::size_t i = 1; i < positions_mm.size(); ++i) {
      const double step = positions_mm[i] - positions_mm[i - 1];
      if ((up && step <= 0.0) || (!up && step >= 0.0)) {
        out.push_back(path + ".positions_mm[" + std::to_string(i) + "]: positions must be strictly monotonic");
        break;
      }
      if (std::abs(step) < 0.0003 - 1e-12) {
        out.push_back(path + ".positions_mm[" + std::to_string(i) +
                      "]: step below the 0.0003 mm stage resolution");
        break;
      }
    }
  }
  for (std::size_t i = 0; i < positions_mm.size(); ++i)
    if (!std::isfinite(positions_mm[i])) {
      out.push_back(path + ".positions_mm[" + std::to_string(i) + "]: must be finite");
      break;
    }
  return out;
}

std::vector<std::string> AnalysisConfig::problems(const std::string& path) const {
  std::vector<std::string> out;
  for (int i = 0; i < 2; ++i) {
    const auto p = path + ".regions[" + std::to_string(i) + "]";
    check(out, regions[i].radius > 0.0, p + ".radius", "must be positive");
  }
  {
    const double dx = regions[0].x - regions[1].x, dy = regions[0].y - regions[1].y;
    check(out, std::hypot(dx, dy) > regions[0].radius + regions[1].radius, path + ".regions",
          "fiber regions must not overlap");
  }
  check(out, coincidence_window_ns > 0.0, path + ".coincidence_window_ns", "must be positive");
  check(out, hist_bin_ns > 0.0 && hist_bin_ns < coincidence_window_ns, path + ".hist_bin_ns",
        "must be positive and below the coincidence window");
  check(out, afterpulse_window_ns > 0.0, path + ".afterpulse_window_ns", "must be positive");
  check(out, afterpulse_sideband_lo_ns >= afterpulse_window_ns &&
                 afterpulse_sideband_hi_ns > afterpulse_sideband_lo_ns,
        path + ".afterpulse_sideband_lo_ns", "sideband must lie beyond the companion window");
  check(out, peak_cut_sigmas > 0.0, path + ".peak_cut_sigmas", "must be positive");
  check(out, off_dip_fwhms > 0.0, path + ".off_dip_fwhms", "must be positive");
  check(out, pair_separation_max_dt_ns > 0.0, path + ".pair_separation_max_dt_ns",
        "must be positive");
  check(out, positions_per_bin >= 1, path + ".positions_per_bin", "must be >= 1");
  check(out, blend_trials >= 0, path + ".blend_trials", "must be >= 0");
  if (walk_override) {
    check(out, walk_w0_ns2 >= 0.0, path + ".walk_w0_ns2", "must be >= 0");
    check(out, walk_w1_ns > 0.0, path + ".walk_w1_ns", "must be positive");
  }
  return out;
}

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig cfg;
  cfg.scan = ScanPlan::linear(0.03, 0.0015, 201, 1200.0 / 201.0);
  cfg.sensor.hot_pixels = {{13, 200}, {40, 17}, {101, 233}, {128, 64},
                           {150, 190}, {199, 31}, {230, 140}, {250, 250}};
  return cfg;
}

std::vector<std::string> ExperimentConfig::problems() const {
  std::vector<std::string> out;
  check(out, schema_version == kConfigSchemaVersion, "schema_version", "unsupported version");
  append(out, source.problems("source"));
  try {
    splitter.validate();
  } catch (const InvalidParameter& e) {
    out.push_back(e.what());
  }
  try {
    dip.validate();
  } catch (const InvalidParameter& e) {
    out.push_back(e.what());
  }
  append(out, sensor.problems("sensor"));
  for (int i = 0; i < 2; ++i) {
    const auto p = "spots[" + std::to_string(i) + "]";
    const auto& s = spots[i];
    check(out, s.sigma_px > 0.0, p + ".sigma_px", "must be positive");
    const double margin = 5.0 * s.sigma_px;
    check(out, s.x - margin >= -0.5 && s.x + margin <= sensor.grid_size - 0.5 &&
                   s.y - margin >= -0.5 && s.y + margin <= sensor.grid_size - 0.5,
          p, "spot must lie inside the grid at 5 sigma");
  }
  {
    const double d = std::hypot(spots[0].x - spots[1].x, spots[0].y - spots[1].y);
    check(out, d > 5.0 * (spots[0].sigma_px + spots[1].sigma_px), "spots",
          "spots overlap within 5 sigma");
  }
  append(out, scan.problems("scan"));
  append(out, analysis.problems("analysis"));
  return out;
}

void ExperimentConfig::validate() const {
  auto list = problems();
  if (!list.empty()) throw ConfigError(std::move(list));
}

}  // namespace hompix
