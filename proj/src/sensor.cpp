#include "hompix/sensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>

#include "hompix/error.hpp"

namespace hompix {

namespace {

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

void check(std::vector<std::string>& out, bool ok, const std::string& path, const char* what) {
  if (!ok) out.push_back(path + ": " + what);
}

}  // namespace

std::uint64_t SensorConfig::cluster_window_ticks() const {
  return static_cast<std::uint64_t>(std::floor(300.0 / toa_lsb_ns + 1e-9));
}

std::vector<std::string> SensorConfig::problems(const std::string& path) const {
  std::vector<std::string> out;
  check(out, grid_size > 0 && grid_size <= 4096, path + ".grid_size", "must be in 1..4096");
  check(out, pitch_um > 0.0, path + ".pitch_um", "must be positive");
  check(out, toa_lsb_ns > 0.0, path + ".toa_lsb_ns", "must be positive");
  check(out, tot_lsb_ns > 0.0, path + ".tot_lsb_ns", "must be positive");
  check(out, flash_photons > 0.0, path + ".flash_photons", "must be positive");
  check(out, gain_shape > 0.0, path + ".gain_shape", "must be positive");
  check(out, psf_sigma_px > 0.0, path + ".psf_sigma_px", "must be positive");
  check(out, threshold > 0.0, path + ".threshold", "must be positive");
  check(out, tot_scale_ns > 0.0, path + ".tot_scale_ns", "must be positive");
  check(out, tot_offset_ns >= 0.0, path + ".tot_offset_ns", "must be >= 0");
  check(out, walk_w0_ns2 >= 0.0, path + ".walk_w0_ns2", "must be >= 0");
  check(out, walk_w1_ns > 0.0, path + ".walk_w1_ns", "must be positive");
  check(out, deadtime_base_ns >= 0.0, path + ".deadtime_base_ns", "must be >= 0");
  check(out, hot_pixel_rate_hz >= 0.0, path + ".hot_pixel_rate_hz", "must be >= 0");
  check(out, afterpulse_prob >= 0.0 && afterpulse_prob <= 1.0, path + ".afterpulse_prob",
        "must lie in [0,1]");
  check(out, afterpulse_radius_sigma_px > 0.0, path + ".afterpulse_radius_sigma_px",
        "must be positive");
  check(out, afterpulse_min_separation_px >= 0.0 &&
                 afterpulse_min_separation_px < 4.0 * afterpulse_radius_sigma_px,
        path + ".afterpulse_min_separation_px", "must be in [0, 4 * afterpulse_radius_sigma_px)");
  check(out, afterpulse_delay_mean_ns > 0.0, path + ".afterpulse_delay_mean_ns",
        "must be positive");
  check(out, dcr_rate_hz >= 0.0, path + ".dcr_rate_hz", "must be >= 0");
  for (std::size_t i = 0; i < hot_pixels.size(); ++i) {
    const auto [x, y] = hot_pixels[i];
    check(out, x >= 0 && x < grid_size && y >= 0 && y < grid_size,
          path + ".hot_pixels[" + std::to_string(i) + "]", "outside the pixel grid");
  }
  return out;
}

std::size_t render_impact(Rng& rng, const SensorConfig& sensor, const PhotonImpact& impact,
                          std::vector<PixelHit>& out) {
  const int grid = sensor.grid_size;
  if (!(impact.x >= -0.5 && impact.x < grid - 0.5 && impact.y >= -0.5 && impact.y < grid - 0.5))
    return 0;

  // Pixel i covers [i - 0.5, i + 0.5); the footprint integrates the PSF per axis.
  constexpr int kMaxRadius = 12;
  const int radius = std::min(kMaxRadius, static_cast<int>(std::ceil(5.0 * sensor.psf_sigma_px)));
  const int cx = static_cast<int>(std::lround(impact.x));
  const int cy = static_cast<int>(std::lround(impact.y));
  std::array<double, 2 * kMaxRadius + 1> fx{}, fy{};
  const double inv = 1.0 / sensor.psf_sigma_px;
  for (int k = -radius; k <= radius; ++k) {
    const double ex = cx + k - impact.x;
    const double ey = cy + k - impact.y;
    fx[k + radius] = normal_cdf((ex + 0.5) * inv) - normal_cdf((ex - 0.5) * inv);
    fy[k + radius] = normal_cdf((ey + 0.5) * inv) - normal_cdf((ey - 0.5) * inv);
  }

  // A detected photon always fires its brightest pixel: the gain is drawn
  // conditioned on crossing threshold there.
  const double peak_fraction = fx[radius] * fy[radius];
  const double min_amplitude = sensor.threshold / peak_fraction;
  std::gamma_distribution<double> gain(sensor.gain_shape, 1.0 / sensor.gain_shape);
  double amplitude = 0.0;
  for (int attempt = 0; attempt < 64 && !(amplitude > min_amplitude); ++attempt)
    amplitude = sensor.flash_photons * gain(rng);
  if (!(amplitude > min_amplitude)) amplitude = min_amplitude * (1.0 + 1e-9);

  const double min_fraction = sensor.threshold / amplitude;
  std::size_t produced = 0;
  for (int j = -radius; j <= radius; ++j) {
    const int py = cy + j;
    if (py < 0 || py >= grid) continue;
    const double wy = fy[j + radius];
    if (wy <= min_fraction) continue;
    for (int i = -radius; i <= radius; ++i) {
      const int px = cx + i;
      if (px < 0 || px >= grid) continue;
      const double frac = fx[i + radius] * wy;
      if (frac <= min_fraction) continue;
      const double intensity = amplitude * frac;
      const double tot_ns =
          sensor.tot_scale_ns * std::log(intensity / sensor.threshold) + sensor.tot_offset_ns;
      const auto tot_ticks = static_cast<std::uint32_t>(
          std::max(1.0, std::round(tot_ns / sensor.tot_lsb_ns)));
      const double t_pix = impact.t_ns + sensor.walk_ns(tot_ns);
      const double ticks = std::floor(t_pix / sensor.toa_lsb_ns);
      PixelHit hit;
      hit.toa = ticks <= 0.0 ? 0 : static_cast<std::uint64_t>(ticks);
      hit.tot = tot_ticks;
      hit.x = static_cast<std::uint16_t>(px);
      hit.y = static_cast<std::uint16_t>(py);
      out.push_back(hit);
      ++produced;
    }
  }
  return produced;
}

RenderedPhoton render_photon(Rng& rng, const SensorConfig& sensor, const SpotSpec& spot,
                             double true_time_ns) {
  std::normal_distribution<double> landing(0.0, spot.sigma_px);
  RenderedPhoton photon;
  photon.impact = {spot.x + landing(rng), spot.y + landing(rng), true_time_ns};
  const double g = sensor.grid_size;
  photon.inside = photon.impact.x >= -0.5 && photon.impact.x < g - 0.5 &&
                  photon.impact.y >= -0.5 && photon.impact.y < g - 0.5;
  if (photon.inside) render_impact(rng, sensor, photon.impact, photon.hits);
  return photon;
}

DeadtimeFilter::DeadtimeFilter(const SensorConfig& sensor)
    : grid_(sensor.grid_size),
      toa_lsb_(sensor.toa_lsb_ns),
      tot_lsb_(sensor.tot_lsb_ns),
      base_ns_(sensor.deadtime_base_ns),
      free_after_ns_(static_cast<std::size_t>(sensor.grid_size) * sensor.grid_size,
                     -std::numeric_limits<double>::infinity()) {}

bool DeadtimeFilter::accept(const PixelHit& hit) {
  if (hit.toa < last_toa_)
    throw ContractViolation("apply_deadtime: hits are not time-ordered at toa " +
                            std::to_string(hit.toa));
  last_toa_ = hit.toa;
  auto& free_after = free_after_ns_[static_cast<std::size_t>(hit.y) * grid_ + hit.x];
  const double t = static_cast<double>(hit.toa) * toa_lsb_;
  if (!(t > free_after)) return false;
  free_after = t + base_ns_ + hit.tot * tot_lsb_;
  return true;
}

std::vector<PixelHit> apply_deadtime(const SensorConfig& sensor, std::span<const PixelHit> hits) {
  std::vector<PixelHit> out;
  out.reserve(hits.size());
  if (hits.size() <= 64) {
    // Same rule as DeadtimeFilter without the full-grid table.
    std::vector<std::pair<std::uint32_t, double>> busy;
    std::uint64_t last = 0;
    for (const auto& h : hits) {
      if (h.toa < last)
        throw ContractViolation("apply_deadtime: hits are not time-ordered at toa " + std::to_string(h.toa));
      last = h.toa;
      const std::uint32_t key = static_cast<std::uint32_t>(h.y) * sensor.grid_size + h.x;
      const double t = static_cast<double>(h.toa) * sensor.toa_lsb_ns;
      auto it = std::find_if(busy.begin(), busy.end(), [key](const auto& e) { return e.first == key; });
      if (it != busy.end() && !(t > it->second)) continue;
      const double free_after = t + sensor.deadtime_base_ns + h.tot * sensor.tot_lsb_ns;
      if (it != busy.end()) it->second = free_after;
      else busy.emplace_back(key, free_after);
      out.push_back(h);
    }
    return out;
  }
  DeadtimeFilter filter(sensor);
  for (const auto& h : hits)
    if (filter.accept(h)) out.push_back(h);
  return out;
}

}  // namespace hompix
