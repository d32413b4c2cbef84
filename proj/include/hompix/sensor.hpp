#pragma once
// Pixel-camera response: how one detected photon becomes a set of pixel hits,
// and the per-pixel dead time applied to the merged stream.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hompix/hit.hpp"

namespace hompix {

using Rng = std::mt19937_64;

struct SensorConfig {
  int grid_size = kGridSize;
  double pitch_um = 55.0;
  double toa_lsb_ns = kToaLsbNs;
  double tot_lsb_ns = kTotLsbNs;

  // Light flash from the intensifier screen. Amplitude is in photons on the
  // sensor; the per-flash gain follows a gamma distribution with unit mean.
  double flash_photons = 28000.0;
  double gain_shape = 2.0;
  double psf_sigma_px = 0.8;
  double threshold = 700.0;  ///< photons per pixel

  // ToT = tot_scale * ln(I / threshold) + tot_offset   [ns]
  double tot_scale_ns = 120.0;
  double tot_offset_ns = 30.0;

  // Raw ToA lags the true arrival by walk_w0 / (ToT + walk_w1)   [ns]
  double walk_w0_ns2 = 6000.0;
  double walk_w1_ns = 20.0;

  double deadtime_base_ns = 475.0;

  std::vector<std::pair<int, int>> hot_pixels;
  double hot_pixel_rate_hz = 2000.0;

  double afterpulse_prob = 0.0019;
  double afterpulse_radius_sigma_px = 3.0;
  double afterpulse_min_separation_px = 6.0;
  double afterpulse_delay_mean_ns = 5.0;

  double dcr_rate_hz = 1000.0;  ///< dark photons per spot

  /// Time-walk delay for a ToT value (ns).
  double walk_ns(double tot_ns) const { return walk_w0_ns2 / (tot_ns + walk_w1_ns); }
  std::uint64_t cluster_window_ticks() const;
  std::vector<std::string> problems(const std::string& path) const;
};

/// Gaussian photon landing distribution of one fiber on the sensor (pixels).
struct SpotSpec {
  double x = 80.0;
  double y = 128.0;
  double sigma_px = 9.0;
};

/// A photon that reached the sensor: landing point and true arrival time.
struct PhotonImpact {
  double x = 0.0;
  double y = 0.0;
  double t_ns = 0.0;
};

/// Renders one photon into pixel hits (unfiltered by dead time).
/// Hits with toa before zero are clamped to tick 0. Returns the number of
/// hits appended; photons landing outside the grid produce none.
std::size_t render_impact(Rng& rng, const SensorConfig& sensor, const PhotonImpact& impact,
                          std::vector<PixelHit>& out);

struct RenderedPhoton {
  PhotonImpact impact;
  std::vector<PixelHit> hits;
  bool inside = true;  ///< false if the landing point was off the grid
};

/// Samples a landing point from `spot` and renders it at `true_time_ns`.
RenderedPhoton render_photon(Rng& rng, const SensorConfig& sensor, const SpotSpec& spot,
                             double true_time_ns);

/// Streaming per-pixel dead time: a hit is dropped if it arrives within
/// deadtime_base + ToT of the previous accepted hit on the same pixel.
class DeadtimeFilter {
public:
  explicit DeadtimeFilter(const SensorConfig& sensor);

  /// Hits must be fed in non-decreasing toa order; throws ContractViolation otherwise.
  bool accept(const PixelHit& hit);

private:
  int grid_;
  double toa_lsb_;
  double tot_lsb_;
  double base_ns_;
  std::uint64_t last_toa_ = 0;
  std::vector<double> free_after_ns_;  ///< a hit is accepted only strictly after this time
};

/// Batch form of DeadtimeFilter for a time-ordered vector.
std::vector<PixelHit> apply_deadtime(const SensorConfig& sensor, std::span<const PixelHit> hits);

}  // namespace hompix
