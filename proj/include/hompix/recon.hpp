#pragma once
// Reconstruction: hits -> clusters -> photons -> coincidence pairs.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "hompix/experiment.hpp"
#include "hompix/hit.hpp"

namespace hompix {

/// Spatiotemporally connected group of hits. Hits keep stream order.
struct Cluster {
  std::vector<PixelHit> hits;
  std::uint16_t x_min = 0, x_max = 0, y_min = 0, y_max = 0;
  std::uint64_t toa_min = 0, toa_max = 0;

  double t_span_ns(double toa_lsb_ns = kToaLsbNs) const {
    return static_cast<double>(toa_max - toa_min) * toa_lsb_ns;
  }
};

struct ClusterParams {
  int grid_size = kGridSize;
  /// Largest ToA difference (ticks) between neighbouring pixels of one cluster.
  std::uint64_t window_ticks = kClusterWindowTicks;
};

// Two hits are linked when their pixels are 8-neighbours (or the same pixel)
// and their ToA differ by at most window_ticks. Clusters are the connected
// components of that relation; each is labelled by the stream index of its
// first hit, and clusters are reported in that order.

/// Component label (index of the first hit of its cluster) for every hit.
/// Input must be stream-sorted (see stream_less); throws ContractViolation otherwise.
std::vector<std::uint32_t> cluster_labels(std::span<const PixelHit> hits,
                                          const ClusterParams& params = {});

/// Same labels computed over time chunks in parallel, then reconciled across
/// chunk boundaries. Output is identical to cluster_labels.
std::vector<std::uint32_t> cluster_labels_parallel(std::span<const PixelHit> hits,
                                                   unsigned chunks,
                                                   const ClusterParams& params = {});

/// Groups labelled hits into clusters in label order.
std::vector<Cluster> gather_clusters(std::span<const PixelHit> hits,
                                     std::span<const std::uint32_t> labels);

/// Clusters an arbitrary hit list: unsorted input is first sorted by stream order.
std::vector<Cluster> cluster_stream(std::span<const PixelHit> hits, const ClusterParams& params = {});

/// Incremental clustering with bounded memory. A cluster is emitted once no
/// pending hit of it is within the window of the stream head; emission order
/// equals the batch order.
class StreamClusterer {
public:
  using Callback = std::function<void(Cluster&&)>;

  StreamClusterer(const ClusterParams& params, Callback on_cluster);

  /// Hits must continue the stream order across calls.
  void push(std::span<const PixelHit> hits);
  /// Emits every remaining cluster.
  void flush();

  std::uint64_t hits_seen() const { return seen_; }

private:
  std::uint32_t find(std::uint32_t i);
  void link(std::uint32_t a, std::uint32_t b);
  void emit_ready(std::uint64_t head_toa, bool all);
  void compact();

  ClusterParams params_;
  Callback on_cluster_;
  std::uint64_t seen_ = 0;
  std::uint64_t base_ = 0;  // global index of buffer_[0]
  bool have_last_ = false;
  PixelHit last_{};
  std::vector<PixelHit> buffer_;
  std::vector<std::uint32_t> parent_;    // local indices
  std::vector<std::uint32_t> next_;      // member chain
  std::vector<std::uint32_t> tail_;      // valid at roots
  std::vector<std::uint64_t> last_toa_;  // latest member toa, valid at roots
  std::vector<std::uint8_t> emitted_;
  std::size_t front_ = 0;  // first local index not yet emitted
  std::vector<std::uint64_t> pixel_last_;  // global index + 1 of latest hit per pixel (0 = none)
};

enum class RegionTag : std::uint8_t { outside = 0, fiber1 = 1, fiber2 = 2 };

const char* to_string(RegionTag tag);

struct Photon {
  double x = 0.0;  ///< ToT-weighted centroid (pixels)
  double y = 0.0;
  double t_ns = 0.0;      ///< walk-corrected arrival
  double t_raw_ns = 0.0;  ///< ToA of the brightest pixel
  std::uint32_t tot_max = 0;
  std::uint32_t n_pixels = 0;
  RegionTag region = RegionTag::outside;
  bool unweighted = false;  ///< all ToT were zero; centroid is the plain mean
};

struct TimewalkParams {
  double w0_ns2 = 0.0;
  double w1_ns = 1.0;
};

/// t_raw - w0 / (tot * tot_lsb + w1).
double timewalk_correct(double t_raw_ns, std::uint32_t tot_ticks, const TimewalkParams& params,
                        double tot_lsb_ns = kTotLsbNs);

struct CentroidParams {
  TimewalkParams walk;
  double toa_lsb_ns = kToaLsbNs;
  double tot_lsb_ns = kTotLsbNs;
};

/// ToT-weighted centroid; time from the largest-ToT pixel (ties: smaller (x, y)).
Photon centroid(const Cluster& cluster, const CentroidParams& params);

/// Region by closed-disk containment. Throws ConfigError if the regions overlap.
RegionTag assign_region(const Photon& photon, const std::array<Region, 2>& regions);

/// Fits (w0, w1, offset) of t_raw - t_ref = w0 / (tot_ns + w1) + offset by
/// least squares over a grid of w1 with the linear parameters solved exactly.
struct TimewalkCalibration {
  TimewalkParams params;
  double offset_ns = 0.0;
  double residual_rms_ns = 0.0;
};
TimewalkCalibration calibrate_timewalk(std::span<const double> t_raw_ns,
                                       std::span<const std::uint32_t> tot_ticks,
                                       std::span<const double> t_ref_ns,
                                       double tot_lsb_ns = kTotLsbNs);

enum class PairKind : std::uint8_t { cross = 0, same_fiber1 = 1, same_fiber2 = 2 };

const char* to_string(PairKind kind);

struct CoincidencePair {
  PairKind kind = PairKind::cross;
  double dt_ns = 0.0;  ///< cross: t1 - t2; same fiber: later - earlier
  std::uint32_t first = 0;   ///< index into the region-1 (or region) photon list
  std::uint32_t second = 0;  ///< index into the region-2 (or same region) photon list
};

struct CrossMatchResult {
  std::vector<CoincidencePair> pairs;  ///< |dt| <= window
  std::uint64_t out_of_window = 0;
};

/// For each region-1 time, the nearest region-2 time (ties: the earlier one).
/// Non-exclusive: one region-2 photon may serve several region-1 photons.
CrossMatchResult find_cross_coincidences(std::span<const double> t1_ns,
                                         std::span<const double> t2_ns, double window_ns);

/// Each photon paired with its successor in the same region; kept when dt <= window.
std::vector<CoincidencePair> find_same_fiber_pairs(std::span<const double> t_ns, double window_ns,
                                                   PairKind kind);

double pair_separation(const Photon& a, const Photon& b);

/// Photons split by region, each list time-sorted.
struct RegionPhotons {
  std::vector<Photon> fiber1;
  std::vector<Photon> fiber2;
  std::uint64_t outside = 0;
};

RegionPhotons split_by_region(std::span<const Photon> photons);

std::vector<double> photon_times(std::span<const Photon> photons);

}  // namespace hompix
