#pragma once
// Monte Carlo generation of a delay-scan hit stream.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hompix/experiment.hpp"
#include "hompix/hit.hpp"
#include "hompix/sensor.hpp"

namespace hompix {

enum class PairOutcome { split, both_fiber1, both_fiber2 };

/// Branching probabilities (split, both in fiber 1, both in fiber 2) at `delay_mm`.
std::array<double, 3> outcome_probabilities(const SplitterSpec& splitter, const DipShape& dip,
                                            double delay_mm);

/// Single draw using the tabulated kernel (for per-pair use).
PairOutcome sample_pair_outcome(Rng& rng, const SplitterSpec& splitter, const DipShape& dip,
                                double delay_mm);

enum class PhotonOrigin : std::uint8_t { signal, dark, afterpulse };

const char* to_string(PhotonOrigin origin);

/// Ground truth for one rendered photon (one intended cluster).
struct TruthPhoton {
  std::uint64_t photon_id = 0;
  std::int64_t pair_id = -1;    ///< -1 for dark counts and afterpulses
  std::int64_t parent_id = -1;  ///< photon that produced an afterpulse
  std::uint32_t scan_index = 0;
  int fiber = 0;  ///< 1 or 2
  PhotonOrigin origin = PhotonOrigin::signal;
  double t_ns = 0.0;  ///< arrival including source jitter
  double x = 0.0;
  double y = 0.0;
  std::uint32_t hits_rendered = 0;
  std::uint32_t hits_emitted = 0;  ///< after dead time and hot-pixel mask
};

/// Photon ids encode the scan position in the upper 32 bits.
inline std::uint64_t make_photon_id(std::uint32_t position, std::uint32_t local) {
  return (static_cast<std::uint64_t>(position) << 32) | local;
}

/// One photon's afterpulse, if the coin fires: displaced landing and delay.
/// Returns false when no afterpulse is produced.
bool draw_afterpulse(Rng& rng, const SensorConfig& sensor, const PhotonImpact& parent,
                     PhotonImpact& out);

struct SimulationCounters {
  std::uint64_t pairs = 0;
  std::uint64_t outcome_split = 0;
  std::uint64_t outcome_fiber1 = 0;
  std::uint64_t outcome_fiber2 = 0;
  std::uint64_t photons_detected = 0;  ///< signal photons passing the efficiency coin
  std::uint64_t photons_off_grid = 0;
  std::uint64_t dark_photons = 0;
  std::uint64_t afterpulses = 0;
  std::uint64_t hits_rendered = 0;
  std::uint64_t hits_deadtime = 0;
  std::uint64_t hits_masked = 0;
  std::uint64_t hits_emitted = 0;
};

struct SimulationOptions {
  bool collect_truth = true;
  bool tag_hits = true;   ///< pass the photon id of every hit to the sink
  unsigned threads = 0;   ///< 0 = hardware concurrency
  unsigned batch = 8;     ///< scan positions generated per parallel batch
};

/// Receives the globally time-ordered output in chunks. `photon_ids` is empty
/// when tagging is disabled.
using HitSink =
    std::function<void(std::span<const PixelHit> hits, std::span<const std::uint64_t> photon_ids)>;

struct SimulationSummary {
  SimulationCounters counters;
  std::vector<TruthPhoton> truth;  ///< sorted by photon_id; empty unless collected
};

/// Streams the whole scan through `sink`. Identical (config, seed) give
/// identical output regardless of thread count.
SimulationSummary simulate_scan(const ExperimentConfig& config, std::uint64_t seed,
                                const HitSink& sink, const SimulationOptions& options = {});

struct SimulationResult {
  std::vector<PixelHit> hits;
  std::vector<std::uint64_t> photon_ids;
  SimulationSummary summary;
};

/// In-memory convenience wrapper.
SimulationResult simulate_scan(const ExperimentConfig& config, std::uint64_t seed,
                               const SimulationOptions& options = {});

}  // namespace hompix
