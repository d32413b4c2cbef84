#pragma once
// End-to-end orchestration: simulate -> reconstruct -> analyze.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hompix/experiment.hpp"
#include "hompix/fit.hpp"
#include "hompix/recon.hpp"
#include "hompix/simulator.hpp"

namespace hompix {

inline constexpr const char* kToolVersion = "1.0.0";
inline constexpr int kResultsSchemaVersion = 1;

struct ReconCounters {
  std::uint64_t hits = 0;
  std::uint64_t clusters = 0;
  std::uint64_t photons_fib1 = 0;
  std::uint64_t photons_fib2 = 0;
  std::uint64_t photons_outside = 0;
  std::uint64_t unweighted = 0;
};

/// Streams hits through clustering and centroiding, tagging each photon with its region.
class PhotonReconstructor {
public:
  explicit PhotonReconstructor(const ExperimentConfig& config);

  void push(std::span<const PixelHit> hits);
  void flush();

  const std::vector<Photon>& photons() const { return photons_; }
  std::vector<Photon> take_photons() { return std::move(photons_); }
  const ReconCounters& counters() const { return counters_; }

private:
  CentroidParams centroid_;
  std::array<Region, 2> regions_;
  ReconCounters counters_;
  std::vector<Photon> photons_;
  StreamClusterer clusterer_;
};

/// Seed of the blend Monte Carlo for a run seeded with `run_seed`.
inline std::uint64_t blend_seed_for(std::uint64_t run_seed) { return run_seed ^ 0xb1e4d5eedULL; }

/// Walk parameters used for centroiding: the analysis override or the sensor's own.
TimewalkParams walk_params(const ExperimentConfig& config);

struct AnalysisOptions {
  bool keep_pairs = true;
  /// Blend probabilities; computed by Monte Carlo when absent.
  std::optional<std::array<BlendEstimate, 2>> blend;
  std::uint64_t blend_seed = blend_seed_for(0);
  /// Skip the afterpulse estimator (no photon lists, e.g. analysis from pairs only).
  bool pairs_only = false;
};

struct PairSet {
  std::vector<ScanPair> pairs;
  std::vector<std::array<std::uint64_t, 2>> singles;  ///< photons per region per scan position
  std::vector<CoincidencePair> cross;                   ///< indices into the region time lists
  std::vector<double> t1, t2;                           ///< time-sorted region photon times
  std::uint64_t cross_out_of_window = 0;
  std::vector<double> close_pair_separation_px;  ///< same-fiber pairs with dt below the cut
};

/// Region split, coincidence finding and scan-position tagging.
PairSet find_pairs(std::span<const Photon> photons, const ExperimentConfig& config);

struct AnalysisResult {
  std::array<CoincidenceHistogram, 3> histograms;
  std::array<DoubleGaussianFit, 3> peak_fits;  ///< cross, fiber 1, fiber 2 over the whole scan
  DipCurve raw_curve;
  DipCurve corrected_curve;
  std::optional<AfterpulseEstimate> afterpulse;
  std::array<BlendEstimate, 2> blend;
  CurveCorrections corrections;
  std::optional<DipFit> dip;
  std::optional<RatioReport> ratios;
  std::optional<UnitarityReport> unitarity;
  std::uint64_t cross_pairs_in_window = 0;
  std::uint64_t cross_out_of_window = 0;
  std::vector<std::string> warnings;
};

/// Analysis of an already paired data set.
AnalysisResult analyze_pairs(const PairSet& pairs, const ExperimentConfig& config,
                             const AnalysisOptions& options = {});

/// Blend probability per fiber for the configured spots.
std::array<BlendEstimate, 2> blend_for_spots(const ExperimentConfig& config, std::uint64_t seed);

struct PipelineOptions {
  SimulationOptions simulation{.collect_truth = false, .tag_hits = false};
  /// Called with every simulated chunk (e.g. to write hits.bin).
  std::function<void(std::span<const PixelHit>)> hit_tap;
  bool keep_photons = false;
  AnalysisOptions analysis;
};

struct PipelineResult {
  SimulationSummary simulation;
  ReconCounters recon;
  std::vector<Photon> photons;  ///< only with keep_photons
  PairSet pairs;
  AnalysisResult analysis;
};

/// Streams the simulation into reconstruction with bounded hit memory, then analyzes.
PipelineResult run_pipeline(const ExperimentConfig& config, std::uint64_t seed,
                            const PipelineOptions& options = {});

/// Versioned results document; every field name carries its unit.
nlohmann::json results_to_json(const AnalysisResult& result, const ExperimentConfig& config,
                               std::uint64_t seed, const ReconCounters* recon = nullptr,
                               const SimulationCounters* simulation = nullptr);

}  // namespace hompix
