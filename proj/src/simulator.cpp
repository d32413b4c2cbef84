#include "hompix/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <atomic>
#include <thread>

#include "hompix/error.hpp"

namespace hompix {

namespace {

// Negative jitter is clamped so that a position never emits hits earlier than
// this before its start; the merge relies on it.
constexpr double kMergeGuardNs = 10000.0;
constexpr double kJitterClampNs = 0.5 * kMergeGuardNs;

struct TaggedHit {
  PixelHit hit;
  std::uint64_t photon_id;
};

bool tagged_less(const TaggedHit& a, const TaggedHit& b) { return stream_less(a.hit, b.hit); }

struct PositionOutput {
  std::vector<TaggedHit> hits;  // stream-sorted
  std::vector<TruthPhoton> truth;
  SimulationCounters counters;
};

Rng position_rng(std::uint64_t seed, std::uint32_t position) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    position, 0x9e3779b9u};
  return Rng(seq);
}

class PositionGenerator {
public:
  PositionGenerator(const ExperimentConfig& cfg, std::uint32_t position, std::uint64_t seed)
      : cfg_(cfg), position_(position), rng_(position_rng(seed, position)) {}

  PositionOutput run() {
    const double t0 = cfg_.scan.start_ns(position_);
    const double dwell = cfg_.scan.dwell_ns();
    const double delay = cfg_.scan.positions_mm[position_];
    generate_pairs(t0, dwell, delay);
    generate_dark(t0, dwell);
    generate_afterpulses();
    generate_hot_pixels(t0, dwell);
    std::sort(out_.hits.begin(), out_.hits.end(), tagged_less);
    return std::move(out_);
  }

private:
  std::uint64_t next_id() { return make_photon_id(position_, local_++); }

  void add_photon(const PhotonImpact& impact, int fiber, PhotonOrigin origin,
                  std::int64_t pair_id, std::int64_t parent_id) {
    scratch_.clear();
    const double g = cfg_.sensor.grid_size;
    if (!(impact.x >= -0.5 && impact.x < g - 0.5 && impact.y >= -0.5 && impact.y < g - 0.5)) {
      ++out_.counters.photons_off_grid;
      return;
    }
    const auto id = next_id();
    render_impact(rng_, cfg_.sensor, impact, scratch_);
    for (const auto& h : scratch_) out_.hits.push_back({h, id});
    out_.counters.hits_rendered += scratch_.size();
    rendered_.push_back({impact, fiber, id});
    TruthPhoton t;
    t.photon_id = id;
    t.pair_id = pair_id;
    t.parent_id = parent_id;
    t.scan_index = position_;
    t.fiber = fiber;
    t.origin = origin;
    t.t_ns = impact.t_ns;
    t.x = impact.x;
    t.y = impact.y;
    t.hits_rendered = static_cast<std::uint32_t>(scratch_.size());
    out_.truth.push_back(t);
  }

  PhotonImpact land(int fiber, double t) {
    const auto& spot = cfg_.spots[fiber - 1];
    std::normal_distribution<double> n(0.0, spot.sigma_px);
    const double x = spot.x + n(rng_);
    const double y = spot.y + n(rng_);
    return {x, y, t};
  }

  void generate_pairs(double t0, double dwell, double delay) {
    const auto& src = cfg_.source;
    std::poisson_distribution<std::uint64_t> count(src.pair_rate_hz * dwell * 1e-9);
    const auto n = count(rng_);
    std::uniform_real_distribution<double> when(t0, t0 + dwell);
    std::vector<double> times(n);
    for (auto& t : times) t = when(rng_);
    std::sort(times.begin(), times.end());

    const auto probs = outcome_probabilities(cfg_.splitter, cfg_.dip, delay);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::bernoulli_distribution tail(src.jitter_tail_frac);
    std::bernoulli_distribution detect(src.detection_eff);
    std::normal_distribution<double> unit(0.0, 1.0);

    for (std::uint64_t k = 0; k < n; ++k) {
      const auto pair_id = static_cast<std::int64_t>(make_photon_id(position_, static_cast<std::uint32_t>(k)));
      const double r = u01(rng_);
      int fibers[2];
      if (r < probs[0]) {
        fibers[0] = 1;
        fibers[1] = 2;
        ++out_.counters.outcome_split;
      } else if (r < probs[0] + probs[1]) {
        fibers[0] = fibers[1] = 1;
        ++out_.counters.outcome_fiber1;
      } else {
        fibers[0] = fibers[1] = 2;
        ++out_.counters.outcome_fiber2;
      }
      ++out_.counters.pairs;
      const double sigma = tail(rng_) ? src.jitter_tail_sigma_ns : src.jitter_core_sigma_ns;
      for (int fiber : fibers) {
        const double jitter = std::clamp(sigma * unit(rng_), -kJitterClampNs, kJitterClampNs);
        if (!detect(rng_)) continue;
        ++out_.counters.photons_detected;
        add_photon(land(fiber, times[k] + jitter), fiber, PhotonOrigin::signal, pair_id, -1);
      }
    }
  }

  void generate_dark(double t0, double dwell) {
    const auto& sensor = cfg_.sensor;
    std::poisson_distribution<std::uint64_t> count(sensor.dcr_rate_hz * dwell * 1e-9);
    std::uniform_real_distribution<double> when(t0, t0 + dwell);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (int fiber = 1; fiber <= 2; ++fiber) {
      const auto& spot = cfg_.spots[fiber - 1];
      const double radius = 4.0 * spot.sigma_px;
      const auto n = count(rng_);
      for (std::uint64_t k = 0; k < n; ++k) {
        const double r = radius * std::sqrt(u01(rng_));
        const double phi = 2.0 * std::numbers::pi * u01(rng_);
        const PhotonImpact impact{spot.x + r * std::cos(phi), spot.y + r * std::sin(phi), when(rng_)};
        ++out_.counters.dark_photons;
        add_photon(impact, fiber, PhotonOrigin::dark, -1, -1);
      }
    }
  }

  void generate_afterpulses() {
    const std::size_t parents = rendered_.size();
    for (std::size_t i = 0; i < parents; ++i) {
      const auto parent = rendered_[i];
      PhotonImpact ap;
      if (!draw_afterpulse(rng_, cfg_.sensor, parent.impact, ap)) continue;
      ++out_.counters.afterpulses;
      add_photon(ap, parent.fiber, PhotonOrigin::afterpulse, -1,
                 static_cast<std::int64_t>(parent.id));
    }
  }

  void generate_hot_pixels(double t0, double dwell) {
    const auto& sensor = cfg_.sensor;
    if (sensor.hot_pixels.empty() || sensor.hot_pixel_rate_hz <= 0.0) return;
    std::poisson_distribution<std::uint64_t> count(sensor.hot_pixel_rate_hz * dwell * 1e-9);
    std::uniform_real_distribution<double> when(t0, t0 + dwell);
    std::uniform_int_distribution<std::uint32_t> tot(1, 40);
    const auto noise_id = make_photon_id(position_, 0xffffffffu);
    for (const auto& [x, y] : sensor.hot_pixels) {
      const auto n = count(rng_);
      for (std::uint64_t k = 0; k < n; ++k) {
        PixelHit h;
        h.toa = static_cast<std::uint64_t>(when(rng_) / sensor.toa_lsb_ns);
        h.tot = tot(rng_);
        h.x = static_cast<std::uint16_t>(x);
        h.y = static_cast<std::uint16_t>(y);
        out_.hits.push_back({h, noise_id});
        ++out_.counters.hits_rendered;
      }
    }
  }

  struct Rendered {
    PhotonImpact impact;
    int fiber;
    std::uint64_t id;
  };

  const ExperimentConfig& cfg_;
  std::uint32_t position_;
  Rng rng_;
  std::uint32_t local_ = 0;
  std::vector<PixelHit> scratch_;
  std::vector<Rendered> rendered_;
  PositionOutput out_;
};

void add_counters(SimulationCounters& a, const SimulationCounters& b) {
  a.pairs += b.pairs;
  a.outcome_split += b.outcome_split;
  a.outcome_fiber1 += b.outcome_fiber1;
  a.outcome_fiber2 += b.outcome_fiber2;
  a.photons_detected += b.photons_detected;
  a.photons_off_grid += b.photons_off_grid;
  a.dark_photons += b.dark_photons;
  a.afterpulses += b.afterpulses;
  a.hits_rendered += b.hits_rendered;
  a.hits_deadtime += b.hits_deadtime;
  a.hits_masked += b.hits_masked;
  a.hits_emitted += b.hits_emitted;
}

}  // namespace

const char* to_string(PhotonOrigin origin) {
  switch (origin) {
    case PhotonOrigin::signal: return "signal";
    case PhotonOrigin::dark: return "dark";
    case PhotonOrigin::afterpulse: return "afterpulse";
  }
  return "unknown";
}

std::array<double, 3> outcome_probabilities(const SplitterSpec& splitter, const DipShape& dip,
                                            double delay_mm) {
  const auto rates = coincidence_rates(splitter, dip, delay_mm, 1.0);
  const double total = rates.total();
  return {rates.n_cross / total, rates.n_fib1 / total, rates.n_fib2 / total};
}

PairOutcome sample_pair_outcome(Rng& rng, const SplitterSpec& splitter, const DipShape& dip,
                                double delay_mm) {
  dip.validate();
  const double overlap = dip.visibility * KernelTable::instance()(delay_mm - dip.d0_mm, dip.fwhm_mm);
  const auto rates = coincidence_rates_from_overlap(splitter, overlap, 1.0);
  const double total = rates.total();
  const std::array<double, 3> p{rates.n_cross / total, rates.n_fib1 / total, rates.n_fib2 / total};
  const double r = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  if (r < p[0]) return PairOutcome::split;
  if (r < p[0] + p[1]) return PairOutcome::both_fiber1;
  return PairOutcome::both_fiber2;
}

bool draw_afterpulse(Rng& rng, const SensorConfig& sensor, const PhotonImpact& parent,
                     PhotonImpact& out) {
  if (sensor.afterpulse_prob <= 0.0) return false;
  if (!std::bernoulli_distribution(sensor.afterpulse_prob)(rng)) return false;
  std::normal_distribution<double> shift(0.0, sensor.afterpulse_radius_sigma_px);
  // Afterpulses register as independent hits: displacements that would land
  // on the parent's own footprint are redrawn.
  const double min_sep2 = sensor.afterpulse_min_separation_px * sensor.afterpulse_min_separation_px;
  double dx = 0.0, dy = 0.0;
  do {
    dx = shift(rng);
    dy = shift(rng);
  } while (dx * dx + dy * dy < min_sep2);
  std::exponential_distribution<double> delay(1.0 / sensor.afterpulse_delay_mean_ns);
  out = {parent.x + dx, parent.y + dy, parent.t_ns + delay(rng)};
  return true;
}

SimulationSummary simulate_scan(const ExperimentConfig& config, std::uint64_t seed,
                                const HitSink& sink, const SimulationOptions& options) {
  config.validate();
  SimulationSummary summary;
  const auto n_positions = static_cast<std::uint32_t>(config.scan.positions_mm.size());
  if (n_positions == 0 || config.scan.dwell_s <= 0.0) return summary;

  const unsigned threads =
      std::max(1u, options.threads ? options.threads : std::thread::hardware_concurrency());
  const unsigned batch = std::max(1u, options.batch);

  std::vector<std::uint8_t> hot(static_cast<std::size_t>(config.sensor.grid_size) *
                                    config.sensor.grid_size,
                                0);
  for (const auto& [x, y] : config.sensor.hot_pixels)
    hot[static_cast<std::size_t>(y) * config.sensor.grid_size + x] = 1;

  DeadtimeFilter deadtime(config.sensor);
  std::vector<TaggedHit> pending;
  std::vector<TaggedHit> merged;
  std::vector<PixelHit> out_hits;
  std::vector<std::uint64_t> out_ids;
  // Truth rows of position p start at truth_offset[p], in local-id order.
  std::vector<std::size_t> truth_offset(n_positions, 0);

  auto emit = [&](std::span<const TaggedHit> chunk) {
    out_hits.clear();
    out_ids.clear();
    for (const auto& th : chunk) {
      if (hot[static_cast<std::size_t>(th.hit.y) * config.sensor.grid_size + th.hit.x]) {
        ++summary.counters.hits_masked;
        continue;
      }
      if (!deadtime.accept(th.hit)) {
        ++summary.counters.hits_deadtime;
        continue;
      }
      out_hits.push_back(th.hit);
      if (options.tag_hits) out_ids.push_back(th.photon_id);
      if (options.collect_truth) {
        const auto local = static_cast<std::uint32_t>(th.photon_id);
        if (local != 0xffffffffu)
          ++summary.truth[truth_offset[th.photon_id >> 32] + local].hits_emitted;
      }
    }
    summary.counters.hits_emitted += out_hits.size();
    if (!out_hits.empty()) sink(out_hits, out_ids);
  };

  std::vector<PositionOutput> outputs;
  for (std::uint32_t first = 0; first < n_positions; first += batch) {
    const std::uint32_t last = std::min(n_positions, first + batch);
    outputs.assign(last - first, {});
    if (threads == 1 || last - first == 1) {
      for (std::uint32_t p = first; p < last; ++p)
        outputs[p - first] = PositionGenerator(config, p, seed).run();
    } else {
      std::vector<std::thread> pool;
      std::atomic<std::uint32_t> next{first};
      for (unsigned t = 0; t < std::min<unsigned>(threads, last - first); ++t)
        pool.emplace_back([&] {
          for (std::uint32_t p = next++; p < last; p = next++)
            outputs[p - first] = PositionGenerator(config, p, seed).run();
        });
      for (auto& th : pool) th.join();
    }

    for (std::uint32_t p = first; p < last; ++p) {
      auto& out = outputs[p - first];
      add_counters(summary.counters, out.counters);
      if (options.collect_truth) {
        truth_offset[p] = summary.truth.size();
        summary.truth.insert(summary.truth.end(), out.truth.begin(), out.truth.end());
      }
      merged.clear();
      merged.reserve(pending.size() + out.hits.size());
      std::merge(pending.begin(), pending.end(), out.hits.begin(), out.hits.end(),
                 std::back_inserter(merged), tagged_less);
      std::vector<TaggedHit>().swap(out.hits);
      if (p + 1 < n_positions) {
        const double cut_ns = config.scan.start_ns(p + 1) - kMergeGuardNs;
        const auto cut_tick = static_cast<std::uint64_t>(std::max(0.0, cut_ns / config.sensor.toa_lsb_ns));
        const auto split = std::partition_point(merged.begin(), merged.end(),
                                                [&](const TaggedHit& h) { return h.hit.toa < cut_tick; });
        emit(std::span<const TaggedHit>(merged.data(), static_cast<std::size_t>(split - merged.begin())));
        pending.assign(split, merged.end());
      } else {
        emit(merged);
        pending.clear();
      }
    }
  }
  return summary;
}

SimulationResult simulate_scan(const ExperimentConfig& config, std::uint64_t seed,
                               const SimulationOptions& options) {
  SimulationResult result;
  auto sink = [&](std::span<const PixelHit> hits, std::span<const std::uint64_t> ids) {
    result.hits.insert(result.hits.end(), hits.begin(), hits.end());
    result.photon_ids.insert(result.photon_ids.end(), ids.begin(), ids.end());
  };
  result.summary = simulate_scan(config, seed, sink, options);
  return result;
}

}  // namespace hompix
