#pragma once
// Independent oracles and synthetic data shared by the test binaries.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "hompix/experiment.hpp"
#include "hompix/fit.hpp"
#include "hompix/hit.hpp"
#include "hompix/model.hpp"
#include "hompix/simulator.hpp"

namespace testsupport {

using hompix::PixelHit;

/// O(n^2) connected components: link every adjacent pair within the window.
/// Labels are the smallest member index, matching the library convention.
inline std::vector<std::uint32_t> brute_force_labels(const std::vector<PixelHit>& hits,
                                                      std::uint64_t window_ticks) {
  const std::size_t n = hits.size();
  std::vector<std::uint32_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0u);
  auto find = [&](std::uint32_t i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
  };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const auto& a = hits[i];
      const auto& b = hits[j];
      const bool near = std::abs(int(a.x) - int(b.x)) <= 1 && std::abs(int(a.y) - int(b.y)) <= 1;
      const auto dt = a.toa > b.toa ? a.toa - b.toa : b.toa - a.toa;
      if (!near || dt > window_ticks) continue;
      auto ra = find(static_cast<std::uint32_t>(i)), rb = find(static_cast<std::uint32_t>(j));
      if (ra != rb) parent[std::max(ra, rb)] = std::min(ra, rb);
    }
  std::vector<std::uint32_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = find(static_cast<std::uint32_t>(i));
  return out;
}

/// Random stream-sorted hits packed into a small area and time span so that
/// clusters chain, touch and interleave.
inline std::vector<PixelHit> random_hits(std::mt19937_64& rng, std::size_t n, int area, std::uint64_t span_ticks) {
  std::uniform_int_distribution<int> xy(0, area - 1);
  std::uniform_int_distribution<std::uint64_t> t(0, span_ticks);
  std::uniform_int_distribution<std::uint32_t> tot(0, 40);
  std::vector<PixelHit> hits(n);
  for (auto& h : hits) {
    h.x = static_cast<std::uint16_t>(xy(rng));
    h.y = static_cast<std::uint16_t>(xy(rng));
    h.toa = t(rng);
    h.tot = tot(rng);
  }
  std::sort(hits.begin(), hits.end(), hompix::stream_less);
  return hits;
}

inline double gauss_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// Expected counts of A [p G(mu,s1) + (1-p) G(mu,s2)] + C over uniform bins.
inline std::vector<double> double_gaussian_expectation(const hompix::CoincidenceHistogram& h, double a, double mu,
                                                       double s1, double s2, double p, double c) {
  std::vector<double> out(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double lo = h.edges[i], hi = h.edges[i + 1];
    const double g1 = gauss_cdf((hi - mu) / s1) - gauss_cdf((lo - mu) / s1);
    const double g2 = gauss_cdf((hi - mu) / s2) - gauss_cdf((lo - mu) / s2);
    out[i] = a * (p * g1 + (1.0 - p) * g2) + c;
  }
  return out;
}

/// Poisson-fluctuated histogram drawn around the double-Gaussian expectation.
inline hompix::CoincidenceHistogram synthetic_histogram(std::mt19937_64& rng, double a, double mu, double s1,
                                                        double s2, double p, double c, double lo = -250.0,
                                                        double hi = 250.0, double bin = 2.5) {
  auto h = hompix::CoincidenceHistogram::uniform(lo, hi, bin, hompix::PairKind::cross);
  const auto mean = double_gaussian_expectation(h, a, mu, s1, s2, p, c);
  for (std::size_t i = 0; i < h.size(); ++i) h.counts[i] = static_cast<double>(std::poisson_distribution<long>(mean[i])(rng));
  return h;
}

struct PairLevelOptions {
  double pairs_per_position = 4000.0;  ///< expected detected pairs per scan position
  double sigma_core = 7.3;
  double sigma_tail = 17.8;
  double core_frac = 0.75;
  double background_per_position = 200.0;  ///< random pairs per kind, flat over the window
  double window_ns = 250.0;
};

/// Pair-level Monte Carlo: detected pairs branch by the interference model and
/// receive a two-Gaussian time difference; random pairs fill the window flat.
inline std::vector<hompix::ScanPair> pair_level_scan(const hompix::ExperimentConfig& cfg, std::uint64_t seed,
                                                     const PairLevelOptions& o) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<hompix::ScanPair> out;
  for (std::uint32_t k = 0; k < cfg.scan.positions_mm.size(); ++k) {
    const double d = cfg.scan.positions_mm[k];
    const long n = std::poisson_distribution<long>(o.pairs_per_position)(rng);
    for (long i = 0; i < n; ++i) {
      const auto outcome = hompix::sample_pair_outcome(rng, cfg.splitter, cfg.dip, d);
      const double s = u(rng) < o.core_frac ? o.sigma_core : o.sigma_tail;
      const double dt = s * g(rng);
      switch (outcome) {
        case hompix::PairOutcome::split: out.push_back({hompix::PairKind::cross, dt, k}); break;
        case hompix::PairOutcome::both_fiber1: out.push_back({hompix::PairKind::same_fiber1, std::abs(dt), k}); break;
        case hompix::PairOutcome::both_fiber2: out.push_back({hompix::PairKind::same_fiber2, std::abs(dt), k}); break;
      }
    }
    for (int kind = 0; kind < 3; ++kind) {
      const long nb = std::poisson_distribution<long>(o.background_per_position)(rng);
      for (long i = 0; i < nb; ++i) {
        const double dt = kind == 0 ? (2.0 * u(rng) - 1.0) * o.window_ns : u(rng) * o.window_ns;
        out.push_back({static_cast<hompix::PairKind>(kind), dt, k});
      }
    }
  }
  return out;
}

/// A short scan around the default dip for pair-level studies.
inline hompix::ExperimentConfig pair_level_config(double fwhm_mm = 0.0082, double visibility = 0.42) {
  auto cfg = hompix::ExperimentConfig::defaults();
  cfg.dip.fwhm_mm = fwhm_mm;
  cfg.dip.visibility = visibility;
  const double span = 10.0 * fwhm_mm;
  cfg.scan = hompix::ScanPlan::linear(cfg.dip.d0_mm - span / 2.0, span / 60.0, 61, 6.0);
  return cfg;
}

}  // namespace testsupport
