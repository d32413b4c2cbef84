#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <unordered_map>

#include "hompix/error.hpp"
#include "hompix/fit.hpp"
#include "hompix/pipeline.hpp"
#include "hompix/recon.hpp"
#include "hompix/simulator.hpp"

using namespace hompix;

namespace {

ExperimentConfig short_scan(std::size_t positions = 6, double dwell_s = 0.2) {
  auto cfg = ExperimentConfig::defaults();
  cfg.scan = ScanPlan::linear(0.17, 0.002, positions, dwell_s);
  return cfg;
}

}  // namespace

TEST_CASE("branching probabilities") {
  const DipShape dip{0.18, 0.0082, 1.0};
  auto p = outcome_probabilities({0.5, 0.5}, dip, 0.18);
  CHECK(p[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(p[1] == doctest::Approx(0.5));
  CHECK(p[2] == doctest::Approx(0.5));

  p = outcome_probabilities({0.5, 0.5}, dip, 5.0);
  CHECK(p[0] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(p[1] == doctest::Approx(0.25).epsilon(1e-9));

  p = outcome_probabilities({0.6, 0.4}, dip, 5.0);
  CHECK(p[0] == doctest::Approx(0.52).epsilon(1e-9));
  CHECK(p[1] == doctest::Approx(0.24).epsilon(1e-9));
  CHECK(p[2] == doctest::Approx(0.24).epsilon(1e-9));
}

TEST_CASE("sampled branching frequencies match the model within 4 sigma") {
  Rng rng(5);
  const DipShape dip{0.18, 0.0082, 0.42};
  for (double d : {0.18, 0.184, 0.2}) {
    const auto p = outcome_probabilities({0.5, 0.5}, dip, d);
    std::array<double, 3> n{};
    const int trials = 200000;
    for (int i = 0; i < trials; ++i) ++n[static_cast<int>(sample_pair_outcome(rng, {0.5, 0.5}, dip, d))];
    for (int k = 0; k < 3; ++k) {
      const double sigma = std::sqrt(trials * p[k] * (1.0 - p[k]));
      CHECK(std::abs(n[k] - trials * p[k]) < 4.0 * sigma);
    }
  }
}

TEST_CASE("bright photon renders a connected cluster of at least four pixels") {
  SensorConfig s;
  s.gain_shape = 1e6;  // gain fixed at its mean
  Rng rng(2);
  std::vector<PixelHit> hits;
  render_impact(rng, s, {100.5, 100.5, 5000.0}, hits);
  REQUIRE(hits.size() >= 4);
  const auto clusters = cluster_stream(hits);
  CHECK(clusters.size() == 1);
  CHECK(clusters[0].t_span_ns() <= 300.0);
}

TEST_CASE("photon off the grid produces no hits") {
  SensorConfig s;
  Rng rng(2);
  std::vector<PixelHit> hits;
  CHECK(render_impact(rng, s, {-3.0, 10.0, 100.0}, hits) == 0);
  CHECK(render_impact(rng, s, {10.0, 300.0, 100.0}, hits) == 0);
  CHECK(hits.empty());
}

TEST_CASE("default tuning: mean cluster size and the four-pixel excess") {
  SensorConfig s;
  Rng rng(9);
  std::map<std::size_t, int> sizes;
  double sum = 0.0;
  int n = 0;
  for (int i = 0; i < 10000; ++i) {
    auto p = render_photon(rng, s, {128.0, 128.0, 9.0}, 1e6);
    if (!p.inside) continue;
    REQUIRE(!p.hits.empty());
    sum += static_cast<double>(p.hits.size());
    ++n;
    ++sizes[p.hits.size()];
  }
  CHECK(sum / n == doctest::Approx(9.0).epsilon(1.0 / 9.0));
  CHECK(sizes[4] > sizes[3]);
  CHECK(sizes[4] > sizes[5]);
}

TEST_CASE("dead time is per pixel") {
  SensorConfig s;
  const auto t100 = static_cast<std::uint64_t>(100.0 / s.toa_lsb_ns);
  std::vector<PixelHit> same{{1000, 4, 10, 10}, {1000 + t100, 4, 10, 10}};
  CHECK(apply_deadtime(s, same).size() == 1);
  std::vector<PixelHit> adjacent{{1000, 4, 10, 10}, {1000 + t100, 4, 11, 10}};
  CHECK(apply_deadtime(s, adjacent).size() == 2);
  // 475 ns + 4 ToT ticks later is still blocked; one tick beyond is accepted.
  const auto block = static_cast<std::uint64_t>((475.0 + 4 * 25.0) / s.toa_lsb_ns);
  std::vector<PixelHit> edge{{1000, 4, 10, 10}, {1000 + block, 4, 10, 10}, {1000 + block + 1, 4, 10, 10}};
  const auto kept = apply_deadtime(s, edge);
  REQUIRE(kept.size() == 2);
  CHECK(kept[1].toa == 1000 + block + 1);
}

TEST_CASE("dead time rejects unordered input") {
  SensorConfig s;
  std::vector<PixelHit> hits{{1000, 4, 10, 10}, {900, 4, 20, 10}};
  CHECK_THROWS_AS(apply_deadtime(s, hits), ContractViolation);
  std::vector<PixelHit> many(100);
  for (std::size_t i = 0; i < many.size(); ++i) many[i] = {1000 - i, 1, static_cast<std::uint16_t>(i), 0};
  CHECK_THROWS_AS(apply_deadtime(s, many), ContractViolation);
}

TEST_CASE("afterpulse draws") {
  SensorConfig s;
  Rng rng(4);
  PhotonImpact parent{128.0, 128.0, 1000.0}, ap;

  s.afterpulse_prob = 0.0;
  int fired = 0;
  for (int i = 0; i < 10000; ++i) fired += draw_afterpulse(rng, s, parent, ap);
  CHECK(fired == 0);

  s.afterpulse_prob = 0.0019;
  fired = 0;
  for (int i = 0; i < 1000000; ++i) fired += draw_afterpulse(rng, s, parent, ap);
  CHECK(std::abs(fired - 1900.0) < 3.0 * std::sqrt(1900.0));

  s.afterpulse_prob = 1.0;
  s.afterpulse_delay_mean_ns = 10.0;
  int within = 0;
  for (int i = 0; i < 20000; ++i) {
    REQUIRE(draw_afterpulse(rng, s, parent, ap));
    within += ap.t_ns - parent.t_ns <= 50.0;
    CHECK(ap.t_ns >= parent.t_ns);
    CHECK(std::hypot(ap.x - parent.x, ap.y - parent.y) >= s.afterpulse_min_separation_px);
  }
  CHECK(within >= 0.99 * 20000);
}

TEST_CASE("zero dwell gives an empty stream") {
  auto cfg = short_scan(4, 0.0);
  const auto r = simulate_scan(cfg, 1);
  CHECK(r.hits.empty());
  CHECK(r.summary.counters.pairs == 0);
}

TEST_CASE("simulated stream invariants") {
  auto cfg = short_scan(6, 0.2);
  cfg.sensor.hot_pixel_rate_hz = 20000.0;
  cfg.sensor.hot_pixels.push_back({72, 128});  // inside a spot
  const auto r = simulate_scan(cfg, 21);
  REQUIRE(r.hits.size() > 10000);
  REQUIRE(r.photon_ids.size() == r.hits.size());

  CHECK(std::is_sorted(r.hits.begin(), r.hits.end(), stream_less));

  for (const auto& h : r.hits)
    for (const auto& [x, y] : cfg.sensor.hot_pixels) CHECK_FALSE((h.x == x && h.y == y));

  std::unordered_map<int, PixelHit> last;
  bool dead_ok = true;
  for (const auto& h : r.hits) {
    auto it = last.find(pixel_index(h));
    if (it != last.end()) {
      const double gap = (h.toa - it->second.toa) * cfg.sensor.toa_lsb_ns;
      dead_ok &= gap > cfg.sensor.deadtime_base_ns + it->second.tot * cfg.sensor.tot_lsb_ns;
    }
    last[pixel_index(h)] = h;
  }
  CHECK(dead_ok);

  // Truth covers every emitted hit's photon exactly once, with matching counts.
  const auto& truth = r.summary.truth;
  CHECK(std::is_sorted(truth.begin(), truth.end(), [](auto& a, auto& b) { return a.photon_id < b.photon_id; }));
  std::unordered_map<std::uint64_t, std::uint32_t> emitted;
  for (auto id : r.photon_ids) ++emitted[id];
  std::uint64_t covered = 0;
  for (const auto& t : truth) {
    auto it = emitted.find(t.photon_id);
    const std::uint32_t n = it == emitted.end() ? 0 : it->second;
    CHECK(n == t.hits_emitted);
    covered += n;
  }
  CHECK(covered == r.hits.size());
  CHECK(r.summary.counters.hits_emitted == r.hits.size());
}

TEST_CASE("fixed seed gives an identical stream regardless of thread count") {
  const auto cfg = short_scan(10, 0.05);
  SimulationOptions one{.collect_truth = true, .tag_hits = true, .threads = 1, .batch = 3};
  SimulationOptions many{.collect_truth = true, .tag_hits = true, .threads = 4, .batch = 8};
  const auto a = simulate_scan(cfg, 77, one);
  const auto b = simulate_scan(cfg, 77, many);
  const auto c = simulate_scan(cfg, 78, many);
  CHECK(a.hits == b.hits);
  CHECK(a.photon_ids == b.photon_ids);
  CHECK(a.summary.truth.size() == b.summary.truth.size());
  CHECK(a.hits != c.hits);
}

TEST_CASE("cross coincidence count far from the dip") {
  // 10 kHz pairs for 60 s at eff 0.3: expect 1e4 * 60 * 0.09 * 0.5 = 27000.
  auto cfg = ExperimentConfig::defaults();
  cfg.scan = ScanPlan::linear(1.0, 0.001, 1, 60.0);
  const auto sim = simulate_scan(cfg, 3, SimulationOptions{.collect_truth = false, .tag_hits = false});
  PhotonReconstructor recon(cfg);
  recon.push(sim.hits);
  recon.flush();
  const auto pairs = find_pairs(recon.photons(), cfg);
  auto h = CoincidenceHistogram::uniform(-250.0, 250.0, 2.5, PairKind::cross);
  for (const auto& p : pairs.pairs)
    if (p.kind == PairKind::cross) h.fill(p.dt_ns);
  const auto fit = fit_double_gaussian(h);
  const double expect = 1e4 * 60.0 * 0.3 * 0.3 * 0.5;
  CHECK(fit.n_signal == doctest::Approx(expect).epsilon(0.05));
}

TEST_CASE("configuration problems name their field paths") {
  auto cfg = ExperimentConfig::defaults();
  cfg.splitter = {0.6, 0.5};
  cfg.source.detection_eff = 1.5;
  cfg.sensor.psf_sigma_px = -1.0;
  const auto problems = cfg.problems();
  auto has = [&](const std::string& prefix) {
    return std::any_of(problems.begin(), problems.end(), [&](auto& p) { return p.rfind(prefix, 0) == 0; });
  };
  CHECK(has("splitter"));
  CHECK(has("source.detection_eff"));
  CHECK(has("sensor.psf_sigma_px"));
  CHECK_THROWS_AS(simulate_scan(cfg, 1), ConfigError);
}
