#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "hompix/error.hpp"
#include "hompix/fit.hpp"
#include "hompix/pipeline.hpp"
#include "hompix/recon.hpp"
#include "hompix/sensor.hpp"
#include "hompix/simulator.hpp"
#include "support.hpp"

using namespace hompix;

namespace {

std::vector<std::vector<PixelHit>> as_hit_lists(const std::vector<Cluster>& clusters) {
  std::vector<std::vector<PixelHit>> out;
  for (const auto& c : clusters) out.push_back(c.hits);
  return out;
}

std::vector<Cluster> stream_in_chunks(const std::vector<PixelHit>& hits, std::mt19937_64& rng) {
  std::vector<Cluster> out;
  StreamClusterer sc(ClusterParams{}, [&](Cluster&& c) { out.push_back(std::move(c)); });
  std::uniform_int_distribution<std::size_t> step(0, 40);
  std::size_t i = 0;
  while (i < hits.size()) {
    const std::size_t n = std::min(step(rng), hits.size() - i);
    sc.push(std::span<const PixelHit>(hits).subspan(i, n));
    i += n;
  }
  sc.flush();
  return out;
}

}  // namespace

TEST_CASE("2x2 block within 10 ns forms one cluster") {
  std::vector<PixelHit> hits{{100, 3, 10, 10}, {102, 3, 11, 10}, {104, 3, 10, 11}, {106, 3, 11, 11}};
  const auto c = cluster_stream(hits);
  REQUIRE(c.size() == 1);
  CHECK(c[0].hits.size() == 4);
  CHECK(c[0].x_min == 10);
  CHECK(c[0].x_max == 11);
}

TEST_CASE("hits three pixels apart stay separate") {
  std::vector<PixelHit> hits{{100, 3, 10, 10}, {100, 3, 10, 13}};
  CHECK(cluster_stream(hits).size() == 2);
  CHECK(cluster_stream(std::vector<PixelHit>{}).empty());
}

TEST_CASE("300 ns link is pairwise between neighbours") {
  const auto w = kClusterWindowTicks;
  // A chain spanning twice the window is still one cluster.
  std::vector<PixelHit> chain{{0, 1, 10, 10}, {w, 1, 11, 10}, {2 * w, 1, 12, 10}};
  CHECK(cluster_stream(chain).size() == 1);
  std::vector<PixelHit> gap{{0, 1, 10, 10}, {w + 1, 1, 11, 10}};
  CHECK(cluster_stream(gap).size() == 2);
  // Diagonal neighbours are adjacent.
  std::vector<PixelHit> diag{{0, 1, 10, 10}, {1, 1, 11, 11}};
  CHECK(cluster_stream(diag).size() == 1);
}

TEST_CASE("clustering equals the brute-force oracle on random streams") {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<std::size_t> size(1, 500);
  std::uniform_int_distribution<int> area(3, 24);
  std::uniform_int_distribution<std::uint64_t> span(10, 2000);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto hits = testsupport::random_hits(rng, size(rng), area(rng), span(rng));
    const auto expect = testsupport::brute_force_labels(hits, kClusterWindowTicks);
    const auto got = cluster_labels(hits);
    REQUIRE(got == expect);
    REQUIRE(cluster_labels_parallel(hits, 1 + trial % 7) == expect);
  }
}

TEST_CASE("every hit lands in exactly one cluster, in label order") {
  std::mt19937_64 rng(7);
  const auto hits = testsupport::random_hits(rng, 800, 16, 4000);
  const auto clusters = cluster_stream(hits);
  std::size_t total = 0;
  for (const auto& c : clusters) {
    REQUIRE(!c.hits.empty());
    total += c.hits.size();
  }
  CHECK(total == hits.size());
  const auto labels = cluster_labels(hits);
  std::vector<std::uint32_t> firsts(labels.begin(), labels.end());
  std::sort(firsts.begin(), firsts.end());
  firsts.erase(std::unique(firsts.begin(), firsts.end()), firsts.end());
  CHECK(firsts.size() == clusters.size());
}

TEST_CASE("unsorted input is sorted before clustering") {
  std::mt19937_64 rng(12);
  const auto hits = testsupport::random_hits(rng, 400, 12, 3000);
  auto shuffled = hits;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  CHECK(as_hit_lists(cluster_stream(shuffled)) == as_hit_lists(cluster_stream(hits)));
  CHECK_THROWS_AS(cluster_labels(shuffled), ContractViolation);
}

TEST_CASE("streaming clusterer with random chunking matches batch") {
  std::mt19937_64 rng(33);
  for (int trial = 0; trial < 200; ++trial) {
    const auto hits = testsupport::random_hits(rng, 600, 10 + trial % 20, 500 + 97 * trial);
    const auto batch = cluster_stream(hits);
    CHECK(as_hit_lists(stream_in_chunks(hits, rng)) == as_hit_lists(batch));
  }
}

TEST_CASE("streaming clusterer rejects out-of-order chunks") {
  std::vector<PixelHit> a{{1000, 1, 5, 5}}, b{{10, 1, 6, 6}};
  StreamClusterer sc(ClusterParams{}, [](Cluster&&) {});
  sc.push(a);
  CHECK_THROWS_AS(sc.push(b), ContractViolation);
}

TEST_CASE("parallel labels on a simulated stream") {
  auto cfg = ExperimentConfig::defaults();
  cfg.scan = ScanPlan::linear(0.17, 0.002, 4, 0.05);
  const auto sim = simulate_scan(cfg, 5, SimulationOptions{.collect_truth = false, .tag_hits = false});
  REQUIRE(sim.hits.size() > 1000);
  const auto seq = cluster_labels(sim.hits);
  for (unsigned k : {2u, 3u, 8u}) CHECK(cluster_labels_parallel(sim.hits, k) == seq);
}

TEST_CASE("centroid examples") {
  CentroidParams p;
  Cluster one;
  one.hits = {{640, 4, 10, 20}};
  auto ph = centroid(one, p);
  CHECK(ph.x == 10.0);
  CHECK(ph.y == 20.0);
  CHECK(ph.t_raw_ns == doctest::Approx(640 * kToaLsbNs));
  CHECK(ph.t_ns == doctest::Approx(ph.t_raw_ns));
  CHECK(ph.n_pixels == 1);

  Cluster two;
  two.hits = {{100, 5, 10, 7}, {200, 5, 11, 7}};
  ph = centroid(two, p);
  CHECK(ph.x == doctest::Approx(10.5));
  // Tie on ToT: the pixel with the smaller (x, y) sets the time.
  CHECK(ph.t_raw_ns == doctest::Approx(100 * kToaLsbNs));

  Cluster weighted;
  weighted.hits = {{100, 1, 10, 7}, {200, 3, 14, 7}};
  ph = centroid(weighted, p);
  CHECK(ph.x == doctest::Approx(13.0));
  CHECK(ph.tot_max == 3);
  CHECK(ph.t_raw_ns == doctest::Approx(200 * kToaLsbNs));
  CHECK_FALSE(ph.unweighted);

  Cluster zero;
  zero.hits = {{100, 0, 10, 7}, {100, 0, 12, 9}};
  ph = centroid(zero, p);
  CHECK(ph.unweighted);
  CHECK(ph.x == doctest::Approx(11.0));
  CHECK(ph.y == doctest::Approx(8.0));
}

TEST_CASE("centroid lies within the bounding box") {
  std::mt19937_64 rng(4);
  const auto clusters = cluster_stream(testsupport::random_hits(rng, 2000, 40, 20000));
  for (const auto& c : clusters) {
    const auto ph = centroid(c, CentroidParams{});
    CHECK(ph.x >= c.x_min);
    CHECK(ph.x <= c.x_max);
    CHECK(ph.y >= c.y_min);
    CHECK(ph.y <= c.y_max);
    CHECK(std::isfinite(ph.t_ns));
  }
}

TEST_CASE("time-walk correction arithmetic") {
  CHECK(timewalk_correct(1000.0, 4, {500.0, 25.0}) == doctest::Approx(996.0).epsilon(1e-15));
  CHECK(timewalk_correct(1234.5, 17, {0.0, 25.0}) == 1234.5);
}

TEST_CASE("per-photon timing residual with jitter disabled") {
  SensorConfig s;
  const CentroidParams p{{s.walk_w0_ns2, s.walk_w1_ns}, s.toa_lsb_ns, s.tot_lsb_ns};
  Rng rng(17);
  double sum = 0.0, sum2 = 0.0;
  int n = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto r = render_photon(rng, s, {128.0, 128.0, 9.0}, 5000.0 + i);
    if (r.hits.empty()) continue;
    const auto clusters = cluster_stream(r.hits);
    const auto ph = centroid(clusters.front(), p);
    const double d = ph.t_ns - r.impact.t_ns;
    sum += d;
    sum2 += d * d;
    ++n;
  }
  REQUIRE(n > 9000);
  const double mean = sum / n;
  const double rms = std::sqrt(sum2 / n - mean * mean);
  CHECK(rms > 1.5);
  CHECK(rms < 2.5);
}

TEST_CASE("time-walk calibration round trip") {
  SensorConfig s;
  Rng rng(23);
  std::vector<double> t_raw, t_ref;
  std::vector<std::uint32_t> tot;
  for (int i = 0; i < 20000; ++i) {
    const auto r = render_photon(rng, s, {128.0, 128.0, 9.0}, 5000.0 + 0.37 * i);
    if (r.hits.empty()) continue;
    const auto ph = centroid(cluster_stream(r.hits).front(), CentroidParams{{0.0, 1.0}});
    t_raw.push_back(ph.t_raw_ns);
    tot.push_back(ph.tot_max);
    t_ref.push_back(r.impact.t_ns);
  }
  const auto cal = calibrate_timewalk(t_raw, tot, t_ref);
  CHECK(cal.params.w0_ns2 > 0.0);

  // Corrected residual bias in each ToT tercile.
  std::vector<std::size_t> order(tot.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return tot[a] < tot[b]; });
  for (int part = 0; part < 3; ++part) {
    const std::size_t lo = order.size() * part / 3, hi = order.size() * (part + 1) / 3;
    double bias = 0.0;
    for (std::size_t k = lo; k < hi; ++k) {
      const auto i = order[k];
      bias += timewalk_correct(t_raw[i], tot[i], cal.params) - cal.offset_ns - t_ref[i];
    }
    CHECK(std::abs(bias / static_cast<double>(hi - lo)) < 0.5);
  }

  CHECK_THROWS_AS(calibrate_timewalk(std::span(t_raw).first(2), std::span(tot).first(2), std::span(t_ref).first(2)),
                  ContractViolation);
}

TEST_CASE("region assignment") {
  const std::array<Region, 2> regions{Region{72.0, 128.0, 30.0}, Region{184.0, 128.0, 30.0}};
  Photon p;
  p.x = 72.0;
  p.y = 128.0;
  CHECK(assign_region(p, regions) == RegionTag::fiber1);
  p.x = 184.0;
  CHECK(assign_region(p, regions) == RegionTag::fiber2);
  p.x = 128.0;
  CHECK(assign_region(p, regions) == RegionTag::outside);
  p.x = 102.0;  // exactly on the boundary
  CHECK(assign_region(p, regions) == RegionTag::fiber1);

  const std::array<Region, 2> overlap{Region{100.0, 100.0, 30.0}, Region{140.0, 100.0, 30.0}};
  CHECK_THROWS_AS(assign_region(p, overlap), ConfigError);
}

TEST_CASE("cross coincidence examples") {
  auto r = find_cross_coincidences(std::vector<double>{100.0}, std::vector<double>{103.0}, 10.0);
  REQUIRE(r.pairs.size() == 1);
  CHECK(r.pairs[0].dt_ns == doctest::Approx(-3.0));

  r = find_cross_coincidences(std::vector<double>{100.0}, std::vector<double>{90.0, 104.0}, 10.0);
  REQUIRE(r.pairs.size() == 1);
  CHECK(r.pairs[0].second == 1);
  CHECK(r.pairs[0].dt_ns == doctest::Approx(-4.0));

  // Non-exclusive: both region-1 photons pick the same partner.
  r = find_cross_coincidences(std::vector<double>{100.0, 102.0}, std::vector<double>{101.5}, 10.0);
  REQUIRE(r.pairs.size() == 2);
  CHECK(r.pairs[0].second == r.pairs[1].second);

  r = find_cross_coincidences(std::vector<double>{100.0}, std::vector<double>{200.0}, 10.0);
  CHECK(r.pairs.empty());
  CHECK(r.out_of_window == 1);
}

TEST_CASE("cross matching agrees with a linear scan") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1e5);
  std::vector<double> t1(3000), t2(2500);
  for (auto& t : t1) t = u(rng);
  for (auto& t : t2) t = u(rng);
  std::sort(t1.begin(), t1.end());
  std::sort(t2.begin(), t2.end());
  const auto r = find_cross_coincidences(t1, t2, 50.0);
  std::size_t k = 0, out = 0;
  for (std::size_t i = 0; i < t1.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < t2.size(); ++j)
      if (std::abs(t1[i] - t2[j]) < std::abs(t1[i] - t2[best])) best = j;
    if (std::abs(t1[i] - t2[best]) > 50.0) {
      ++out;
      continue;
    }
    REQUIRE(k < r.pairs.size());
    CHECK(r.pairs[k].first == i);
    CHECK(r.pairs[k].second == best);
    CHECK(r.pairs[k].dt_ns == t1[i] - t2[best]);
    ++k;
  }
  CHECK(k == r.pairs.size());
  CHECK(out == r.out_of_window);
}

TEST_CASE("same-fiber pairs") {
  const auto p = find_same_fiber_pairs(std::vector<double>{100.0, 105.0, 400.0}, 50.0, PairKind::same_fiber1);
  REQUIRE(p.size() == 1);
  CHECK(p[0].dt_ns == doctest::Approx(5.0));
  CHECK(p[0].kind == PairKind::same_fiber1);
  CHECK(find_same_fiber_pairs(std::vector<double>{}, 50.0, PairKind::same_fiber2).empty());

  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1e4);
  std::vector<double> t(2000);
  for (auto& x : t) x = u(rng);
  std::sort(t.begin(), t.end());
  for (const auto& q : find_same_fiber_pairs(t, 250.0, PairKind::same_fiber2)) CHECK(q.dt_ns >= 0.0);
}

TEST_CASE("pair separation") {
  Photon a, b;
  CHECK(pair_separation(a, b) == 0.0);
  b.x = 3.0;
  b.y = 4.0;
  CHECK(pair_separation(a, b) == doctest::Approx(5.0));
}

TEST_CASE("wider spot gives a larger mean pair separation") {
  SensorConfig s;
  Rng rng(31);
  auto mean_separation = [&](double sigma) {
    double sum = 0.0;
    int n = 0;
    for (int i = 0; i < 3000; ++i) {
      const auto a = render_photon(rng, s, {128.0, 128.0, sigma}, 1000.0);
      const auto b = render_photon(rng, s, {128.0, 128.0, sigma}, 1000.0);
      if (a.hits.empty() || b.hits.empty()) continue;
      const auto pa = centroid(cluster_stream(a.hits).front(), CentroidParams{});
      const auto pb = centroid(cluster_stream(b.hits).front(), CentroidParams{});
      sum += pair_separation(pa, pb);
      ++n;
    }
    return sum / n;
  };
  const double narrow = mean_separation(9.0), wide = mean_separation(11.0);
  CHECK(wide > narrow);
  // Mean distance between two Gaussian draws is sigma * sqrt(pi).
  CHECK(narrow == doctest::Approx(9.0 * std::sqrt(M_PI)).epsilon(0.1));
}

TEST_CASE("true pairs only: cross peak core width") {
  auto cfg = ExperimentConfig::defaults();
  cfg.scan = ScanPlan::linear(1.0, 0.001, 1, 40.0);
  cfg.sensor.dcr_rate_hz = 0.0;
  cfg.sensor.hot_pixel_rate_hz = 0.0;
  cfg.sensor.afterpulse_prob = 0.0;
  const auto sim = simulate_scan(cfg, 11, SimulationOptions{.collect_truth = false, .tag_hits = false});
  PhotonReconstructor recon(cfg);
  recon.push(sim.hits);
  recon.flush();
  const auto pairs = find_pairs(recon.photons(), cfg);
  auto h = CoincidenceHistogram::uniform(-250.0, 250.0, 2.5, PairKind::cross);
  for (const auto& p : pairs.pairs)
    if (p.kind == PairKind::cross) h.fill(p.dt_ns);
  const auto fit = fit_double_gaussian(h);
  CHECK(fit.sigma1 == doctest::Approx(7.3).epsilon(0.05));
  CHECK(fit.frac1 == doctest::Approx(0.75).epsilon(0.05));
}

TEST_CASE("bunched pairs at the dip centre split evenly between fibers") {
  auto cfg = ExperimentConfig::defaults();
  cfg.dip.visibility = 1.0;
  cfg.scan = ScanPlan::linear(cfg.dip.d0_mm, 0.001, 1, 20.0);
  // Equal spots so the two fibers are exchangeable.
  cfg.spots[1].sigma_px = cfg.spots[0].sigma_px = 10.0;
  const auto sim = simulate_scan(cfg, 19, SimulationOptions{.collect_truth = false, .tag_hits = false});
  PhotonReconstructor recon(cfg);
  recon.push(sim.hits);
  recon.flush();
  const auto pairs = find_pairs(recon.photons(), cfg);
  double n1 = 0.0, n2 = 0.0;
  for (const auto& p : pairs.pairs) {
    if (p.dt_ns > 25.0) continue;
    n1 += p.kind == PairKind::same_fiber1;
    n2 += p.kind == PairKind::same_fiber2;
  }
  REQUIRE(n1 + n2 > 5000);
  CHECK(std::abs(n1 - n2) < 3.0 * std::sqrt(n1 + n2));
}
