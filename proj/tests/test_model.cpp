#include <doctest.h>

#include <cmath>
#include <random>

#include "hompix/error.hpp"
#include "hompix/model.hpp"

using namespace hompix;

TEST_CASE("kernel is one at zero offset") {
  for (double w : {0.001, 0.0082, 0.05}) CHECK(hom_kernel(0.0, w) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("kernel decays far from the centre") {
  CHECK(std::abs(hom_kernel(10.0 * 0.0082, 0.0082)) < 0.05);
  // Tight-step quadrature oracle agrees at the same point.
  CHECK(std::abs(hom_kernel(10.0 * 0.0082, 0.0082, 0.001)) < 0.05);
}

TEST_CASE("kernel half maximum sits at plus and minus fwhm/2") {
  for (double w : {0.005, 0.0082, 0.012}) {
    CHECK(hom_kernel(w / 2.0, w) == doctest::Approx(0.5).epsilon(0.02));
    CHECK(std::abs(hom_kernel(-w / 2.0, w) - 0.5) < 0.01);
    CHECK(std::abs(hom_kernel(w / 2.0, w) - 0.5) < 0.01);
  }
}

TEST_CASE("kernel half maximum located by independent bisection") {
  const double w = 0.0082;
  double lo = 0.0, hi = 2.0 * w;
  for (int i = 0; i < 60; ++i) {
    const double mid = 0.5 * (lo + hi);
    (hom_kernel(mid, w, 0.002) > 0.5 ? lo : hi) = mid;
  }
  CHECK(2.0 * lo == doctest::Approx(w).epsilon(0.01));
}

TEST_CASE("kernel symmetry, bounds and envelope decay") {
  const double w = 0.0082;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 20.0 * w);
  for (int i = 0; i < 200; ++i) {
    const double d = u(rng);
    const double f = hom_kernel(d, w);
    CHECK(f == doctest::Approx(hom_kernel(-d, w)).epsilon(1e-14));
    CHECK(std::abs(f) <= 1.0 + 1e-12);
  }
  double inner = 0.0, outer = 0.0;
  for (double k = 0.0; k < 1.0; k += 0.01) inner = std::max(inner, std::abs(hom_kernel(k * w, w)));
  for (double k = 5.01; k < 30.0; k += 0.05) outer = std::max(outer, std::abs(hom_kernel(k * w, w)));
  CHECK(outer < inner);
}

TEST_CASE("quadrature converges under step halving") {
  const double w = 0.0082;
  for (double k : {0.0, 0.1, 0.3, 0.5, 0.8, 1.0, 2.0, 4.0, 8.0, 16.0}) {
    const double a = hom_kernel(k * w, w, 0.004);
    const double b = hom_kernel(k * w, w, 0.002);
    CHECK(std::abs(a - b) < 1e-6);
  }
}

TEST_CASE("tabulated kernel matches the quadrature") {
  const auto& table = KernelTable::instance();
  for (double k = -30.0; k <= 30.0; k += 0.173) CHECK(std::abs(table(k * 0.0082, 0.0082) - hom_kernel(k * 0.0082, 0.0082)) < 2e-7);
}

TEST_CASE("unnormalized integral against 4 sqrt(pi) / 3") {
  CHECK(kernel_norm_integral() == doctest::Approx(4.0 * std::sqrt(M_PI) / 3.0).epsilon(1e-4));
}

TEST_CASE("kernel rejects a bad width") {
  CHECK_THROWS_AS(hom_kernel(0.0, 0.0), InvalidParameter);
  CHECK_THROWS_AS(hom_kernel(0.0, -1.0), InvalidParameter);
  CHECK_THROWS_AS(hom_kernel(0.0, std::nan("")), InvalidParameter);
  CHECK_THROWS_AS(hom_kernel(0.0, INFINITY), InvalidParameter);
}

TEST_CASE("coincidence rates: perfect overlap at the centre") {
  const auto r = coincidence_rates({0.5, 0.5}, {0.18, 0.0082, 1.0}, 0.18, 1000.0);
  CHECK(std::abs(r.n_cross) < 1e-9);
  CHECK(r.n_fib1 == doctest::Approx(500.0));
  CHECK(r.n_fib2 == doctest::Approx(500.0));
}

TEST_CASE("coincidence rates: far from the dip gives 1:1:2") {
  for (double v : {0.0, 0.42, 1.0}) {
    const auto r = coincidence_rates({0.5, 0.5}, {0.18, 0.0082, v}, 5.0, 1000.0);
    CHECK(r.n_cross == doctest::Approx(500.0).epsilon(1e-6));
    CHECK(r.n_fib1 == doctest::Approx(250.0).epsilon(1e-6));
    CHECK(r.n_fib2 == doctest::Approx(250.0).epsilon(1e-6));
  }
}

TEST_CASE("coincidence rates: partial visibility at the centre") {
  const auto r = coincidence_rates({0.5, 0.5}, {0.18, 0.0082, 0.42}, 0.18, 1000.0);
  CHECK(r.n_cross == doctest::Approx(290.0));
  CHECK(r.n_fib1 == doctest::Approx(355.0));
  CHECK(r.n_fib2 == doctest::Approx(355.0));
}

TEST_CASE("unitarity holds to 1e-12 for any splitter, visibility and delay") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 2000; ++i) {
    const double t2 = u(rng);
    const SplitterSpec s{t2, 1.0 - t2};
    const DipShape dip{0.18, 0.002 + 0.02 * u(rng), u(rng)};
    const double d = 0.1 + 0.16 * u(rng);
    const double n = 1.0 + 1e6 * u(rng);
    const auto r = coincidence_rates(s, dip, d, n);
    CHECK(std::abs(r.total() - n) <= 1e-12 * n * 4);
  }
}

TEST_CASE("dip depth at the centre equals the visibility") {
  for (double v : {0.1, 0.42, 0.9}) {
    const DipShape dip{0.18, 0.0082, v};
    const double far = 0.5;  // T^4 + R^4
    const double centre = coincidence_rates({0.5, 0.5}, dip, 0.18, 1.0).n_cross;
    CHECK(1.0 - centre / far == doctest::Approx(v).epsilon(1e-12));
  }
}

TEST_CASE("invalid splitter and dip are rejected") {
  CHECK_THROWS_AS(coincidence_rates({0.6, 0.5}, {}, 0.18, 1.0), InvalidParameter);
  CHECK_THROWS_AS(coincidence_rates({-0.1, 1.1}, {}, 0.18, 1.0), InvalidParameter);
  CHECK_NOTHROW(SplitterSpec{0.5, 0.5}.validate());
  CHECK_THROWS_AS((DipShape{0.18, 0.0, 0.4}.validate()), InvalidParameter);
  CHECK_THROWS_AS((DipShape{0.18, 0.0082, 1.2}.validate()), InvalidParameter);
  CHECK_THROWS_AS(coincidence_rates({0.5, 0.5}, {}, 0.18, -1.0), InvalidParameter);
}

TEST_CASE("dip width from the SPDC bandwidth") {
  // dw = dl * wp^2 / (8 pi c) with wp = 2 pi c / lp, FWHM = sqrt(2 pi ln 2) c / dw.
  const double c = kSpeedOfLight_m_per_s;
  const double lp = 405e-9, dl = 40e-9;
  const double wp = 2.0 * M_PI * c / lp;
  const double dw = dl * wp * wp / (8.0 * M_PI * c);
  const double expect_m = std::sqrt(2.0 * M_PI * std::log(2.0)) * c / dw;

  const auto r = fwhm_from_bandwidth({405.0, 40.0});
  CHECK(r.fwhm_mm == doctest::Approx(expect_m * 1e3).epsilon(1e-12));
  CHECK(r.fwhm_mm * 1e3 == doctest::Approx(5.4).epsilon(0.02));
  CHECK(r.fwhm_fs == doctest::Approx(18.0).epsilon(0.02));

  const auto doubled = fwhm_from_bandwidth({405.0, 80.0});
  CHECK(doubled.fwhm_mm == doctest::Approx(r.fwhm_mm / 2.0).epsilon(1e-12));

  const double inv = bandwidth_from_fwhm(405.0, 0.0082);
  CHECK(inv == doctest::Approx(27.0).epsilon(0.03));
  CHECK(fwhm_from_bandwidth({405.0, inv}).fwhm_mm == doctest::Approx(0.0082).epsilon(1e-12));

  CHECK_THROWS_AS(fwhm_from_bandwidth({405.0, 0.0}), InvalidParameter);
}

TEST_CASE("length to time conversion") {
  CHECK(mm_to_fs(0.0082) == doctest::Approx(27.35).epsilon(0.001));
}
