// Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include <json.hpp>

#include "hompix/io.hpp"
#include "hompix/model.hpp"
#include "hompix/recon.hpp"
#include "hompix/sensor.hpp"
#include "hompix/simulator.hpp"
#include "support.hpp"

using namespace hompix;
namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

void verdict(int n, const char* name, bool ok, const std::string& detail) {
  std::printf("criterion %2d %s  %s: %s\n", n, ok ? "PASS" : "FAIL", name, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(HOMPIX_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

json load(const fs::path& p) {
  std::ifstream is(p);
  return json::parse(is);
}

struct Workspace {
  fs::path root;
  Workspace() {
    root = fs::temp_directory_path() / ("hompix_acceptance_" + std::to_string(std::random_device{}()));
    fs::create_directories(root);
  }
  ~Workspace() { fs::remove_all(root); }
};

/// Runs `pipeline` on a configuration; returns the wall time or a negative value on failure.
double pipeline(const fs::path& config, std::uint64_t seed, const fs::path& out) {
  const auto t0 = Clock::now();
  const int code = cli("pipeline --config " + config.string() + " --seed " + std::to_string(seed) + " --out " +
                           out.string(),
                       out.string() + ".log");
  return code == 0 ? seconds_since(t0) : -1.0;
}

void dip_criteria(const json& r, double runtime_s) {
  const auto& d = r["dip_fit"];
  if (d.is_null()) {
    verdict(1, "HOM dip", false, "no dip fit in results.json");
  } else {
    const double v = d["visibility"], fwhm_um = d["fwhm_mm"].get<double>() * 1e3;
    const bool ok = std::abs(v - 0.42) <= 0.06 && std::abs(fwhm_um - 8.2) <= 0.15 * 8.2 && runtime_s < 300.0;
    verdict(1, "HOM dip", ok,
            fmt("V = %.4f +- %.4f (target 0.42 +- 0.06), FWHM = %.2f +- %.2f um (8.2 um +- 15%%), "
                "runtime %.0f s (< 300 s)",
                v, d["visibility_err"].get<double>(), fwhm_um, d["fwhm_err_mm"].get<double>() * 1e3, runtime_s));
  }

  const auto& q = r["ratio_test"];
  if (q.is_null()) {
    verdict(2, "1:1:2 proportion", false, "no ratio test in results.json");
  } else {
    const double p = q["p_value"];
    verdict(2, "1:1:2 proportion", p > 0.01,
            fmt("fib1 %.0f, fib2 %.0f, cross %.0f after afterpulse subtraction, chi2 p = %.3f (> 0.01)",
                q["n_fib1"].get<double>(), q["n_fib2"].get<double>(), q["n_cross"].get<double>(), p));
  }

  // Analytic totals over random splitters, dips and delays.
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double t2 = u(rng);
    const DipShape dip{0.18, 0.002 + 0.02 * u(rng), u(rng)};
    const double n = 1.0 + 1e7 * u(rng);
    const auto rates = coincidence_rates({t2, 1.0 - t2}, dip, 0.1 + 0.16 * u(rng), n);
    worst = std::max(worst, std::abs(rates.total() - n) / n);
  }
  const auto& un = r["unitarity"];
  if (un.is_null()) {
    verdict(3, "unitarity", false, "no unitarity report in results.json");
  } else {
    const double c = un["chi2_per_ndf"];
    verdict(3, "unitarity", c >= 0.5 && c <= 2.0 && worst <= 1e-12,
            fmt("simulated chi2/ndf = %.3f (in [0.5, 2]), analytic max relative deviation %.1e (<= 1e-12)", c,
                worst));
  }
}

void afterpulse_criterion(const json& r) {
  const auto& a = r["afterpulse"];
  if (a.is_null()) {
    verdict(4, "afterpulse estimator", false, "no afterpulse estimate in results.json");
  } else {
    const double p = a["probability"], e = a["probability_err"];
    verdict(4, "afterpulse estimator", std::abs(p - 0.0019) <= 3.0 * e,
            fmt("%.4f%% +- %.4f%% from %llu cross pairs (truth 0.19%%, within 3 sigma); companions fib1 %llu, fib2 %llu",
                100.0 * p, 100.0 * e, a["cross_pairs"].get<unsigned long long>(),
                a["companions_fib1"].get<unsigned long long>(), a["companions_fib2"].get<unsigned long long>()));
  }
}

void peak_shape_criterion(const json& r) {
  const auto& c = r["peaks"]["cross"];
  const double s1 = c["sigma1_ns"], s1e = c["sigma1_err_ns"];
  const double s2 = c["sigma2_ns"], s2e = c["sigma2_err_ns"];
  const double f1 = c["frac1"], f1e = c["frac1_err"];
  const bool ok = std::abs(s1 - 7.3) <= 2.0 * s1e && std::abs(s2 - 17.8) <= 2.0 * s2e && std::abs(f1 - 0.75) <= 2.0 * f1e;
  verdict(5, "dt peak shape", ok,
          fmt("sigma1 %.3f +- %.3f ns, sigma2 %.2f +- %.2f ns, frac1 %.3f +- %.3f "
              "(7.3 / 17.8 / 0.75 within 2 errors, %.0f cross pairs)",
              s1, s1e, s2, s2e, f1, f1e, c["n_signal"].get<double>()));
}

void kernel_criterion() {
  bool ok = true;
  double worst_sym = 0.0, worst_half = 0.0, worst_step = 0.0;
  for (double w : {0.005, 0.0082, 0.012}) {
    ok &= hom_kernel(0.0, w) == 1.0;
    worst_half = std::max({worst_half, std::abs(hom_kernel(w / 2, w) - 0.5) / 0.5, std::abs(hom_kernel(-w / 2, w) - 0.5) / 0.5});
    for (double k = 0.0; k < 20.0; k += 0.37) {
      worst_sym = std::max(worst_sym, std::abs(hom_kernel(k * w, w) - hom_kernel(-k * w, w)));
      worst_step = std::max(worst_step, std::abs(hom_kernel(k * w, w, 0.004) - hom_kernel(k * w, w, 0.002)));
    }
  }
  ok &= worst_sym == 0.0 && worst_half <= 0.01 && worst_step < 1e-6;
  verdict(6, "kernel", ok,
          fmt("f(0) = 1, max |f(d) - f(-d)| = %.1e, half max off by %.2f%% (<= 1%%), step halving %.1e (< 1e-6)",
              worst_sym, 100.0 * worst_half, worst_step));
}

void clustering_criterion() {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::size_t> size(1, 1000);
  std::uniform_int_distribution<int> area(3, 32);
  std::uniform_int_distribution<std::uint64_t> span(10, 4000);
  int oracle_mismatch = 0, parallel_mismatch = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto hits = testsupport::random_hits(rng, size(rng), area(rng), span(rng));
    const auto seq = cluster_labels(hits);
    oracle_mismatch += seq != testsupport::brute_force_labels(hits, kClusterWindowTicks);
    parallel_mismatch += cluster_labels_parallel(hits, 2 + trial % 7) != seq;
  }
  verdict(7, "clustering oracle", oracle_mismatch == 0 && parallel_mismatch == 0,
          fmt("1000 random streams: %d differ from brute force, %d parallel runs differ from sequential",
              oracle_mismatch, parallel_mismatch));
}

void blend_criterion() {
  const auto cfg = ExperimentConfig::defaults();
  const SpotSpec spot{128.0, 128.0, 15.0 / (2.0 * std::sqrt(2.0 * std::log(2.0)))};
  const auto b = estimate_blend_probability(cfg.sensor, spot, 200000, 8);
  const auto r = deadtime_rate_study(cfg.sensor, cfg.spots[0], 1e6, 0.05, 8);
  const bool ok = b.probability >= 0.07 && b.probability <= 0.13 && std::abs(r.pair_inefficiency - 0.05) <= 0.02;
  verdict(8, "blending", ok,
          fmt("15 px spot blend %.2f%% +- %.2f%% (in [7, 13]%%), pair inefficiency at 1e6 photons/s %.2f%% (5 +- 2%%)",
              100.0 * b.probability, 100.0 * b.error, 100.0 * r.pair_inefficiency));
}

void throughput_criterion(const fs::path& dir) {
  constexpr std::uint64_t kHits = 10000000;
  auto cfg = ExperimentConfig::defaults();
  cfg.scan = ScanPlan::linear(0.03, 0.0015, 40, 6.0);
  const auto file = dir / "bench_hits.bin";
  {
    HitFileWriter writer(file);
    simulate_scan(cfg, 9,
                  [&](std::span<const PixelHit> hits, std::span<const std::uint64_t>) {
                    const auto room = kHits - writer.records();
                    writer.write(hits.first(std::min<std::uint64_t>(room, hits.size())));
                  },
                  SimulationOptions{.collect_truth = false, .tag_hits = false});
    writer.close();
  }

  std::uint64_t clusters = 0, hits = 0;
  const auto t0 = Clock::now();
  {
    HitFileReader reader(file);
    StreamClusterer sc(ClusterParams{}, [&](Cluster&&) { ++clusters; });
    std::vector<PixelHit> chunk;
    while (reader.next(chunk)) {
      sc.push(chunk);
      hits += chunk.size();
    }
    sc.flush();
  }
  const double rate = static_cast<double>(hits) / seconds_since(t0);
  fs::remove(file);
  verdict(9, "throughput", hits == kHits && rate >= 1e6,
          fmt("%llu hits read and clustered into %llu clusters at %.2e hits/s single-threaded (>= 1e6)",
              static_cast<unsigned long long>(hits), static_cast<unsigned long long>(clusters), rate));
}

void determinism_criterion(const fs::path& a, const fs::path& b) {
  std::size_t files = 0, differ = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    const auto other = b / e.path().filename();
    differ += !fs::exists(other) || sha256_file(e.path()) != sha256_file(other);
  }
  std::size_t files_b = 0;
  for (const auto& e : fs::directory_iterator(b)) files_b += e.is_regular_file();
  verdict(10, "determinism", files > 0 && differ == 0 && files == files_b,
          fmt("two pipeline runs of the default configuration with seed 1: %zu files, %zu differ", files, differ));
}

}  // namespace

int main() {
  Workspace ws;
  const fs::path config_dir = fs::path(HOMPIX_SOURCE_DIR) / "config";

  const auto run_a = ws.root / "default_a";
  const double runtime = pipeline(config_dir / "default.json", 1, run_a);
  if (runtime < 0.0) {
    for (int n : {1, 2, 3}) verdict(n, "default pipeline", false, "pipeline run failed");
  } else {
    dip_criteria(load(run_a / "results.json"), runtime);
  }

  const auto paper = ws.root / "paper";
  if (pipeline(config_dir / "paper_scale.json", 1, paper) < 0.0) {
    verdict(4, "afterpulse estimator", false, "paper-scale pipeline run failed");
  } else {
    afterpulse_criterion(load(paper / "results.json"));
  }
  if (runtime < 0.0) verdict(5, "dt peak shape", false, "pipeline run failed");
  else peak_shape_criterion(load(run_a / "results.json"));
  fs::remove_all(paper);

  kernel_criterion();
  clustering_criterion();
  blend_criterion();
  throughput_criterion(ws.root);

  const auto run_b = ws.root / "default_b";
  if (runtime < 0.0 || pipeline(config_dir / "default.json", 1, run_b) < 0.0)
    verdict(10, "determinism", false, "pipeline run failed");
  else
    determinism_criterion(run_a, run_b);

  std::printf("%s: %d of 10 criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
