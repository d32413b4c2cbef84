// hompix: simulate, reconstruct and analyze photon-counting HOM delay scans.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hompix/error.hpp"
#include "hompix/io.hpp"
#include "hompix/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hompix;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

/// Missing input files and bad arguments: reported with exit code 1.
class UsageError : public Error {
public:
  using Error::Error;
};

struct Common {
  std::string config_path;
  std::uint64_t seed = 1;
  std::string out_dir = ".";
  std::string format = "csv";
  bool stamp = false;
};

void add_common(CLI::App* cmd, Common& c, bool seed = true) {
  cmd->add_option("--config", c.config_path, "experiment configuration (JSON); defaults when omitted");
  if (seed) cmd->add_option("--seed", c.seed, "random seed");
  cmd->add_option("--out", c.out_dir, "output directory");
  cmd->add_option("--format", c.format, "table format")->check(CLI::IsMember({"csv", "json"}));
  cmd->add_flag("--stamp", c.stamp, "record wall-clock times in manifest.json");
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("missing required input: ") + what);
  if (!fs::is_regular_file(path)) throw UsageError(std::string(what) + " not found: " + path);
}

ExperimentConfig load_config(const Common& c) {
  if (c.config_path.empty()) return ExperimentConfig::defaults();
  require_file(c.config_path, "--config");
  return read_config(c.config_path);
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class Run {
public:
  Run(std::string command, const Common& c, const ExperimentConfig& config)
      : out_(c.out_dir), stamp_(c.stamp) {
    fs::create_directories(out_);
    manifest_.command = std::move(command);
    manifest_.tool_version = kToolVersion;
    manifest_.config_sha256 = sha256_hex(canonical_config(config));
    manifest_.seed = c.seed;
    if (stamp_) manifest_.started_utc = utc_now();
  }

  fs::path path(const std::string& name) const { return out_ / name; }
  void input(const std::string& p) { manifest_.inputs.push_back(describe_file(p, out_)); }
  void output(const std::string& name) { manifest_.outputs.push_back(describe_file(path(name), out_)); }

  void text(const std::string& name, const std::string& content) {
    write_text(path(name), content);
    output(name);
  }

  void finish() {
    if (stamp_) manifest_.finished_utc = utc_now();
    write_text(path("manifest.json"), manifest_to_json(manifest_).dump(2) + "\n");
  }

private:
  fs::path out_;
  bool stamp_;
  RunManifest manifest_;
};

json photons_json(std::span<const Photon> photons) {
  json a = json::array();
  for (const auto& p : photons)
    a.push_back({{"t_ns", p.t_ns},
                 {"t_raw_ns", p.t_raw_ns},
                 {"x_px", p.x},
                 {"y_px", p.y},
                 {"tot_max_ticks", p.tot_max},
                 {"n_pixels", p.n_pixels},
                 {"region", to_string(p.region)},
                 {"unweighted", p.unweighted}});
  return a;
}

json pairs_json(std::span<const ScanPair> pairs) {
  json a = json::array();
  for (const auto& p : pairs) a.push_back({{"kind", to_string(p.kind)}, {"dt_ns", p.dt_ns}, {"position", p.position}});
  return a;
}

void write_photons(Run& run, const Common& c, std::span<const Photon> photons) {
  if (c.format == "json") {
    run.text("photons.json", photons_json(photons).dump() + "\n");
  } else {
    std::ostringstream os;
    write_photons_csv(os, photons);
    run.text("photons.csv", os.str());
  }
}

void write_pairs(Run& run, const Common& c, std::span<const ScanPair> pairs) {
  if (c.format == "json") {
    run.text("pairs.json", pairs_json(pairs).dump() + "\n");
  } else {
    std::ostringstream os;
    write_pairs_csv(os, pairs);
    run.text("pairs.csv", os.str());
  }
}

void write_analysis(Run& run, const AnalysisResult& r, const ExperimentConfig& config, std::uint64_t seed,
                    const ReconCounters* recon, const SimulationCounters* sim) {
  std::ostringstream curve;
  write_dip_curve_csv(curve, r.raw_curve, r.corrected_curve, r.dip ? &*r.dip : nullptr);
  run.text("dip_curve.csv", curve.str());
  if (r.dip && !config.scan.positions_mm.empty()) {
    const auto [lo, hi] = std::minmax_element(config.scan.positions_mm.begin(), config.scan.positions_mm.end());
    std::ostringstream model;
    write_dip_model_csv(model, *r.dip, *lo, *hi, 1001);
    run.text("dip_model.csv", model.str());
  }
  run.text("results.json", results_to_json(r, config, seed, recon, sim).dump(2) + "\n");
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
}

json counters_json(const SimulationCounters& s) {
  return {{"pairs", s.pairs},
          {"outcome_split", s.outcome_split},
          {"outcome_fiber1", s.outcome_fiber1},
          {"outcome_fiber2", s.outcome_fiber2},
          {"photons_detected", s.photons_detected},
          {"photons_off_grid", s.photons_off_grid},
          {"dark_photons", s.dark_photons},
          {"afterpulses", s.afterpulses},
          {"hits_rendered", s.hits_rendered},
          {"hits_deadtime", s.hits_deadtime},
          {"hits_masked", s.hits_masked},
          {"hits_emitted", s.hits_emitted}};
}

// --- Commands ---------------------------------------------------------------

int cmd_simulate(const Common& c, bool truth) {
  const auto config = load_config(c);
  Run run("simulate", c, config);
  HitFileWriter writer(run.path("hits.bin"));
  SimulationOptions opt{.collect_truth = truth, .tag_hits = false};
  const auto summary = simulate_scan(
      config, c.seed, [&](std::span<const PixelHit> hits, std::span<const std::uint64_t>) { writer.write(hits); },
      opt);
  writer.close();
  run.output("hits.bin");
  if (truth) {
    std::ostringstream os;
    write_truth_csv(os, summary.truth);
    run.text("truth.csv", os.str());
  }
  run.text("simulation.json", json{{"seed", c.seed}, {"counters", counters_json(summary.counters)}}.dump(2) + "\n");
  run.finish();
  std::cerr << "simulated " << summary.counters.hits_emitted << " hits from " << summary.counters.pairs
            << " pairs\n";
  return kExitOk;
}

int cmd_recon(const Common& c, const std::string& hits_path) {
  require_file(hits_path, "--hits");
  const auto config = load_config(c);
  Run run("recon", c, config);
  run.input(hits_path);
  PhotonReconstructor recon(config);
  HitFileReader reader(hits_path);
  std::vector<PixelHit> chunk;
  while (reader.next(chunk)) recon.push(chunk);
  recon.flush();
  write_photons(run, c, recon.photons());
  const auto& k = recon.counters();
  run.text("recon.json", json{{"hits", k.hits},
                              {"clusters", k.clusters},
                              {"photons_fib1", k.photons_fib1},
                              {"photons_fib2", k.photons_fib2},
                              {"photons_outside", k.photons_outside},
                              {"unweighted_centroids", k.unweighted}}
                             .dump(2) +
                             "\n");
  run.finish();
  std::cerr << "reconstructed " << k.clusters << " photons from " << k.hits << " hits\n";
  return kExitOk;
}

std::vector<Photon> load_photons(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open " + path);
  return read_photons_csv(is);
}

int cmd_analyze(const Common& c, const std::string& photons_path, const std::string& pairs_path) {
  if (photons_path.empty() == pairs_path.empty())
    throw UsageError("analyze needs exactly one of --photons or --pairs");
  const auto config = load_config(c);
  config.validate();
  Run run("analyze", c, config);
  AnalysisOptions opt;
  opt.blend_seed = blend_seed_for(c.seed);
  PairSet pairs;
  if (!photons_path.empty()) {
    require_file(photons_path, "--photons");
    run.input(photons_path);
    pairs = find_pairs(load_photons(photons_path), config);
    write_pairs(run, c, pairs.pairs);
  } else {
    require_file(pairs_path, "--pairs");
    run.input(pairs_path);
    std::ifstream is(pairs_path);
    pairs.pairs = read_pairs_csv(is);
    pairs.singles.assign(config.scan.positions_mm.size(), {0, 0});
    for (const auto& p : pairs.pairs)
      if (p.position >= config.scan.positions_mm.size())
        throw UsageError("pair position " + std::to_string(p.position) + " outside the configured scan");
    opt.pairs_only = true;
  }
  const auto result = analyze_pairs(pairs, config, opt);
  write_analysis(run, result, config, c.seed, nullptr, nullptr);
  run.finish();
  return kExitOk;
}

int cmd_pipeline(const Common& c) {
  const auto config = load_config(c);
  config.validate();
  Run run("pipeline", c, config);
  HitFileWriter writer(run.path("hits.bin"));
  PipelineOptions opt;
  opt.hit_tap = [&](std::span<const PixelHit> hits) { writer.write(hits); };
  opt.keep_photons = true;
  auto result = run_pipeline(config, c.seed, opt);
  writer.close();
  run.output("hits.bin");
  write_photons(run, c, result.photons);
  write_pairs(run, c, result.pairs.pairs);
  write_analysis(run, result.analysis, config, c.seed, &result.recon, &result.simulation.counters);
  run.finish();
  if (result.analysis.dip) {
    const auto& d = *result.analysis.dip;
    std::cerr << "visibility " << d.visibility << " +- " << d.visibility_err << ", fwhm " << d.fwhm_mm * 1e3
              << " +- " << d.fwhm_err * 1e3 << " um\n";
  }
  return kExitOk;
}

int cmd_blend_study(const Common& c, std::vector<double> rates, double duration_s) {
  const auto config = load_config(c);
  config.validate();
  Run run("blend-study", c, config);
  const auto blend = blend_for_spots(config, blend_seed_for(c.seed));
  json j;
  j["blend"] = json::array();
  for (std::size_t i = 0; i < 2; ++i)
    j["blend"].push_back({{"fiber", i + 1},
                          {"spot_sigma_px", config.spots[i].sigma_px},
                          {"probability", blend[i].probability},
                          {"probability_err", blend[i].error},
                          {"trials", blend[i].trials}});
  j["rate_study"] = json::array();
  std::ostringstream csv;
  csv << "rate_hz,photons,clusters,efficiency,baseline_efficiency,pair_inefficiency\n";
  for (double rate : rates) {
    const auto r = deadtime_rate_study(config.sensor, config.spots[0], rate, duration_s, c.seed);
    j["rate_study"].push_back({{"rate_hz", r.rate_hz},
                               {"baseline_rate_hz", r.baseline_rate_hz},
                               {"photons", r.photons},
                               {"clusters", r.clusters},
                               {"efficiency", r.efficiency},
                               {"baseline_efficiency", r.baseline_efficiency},
                               {"pair_inefficiency", r.pair_inefficiency}});
    csv << format_double(r.rate_hz) << ',' << r.photons << ',' << r.clusters << ',' << format_double(r.efficiency)
        << ',' << format_double(r.baseline_efficiency) << ',' << format_double(r.pair_inefficiency) << '\n';
  }
  if (c.format == "csv") run.text("rate_study.csv", csv.str());
  run.text("blend_study.json", j.dump(2) + "\n");
  run.finish();
  for (std::size_t i = 0; i < 2; ++i)
    std::cout << "fiber " << i + 1 << " blend probability " << blend[i].probability << " +- " << blend[i].error
              << "\n";
  return kExitOk;
}

std::string fmt_pm(const json& obj, const char* value, const char* error, double scale = 1.0) {
  std::ostringstream os;
  os << obj.at(value).get<double>() * scale << " +- " << obj.at(error).get<double>() * scale;
  return os.str();
}

int cmd_report(const std::string& path, const std::string& format) {
  require_file(path, "results file");
  std::ifstream is(path);
  json r;
  try {
    r = json::parse(is);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("results.json: ") + e.what(), e.byte);
  }
  if (r.value("schema", "") != "hompix.results") throw FormatError("not a results document", 0);
  if (format == "json") {
    std::cout << r.dump(2) << "\n";
    return kExitOk;
  }
  if (format == "csv") {
    auto& o = std::cout;
    o << "quantity,value,error,unit\n";
    auto row = [&](const std::string& name, const json& obj, const char* value, const char* error, const char* unit) {
      o << name << "," << format_double(obj.at(value).get<double>()) << ","
        << (error ? format_double(obj.at(error).get<double>()) : "") << "," << unit << "\n";
    };
    const auto& cross = r.at("peaks").at("cross");
    row("cross_n_signal", cross, "n_signal", "n_signal_err", "pairs");
    row("cross_sigma1", cross, "sigma1_ns", "sigma1_err_ns", "ns");
    row("cross_sigma2", cross, "sigma2_ns", "sigma2_err_ns", "ns");
    row("cross_frac1", cross, "frac1", "frac1_err", "");
    if (const auto& d = r.at("dip_fit"); !d.is_null()) {
      row("visibility", d, "visibility", "visibility_err", "");
      row("fwhm", d, "fwhm_mm", "fwhm_err_mm", "mm");
      row("fwhm_time", d, "fwhm_fs", "fwhm_err_fs", "fs");
      row("d0", d, "d0_mm", "d0_err_mm", "mm");
    }
    if (const auto& q = r.at("ratio_test"); !q.is_null()) row("ratio_p_value", q, "p_value", nullptr, "");
    if (const auto& u = r.at("unitarity"); !u.is_null()) row("unitarity_chi2_per_ndf", u, "chi2_per_ndf", nullptr, "");
    if (const auto& a = r.at("afterpulse"); !a.is_null()) row("afterpulse_probability", a, "probability", "probability_err", "");
    for (const auto& b : r.at("blend"))
      row("blend_fiber" + std::to_string(b.at("fiber").get<int>()), b, "probability", "probability_err", "");
    return kExitOk;
  }
  auto& o = std::cout;
  o << "hompix results (schema " << r.value("schema_version", 0) << ", tool " << r.value("tool_version", "?")
    << ", seed " << r.value("seed", 0) << ")\n";
  const auto& cross = r.at("peaks").at("cross");
  o << "cross peak: N = " << fmt_pm(cross, "n_signal", "n_signal_err") << ", sigma1 = "
    << fmt_pm(cross, "sigma1_ns", "sigma1_err_ns") << " ns (" << fmt_pm(cross, "frac1", "frac1_err", 100.0)
    << " %), sigma2 = " << fmt_pm(cross, "sigma2_ns", "sigma2_err_ns") << " ns\n";
  if (const auto& d = r.at("dip_fit"); !d.is_null()) {
    o << "dip: V = " << fmt_pm(d, "visibility", "visibility_err") << ", FWHM = "
      << fmt_pm(d, "fwhm_mm", "fwhm_err_mm", 1e3) << " um (" << fmt_pm(d, "fwhm_fs", "fwhm_err_fs")
      << " fs), d0 = " << fmt_pm(d, "d0_mm", "d0_err_mm") << " mm, chi2/ndf = " << d.at("chi2").get<double>()
      << "/" << d.at("ndf").get<int>() << "\n";
  } else {
    o << "dip: not fitted\n";
  }
  if (const auto& q = r.at("ratio_test"); !q.is_null())
    o << "1:1:2 test: fib1 " << fmt_pm(q, "n_fib1", "n_fib1_err") << ", fib2 " << fmt_pm(q, "n_fib2", "n_fib2_err")
      << ", cross " << fmt_pm(q, "n_cross", "n_cross_err") << ", p = " << q.at("p_value").get<double>() << "\n";
  if (const auto& u = r.at("unitarity"); !u.is_null())
    o << "unitarity: chi2/ndf = " << u.at("chi2_per_ndf").get<double>() << ", p = " << u.at("p_value").get<double>()
      << "\n";
  if (const auto& a = r.at("afterpulse"); !a.is_null())
    o << "afterpulse probability: " << fmt_pm(a, "probability", "probability_err", 100.0) << " %\n";
  for (const auto& b : r.at("blend"))
    o << "blend probability: " << fmt_pm(b, "probability", "probability_err", 100.0) << " %\n";
  for (const auto& w : r.at("warnings")) o << "warning: " << w.get<std::string>() << "\n";
  return kExitOk;
}

int cmd_config(const Common& c, bool paper_scale) {
  auto config = c.config_path.empty() ? ExperimentConfig::defaults() : load_config(c);
  if (paper_scale) config.source.detection_eff = 0.118;
  config.validate();
  std::cout << config_to_json(config).dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hompix: photon-counting HOM delay-scan simulator and analysis"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  Common common;
  bool truth = false;
  std::string hits_path, photons_path, pairs_path, results_path;
  std::vector<double> rates{3e5, 1e6};
  double duration_s = 0.05;
  bool paper_scale = false;

  auto* simulate = app.add_subcommand("simulate", "generate a raw hit stream (hits.bin)");
  add_common(simulate, common);
  simulate->add_flag("--truth", truth, "also write truth.csv");

  auto* recon = app.add_subcommand("recon", "cluster and centroid a hit stream into photons");
  add_common(recon, common, false);
  recon->add_option("--hits", hits_path, "input hit stream");

  auto* analyze = app.add_subcommand("analyze", "coincidences, peak fits, dip fit and checks");
  add_common(analyze, common);
  analyze->add_option("--photons", photons_path, "reconstructed photons (CSV)");
  analyze->add_option("--pairs", pairs_path, "coincidence pairs (CSV); skips the afterpulse estimate");

  auto* pipeline = app.add_subcommand("pipeline", "simulate, reconstruct and analyze in one pass");
  add_common(pipeline, common);

  auto* blend = app.add_subcommand("blend-study", "blend probability per spot and dead-time rate study");
  add_common(blend, common);
  blend->add_option("--rate-hz", rates, "photon rates for the dead-time study");
  blend->add_option("--duration-s", duration_s, "simulated time per rate");

  auto* report = app.add_subcommand("report", "summarize a results.json");
  report->add_option("results", results_path, "results.json path");
  std::string report_format = "text";
  report->add_option("--format", report_format, "output format")->check(CLI::IsMember({"text", "csv", "json"}));

  auto* config = app.add_subcommand("config", "print the default (or a validated) configuration");
  config->add_option("--config", common.config_path, "configuration to validate and normalize");
  config->add_flag("--paper-scale", paper_scale, "detection efficiency giving about 82k cross pairs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*simulate) return cmd_simulate(common, truth);
    if (*recon) return cmd_recon(common, hits_path);
    if (*analyze) return cmd_analyze(common, photons_path, pairs_path);
    if (*pipeline) return cmd_pipeline(common);
    if (*blend) return cmd_blend_study(common, rates, duration_s);
    if (*report) return cmd_report(results_path, report_format);
    if (*config) return cmd_config(common, paper_scale);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}
