#include "hompix/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "hompix/error.hpp"
#include "hompix/io.hpp"

namespace hompix {

using nlohmann::json;

TimewalkParams walk_params(const ExperimentConfig& config) {
  if (config.analysis.walk_override) return {config.analysis.walk_w0_ns2, config.analysis.walk_w1_ns};
  return {config.sensor.walk_w0_ns2, config.sensor.walk_w1_ns};
}

PhotonReconstructor::PhotonReconstructor(const ExperimentConfig& config)
    : centroid_{walk_params(config), config.sensor.toa_lsb_ns, config.sensor.tot_lsb_ns},
      regions_(config.analysis.regions),
      clusterer_(ClusterParams{config.sensor.grid_size, config.sensor.cluster_window_ticks()},
                 [this](Cluster&& c) {
                   ++counters_.clusters;
                   Photon p = centroid(c, centroid_);
                   p.region = assign_region(p, regions_);
                   counters_.unweighted += p.unweighted;
                   switch (p.region) {
                     case RegionTag::fiber1: ++counters_.photons_fib1; break;
                     case RegionTag::fiber2: ++counters_.photons_fib2; break;
                     case RegionTag::outside: ++counters_.photons_outside; break;
                   }
                   photons_.push_back(p);
                 }) {}

void PhotonReconstructor::push(std::span<const PixelHit> hits) {
  counters_.hits += hits.size();
  clusterer_.push(hits);
}

void PhotonReconstructor::flush() { clusterer_.flush(); }

PairSet find_pairs(std::span<const Photon> photons, const ExperimentConfig& config) {
  const auto& a = config.analysis;
  const auto& plan = config.scan;
  PairSet out;
  const auto regions = split_by_region(photons);
  out.t1 = photon_times(regions.fiber1);
  out.t2 = photon_times(regions.fiber2);
  out.singles.assign(plan.positions_mm.size(), {0, 0});
  for (int k = 0; k < 2; ++k)
    for (double t : k == 0 ? out.t1 : out.t2) {
      const long pos = plan.index_at(t);
      if (pos >= 0) ++out.singles[static_cast<std::size_t>(pos)][k];
    }

  auto cross = find_cross_coincidences(out.t1, out.t2, a.coincidence_window_ns);
  out.cross_out_of_window = cross.out_of_window;
  out.cross = std::move(cross.pairs);
  for (const auto& p : out.cross) {
    const long pos = plan.index_at(std::min(out.t1[p.first], out.t2[p.second]));
    if (pos >= 0) out.pairs.push_back({PairKind::cross, p.dt_ns, static_cast<std::uint32_t>(pos)});
  }
  for (int k = 0; k < 2; ++k) {
    const auto& t = k == 0 ? out.t1 : out.t2;
    const auto& ph = k == 0 ? regions.fiber1 : regions.fiber2;
    const auto kind = k == 0 ? PairKind::same_fiber1 : PairKind::same_fiber2;
    for (const auto& p : find_same_fiber_pairs(t, a.coincidence_window_ns, kind)) {
      const long pos = plan.index_at(t[p.first]);
      if (pos >= 0) out.pairs.push_back({kind, p.dt_ns, static_cast<std::uint32_t>(pos)});
      if (p.dt_ns < a.pair_separation_max_dt_ns)
        out.close_pair_separation_px.push_back(pair_separation(ph[p.first], ph[p.second]));
    }
  }
  return out;
}

std::array<BlendEstimate, 2> blend_for_spots(const ExperimentConfig& config, std::uint64_t seed) {
  std::array<BlendEstimate, 2> out{};
  const auto trials = static_cast<std::uint64_t>(std::max(0, config.analysis.blend_trials));
  if (trials == 0) return out;
  for (std::size_t i = 0; i < 2; ++i)
    out[i] = estimate_blend_probability(config.sensor, config.spots[i], trials, seed + 1000003ULL * (i + 1));
  return out;
}

AnalysisResult analyze_pairs(const PairSet& ps, const ExperimentConfig& config, const AnalysisOptions& options) {
  const auto& a = config.analysis;
  AnalysisResult res;
  res.cross_out_of_window = ps.cross_out_of_window;

  const double w = a.coincidence_window_ns;
  res.histograms[0] = CoincidenceHistogram::uniform(-w, w, a.hist_bin_ns, PairKind::cross);
  res.histograms[1] = CoincidenceHistogram::uniform(0.0, w, a.hist_bin_ns, PairKind::same_fiber1);
  res.histograms[2] = CoincidenceHistogram::uniform(0.0, w, a.hist_bin_ns, PairKind::same_fiber2);
  for (const auto& p : ps.pairs) {
    res.histograms[static_cast<std::size_t>(p.kind)].fill(p.dt_ns);
    res.cross_pairs_in_window += p.kind == PairKind::cross;
  }
  for (std::size_t k = 0; k < 3; ++k) {
    DoubleGaussianOptions opt;
    opt.statistic = a.histogram_statistic;
    opt.folded = k != 0;
    res.peak_fits[k] = fit_double_gaussian(res.histograms[k], opt);
  }
  const HistogramShapes shapes{res.peak_fits[0].shape(), res.peak_fits[1].shape(), res.peak_fits[2].shape()};
  res.raw_curve = bin_by_delay(ps.pairs, config.scan, ps.singles, a, &shapes);
  for (const auto& b : res.raw_curve.bins)
    if (!b.valid) res.warnings.push_back("delay bin " + std::to_string(b.first_position) + " excluded: " + b.flag);

  if (!options.pairs_only) {
    AfterpulseOptions ao;
    ao.window_ns = a.afterpulse_window_ns;
    ao.sideband_lo_ns = a.afterpulse_sideband_lo_ns;
    ao.sideband_hi_ns = a.afterpulse_sideband_hi_ns;
    ao.peak_cut_sigmas = a.peak_cut_sigmas;
    try {
      res.afterpulse = estimate_afterpulse_probability(ps.cross, ps.t1, ps.t2, shapes.cross, ao);
    } catch (const InvalidParameter& e) {
      res.warnings.push_back(std::string("afterpulse estimate unavailable: ") + e.what());
    }
  } else {
    res.warnings.push_back("afterpulse estimate skipped: photon lists not available");
  }

  res.blend = options.blend ? *options.blend : blend_for_spots(config, options.blend_seed);
  if (res.afterpulse) {
    res.corrections.afterpulse_prob = std::max(0.0, res.afterpulse->probability);
    res.corrections.afterpulse_err = res.afterpulse->error;
  }
  for (std::size_t i = 0; i < 2; ++i) {
    res.corrections.blend[i] = res.blend[i].probability;
    res.corrections.blend_err[i] = res.blend[i].error;
  }
  res.corrected_curve = apply_corrections(res.raw_curve, res.corrections);

  try {
    DipFitOptions fo;
    fo.fit_t2 = a.fit_t2;
    fo.t2 = config.splitter.t2;
    res.dip = fit_dip_curves(res.corrected_curve, fo);
    if (res.dip->fwhm_at_bound) res.warnings.push_back("dip fit: fwhm pinned at a bound");
  } catch (const FitFailure& e) {
    res.warnings.push_back(std::string(e.what()) + "; " + e.diagnostics());
  } catch (const InvalidParameter& e) {
    res.warnings.push_back(std::string("dip fit skipped: ") + e.what());
  }
  if (res.dip) {
    try {
      res.ratios = correct_and_check_ratios(res.raw_curve, res.corrections, res.dip->d0_mm, res.dip->fwhm_mm,
                                            a.off_dip_fwhms, res.dip->t2);
    } catch (const InvalidParameter& e) {
      res.warnings.push_back(std::string("ratio test skipped: ") + e.what());
    }
  }
  try {
    res.unitarity = unitarity_sum(res.corrected_curve);
  } catch (const InvalidParameter& e) {
    res.warnings.push_back(std::string("unitarity test skipped: ") + e.what());
  }
  return res;
}

PipelineResult run_pipeline(const ExperimentConfig& config, std::uint64_t seed, const PipelineOptions& options) {
  config.validate();
  PipelineResult out;
  PhotonReconstructor recon(config);
  out.simulation = simulate_scan(
      config, seed,
      [&](std::span<const PixelHit> hits, std::span<const std::uint64_t>) {
        if (options.hit_tap) options.hit_tap(hits);
        recon.push(hits);
      },
      options.simulation);
  recon.flush();
  out.recon = recon.counters();
  auto photons = recon.take_photons();
  out.pairs = find_pairs(photons, config);
  if (options.keep_photons) out.photons = std::move(photons);
  else std::vector<Photon>().swap(photons);
  auto ao = options.analysis;
  ao.blend_seed = blend_seed_for(seed);
  out.analysis = analyze_pairs(out.pairs, config, ao);
  return out;
}

namespace {

json peak_json(const DoubleGaussianFit& f) {
  return {{"n_signal", f.n_signal},
          {"n_signal_err", f.n_signal_err},
          {"mu_ns", f.mu},
          {"mu_err_ns", f.mu_err},
          {"sigma1_ns", f.sigma1},
          {"sigma1_err_ns", f.sigma1_err},
          {"sigma2_ns", f.sigma2},
          {"sigma2_err_ns", f.sigma2_err},
          {"frac1", f.frac1},
          {"frac1_err", f.frac1_err},
          {"background_per_bin", f.background_per_bin},
          {"background_per_bin_err", f.background_err},
          {"chi2", f.chi2},
          {"ndf", f.ndf},
          {"folded", f.folded}};
}

}  // namespace

json results_to_json(const AnalysisResult& r, const ExperimentConfig& config, std::uint64_t seed,
                     const ReconCounters* recon, const SimulationCounters* sim) {
  json j;
  j["schema"] = "hompix.results";
  j["schema_version"] = kResultsSchemaVersion;
  j["tool_version"] = kToolVersion;
  j["seed"] = seed;
  j["config_sha256"] = sha256_hex(canonical_config(config));
  j["peaks"] = {{"cross", peak_json(r.peak_fits[0])},
                {"fiber1", peak_json(r.peak_fits[1])},
                {"fiber2", peak_json(r.peak_fits[2])}};
  std::size_t valid = 0;
  for (const auto& b : r.raw_curve.bins) valid += b.valid;
  j["delay_bins"] = {{"total", r.raw_curve.bins.size()}, {"valid", valid}};
  j["coincidences"] = {{"cross_in_window", r.cross_pairs_in_window},
                       {"cross_out_of_window", r.cross_out_of_window}};
  if (r.dip) {
    const auto& d = *r.dip;
    j["dip_fit"] = {{"d0_mm", d.d0_mm},
                    {"d0_err_mm", d.d0_err},
                    {"fwhm_mm", d.fwhm_mm},
                    {"fwhm_err_mm", d.fwhm_err},
                    {"fwhm_fs", mm_to_fs(d.fwhm_mm)},
                    {"fwhm_err_fs", mm_to_fs(d.fwhm_err)},
                    {"visibility", d.visibility},
                    {"visibility_err", d.visibility_err},
                    {"n_far", d.n_far},
                    {"n_far_err", d.n_far_err},
                    {"norm_fib1", d.norm_fib1},
                    {"norm_fib1_err", d.norm_fib1_err},
                    {"norm_fib2", d.norm_fib2},
                    {"norm_fib2_err", d.norm_fib2_err},
                    {"t2", d.t2},
                    {"t2_err", d.t2_err},
                    {"t2_fitted", d.t2_fitted},
                    {"chi2", d.chi2},
                    {"ndf", d.ndf},
                    {"fwhm_at_bound", d.fwhm_at_bound}};
  } else {
    j["dip_fit"] = nullptr;
  }
  if (r.ratios) {
    const auto& q = *r.ratios;
    j["ratio_test"] = {{"bins_used", q.bins_used},
                       {"n_cross", q.cross},
                       {"n_cross_err", q.cross_err},
                       {"n_fib1", q.fib1},
                       {"n_fib1_err", q.fib1_err},
                       {"n_fib2", q.fib2},
                       {"n_fib2_err", q.fib2_err},
                       {"afterpulse_subtracted_fib1", q.afterpulse_fib1},
                       {"afterpulse_subtracted_fib2", q.afterpulse_fib2},
                       {"afterpulse_subtracted_cross", q.afterpulse_cross},
                       {"expected_fib_over_cross", q.expected_fib_over_cross},
                       {"chi2", q.chi2},
                       {"ndf", q.ndf},
                       {"p_value", q.p_value}};
  } else {
    j["ratio_test"] = nullptr;
  }
  if (r.unitarity) {
    const auto& u = *r.unitarity;
    j["unitarity"] = {{"mean_total", u.mean},
                      {"mean_total_err", u.mean_err},
                      {"chi2", u.chi2},
                      {"ndf", u.ndf},
                      {"chi2_per_ndf", u.chi2_per_ndf()},
                      {"p_value", u.p_value()}};
  } else {
    j["unitarity"] = nullptr;
  }
  if (r.afterpulse) {
    const auto& a = *r.afterpulse;
    j["afterpulse"] = {{"probability", a.probability},
                       {"probability_err", a.error},
                       {"cross_pairs", a.cross_pairs},
                       {"photons", a.photons},
                       {"companions_fib1", a.companions_fib1},
                       {"companions_fib2", a.companions_fib2},
                       {"accidentals", a.accidentals}};
  } else {
    j["afterpulse"] = nullptr;
  }
  j["blend"] = json::array();
  for (std::size_t i = 0; i < r.blend.size(); ++i)
    j["blend"].push_back({{"fiber", i + 1},
                          {"probability", r.blend[i].probability},
                          {"probability_err", r.blend[i].error},
                          {"trials", r.blend[i].trials}});
  if (recon)
    j["reconstruction"] = {{"hits", recon->hits},
                           {"clusters", recon->clusters},
                           {"photons_fib1", recon->photons_fib1},
                           {"photons_fib2", recon->photons_fib2},
                           {"photons_outside", recon->photons_outside},
                           {"unweighted_centroids", recon->unweighted}};
  if (sim)
    j["simulation"] = {{"pairs", sim->pairs},
                       {"outcome_split", sim->outcome_split},
                       {"outcome_fiber1", sim->outcome_fiber1},
                       {"outcome_fiber2", sim->outcome_fiber2},
                       {"photons_detected", sim->photons_detected},
                       {"photons_off_grid", sim->photons_off_grid},
                       {"dark_photons", sim->dark_photons},
                       {"afterpulses", sim->afterpulses},
                       {"hits_rendered", sim->hits_rendered},
                       {"hits_deadtime", sim->hits_deadtime},
                       {"hits_masked", sim->hits_masked},
                       {"hits_emitted", sim->hits_emitted}};
  j["warnings"] = r.warnings;
  return j;
}

}  // namespace hompix
