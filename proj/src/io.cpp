#include "hompix/io.hpp"

#include <openssl/evp.h>

#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <istream>
#include <memory>
#include <ostream>
#include <sstream>

#include "hompix/error.hpp"

namespace hompix {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'P', 'H', 'C', '1'};

template <class T>
void put_le(unsigned char* p, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) p[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
}

template <class T>
T get_le(const unsigned char* p) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
  return v;
}

void encode(const PixelHit& h, unsigned char* p) {
  put_le<std::uint16_t>(p, h.x);
  put_le<std::uint16_t>(p + 2, h.y);
  put_le<std::uint64_t>(p + 4, h.toa);
  put_le<std::uint32_t>(p + 12, h.tot);
}

PixelHit decode(const unsigned char* p) {
  PixelHit h;
  h.x = get_le<std::uint16_t>(p);
  h.y = get_le<std::uint16_t>(p + 2);
  h.toa = get_le<std::uint64_t>(p + 4);
  h.tot = get_le<std::uint32_t>(p + 12);
  return h;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string() + " for reading");
  return is;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  return os;
}

}  // namespace

// --- Binary hits ------------------------------------------------------------

void write_hit_header(std::ostream& os) {
  std::array<unsigned char, kHitHeaderBytes> head{};
  std::memcpy(head.data(), kMagic, 4);
  put_le<std::uint16_t>(head.data() + 4, kHitFormatVersion);
  os.write(reinterpret_cast<const char*>(head.data()), head.size());
}

void write_hit_records(std::ostream& os, std::span<const PixelHit> hits) {
  constexpr std::size_t kBatch = 4096;
  std::vector<unsigned char> buf(kBatch * kHitRecordBytes);
  for (std::size_t i = 0; i < hits.size(); i += kBatch) {
    const std::size_t n = std::min(kBatch, hits.size() - i);
    for (std::size_t k = 0; k < n; ++k) encode(hits[i + k], buf.data() + k * kHitRecordBytes);
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(n * kHitRecordBytes));
  }
  if (!os) throw Error("write_hits: stream write failed");
}

void read_hit_header(std::istream& is) {
  std::array<unsigned char, kHitHeaderBytes> head{};
  is.read(reinterpret_cast<char*>(head.data()), head.size());
  const auto got = static_cast<std::size_t>(is.gcount());
  if (got < 4 || std::memcmp(head.data(), kMagic, 4) != 0)
    throw FormatError("hit file: bad magic", 0);
  if (got < kHitHeaderBytes) throw FormatError("hit file: truncated header", got);
  const auto version = get_le<std::uint16_t>(head.data() + 4);
  if (version != kHitFormatVersion)
    throw FormatError("hit file: unsupported version " + std::to_string(version), 4);
}

std::size_t read_hit_records(std::istream& is, std::vector<PixelHit>& out, std::size_t max,
                             std::uint64_t& offset) {
  std::vector<unsigned char> buf(max * kHitRecordBytes);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  const auto got = static_cast<std::size_t>(is.gcount());
  const std::size_t n = got / kHitRecordBytes;
  for (std::size_t k = 0; k < n; ++k) out.push_back(decode(buf.data() + k * kHitRecordBytes));
  offset += n * kHitRecordBytes;
  if (got % kHitRecordBytes != 0) throw FormatError("hit file: truncated record", offset);
  return n;
}

void write_hits(const std::filesystem::path& path, std::span<const PixelHit> hits) {
  auto os = open_out(path);
  write_hit_header(os);
  write_hit_records(os, hits);
  os.close();
  if (!os) throw Error("write_hits: failed to finish " + path.string());
}

std::vector<PixelHit> read_hits(const std::filesystem::path& path) {
  HitFileReader reader(path);
  std::vector<PixelHit> all, chunk;
  while (reader.next(chunk)) all.insert(all.end(), chunk.begin(), chunk.end());
  return all;
}

HitFileWriter::HitFileWriter(const std::filesystem::path& path) : os_(open_out(path)), path_(path) {
  write_hit_header(os_);
}

void HitFileWriter::write(std::span<const PixelHit> hits) {
  write_hit_records(os_, hits);
  records_ += hits.size();
}

void HitFileWriter::close() {
  if (!os_.is_open()) return;
  os_.close();
  if (!os_) throw Error("HitFileWriter: failed to finish " + path_.string());
}

HitFileReader::HitFileReader(const std::filesystem::path& path) : is_(open_in(path)) {
  read_hit_header(is_);
}

bool HitFileReader::next(std::vector<PixelHit>& chunk, std::size_t max) {
  chunk.clear();
  if (max == 0) max = 1;
  return read_hit_records(is_, chunk, max, offset_) > 0;
}

// --- Configuration ------------------------------------------------------------

namespace {

class Reader {
public:
  Reader(const json* node, std::string path, std::vector<std::string>& problems)
      : node_(node), path_(std::move(path)), problems_(problems) {
    if (node_ && !node_->is_object()) {
      problems_.push_back(path_ + ": must be an object");
      node_ = nullptr;
    }
  }

  const json* find(const char* key) {
    seen_.emplace_back(key);
    if (!node_) return nullptr;
    auto it = node_->find(key);
    return it == node_->end() ? nullptr : &*it;
  }

  std::string at(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void number(const char* key, double& v) {
    if (const auto* j = find(key)) {
      if (j->is_number()) v = j->get<double>();
      else problems_.push_back(at(key) + ": must be a number");
    }
  }

  void integer(const char* key, int& v) {
    if (const auto* j = find(key)) {
      if (j->is_number_integer()) v = j->get<int>();
      else problems_.push_back(at(key) + ": must be an integer");
    }
  }

  void boolean(const char* key, bool& v) {
    if (const auto* j = find(key)) {
      if (j->is_boolean()) v = j->get<bool>();
      else problems_.push_back(at(key) + ": must be true or false");
    }
  }

  Reader child(const char* key) { return Reader(find(key), at(key), problems_); }

  void finish() {
    if (!node_) return;
    for (const auto& [k, _] : node_->items())
      if (std::find(seen_.begin(), seen_.end(), k) == seen_.end())
        problems_.push_back(at(k.c_str()) + ": unknown key");
  }

  std::vector<std::string>& problems() { return problems_; }

private:
  const json* node_;
  std::string path_;
  std::vector<std::string>& problems_;
  std::vector<std::string> seen_;
};

void read_number_list(Reader& r, const char* key, std::vector<double>& out) {
  const auto* j = r.find(key);
  if (!j) return;
  if (!j->is_array()) {
    r.problems().push_back(r.at(key) + ": must be an array of numbers");
    return;
  }
  out.clear();
  for (std::size_t i = 0; i < j->size(); ++i) {
    if (!(*j)[i].is_number()) {
      r.problems().push_back(r.at(key) + "[" + std::to_string(i) + "]: must be a number");
      continue;
    }
    out.push_back((*j)[i].get<double>());
  }
}

template <class F>
void read_pair_of_objects(Reader& r, const char* key, F&& each) {
  const auto* j = r.find(key);
  if (!j) return;
  if (!j->is_array() || j->size() != 2) {
    r.problems().push_back(r.at(key) + ": must be an array of two objects");
    return;
  }
  for (std::size_t i = 0; i < 2; ++i) {
    Reader item(&(*j)[i], r.at(key) + "[" + std::to_string(i) + "]", r.problems());
    each(i, item);
    item.finish();
  }
}

// Linear scans are written as start, step and count when that form
// regenerates the positions exactly.
json scan_to_json(const ScanPlan& plan) {
  const auto& x = plan.positions_mm;
  if (x.size() >= 2) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.12g", x[1] - x[0]);
    const double step = std::strtod(buf, nullptr);
    if (ScanPlan::linear(x[0], step, x.size(), plan.dwell_s).positions_mm == x)
      return {{"start_mm", x[0]}, {"step_mm", step}, {"count", x.size()}, {"dwell_s", plan.dwell_s}};
  }
  return {{"positions_mm", x}, {"dwell_s", plan.dwell_s}};
}

}  // namespace

json config_to_json(const ExperimentConfig& c) {
  json j;
  j["schema_version"] = c.schema_version;
  j["source"] = {{"pair_rate_hz", c.source.pair_rate_hz},
                 {"detection_eff", c.source.detection_eff},
                 {"jitter_core_sigma_ns", c.source.jitter_core_sigma_ns},
                 {"jitter_tail_sigma_ns", c.source.jitter_tail_sigma_ns},
                 {"jitter_tail_frac", c.source.jitter_tail_frac}};
  j["splitter"] = {{"t2", c.splitter.t2}, {"r2", c.splitter.r2}};
  j["dip"] = {{"d0_mm", c.dip.d0_mm}, {"fwhm_mm", c.dip.fwhm_mm}, {"visibility", c.dip.visibility}};
  const auto& s = c.sensor;
  json hot = json::array();
  for (const auto& [x, y] : s.hot_pixels) hot.push_back({x, y});
  j["sensor"] = {{"grid_size", s.grid_size},
                 {"pitch_um", s.pitch_um},
                 {"toa_lsb_ns", s.toa_lsb_ns},
                 {"tot_lsb_ns", s.tot_lsb_ns},
                 {"flash_photons", s.flash_photons},
                 {"gain_shape", s.gain_shape},
                 {"psf_sigma_px", s.psf_sigma_px},
                 {"threshold", s.threshold},
                 {"tot_scale_ns", s.tot_scale_ns},
                 {"tot_offset_ns", s.tot_offset_ns},
                 {"walk_w0_ns2", s.walk_w0_ns2},
                 {"walk_w1_ns", s.walk_w1_ns},
                 {"deadtime_base_ns", s.deadtime_base_ns},
                 {"hot_pixels", hot},
                 {"hot_pixel_rate_hz", s.hot_pixel_rate_hz},
                 {"afterpulse_prob", s.afterpulse_prob},
                 {"afterpulse_radius_sigma_px", s.afterpulse_radius_sigma_px},
                 {"afterpulse_min_separation_px", s.afterpulse_min_separation_px},
                 {"afterpulse_delay_mean_ns", s.afterpulse_delay_mean_ns},
                 {"dcr_rate_hz", s.dcr_rate_hz}};
  j["spots"] = json::array();
  for (const auto& sp : c.spots) j["spots"].push_back({{"x_px", sp.x}, {"y_px", sp.y}, {"sigma_px", sp.sigma_px}});
  j["scan"] = scan_to_json(c.scan);
  const auto& a = c.analysis;
  json regions = json::array();
  for (const auto& r : a.regions) regions.push_back({{"x_px", r.x}, {"y_px", r.y}, {"radius_px", r.radius}});
  j["analysis"] = {{"regions", regions},
                   {"coincidence_window_ns", a.coincidence_window_ns},
                   {"hist_bin_ns", a.hist_bin_ns},
                   {"afterpulse_window_ns", a.afterpulse_window_ns},
                   {"afterpulse_sideband_lo_ns", a.afterpulse_sideband_lo_ns},
                   {"afterpulse_sideband_hi_ns", a.afterpulse_sideband_hi_ns},
                   {"peak_cut_sigmas", a.peak_cut_sigmas},
                   {"off_dip_fwhms", a.off_dip_fwhms},
                   {"pair_separation_max_dt_ns", a.pair_separation_max_dt_ns},
                   {"positions_per_bin", a.positions_per_bin},
                   {"fit_t2", a.fit_t2},
                   {"histogram_statistic", a.histogram_statistic == FitStatistic::poisson ? "poisson" : "least_squares"},
                   {"blend_trials", a.blend_trials},
                   {"walk", a.walk_override ? json{{"w0_ns2", a.walk_w0_ns2}, {"w1_ns", a.walk_w1_ns}} : json(nullptr)}};
  return j;
}

ExperimentConfig config_from_json(const json& doc) {
  ExperimentConfig c = ExperimentConfig::defaults();
  std::vector<std::string> problems;
  Reader root(&doc, "", problems);
  root.integer("schema_version", c.schema_version);

  {
    auto r = root.child("source");
    r.number("pair_rate_hz", c.source.pair_rate_hz);
    r.number("detection_eff", c.source.detection_eff);
    r.number("jitter_core_sigma_ns", c.source.jitter_core_sigma_ns);
    r.number("jitter_tail_sigma_ns", c.source.jitter_tail_sigma_ns);
    r.number("jitter_tail_frac", c.source.jitter_tail_frac);
    r.finish();
  }
  {
    auto r = root.child("splitter");
    r.number("t2", c.splitter.t2);
    r.number("r2", c.splitter.r2);
    r.finish();
  }
  {
    auto r = root.child("dip");
    r.number("d0_mm", c.dip.d0_mm);
    r.number("fwhm_mm", c.dip.fwhm_mm);
    r.number("visibility", c.dip.visibility);
    r.finish();
  }
  {
    auto r = root.child("sensor");
    auto& s = c.sensor;
    r.integer("grid_size", s.grid_size);
    r.number("pitch_um", s.pitch_um);
    r.number("toa_lsb_ns", s.toa_lsb_ns);
    r.number("tot_lsb_ns", s.tot_lsb_ns);
    r.number("flash_photons", s.flash_photons);
    r.number("gain_shape", s.gain_shape);
    r.number("psf_sigma_px", s.psf_sigma_px);
    r.number("threshold", s.threshold);
    r.number("tot_scale_ns", s.tot_scale_ns);
    r.number("tot_offset_ns", s.tot_offset_ns);
    r.number("walk_w0_ns2", s.walk_w0_ns2);
    r.number("walk_w1_ns", s.walk_w1_ns);
    r.number("deadtime_base_ns", s.deadtime_base_ns);
    if (const auto* hp = r.find("hot_pixels")) {
      if (!hp->is_array()) {
        problems.push_back("sensor.hot_pixels: must be an array of [x, y] pairs");
      } else {
        s.hot_pixels.clear();
        for (std::size_t i = 0; i < hp->size(); ++i) {
          const auto& e = (*hp)[i];
          if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() || !e[1].is_number_integer()) {
            problems.push_back("sensor.hot_pixels[" + std::to_string(i) + "]: must be [x, y] integers");
            continue;
          }
          s.hot_pixels.emplace_back(e[0].get<int>(), e[1].get<int>());
        }
      }
    }
    r.number("hot_pixel_rate_hz", s.hot_pixel_rate_hz);
    r.number("afterpulse_prob", s.afterpulse_prob);
    r.number("afterpulse_radius_sigma_px", s.afterpulse_radius_sigma_px);
    r.number("afterpulse_min_separation_px", s.afterpulse_min_separation_px);
    r.number("afterpulse_delay_mean_ns", s.afterpulse_delay_mean_ns);
    r.number("dcr_rate_hz", s.dcr_rate_hz);
    r.finish();
  }
  read_pair_of_objects(root, "spots", [&](std::size_t i, Reader& r) {
    r.number("x_px", c.spots[i].x);
    r.number("y_px", c.spots[i].y);
    r.number("sigma_px", c.spots[i].sigma_px);
  });
  {
    auto r = root.child("scan");
    read_number_list(r, "positions_mm", c.scan.positions_mm);
    r.number("dwell_s", c.scan.dwell_s);
    // Alternative compact form: start, step and count.
    const bool has_linear = r.find("start_mm") || r.find("step_mm") || r.find("count");
    if (has_linear) {
      double start = 0.0, step = 0.0;
      int count = 0;
      r.number("start_mm", start);
      r.number("step_mm", step);
      r.integer("count", count);
      if (count < 1) problems.push_back("scan.count: must be >= 1");
      else c.scan = ScanPlan::linear(start, step, static_cast<std::size_t>(count), c.scan.dwell_s);
    }
    r.finish();
  }
  {
    auto r = root.child("analysis");
    auto& a = c.analysis;
    read_pair_of_objects(r, "regions", [&](std::size_t i, Reader& g) {
      g.number("x_px", a.regions[i].x);
      g.number("y_px", a.regions[i].y);
      g.number("radius_px", a.regions[i].radius);
    });
    r.number("coincidence_window_ns", a.coincidence_window_ns);
    r.number("hist_bin_ns", a.hist_bin_ns);
    r.number("afterpulse_window_ns", a.afterpulse_window_ns);
    r.number("afterpulse_sideband_lo_ns", a.afterpulse_sideband_lo_ns);
    r.number("afterpulse_sideband_hi_ns", a.afterpulse_sideband_hi_ns);
    r.number("peak_cut_sigmas", a.peak_cut_sigmas);
    r.number("off_dip_fwhms", a.off_dip_fwhms);
    r.number("pair_separation_max_dt_ns", a.pair_separation_max_dt_ns);
    r.integer("positions_per_bin", a.positions_per_bin);
    r.boolean("fit_t2", a.fit_t2);
    if (const auto* st = r.find("histogram_statistic")) {
      if (st->is_string() && *st == "poisson") a.histogram_statistic = FitStatistic::poisson;
      else if (st->is_string() && *st == "least_squares") a.histogram_statistic = FitStatistic::least_squares;
      else problems.push_back("analysis.histogram_statistic: must be \"poisson\" or \"least_squares\"");
    }
    r.integer("blend_trials", a.blend_trials);
    if (const auto* w = r.find("walk"); w && !w->is_null()) {
      Reader wr(w, "analysis.walk", problems);
      a.walk_override = true;
      wr.number("w0_ns2", a.walk_w0_ns2);
      wr.number("w1_ns", a.walk_w1_ns);
      wr.finish();
    }
    r.finish();
  }
  root.finish();

  // Fields that failed to parse keep their defaults, so invariants remain meaningful.
  auto more = c.problems();
  problems.insert(problems.end(), more.begin(), more.end());
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return c;
}

ExperimentConfig read_config(const std::filesystem::path& path) {
  auto is = open_in(path);
  json doc;
  try {
    doc = json::parse(is);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": invalid JSON: " + e.what(), e.byte);
  }
  return config_from_json(doc);
}

void write_config(const std::filesystem::path& path, const ExperimentConfig& config) {
  write_text(path, config_to_json(config).dump(2) + "\n");
}

std::string canonical_config(const ExperimentConfig& config) { return config_to_json(config).dump(); }

// --- Tables -------------------------------------------------------------------

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::array<char, 32> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& s, std::uint64_t line) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw FormatError("csv line " + std::to_string(line) + ": bad number '" + s + "'", line);
  return v;
}

std::uint64_t parse_uint(const std::string& s, std::uint64_t line) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw FormatError("csv line " + std::to_string(line) + ": bad integer '" + s + "'", line);
  return v;
}

template <class RowFn>
void read_rows(std::istream& is, const std::string& header, std::size_t columns, RowFn&& fn) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError("csv: missing header", 0);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != header) throw FormatError("csv: unexpected header '" + line + "'", 0);
  std::uint64_t n = 1;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv(line);
    if (cells.size() != columns)
      throw FormatError("csv line " + std::to_string(n) + ": expected " + std::to_string(columns) + " columns", n);
    fn(cells, n);
  }
}

const char* kPhotonHeader = "t_ns,t_raw_ns,x_px,y_px,tot_max_ticks,n_pixels,region,unweighted";
const char* kPairHeader = "kind,dt_ns,position";

}  // namespace

void write_photons_csv(std::ostream& os, std::span<const Photon> photons) {
  os << kPhotonHeader << '\n';
  for (const auto& p : photons)
    os << format_double(p.t_ns) << ',' << format_double(p.t_raw_ns) << ',' << format_double(p.x) << ','
       << format_double(p.y) << ',' << p.tot_max << ',' << p.n_pixels << ',' << to_string(p.region) << ','
       << (p.unweighted ? 1 : 0) << '\n';
}

std::vector<Photon> read_photons_csv(std::istream& is) {
  std::vector<Photon> out;
  read_rows(is, kPhotonHeader, 8, [&](const std::vector<std::string>& c, std::uint64_t n) {
    Photon p;
    p.t_ns = parse_double(c[0], n);
    p.t_raw_ns = parse_double(c[1], n);
    p.x = parse_double(c[2], n);
    p.y = parse_double(c[3], n);
    p.tot_max = static_cast<std::uint32_t>(parse_uint(c[4], n));
    p.n_pixels = static_cast<std::uint32_t>(parse_uint(c[5], n));
    if (c[6] == "fiber1") p.region = RegionTag::fiber1;
    else if (c[6] == "fiber2") p.region = RegionTag::fiber2;
    else if (c[6] == "outside") p.region = RegionTag::outside;
    else throw FormatError("csv line " + std::to_string(n) + ": unknown region '" + c[6] + "'", n);
    p.unweighted = c[7] == "1";
    out.push_back(p);
  });
  return out;
}

void write_pairs_csv(std::ostream& os, std::span<const ScanPair> pairs) {
  os << kPairHeader << '\n';
  for (const auto& p : pairs) os << to_string(p.kind) << ',' << format_double(p.dt_ns) << ',' << p.position << '\n';
}

std::vector<ScanPair> read_pairs_csv(std::istream& is) {
  std::vector<ScanPair> out;
  read_rows(is, kPairHeader, 3, [&](const std::vector<std::string>& c, std::uint64_t n) {
    ScanPair p;
    if (c[0] == "cross") p.kind = PairKind::cross;
    else if (c[0] == "fiber1") p.kind = PairKind::same_fiber1;
    else if (c[0] == "fiber2") p.kind = PairKind::same_fiber2;
    else throw FormatError("csv line " + std::to_string(n) + ": unknown pair kind '" + c[0] + "'", n);
    p.dt_ns = parse_double(c[1], n);
    p.position = static_cast<std::uint32_t>(parse_uint(c[2], n));
    out.push_back(p);
  });
  return out;
}

void write_truth_csv(std::ostream& os, std::span<const TruthPhoton> truth) {
  os << "photon_id,pair_id,parent_id,scan_index,fiber,origin,t_ns,x_px,y_px,hits_rendered,hits_emitted\n";
  for (const auto& t : truth)
    os << t.photon_id << ',' << t.pair_id << ',' << t.parent_id << ',' << t.scan_index << ',' << t.fiber << ','
       << to_string(t.origin) << ',' << format_double(t.t_ns) << ',' << format_double(t.x) << ','
       << format_double(t.y) << ',' << t.hits_rendered << ',' << t.hits_emitted << '\n';
}

void write_dip_curve_csv(std::ostream& os, const DipCurve& raw, const DipCurve& corrected, const DipFit* fit) {
  if (raw.bins.size() != corrected.bins.size())
    throw ContractViolation("write_dip_curve_csv: raw and corrected curves differ in size");
  os << "delay_mm,exposure_s,n_cross,n_cross_err,n_fib1,n_fib1_err,n_fib2,n_fib2_err,"
        "model_cross,model_fib1,model_fib2,raw_cross,raw_cross_err,raw_fib1,raw_fib1_err,"
        "raw_fib2,raw_fib2_err,singles_fib1,singles_fib2,valid,flag\n";
  for (std::size_t i = 0; i < raw.bins.size(); ++i) {
    const auto& r = raw.bins[i];
    const auto& c = corrected.bins[i];
    CoincidenceRates m;
    if (fit) m = fit->predict(c.delay_mm);
    std::string flag = r.flag;
    for (auto& ch : flag)
      if (ch == ',' || ch == '\n') ch = ';';
    os << format_double(c.delay_mm) << ',' << format_double(c.exposure_s) << ',' << format_double(c.n_cross) << ','
       << format_double(c.n_cross_err) << ',' << format_double(c.n_fib1) << ',' << format_double(c.n_fib1_err)
       << ',' << format_double(c.n_fib2) << ',' << format_double(c.n_fib2_err) << ','
       << (fit ? format_double(m.n_cross) : "") << ',' << (fit ? format_double(m.n_fib1) : "") << ','
       << (fit ? format_double(m.n_fib2) : "") << ',' << format_double(r.n_cross) << ','
       << format_double(r.n_cross_err) << ',' << format_double(r.n_fib1) << ',' << format_double(r.n_fib1_err)
       << ',' << format_double(r.n_fib2) << ',' << format_double(r.n_fib2_err) << ','
       << format_double(r.singles_fib1) << ',' << format_double(r.singles_fib2) << ',' << (r.valid ? 1 : 0)
       << ',' << flag << '\n';
  }
}

void write_dip_model_csv(std::ostream& os, const DipFit& fit, double lo_mm, double hi_mm, std::size_t samples) {
  os << "delay_mm,model_cross,model_fib1,model_fib2\n";
  if (samples < 2) samples = 2;
  for (std::size_t i = 0; i < samples; ++i) {
    const double d = lo_mm + (hi_mm - lo_mm) * static_cast<double>(i) / static_cast<double>(samples - 1);
    const auto m = fit.predict(d);
    os << format_double(d) << ',' << format_double(m.n_cross) << ',' << format_double(m.n_fib1) << ','
       << format_double(m.n_fib2) << '\n';
  }
}

// --- Digests ------------------------------------------------------------------

namespace {

struct DigestCtx {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx{EVP_MD_CTX_new(), &EVP_MD_CTX_free};
  DigestCtx() {
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256: init failed");
  }
  void update(const void* p, std::size_t n) {
    if (EVP_DigestUpdate(ctx.get(), p, n) != 1) throw Error("sha256: update failed");
  }
  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx.get(), md.data(), &len) != 1) throw Error("sha256: final failed");
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
      out.push_back(kHex[md[i] >> 4]);
      out.push_back(kHex[md[i] & 15]);
    }
    return out;
  }
};

}  // namespace

std::string sha256_hex(std::string_view data) {
  DigestCtx d;
  d.update(data.data(), data.size());
  return d.hex();
}

std::string sha256_file(const std::filesystem::path& path) {
  auto is = open_in(path);
  DigestCtx d;
  std::vector<char> buf(1 << 20);
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    d.update(buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  return d.hex();
}

ManifestEntry describe_file(const std::filesystem::path& path, const std::filesystem::path& base) {
  ManifestEntry e;
  e.path = base.empty() ? path.generic_string() : path.lexically_relative(base).generic_string();
  if (e.path.empty()) e.path = path.generic_string();
  e.sha256 = sha256_file(path);
  e.bytes = std::filesystem::file_size(path);
  return e;
}

json manifest_to_json(const RunManifest& m) {
  auto entries = [](const std::vector<ManifestEntry>& v) {
    json a = json::array();
    for (const auto& e : v) a.push_back({{"path", e.path}, {"sha256", e.sha256}, {"bytes", e.bytes}});
    return a;
  };
  json j;
  j["schema"] = "hompix.manifest";
  j["schema_version"] = 1;
  j["command"] = m.command;
  j["tool_version"] = m.tool_version;
  j["config_sha256"] = m.config_sha256;
  j["seed"] = m.seed;
  j["inputs"] = entries(m.inputs);
  j["outputs"] = entries(m.outputs);
  if (!m.started_utc.empty()) j["started_utc"] = m.started_utc;
  if (!m.finished_utc.empty()) j["finished_utc"] = m.finished_utc;
  return j;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  auto os = open_out(path);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  os.close();
  if (!os) throw Error("failed to write " + path.string());
}

}  // namespace hompix
