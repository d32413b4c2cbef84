#pragma once
// File formats: binary hit streams, JSON configuration, CSV tables, manifests.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hompix/experiment.hpp"
#include "hompix/fit.hpp"
#include "hompix/hit.hpp"
#include "hompix/recon.hpp"
#include "hompix/simulator.hpp"

namespace hompix {

// --- Binary hits ----------------------------------------------------------
//
// 16-byte header: "PHC1", version u16, 10 reserved zero bytes.
// 16-byte records: x u16, y u16, toa u64, tot u32. All little-endian.

inline constexpr std::uint16_t kHitFormatVersion = 1;
inline constexpr std::size_t kHitHeaderBytes = 16;
inline constexpr std::size_t kHitRecordBytes = 16;

void write_hit_header(std::ostream& os);
void write_hit_records(std::ostream& os, std::span<const PixelHit> hits);

/// Reads the header; throws FormatError on a bad magic or version.
void read_hit_header(std::istream& is);

/// Reads up to `max` records into `out` (appending). Returns the number read;
/// 0 means end of stream. A partial trailing record throws FormatError.
std::size_t read_hit_records(std::istream& is, std::vector<PixelHit>& out, std::size_t max,
                             std::uint64_t& offset);

void write_hits(const std::filesystem::path& path, std::span<const PixelHit> hits);
std::vector<PixelHit> read_hits(const std::filesystem::path& path);

/// Streaming writer used by the simulator sink.
class HitFileWriter {
public:
  explicit HitFileWriter(const std::filesystem::path& path);
  void write(std::span<const PixelHit> hits);
  void close();
  std::uint64_t records() const { return records_; }

private:
  std::ofstream os_;
  std::filesystem::path path_;
  std::uint64_t records_ = 0;
};

/// Streaming reader; `next` fills `chunk` and returns false at end of file.
class HitFileReader {
public:
  explicit HitFileReader(const std::filesystem::path& path);
  bool next(std::vector<PixelHit>& chunk, std::size_t max = 1 << 16);

private:
  std::ifstream is_;
  std::uint64_t offset_ = kHitHeaderBytes;
};

// --- Configuration ----------------------------------------------------------

nlohmann::json config_to_json(const ExperimentConfig& config);

/// Missing keys take defaults; unknown keys, wrong types and invariant
/// violations are all collected into one ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& doc);

ExperimentConfig read_config(const std::filesystem::path& path);
void write_config(const std::filesystem::path& path, const ExperimentConfig& config);

/// Canonical serialization (sorted keys, no whitespace) used for digests.
std::string canonical_config(const ExperimentConfig& config);

// --- Tables -------------------------------------------------------------------

/// Shortest decimal text that reads back to the same double.
std::string format_double(double v);

void write_photons_csv(std::ostream& os, std::span<const Photon> photons);
std::vector<Photon> read_photons_csv(std::istream& is);

/// Pair rows carry the scan position of the earlier photon.
void write_pairs_csv(std::ostream& os, std::span<const ScanPair> pairs);
std::vector<ScanPair> read_pairs_csv(std::istream& is);

void write_truth_csv(std::ostream& os, std::span<const TruthPhoton> truth);

/// Per-bin corrected counts, raw counts and the fitted model at each bin.
void write_dip_curve_csv(std::ostream& os, const DipCurve& raw, const DipCurve& corrected,
                         const DipFit* fit);

/// Dense model samples across the scanned range.
void write_dip_model_csv(std::ostream& os, const DipFit& fit, double lo_mm, double hi_mm,
                         std::size_t samples);

// --- Digests ------------------------------------------------------------------

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

struct ManifestEntry {
  std::string path;
  std::string sha256;
  std::uint64_t bytes = 0;
};

struct RunManifest {
  std::string command;
  std::string tool_version;
  std::string config_sha256;
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> inputs;
  std::vector<ManifestEntry> outputs;
  /// Wall-clock times are only recorded when requested; they break byte identity.
  std::string started_utc;
  std::string finished_utc;
};

ManifestEntry describe_file(const std::filesystem::path& path, const std::filesystem::path& base);
nlohmann::json manifest_to_json(const RunManifest& manifest);

/// Writes `text` exactly (no platform newline translation).
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace hompix
