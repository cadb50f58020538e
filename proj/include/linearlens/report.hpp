#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace linearlens {

/// 16 hex digits of FNV-1a over the canonical dump (sorted keys, no spaces).
std::string config_hash(const nlohmann::json& config);

/// UTC ISO-8601. SOURCE_DATE_EPOCH, when set, replaces the wall clock.
std::string report_timestamp();

/// Output directory of one command: metadata.json plus payload tables.
struct ReportBundle {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::string timestamp;
  std::map<std::string, std::string> tables;  // file name -> contents (CSV or JSON)
  std::vector<std::string> warnings;

  nlohmann::json metadata() const;
};

/// Refuses to touch a non-empty `dir` unless `force`. Every file goes through
/// write_file_atomic. Table names must be plain file names.
void write_bundle(const ReportBundle& bundle, const std::filesystem::path& dir, bool force);

/// Reads metadata.json and the tables it lists. kIo when the directory or
/// metadata is missing, kFormat when it is malformed, kChecksum when a
/// table no longer matches the recorded CRC.
ReportBundle read_bundle(const std::filesystem::path& dir);

/// Directories at or directly below `root` that hold metadata.json, sorted.
std::vector<std::filesystem::path> find_bundles(const std::filesystem::path& root);

/// Throws kNumeric if any cell that looks numeric parses to NaN/Inf, or is
/// spelled nan/inf. Used before anything lands on disk.
void require_finite_csv(const std::string& name, const std::string& csv);

}  // namespace linearlens
