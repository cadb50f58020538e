#include "linearlens/report.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <sstream>

#include "linearlens/error.hpp"
#include "linearlens/io.hpp"

namespace linearlens {

namespace fs = std::filesystem;

std::string config_hash(const nlohmann::json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string report_timestamp() {
  std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  if (const char* epoch = std::getenv("SOURCE_DATE_EPOCH"); epoch && *epoch) {
    char* end = nullptr;
    const long long v = std::strtoll(epoch, &end, 10);
    require(*end == '\0' && v >= 0, ErrorCode::kInvalidArgument,
            std::string("SOURCE_DATE_EPOCH is not a non-negative integer: ") + epoch);
    t = static_cast<std::time_t>(v);
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

nlohmann::json ReportBundle::metadata() const {
  nlohmann::json tables_json = nlohmann::json::array();
  for (const auto& [name, contents] : tables)
    tables_json.push_back({{"file", name}, {"bytes", contents.size()}, {"crc32", crc32_hex(crc32_of(contents))}});
  return {{"command", command},       {"config", config},     {"config_hash", config_hash(config)},
          {"seed", seed},             {"timestamp", timestamp}, {"tables", tables_json},
          {"warnings", warnings}};
}

namespace {

bool plain_name(const std::string& name) {
  return !name.empty() && name != "." && name != ".." && name.find('/') == std::string::npos &&
         name != "metadata.json";
}

}  // namespace

void write_bundle(const ReportBundle& bundle, const fs::path& dir, bool force) {
  std::error_code ec;
  if (fs::exists(dir, ec) && !fs::is_empty(dir, ec) && !force)
    fail(ErrorCode::kIo, "output directory " + dir.string() + " is not empty (pass --force to overwrite)");
  fs::create_directories(dir, ec);
  require(!ec, ErrorCode::kIo, "cannot create " + dir.string() + ": " + ec.message());
  for (const auto& [name, contents] : bundle.tables) {
    require(plain_name(name), ErrorCode::kInvalidArgument, "bad report table name '" + name + "'");
    if (name.ends_with(".csv")) require_finite_csv(name, contents);
    write_file_atomic(dir / name, contents);
  }
  write_file_atomic(dir / "metadata.json", bundle.metadata().dump(2) + "\n");
}

ReportBundle read_bundle(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorCode::kIo, dir.string() + " is not a directory");
  const fs::path meta = dir / "metadata.json";
  require(fs::exists(meta), ErrorCode::kIo, "no metadata.json in " + dir.string());
  ReportBundle b;
  try {
    const nlohmann::json j = nlohmann::json::parse(read_file(meta));
    b.command = j.at("command").get<std::string>();
    b.config = j.at("config");
    b.seed = j.at("seed").get<std::uint64_t>();
    b.timestamp = j.at("timestamp").get<std::string>();
    b.warnings = j.value("warnings", std::vector<std::string>{});
    require(j.at("config_hash").get<std::string>() == config_hash(b.config), ErrorCode::kChecksum,
            dir.string() + ": config_hash does not match the stored config");
    for (const auto& t : j.at("tables")) {
      const std::string name = t.at("file").get<std::string>();
      require(plain_name(name), ErrorCode::kFormat, "bad table name '" + name + "'");
      const fs::path p = dir / name;
      require(fs::exists(p), ErrorCode::kIo, "table " + name + " listed in metadata.json is missing");
      std::string contents = read_file(p);
      require(crc32_hex(crc32_of(contents)) == t.at("crc32").get<std::string>(), ErrorCode::kChecksum,
              "table " + name + " does not match its recorded checksum");
      b.tables.emplace(name, std::move(contents));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, meta.string() + " is malformed: " + e.what());
  }
  return b;
}

std::vector<fs::path> find_bundles(const fs::path& root) {
  std::vector<fs::path> out;
  std::error_code ec;
  if (!fs::is_directory(root, ec)) return out;
  if (fs::exists(root / "metadata.json")) out.push_back(root);
  for (const auto& entry : fs::directory_iterator(root, ec))
    if (entry.is_directory() && fs::exists(entry.path() / "metadata.json")) out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  return out;
}

void require_finite_csv(const std::string& name, const std::string& csv) {
  std::istringstream lines(csv);
  std::string line;
  std::size_t row = 0;
  while (std::getline(lines, line)) {
    ++row;
    std::istringstream cells(line);
    std::string cell;
    while (std::getline(cells, cell, ',')) {
      std::string lower;
      for (char c : cell) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
      const bool spelled = lower == "nan" || lower == "-nan" || lower == "inf" || lower == "-inf" ||
                           lower == "infinity" || lower == "-infinity";
      bool overflow = false;
      if (!spelled && !cell.empty()) {
        char* end = nullptr;
        const double v = std::strtod(cell.c_str(), &end);
        overflow = *end == '\0' && !std::isfinite(v);
      }
      require(!spelled && !overflow, ErrorCode::kNumeric,
              name + " row " + std::to_string(row) + " has a non-finite value '" + cell + "'");
    }
  }
}

}  // namespace linearlens
