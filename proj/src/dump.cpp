#include "linearlens/dump.hpp"

#include <cmath>
#include <cstdio>

#include "linearlens/error.hpp"
#include "linearlens/io.hpp"

namespace linearlens {

namespace fs = std::filesystem;

std::string layer_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "layer_%03zu.bin", index);
  return buf;
}

nlohmann::json DumpManifest::to_json() const {
  nlohmann::json files = nlohmann::json::array();
  for (const auto& l : layers) files.push_back({{"index", l.index}, {"file", l.file}, {"crc32", crc32_hex(l.crc32)}});
  return {{"format_version", format_version},
          {"model_id", model_id},
          {"n_layers", n_layers},
          {"n_tokens", n_tokens},
          {"d_model", d_model},
          {"dtype", dtype},
          {"endianness", endianness},
          {"layout", layout},
          {"corpus_id", corpus_id},
          {"sampling_seed", sampling_seed},
          {"layers", files}};
}

DumpManifest DumpManifest::from_json(const nlohmann::json& j) {
  require(j.is_object(), ErrorCode::kFormat, "manifest is not a JSON object");
  require(j.contains("format_version") && j["format_version"].is_string(), ErrorCode::kFormat,
          "manifest lacks format_version");
  DumpManifest m;
  m.format_version = j["format_version"].get<std::string>();
  require(m.format_version == kDumpFormat, ErrorCode::kVersion,
          "unsupported dump format '" + m.format_version + "' (expected EMB1)");
  try {
    m.model_id = j.at("model_id").get<std::string>();
    m.n_layers = j.at("n_layers").get<std::size_t>();
    m.n_tokens = j.at("n_tokens").get<std::size_t>();
    m.d_model = j.at("d_model").get<std::size_t>();
    m.dtype = j.at("dtype").get<std::string>();
    m.endianness = j.at("endianness").get<std::string>();
    m.layout = j.at("layout").get<std::string>();
    m.corpus_id = j.at("corpus_id").get<std::string>();
    m.sampling_seed = j.at("sampling_seed").get<std::uint64_t>();
    for (const auto& l : j.at("layers")) {
      LayerFile f;
      f.index = l.at("index").get<std::size_t>();
      f.file = l.at("file").get<std::string>();
      const std::string hex = l.at("crc32").get<std::string>();
      require(hex.size() == 8 && hex.find_first_not_of("0123456789abcdef") == std::string::npos, ErrorCode::kFormat,
              "layer " + std::to_string(f.index) + " has a malformed crc32 '" + hex + "'");
      f.crc32 = static_cast<std::uint32_t>(std::stoul(hex, nullptr, 16));
      m.layers.push_back(std::move(f));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, std::string("malformed manifest: ") + e.what());
  }
  require(m.dtype == "f32", ErrorCode::kFormat, "unsupported dtype '" + m.dtype + "'");
  require(m.endianness == "little", ErrorCode::kFormat, "unsupported endianness '" + m.endianness + "'");
  require(m.layout == "row-major", ErrorCode::kFormat, "unsupported layout '" + m.layout + "'");
  require(m.n_layers >= 1, ErrorCode::kFormat, "n_layers must be at least 1");
  require(m.n_tokens >= 2 && m.d_model >= 1, ErrorCode::kFormat, "dump needs n_tokens >= 2 and d_model >= 1");
  require(m.layers.size() == m.n_layers + 1, ErrorCode::kFormat,
          "manifest lists " + std::to_string(m.layers.size()) + " layer files, expected n_layers + 1 = " +
              std::to_string(m.n_layers + 1));
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    require(m.layers[i].index == i, ErrorCode::kFormat, "layer files must be listed in index order 0..n_layers");
    const fs::path p(m.layers[i].file);
    require(!p.empty() && p.filename() == p && p != "." && p != "..", ErrorCode::kFormat,
            "layer " + std::to_string(i) + " file name must be a plain file name");
  }
  return m;
}

DumpManifest write_dump(const EmbeddingTrace& trace, const fs::path& dir) {
  require(trace.layers.size() >= 2, ErrorCode::kInvalidArgument,
          "a dump needs at least one block (two layers), got " + std::to_string(trace.layers.size()));
  trace.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorCode::kIo, "cannot create " + dir.string() + ": " + ec.message());

  DumpManifest m;
  m.model_id = trace.provenance.model_id;
  m.corpus_id = trace.provenance.corpus_id;
  m.sampling_seed = trace.provenance.sampling_seed;
  m.n_layers = trace.layers.size() - 1;
  m.n_tokens = trace.tokens();
  m.d_model = trace.dim();
  for (std::size_t i = 0; i < trace.layers.size(); ++i) {
    const auto values = trace.layers[i].values.values();
    const std::string bytes = encode_f32_le(values);
    for (double v : decode_f32_le(bytes))
      require(std::isfinite(v), ErrorCode::kNumeric, "layer " + std::to_string(i) + " overflows f32");
    DumpManifest::LayerFile f{i, layer_file_name(i), crc32_of(bytes)};
    write_file_atomic(dir / f.file, bytes);
    m.layers.push_back(std::move(f));
  }
  write_file_atomic(dir / "manifest.json", m.to_json().dump(2) + "\n");
  return m;
}

DumpManifest read_dump_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  require(fs::exists(path), ErrorCode::kIo, "no manifest.json in " + dir.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::kFormat, std::string("manifest.json is not valid JSON: ") + e.what());
  }
  return DumpManifest::from_json(j);
}

EmbeddingTrace read_dump(const fs::path& dir) {
  const DumpManifest m = read_dump_manifest(dir);
  const std::size_t expected = m.n_tokens * m.d_model * 4;
  EmbeddingTrace trace;
  trace.provenance = {m.model_id, m.corpus_id, m.sampling_seed};
  for (const auto& f : m.layers) {
    const std::string label = "layer " + std::to_string(f.index) + " (" + f.file + ")";
    const fs::path path = dir / f.file;
    require(fs::exists(path), ErrorCode::kIo, label + " is missing");
    const std::string bytes = read_file(path);
    require(bytes.size() >= expected, ErrorCode::kTruncated,
            label + " is truncated: " + std::to_string(bytes.size()) + " bytes, expected " + std::to_string(expected));
    require(bytes.size() == expected, ErrorCode::kFormat,
            label + " has " + std::to_string(bytes.size() - expected) + " trailing bytes");
    const std::uint32_t crc = crc32_of(bytes);
    require(crc == f.crc32, ErrorCode::kChecksum,
            label + " checksum mismatch: manifest " + crc32_hex(f.crc32) + ", file " + crc32_hex(crc));
    std::vector<double> values = decode_f32_le(bytes);
    for (double v : values) require(std::isfinite(v), ErrorCode::kNumeric, label + " contains non-finite values");
    trace.layers.push_back({f.index, Matrix(m.n_tokens, m.d_model, std::move(values))});
  }
  trace.validate();
  return trace;
}

}  // namespace linearlens
