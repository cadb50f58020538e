#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "linearlens/linearity.hpp"

namespace linearlens {

inline constexpr const char* kDumpFormat = "EMB1";

/// manifest.json of an EMB1 directory. Layer files hold n_tokens × d_model
/// little-endian f32 values in row-major order.
struct DumpManifest {
  struct LayerFile {
    std::size_t index = 0;
    std::string file;
    std::uint32_t crc32 = 0;
  };

  std::string format_version = kDumpFormat;
  std::string model_id;
  std::size_t n_layers = 0;  // blocks; there are n_layers + 1 layer files
  std::size_t n_tokens = 0;
  std::size_t d_model = 0;
  std::string dtype = "f32";
  std::string endianness = "little";
  std::string layout = "row-major";
  std::string corpus_id;
  std::uint64_t sampling_seed = 0;
  std::vector<LayerFile> layers;

  nlohmann::json to_json() const;
  /// Parses and checks the header fields. Throws kVersion for a format other
  /// than EMB1 and kFormat for anything else malformed.
  static DumpManifest from_json(const nlohmann::json& j);
};

std::string layer_file_name(std::size_t index);

/// Writes layer_XXX.bin files then manifest.json into `dir` (created if
/// missing). Values are stored as f32. Throws kInvalidArgument for traces
/// with fewer than two layers and kNumeric for values that overflow f32.
DumpManifest write_dump(const EmbeddingTrace& trace, const std::filesystem::path& dir);

/// Verifies and loads a dump. Errors: kIo (missing files), kVersion,
/// kFormat, kTruncated (short layer file), kChecksum (CRC mismatch; the
/// message names the layer).
EmbeddingTrace read_dump(const std::filesystem::path& dir);
DumpManifest read_dump_manifest(const std::filesystem::path& dir);

}  // namespace linearlens
