#include "linearlens/checkpoint.hpp"

#include "linearlens/error.hpp"
#include "linearlens/io.hpp"

namespace linearlens {

namespace fs = std::filesystem;

void save_checkpoint(const DecoderModel& model, const fs::path& dir, const nlohmann::json& metadata,
                     TensorDtype dtype) {
  const bool wide = dtype == TensorDtype::kF64;
  const std::string ext = wide ? "f64" : "f32";
  std::error_code ec;
  fs::create_directories(dir / "tensors", ec);
  require(!ec, ErrorCode::kIo, "cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json blocks = nlohmann::json::array();
  for (std::size_t b = 0; b < model.n_layers(); ++b)
    blocks.push_back({{"index", b},
                      {"kind", to_string(model.block_kind(b))},
                      {"replacement", model.block_kind(b) == BlockKind::kAffine}});
  nlohmann::json tensors = nlohmann::json::array();
  for (std::size_t i = 0; i < model.tensors().size(); ++i) {
    const TensorSlot& s = model.tensors()[i];
    const std::string bytes = wide ? encode_f64_le(model.tensor(i)) : encode_f32_le(model.tensor(i));
    const std::string file = "tensors/" + s.name + "." + ext;
    write_file_atomic(dir / file, bytes);
    tensors.push_back({{"name", s.name},
                       {"rows", s.rows},
                       {"cols", s.cols},
                       {"file", file},
                       {"crc32", crc32_hex(crc32_of(bytes))},
                       {"trainable", s.trainable}});
  }
  const nlohmann::json manifest{{"format", kCheckpointFormat}, {"config", model.config().to_json()},
                                {"step", model.step()},        {"dtype", ext},
                                {"blocks", blocks},
                                {"tensors", tensors},          {"metadata", metadata}};
  write_file_atomic(dir / "checkpoint.json", manifest.dump(2) + "\n");
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  const fs::path path = dir / "checkpoint.json";
  require(fs::exists(path), ErrorCode::kIo, "no checkpoint.json in " + dir.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::kFormat, std::string("checkpoint.json is not valid JSON: ") + e.what());
  }
  require(j.is_object() && j.contains("format"), ErrorCode::kFormat, "checkpoint.json lacks a format field");
  require(j["format"] == kCheckpointFormat, ErrorCode::kVersion,
          "unsupported checkpoint format " + j["format"].dump() + " (expected LLCK1)");
  try {
    const std::string dtype = j.value("dtype", std::string("f32"));
    require(dtype == "f32" || dtype == "f64", ErrorCode::kFormat, "unsupported tensor dtype '" + dtype + "'");
    const std::size_t width = dtype == "f64" ? 8 : 4;
    const ModelConfig config = ModelConfig::from_json(j.at("config"));
    std::vector<BlockKind> kinds;
    for (const auto& b : j.at("blocks")) kinds.push_back(block_kind_from_string(b.at("kind").get<std::string>()));
    require(kinds.size() == config.n_layers, ErrorCode::kFormat, "block list does not match n_layers");
    LoadedCheckpoint out{DecoderModel(config, 0), j.value("metadata", nlohmann::json::object())};
    DecoderModel& model = out.model;
    model.relayout(kinds);
    model.set_step(j.at("step").get<std::uint64_t>());
    std::vector<bool> seen(model.tensors().size(), false);
    for (const auto& t : j.at("tensors")) {
      const std::string name = t.at("name").get<std::string>();
      std::size_t idx = 0;
      try {
        idx = model.tensor_index(name);
      } catch (const Error&) {
        fail(ErrorCode::kFormat, "checkpoint tensor '" + name + "' does not belong to this architecture");
      }
      const TensorSlot& slot = model.tensors()[idx];
      require(t.at("rows").get<std::size_t>() == slot.rows && t.at("cols").get<std::size_t>() == slot.cols,
              ErrorCode::kFormat, "tensor '" + name + "' has the wrong shape");
      const fs::path file = dir / t.at("file").get<std::string>();
      require(fs::exists(file), ErrorCode::kIo, "tensor file for '" + name + "' is missing");
      const std::string bytes = read_file(file);
      require(bytes.size() >= slot.size() * width, ErrorCode::kTruncated, "tensor '" + name + "' is truncated");
      require(bytes.size() == slot.size() * width, ErrorCode::kFormat, "tensor '" + name + "' has trailing bytes");
      require(crc32_hex(crc32_of(bytes)) == t.at("crc32").get<std::string>(), ErrorCode::kChecksum,
              "tensor '" + name + "' checksum mismatch");
      const std::vector<double> values = width == 8 ? decode_f64_le(bytes) : decode_f32_le(bytes);
      std::copy(values.begin(), values.end(), model.tensor(idx).begin());
      model.set_trainable(idx, t.value("trainable", true));
      seen[idx] = true;
    }
    for (std::size_t i = 0; i < seen.size(); ++i)
      require(seen[i], ErrorCode::kFormat, "checkpoint lacks tensor '" + model.tensors()[i].name + "'");
    require(model.all_finite(), ErrorCode::kNumeric, "checkpoint contains non-finite parameters");
    return out;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, std::string("malformed checkpoint.json: ") + e.what());
  }
}

}  // namespace linearlens
