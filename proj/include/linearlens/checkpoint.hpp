#pragma once

#include <filesystem>

#include <json.hpp>

#include "linearlens/model.hpp"

namespace linearlens {

inline constexpr const char* kCheckpointFormat = "LLCK1";

enum class TensorDtype { kF32, kF64 };

/// checkpoint.json (config, step, dtype, block kinds, tensor table, free-form
/// metadata) plus one little-endian file per tensor under tensors/.
/// Blocks replaced by affine maps are tagged "replacement": true.
/// f32 is the interchange default; f64 round-trips parameters exactly.
void save_checkpoint(const DecoderModel& model, const std::filesystem::path& dir,
                     const nlohmann::json& metadata = nlohmann::json::object(),
                     TensorDtype dtype = TensorDtype::kF32);

struct LoadedCheckpoint {
  DecoderModel model;
  nlohmann::json metadata;
};

/// Errors: kIo (missing files), kVersion, kFormat, kTruncated, kChecksum.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace linearlens
