#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace linearlens {

/// Whole-file read; throws kIo when the file cannot be opened.
std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temp file and renames it over `path`, so readers never
/// observe a partially written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

std::uint32_t crc32_of(std::string_view bytes);
/// Lowercase, zero-padded 8-digit hex.
std::string crc32_hex(std::uint32_t crc);

/// Little-endian encodings independent of host byte order.
std::string encode_f32_le(std::span<const double> values);
std::vector<double> decode_f32_le(std::string_view bytes);
std::string encode_f64_le(std::span<const double> values);
std::vector<double> decode_f64_le(std::string_view bytes);

}  // namespace linearlens
