#include "linearlens/io.hpp"

#include <zlib.h>
#include <unistd.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "linearlens/error.hpp"

namespace linearlens {

namespace fs = std::filesystem;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  require(!in.bad(), ErrorCode::kIo, "read failed for " + path.string());
  return std::move(ss).str();
}

void write_file_atomic(const fs::path& path, std::string_view contents) {
  const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::kIo, "cannot create " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    require(static_cast<bool>(out), ErrorCode::kIo, "write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    fail(ErrorCode::kIo, "cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + off), chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::string crc32_hex(std::uint32_t crc) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", crc);
  return buf;
}

namespace {

template <typename Word>
void put_le(char* out, Word w) {
  for (std::size_t i = 0; i < sizeof(Word); ++i) out[i] = static_cast<char>((w >> (8 * i)) & 0xffu);
}

template <typename Word>
Word get_le(const char* in) {
  Word w = 0;
  for (std::size_t i = 0; i < sizeof(Word); ++i) w |= static_cast<Word>(static_cast<unsigned char>(in[i])) << (8 * i);
  return w;
}

}  // namespace

std::string encode_f32_le(std::span<const double> values) {
  std::string out(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i)
    put_le(out.data() + 4 * i, std::bit_cast<std::uint32_t>(static_cast<float>(values[i])));
  return out;
}

std::vector<double> decode_f32_le(std::string_view bytes) {
  require(bytes.size() % 4 == 0, ErrorCode::kTruncated, "f32 payload length is not a multiple of 4");
  std::vector<double> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(bytes.data() + 4 * i)));
  return out;
}

std::string encode_f64_le(std::span<const double> values) {
  std::string out(values.size() * 8, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) put_le(out.data() + 8 * i, std::bit_cast<std::uint64_t>(values[i]));
  return out;
}

std::vector<double> decode_f64_le(std::string_view bytes) {
  require(bytes.size() % 8 == 0, ErrorCode::kTruncated, "f64 payload length is not a multiple of 8");
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::bit_cast<double>(get_le<std::uint64_t>(bytes.data() + 8 * i));
  return out;
}

}  // namespace linearlens
