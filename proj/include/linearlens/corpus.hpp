#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "linearlens/model.hpp"

namespace linearlens {

/// Byte-level tokenizer: ids 0..255 are raw bytes, followed by three specials.
struct ByteTokenizer {
  static constexpr std::int32_t kBos = 256;
  static constexpr std::int32_t kEos = 257;
  static constexpr std::int32_t kPad = 258;
  static constexpr std::size_t kVocabSize = 259;

  static std::vector<std::int32_t> encode(std::string_view text, bool add_bos = false, bool add_eos = false);
  static std::string decode(const std::vector<std::int32_t>& ids);
};

/// Seeded templated-grammar story generator standing in for a children's
/// story corpus.
std::vector<std::string> generate_stories(std::uint64_t seed, std::size_t count);

/// Stories joined into one token stream, each wrapped in BOS/EOS.
std::vector<std::int32_t> story_token_stream(std::uint64_t seed, std::size_t stories);

/// Samples fixed-length training windows uniformly from a token stream.
class WindowSampler {
 public:
  WindowSampler(std::vector<std::int32_t> stream, std::uint64_t seed);
  TrainBatch next(std::size_t batch, std::size_t seq);
  const std::vector<std::int32_t>& stream() const noexcept { return stream_; }

 private:
  std::vector<std::int32_t> stream_;
  std::mt19937_64 rng_;
};

/// First `count` positions of `windows` consecutive windows, used to build
/// fixed calibration / measurement batches.
TrainBatch contiguous_windows(const std::vector<std::int32_t>& stream, std::size_t offset, std::size_t windows,
                              std::size_t seq);

struct LabeledText {
  std::string text;
  int label = 0;
};

enum class TaskKind {
  kSentiment,  // story sentence ending in a positive or negative feeling
  kMarker,     // whether a marker object appears; only marker words contain a "q"
};

TaskKind task_kind_from_string(std::string_view name);
std::string_view to_string(TaskKind kind);

/// Balanced synthetic binary classification examples.
std::vector<LabeledText> generate_task(TaskKind kind, std::uint64_t seed, std::size_t count);

/// Tokenizes examples into one padded batch, truncating to max_len tokens.
TrainBatch batch_from_examples(const std::vector<LabeledText>& examples, std::size_t begin, std::size_t end,
                               std::size_t max_len);

}  // namespace linearlens
