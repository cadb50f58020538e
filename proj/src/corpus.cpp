#include "linearlens/corpus.hpp"

#include <array>

#include "linearlens/error.hpp"

namespace linearlens {

namespace {

constexpr std::array kNames{"Lily", "Tom", "Mia", "Ben", "Sue", "Max", "Anna", "Sam", "Lucy", "Tim"};
constexpr std::array kAnimals{"cat", "dog", "bird", "bunny", "frog", "duck", "bear", "fox"};
constexpr std::array kPlaces{"park", "garden", "forest", "house", "river", "school", "beach", "farm"};
constexpr std::array kObjects{"ball", "kite", "box", "hat", "cake", "book", "toy", "flower", "stick", "cup"};
constexpr std::array kVerbs{"play", "run", "jump", "sing", "dance", "swim", "read", "draw"};
constexpr std::array kAdjectives{"little", "big", "happy", "red", "shiny", "soft", "small", "funny"};
constexpr std::array kPositive{"happy", "glad", "proud", "calm", "excited", "thankful"};
constexpr std::array kNegative{"sad", "angry", "scared", "upset", "lonely", "worried"};
constexpr std::array kMarkers{"quilt", "quiver", "quartz"};

template <typename Array>
const char* pick(const Array& a, std::mt19937_64& rng) {
  return a[std::uniform_int_distribution<std::size_t>(0, a.size() - 1)(rng)];
}

std::string story(std::mt19937_64& rng) {
  const std::string name = pick(kNames, rng);
  const std::string friend_name = pick(kNames, rng);
  const std::string animal = pick(kAnimals, rng);
  const std::string place = pick(kPlaces, rng);
  const std::string object = pick(kObjects, rng);
  std::string s = "Once upon a time, there was a " + std::string(pick(kAdjectives, rng)) + " " + animal +
                  " named " + name + ". ";
  s += name + " liked to " + pick(kVerbs, rng) + " in the " + place + ". ";
  switch (std::uniform_int_distribution<int>(0, 2)(rng)) {
    case 0:
      s += "One day, " + name + " found a " + pick(kAdjectives, rng) + " " + object + ". ";
      s += name + " showed the " + object + " to " + friend_name + ". ";
      break;
    case 1:
      s += "One day, " + name + " lost the " + object + " near the " + pick(kPlaces, rng) + ". ";
      s += friend_name + " helped " + name + " look for it. ";
      break;
    default:
      s += name + " and " + friend_name + " wanted to " + pick(kVerbs, rng) + " together. ";
      break;
  }
  const bool good = std::uniform_int_distribution<int>(0, 3)(rng) != 0;
  s += std::string("At the end of the day, ") + name + " felt " + (good ? pick(kPositive, rng) : pick(kNegative, rng)) +
       ".";
  return s;
}

}  // namespace

std::vector<std::int32_t> ByteTokenizer::encode(std::string_view text, bool add_bos, bool add_eos) {
  std::vector<std::int32_t> ids;
  ids.reserve(text.size() + 2);
  if (add_bos) ids.push_back(kBos);
  for (unsigned char c : text) ids.push_back(c);
  if (add_eos) ids.push_back(kEos);
  return ids;
}

std::string ByteTokenizer::decode(const std::vector<std::int32_t>& ids) {
  std::string s;
  for (std::int32_t id : ids)
    if (id >= 0 && id < 256) s.push_back(static_cast<char>(id));
  return s;
}

std::vector<std::string> generate_stories(std::uint64_t seed, std::size_t count) {
  std::mt19937_64 rng(seed);
  std::vector<std::string> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(story(rng));
  return out;
}

std::vector<std::int32_t> story_token_stream(std::uint64_t seed, std::size_t stories) {
  std::vector<std::int32_t> stream;
  for (const auto& s : generate_stories(seed, stories)) {
    const auto ids = ByteTokenizer::encode(s, true, true);
    stream.insert(stream.end(), ids.begin(), ids.end());
  }
  return stream;
}

WindowSampler::WindowSampler(std::vector<std::int32_t> stream, std::uint64_t seed)
    : stream_(std::move(stream)), rng_(seed) {
  require(!stream_.empty(), ErrorCode::kInvalidArgument, "empty token stream");
}

TrainBatch WindowSampler::next(std::size_t batch, std::size_t seq) {
  require(stream_.size() >= seq, ErrorCode::kInvalidArgument, "token stream shorter than one window");
  TrainBatch b;
  b.batch = batch;
  b.seq = seq;
  b.tokens.resize(batch * seq);
  b.mask.assign(batch * seq, 1);
  std::uniform_int_distribution<std::size_t> start(0, stream_.size() - seq);
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t s = start(rng_);
    std::copy_n(stream_.begin() + static_cast<std::ptrdiff_t>(s), seq, b.tokens.begin() + static_cast<std::ptrdiff_t>(i * seq));
  }
  return b;
}

TrainBatch contiguous_windows(const std::vector<std::int32_t>& stream, std::size_t offset, std::size_t windows,
                              std::size_t seq) {
  require(offset + windows * seq <= stream.size(), ErrorCode::kInvalidArgument,
          "token stream too short for the requested windows");
  TrainBatch b;
  b.batch = windows;
  b.seq = seq;
  b.tokens.assign(stream.begin() + static_cast<std::ptrdiff_t>(offset),
                  stream.begin() + static_cast<std::ptrdiff_t>(offset + windows * seq));
  b.mask.assign(windows * seq, 1);
  return b;
}

TaskKind task_kind_from_string(std::string_view name) {
  if (name == "sentiment") return TaskKind::kSentiment;
  if (name == "marker") return TaskKind::kMarker;
  fail(ErrorCode::kInvalidArgument, "unknown task '" + std::string(name) + "' (expected sentiment or marker)");
}

std::string_view to_string(TaskKind kind) { return kind == TaskKind::kSentiment ? "sentiment" : "marker"; }

std::vector<LabeledText> generate_task(TaskKind kind, std::uint64_t seed, std::size_t count) {
  std::mt19937_64 rng(seed);
  std::vector<LabeledText> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % 2);
    const std::string name = pick(kNames, rng);
    std::string text;
    if (kind == TaskKind::kSentiment) {
      text = name + " went to the " + pick(kPlaces, rng) + " with the " + pick(kAnimals, rng) + " and felt " +
             (label ? pick(kPositive, rng) : pick(kNegative, rng)) + ".";
    } else {
      const std::string thing = label ? pick(kMarkers, rng) : pick(kObjects, rng);
      text = name + " saw a " + pick(kAdjectives, rng) + " " + thing + " in the " + pick(kPlaces, rng) + ".";
    }
    out.push_back({std::move(text), label});
  }
  return out;
}

TrainBatch batch_from_examples(const std::vector<LabeledText>& examples, std::size_t begin, std::size_t end,
                               std::size_t max_len) {
  require(begin < end && end <= examples.size(), ErrorCode::kInvalidArgument, "bad example range");
  std::vector<std::vector<std::int32_t>> seqs;
  std::vector<int> labels;
  for (std::size_t i = begin; i < end; ++i) {
    auto ids = ByteTokenizer::encode(examples[i].text, true, false);
    if (ids.size() > max_len) ids.resize(max_len);
    seqs.push_back(std::move(ids));
    labels.push_back(examples[i].label);
  }
  TrainBatch b = TrainBatch::from_sequences(seqs, ByteTokenizer::kPad);
  b.labels = std::move(labels);
  return b;
}

}  // namespace linearlens
