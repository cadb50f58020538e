#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "linearlens/corpus.hpp"
#include "linearlens/error.hpp"
#include "linearlens/training.hpp"
#include "oracles.hpp"

namespace linearlens {
namespace {

using testing::random_matrix;

ModelConfig tiny_config(std::size_t layers = 2) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_seq_len = 16;
  c.vocab_size = 24;
  return c;
}

TrainBatch random_batch(std::size_t batch, std::size_t seq, std::size_t vocab, std::uint64_t seed,
                        bool ragged = false) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> tok(0, static_cast<std::int32_t>(vocab) - 2);
  std::vector<std::vector<std::int32_t>> seqs(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t len = ragged ? seq - (i % 3) : seq;
    for (std::size_t t = 0; t < len; ++t) seqs[i].push_back(tok(rng));
  }
  return TrainBatch::from_sequences(seqs, static_cast<std::int32_t>(vocab) - 1);
}

// Independent log-softmax NLL in extended precision.
double oracle_nll(const Matrix& logits, const TrainBatch& batch) {
  long double sum = 0.0L;
  std::size_t n = 0;
  for (std::size_t i = 0; i < batch.batch; ++i)
    for (std::size_t t = 0; t + 1 < batch.seq; ++t) {
      const std::size_t r = i * batch.seq + t;
      if (!batch.mask[r] || !batch.mask[r + 1]) continue;
      long double z = 0.0L;
      for (std::size_t v = 0; v < logits.cols(); ++v) z += std::exp(static_cast<long double>(logits(r, v)));
      sum += std::log(z) - logits(r, static_cast<std::size_t>(batch.tokens[r + 1]));
      ++n;
    }
  return static_cast<double>(sum / n);
}

EmbeddingTrace two_layer_trace(const Matrix& a, const Matrix& b) { return {{{0, a}, {1, b}}, {}}; }

// ---------------- losses ----------------

TEST(LmLoss, UniformLogitsGiveLogVocab) {
  const TrainBatch batch = random_batch(3, 8, 50, 1);
  const Matrix logits(batch.positions(), 50, 0.0);
  EXPECT_NEAR(lm_loss(logits, batch), std::log(50.0), 1e-12);
}

TEST(LmLoss, ConfidentCorrectLogitsGiveZero) {
  const TrainBatch batch = random_batch(2, 6, 20, 2);
  Matrix logits(batch.positions(), 20, 0.0);
  for (std::size_t r = 0; r + 1 < batch.positions(); ++r) logits(r, static_cast<std::size_t>(batch.tokens[r + 1])) = 60.0;
  EXPECT_LT(lm_loss(logits, batch), 1e-20);
}

TEST(LmLoss, MatchesExtendedPrecisionOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const TrainBatch batch = random_batch(4, 10, 30, 100 + trial, true);
    const Matrix logits = random_matrix(batch.positions(), 30, rng, 5.0);
    EXPECT_NEAR(lm_loss(logits, batch), oracle_nll(logits, batch), 1e-8);
  }
}

TEST(LmLoss, AllPaddingIsAnError) {
  TrainBatch batch = random_batch(2, 4, 10, 4);
  std::fill(batch.mask.begin(), batch.mask.end(), 0);
  try {
    lm_loss(Matrix(8, 10), batch);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidArgument);
  }
}

TEST(Regularizer, MseExamples) {
  std::mt19937_64 rng(5);
  const Matrix a = random_matrix(7, 4, rng);
  EXPECT_EQ(reg_mse(two_layer_trace(a, a), 0.5), 0.0);
  Matrix b = a;
  for (std::size_t i = 0; i < b.rows(); ++i) b(i, i % 4) += 1.0;
  EXPECT_NEAR(reg_mse(two_layer_trace(a, b), 0.5), 0.5, 1e-12);
  EXPECT_EQ(reg_mse(two_layer_trace(a, b), 0.0), 0.0);
}

TEST(Regularizer, CosineExamples) {
  std::mt19937_64 rng(6);
  const Matrix a = random_matrix(5, 3, rng);
  EXPECT_NEAR(reg_cosine(two_layer_trace(a, a), 1.0), 0.0, 1e-8);
  Matrix e1(4, 2), e2(4, 2);
  for (std::size_t i = 0; i < 4; ++i) {
    e1(i, 0) = 1.0 + static_cast<double>(i);
    e2(i, 1) = 2.0;
  }
  EXPECT_NEAR(reg_cosine(two_layer_trace(e1, e2), 1.0), 1.0, 1e-12);
  EXPECT_NEAR(reg_cosine(two_layer_trace(a, a * -3.0), 1.0), 2.0, 1e-8);
}

TEST(Regularizer, SumsOverLayerPairs) {
  std::mt19937_64 rng(7);
  const Matrix a = random_matrix(6, 3, rng), b = random_matrix(6, 3, rng), c = random_matrix(6, 3, rng);
  const EmbeddingTrace three{{{0, a}, {1, b}, {2, c}}, {}};
  EXPECT_NEAR(reg_mse(three, 2.0), reg_mse(two_layer_trace(a, b), 2.0) + reg_mse(two_layer_trace(b, c), 2.0), 1e-12);
  EXPECT_NEAR(reg_cosine(three, 2.0),
              reg_cosine(two_layer_trace(a, b), 2.0) + reg_cosine(two_layer_trace(b, c), 2.0), 1e-12);
}

TEST(Regularizer, ConfigValidation) {
  EXPECT_THROW((RegularizerConfig{RegularizerKind::kMse, -1.0}.validate()), Error);
  const RegularizerConfig r{RegularizerKind::kCosine, 0.5};
  const RegularizerConfig back = RegularizerConfig::from_json(r.to_json());
  EXPECT_EQ(back.kind, r.kind);
  EXPECT_EQ(back.lambda, r.lambda);
  EXPECT_THROW(regularizer_kind_from_string("l1"), Error);
}

// ---------------- training steps ----------------

TEST(TrainStep, NoneRegularizerTotalIsLm) {
  DecoderModel model(tiny_config(), 1);
  AdamOptimizer opt({}, model.parameter_count());
  const LossBreakdown l = train_step(model, random_batch(4, 12, 24, 8), {RegularizerKind::kNone, 3.0}, opt);
  EXPECT_NEAR(l.total, l.lm, 1e-12);
  EXPECT_EQ(l.reg, 0.0);
  EXPECT_EQ(model.step(), 1u);
}

TEST(TrainStep, ZeroLambdaMatchesNone) {
  DecoderModel a(tiny_config(), 2), b(tiny_config(), 2);
  AdamOptimizer oa({}, a.parameter_count()), ob({}, b.parameter_count());
  for (int s = 0; s < 3; ++s) {
    const TrainBatch batch = random_batch(4, 12, 24, 10 + s);
    train_step(a, batch, {RegularizerKind::kNone, 0.0}, oa);
    train_step(b, batch, {RegularizerKind::kCosine, 0.0}, ob);
  }
  EXPECT_TRUE(std::equal(a.parameters().begin(), a.parameters().end(), b.parameters().begin()));
}

TEST(TrainStep, RerunsAreBitIdentical) {
  auto run = [] {
    DecoderModel m(tiny_config(), 3);
    AdamOptimizer opt({}, m.parameter_count());
    std::vector<double> losses;
    for (int s = 0; s < 2; ++s)
      losses.push_back(train_step(m, random_batch(4, 12, 24, 20 + s), {RegularizerKind::kMse, 0.5}, opt).total);
    return std::make_pair(losses, std::vector<double>(m.parameters().begin(), m.parameters().end()));
  };
  EXPECT_EQ(run(), run());
}

TEST(TrainStep, NonFiniteLossAbortsWithBatchDump) {
  DecoderModel model(tiny_config(), 4);
  model.tensor("head.weight")[0] = std::numeric_limits<double>::quiet_NaN();
  AdamOptimizer opt({}, model.parameter_count());
  try {
    train_step(model, random_batch(2, 6, 24, 5), {}, opt);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNumeric);
    EXPECT_NE(std::string(e.what()).find("offending batch"), std::string::npos);
  }
}

TEST(TrainStep, ShardedGradientMatchesSerial) {
  const DecoderModel model(tiny_config(), 5);
  const TrainBatch batch = random_batch(7, 12, 24, 30, true);
  const RegularizerConfig reg{RegularizerKind::kCosine, 0.5};
  std::vector<double> serial(model.parameter_count(), 0.0);
  const LossBreakdown ls = loss_and_gradient(model, batch, reg, serial, 1);
  for (std::size_t shards : {2u, 3u, 4u, 7u}) {
    std::vector<double> sharded(model.parameter_count(), 0.0);
    const LossBreakdown lp = loss_and_gradient(model, batch, reg, sharded, shards);
    EXPECT_NEAR(lp.total, ls.total, 1e-12);
    for (std::size_t i = 0; i < serial.size(); ++i) ASSERT_NEAR(sharded[i], serial[i], 1e-10) << shards;
  }
}

TEST(Adam, WarmupRampsLearningRate) {
  AdamConfig c;
  c.warmup_steps = 4;
  AdamOptimizer opt(c, 1);
  EXPECT_DOUBLE_EQ(opt.current_lr(), c.lr / 4.0);
}

// ---------------- gradient checks ----------------

TEST(GradCheck, LinearOnlyModel) {
  ModelConfig c = tiny_config();
  c.init_std = 0.5;
  DecoderModel model(c, 6);
  std::mt19937_64 rng(6);
  for (std::size_t b = 0; b < model.n_layers(); ++b)
    model.set_affine(b, LinearMap{Matrix::identity(16) + random_matrix(16, 16, rng, 0.1),
                                  std::vector<double>(16, 0.01)});
  // At h = 1e-5 an O(1) loss differs by ~1 ulp / 2h ≈ 2e-11 from rounding
  // alone, so gradients under 1e-3 are compared absolutely.
  GradCheckOptions o;
  o.floor = 1e-3;
  const GradCheckResult r = grad_check(model, random_batch(3, 10, 24, 40), {RegularizerKind::kNone, 0.0}, o);
  EXPECT_GE(r.checked, 200u);
  EXPECT_LT(r.max_relative_error, 1e-7) << r.worst_tensor;
}

class GradCheckFull : public ::testing::TestWithParam<std::tuple<RegularizerKind, bool>> {};

TEST_P(GradCheckFull, BelowTolerance) {
  const auto [kind, pre_norm] = GetParam();
  ModelConfig c = tiny_config();
  c.pre_norm = pre_norm;
  c.init_std = 0.3;
  const DecoderModel model(c, 7);
  ASSERT_LE(model.parameter_count(), 10000u);
  const GradCheckResult r = grad_check(model, random_batch(3, 10, 24, 41, true), {kind, 0.5});
  EXPECT_GE(r.checked, 200u);
  EXPECT_LT(r.max_relative_error, 1e-3) << r.worst_tensor;
}

INSTANTIATE_TEST_SUITE_P(Kinds, GradCheckFull,
                         ::testing::Combine(::testing::Values(RegularizerKind::kNone, RegularizerKind::kMse,
                                                              RegularizerKind::kCosine),
                                            ::testing::Bool()));

// ---------------- perplexity ----------------

TEST(Perplexity, UniformModelGivesVocab) {
  DecoderModel model(tiny_config(), 8);
  auto head = model.tensor("head.weight");
  std::fill(head.begin(), head.end(), 0.0);
  std::vector<std::int32_t> tokens(100);
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<std::int32_t>(i % 20);
  EXPECT_NEAR(perplexity(model, tokens), 24.0, 1e-9);
}

TEST(Perplexity, WindowingMatchesDirectLoss) {
  const DecoderModel model(tiny_config(), 9);
  std::vector<std::int32_t> tokens;
  for (std::int32_t i = 0; i < 46; ++i) tokens.push_back((i * 5 + 3) % 23);
  // 46 tokens with 16-token windows advancing by 15: windows start at 0, 15, 30, 45.
  double nll = 0.0;
  std::size_t count = 0;
  for (std::size_t start : {0u, 15u, 30u}) {
    const std::vector<std::int32_t> w(tokens.begin() + start, tokens.begin() + start + 16);
    const TrainBatch b = TrainBatch::from_sequences({w}, 23);
    const LossSum s = lm_loss_sum(forward(model, b).logits, b, 0.0, nullptr);
    nll += s.sum;
    count += s.count;
  }
  const TrainBatch tail = TrainBatch::from_sequences({{tokens[45]}}, 23);
  EXPECT_EQ(lm_target_count(tail), 0u);
  EXPECT_EQ(count, tokens.size() - 1);
  const double expected = std::exp(nll / static_cast<double>(count));
  EXPECT_NEAR(perplexity(model, tokens, 1), expected, 1e-12 * expected);
  EXPECT_NEAR(perplexity(model, tokens, 16), expected, 1e-12 * expected);
  EXPECT_THROW(perplexity(model, {1}), Error);
}

TEST(Perplexity, MemorizedSequenceApproachesOne) {
  ModelConfig c = tiny_config(1);
  DecoderModel model(c, 10);
  std::vector<std::int32_t> seq;
  for (std::int32_t i = 0; i < 16; ++i) seq.push_back((i * 7) % 23);
  const TrainBatch batch = TrainBatch::from_sequences({seq}, 23);
  AdamConfig ac;
  ac.lr = 1e-2;
  ac.warmup_steps = 0;
  AdamOptimizer opt(ac, model.parameter_count());
  for (int s = 0; s < 300; ++s) train_step(model, batch, {}, opt);
  EXPECT_LT(perplexity(model, seq), 1.05);
}

TEST(Perplexity, TrainedModelBeatsRandomInit) {
  TrainConfig config;
  config.model.n_layers = 1;
  config.model.d_model = 32;
  config.model.n_heads = 2;
  config.model.d_ff = 64;
  config.model.max_seq_len = 32;
  config.seq_len = 32;
  config.steps = 150;
  config.adam.lr = 3e-3;
  config.adam.warmup_steps = 10;
  config.corpus_stories = 200;
  config.eval_every = 0;
  config.measure_windows = 8;
  const DecoderModel untrained(config.model, config.seed);
  const TrainRun run = pretrain(config);
  std::vector<std::int32_t> held = heldout_stream(config);
  held.resize(2000);
  EXPECT_LT(perplexity(run.model, held), perplexity(untrained, held));
  ASSERT_EQ(run.snapshots.size(), 1u);
  EXPECT_EQ(run.snapshots[0].step, 150u);
}

TEST(TrainConfig, JsonRoundTripAndUnknownField) {
  TrainConfig c;
  c.reg = {RegularizerKind::kCosine, 0.5};
  c.steps = 77;
  EXPECT_EQ(TrainConfig::from_json(c.to_json()).to_json(), c.to_json());
  nlohmann::json j = c.to_json();
  j["stepz"] = 3;
  EXPECT_THROW(TrainConfig::from_json(j), Error);
}

// ---------------- classification ----------------

ModelConfig classifier_config() {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 32;
  c.n_heads = 2;
  c.d_ff = 64;
  c.max_seq_len = 64;
  return c;
}

TEST(Finetune, SeparableTask) {
  const auto train = generate_task(TaskKind::kMarker, 1, 200);
  const auto test = generate_task(TaskKind::kMarker, 2, 100);
  FinetuneOptions o;
  o.epochs = 8;
  const FinetuneResult r = finetune_classifier(DecoderModel(classifier_config(), 1), train, test, o);
  EXPECT_GE(r.accuracy, 0.95);
}

TEST(Finetune, FrozenBodyBeatsMajority) {
  const auto train = generate_task(TaskKind::kSentiment, 3, 200);
  const auto test = generate_task(TaskKind::kSentiment, 4, 100);
  FinetuneOptions o;
  o.epochs = 20;
  o.freeze_body = true;
  o.adam.lr = 1e-2;
  const DecoderModel body(classifier_config(), 2);
  const FinetuneResult r = finetune_classifier(body, train, test, o);
  EXPECT_GT(r.accuracy, 0.5);
  EXPECT_TRUE(std::equal(body.parameters().begin(), body.parameters().end(), r.model.parameters().begin()));
}

TEST(Finetune, ShuffledLabelsAreChance) {
  auto train = generate_task(TaskKind::kMarker, 5, 200);
  auto test = generate_task(TaskKind::kMarker, 6, 200);
  std::mt19937_64 rng(9);
  std::vector<int> labels;
  for (const auto& e : test) labels.push_back(e.label);
  std::shuffle(labels.begin(), labels.end(), rng);
  for (std::size_t i = 0; i < test.size(); ++i) test[i].label = labels[i];
  FinetuneOptions o;
  o.epochs = 6;
  const FinetuneResult r = finetune_classifier(DecoderModel(classifier_config(), 3), train, test, o);
  EXPECT_NEAR(r.accuracy, 0.5, 0.1);
}

TEST(Finetune, SingleClassIsAnError) {
  auto train = generate_task(TaskKind::kMarker, 7, 10);
  for (auto& e : train) e.label = 1;
  EXPECT_THROW(finetune_classifier(DecoderModel(classifier_config(), 4), train, train), Error);
}

}  // namespace
}  // namespace linearlens
