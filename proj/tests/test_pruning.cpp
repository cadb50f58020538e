#include <gtest/gtest.h>

#include <random>

#include "linearlens/error.hpp"
#include "linearlens/pruning.hpp"
#include "oracles.hpp"

namespace linearlens {
namespace {

using testing::random_matrix;

ModelConfig small_config(std::size_t layers) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_seq_len = 32;
  return c;
}

const std::vector<std::int32_t>& stream() {
  static const std::vector<std::int32_t> s = story_token_stream(11, 300);
  return s;
}

const DecoderModel& trained_teacher() {
  static const DecoderModel m = [] {
    TrainConfig c;
    c.model = small_config(3);
    c.seq_len = 32;
    c.steps = 120;
    c.adam.lr = 3e-3;
    c.adam.warmup_steps = 10;
    c.corpus_stories = 300;
    c.corpus_seed = 11;
    c.eval_every = 0;
    c.measure_windows = 4;
    return pretrain(c).model;
  }();
  return m;
}

TrainBatch calib(std::size_t tokens = 1024) { return calibration_batch(stream(), tokens, 32); }

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::kIo;
}

TEST(RankLayers, ZeroedBlockRanksFirst) {
  DecoderModel model(small_config(3), 1);
  model.zero_block_output(1);
  const PruningPlan plan = rank_layers(forward(model, calib()).trace(), 1);
  EXPECT_EQ(plan.ranked[0].layer, 1u);
  EXPECT_NEAR(*plan.ranked[0].score, 1.0, 1e-12);
  EXPECT_EQ(plan.removed(), std::vector<std::size_t>{1});
}

TEST(RankLayers, TiesKeepIndexOrder) {
  std::mt19937_64 rng(2);
  const Matrix x = random_matrix(30, 4, rng);
  const EmbeddingTrace t{{{0, x}, {1, x}, {2, x}, {3, x}}, {}};
  const PruningPlan plan = rank_layers(t, 2);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(plan.ranked[i].layer, i);
}

TEST(RankLayers, DegenerateRanksLastWithWarning) {
  std::mt19937_64 rng(3);
  const Matrix x = random_matrix(30, 4, rng);
  const Matrix y = random_matrix(30, 4, rng);
  const EmbeddingTrace t{{{0, Matrix(30, 4, 1.0)}, {1, x}, {2, y}}, {}};
  std::vector<std::string> warnings;
  const PruningPlan plan = rank_layers(t, 1, PruneMode::kDrop, &warnings);
  EXPECT_EQ(plan.ranked.back().layer, 0u);
  EXPECT_FALSE(plan.ranked.back().score.has_value());
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(RankLayers, KMustLeaveALayer) {
  DecoderModel model(small_config(2), 1);
  const EmbeddingTrace t = forward(model, calib(256)).trace();
  EXPECT_EQ(code_of([&] { rank_layers(t, 2); }), ErrorCode::kInvalidArgument);
  EXPECT_EQ(prune_mode_from_string("linear_replace_distill"), PruneMode::kLinearReplaceDistill);
  EXPECT_THROW(prune_mode_from_string("chop"), Error);
}

TEST(RankLayers, StableAcrossCalibrationSamples) {
  const DecoderModel& teacher = trained_teacher();
  const auto a = rank_layers(forward(teacher, contiguous_windows(stream(), 0, 32, 32)).trace(), 2).removed();
  const auto b = rank_layers(forward(teacher, contiguous_windows(stream(), 4096, 32, 32)).trace(), 2).removed();
  std::size_t overlap = 0;
  for (std::size_t l : a) overlap += std::count(b.begin(), b.end(), l);
  EXPECT_GE(overlap, 1u);
}

TEST(RankLayers, ReprofiledPicksTopOfEachStudent) {
  const DecoderModel& teacher = trained_teacher();
  const TrainBatch b = calib();
  const PruningPlan once = rank_layers(forward(teacher, b).trace(), 0);
  const PruningPlan seq = rank_layers_reprofiled(teacher, b, 2);
  EXPECT_EQ(seq.ranked[0].layer, once.ranked[0].layer);
  EXPECT_EQ(seq.sequential, 2u);
  DecoderModel after = teacher;
  after.set_identity(seq.ranked[0].layer);
  const PruningPlan second = rank_layers(forward(after, b).trace(), 0);
  const auto next = std::find_if(second.ranked.begin(), second.ranked.end(),
                                 [&](const RankedLayer& r) { return r.layer != seq.ranked[0].layer; });
  EXPECT_EQ(seq.ranked[1].layer, next->layer);
  EXPECT_EQ(seq.removed().size(), 2u);
  EXPECT_EQ(rank_layers_reprofiled(teacher, b, 0).ranked.front().layer, once.ranked.front().layer);
  EXPECT_THROW(rank_layers_reprofiled(teacher, b, 3), Error);
}

TEST(DropLayers, KZeroIsUnchanged) {
  const DecoderModel& teacher = trained_teacher();
  PruningPlan plan = rank_layers(forward(teacher, calib()).trace(), 0);
  const StudentModel s = drop_layers(teacher, plan);
  EXPECT_TRUE(s.removed.empty());
  EXPECT_EQ(perplexity(s.model, stream()), perplexity(teacher, stream()));
}

TEST(DropLayers, RemovingZeroBlockChangesNothing) {
  DecoderModel model = trained_teacher();
  model.zero_block_output(2);
  const TrainBatch b = calib(256);
  const StudentModel s = drop_layers(model, rank_layers(forward(model, b).trace(), 1));
  ASSERT_EQ(s.removed, std::vector<std::size_t>{2});
  EXPECT_LT(s.model.parameter_count(), model.parameter_count());
  EXPECT_EQ(forward(s.model, b).logits, forward(model, b).logits);
  const std::vector<std::int32_t> held(stream().begin(), stream().begin() + 3000);
  EXPECT_LT(std::abs(perplexity(s.model, held) - perplexity(model, held)), 1e-9);
}

TEST(DropLayers, TrainedModelGetsWorse) {
  const DecoderModel& teacher = trained_teacher();
  const StudentModel s = drop_layers(teacher, rank_layers(forward(teacher, calib()).trace(), 1));
  const std::vector<std::int32_t> held(stream().begin(), stream().begin() + 3000);
  const double before = perplexity(teacher, held), after = perplexity(s.model, held);
  EXPECT_TRUE(std::isfinite(after));
  EXPECT_GT(after, before);
}

TEST(FitReplacement, ExactlyAffineBlockIsReproduced) {
  std::mt19937_64 rng(4);
  DecoderModel model(small_config(2), 5);
  const LinearMap truth{Matrix::identity(16) + random_matrix(16, 16, rng, 0.2), std::vector<double>(16, 0.3)};
  model.set_affine(1, truth);
  const Replacement r = fit_replacement(model, 1, calib());
  EXPECT_FALSE(r.rank_deficient);
  EXPECT_LT(r.residual, 1e-16 * r.zero_map_residual);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(r.map.weight(i, j), truth.weight(i, j), 1e-8);
}

TEST(FitReplacement, ZeroBlockFitsIdentity) {
  DecoderModel model = trained_teacher();
  model.zero_block_output(0);
  const Replacement r = fit_replacement(model, 0, calib());
  for (std::size_t i = 0; i < 16; ++i) {
    for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(r.map.weight(i, j), i == j ? 1.0 : 0.0, 1e-8);
    EXPECT_NEAR((*r.map.bias)[i], 0.0, 1e-8);
  }
}

TEST(FitReplacement, TrainedBlockBeatsZeroAndIdentityMaps) {
  const DecoderModel& teacher = trained_teacher();
  for (std::size_t layer = 0; layer < 3; ++layer) {
    const Replacement r = fit_replacement(teacher, layer, calib());
    EXPECT_LT(r.residual, r.zero_map_residual);
    EXPECT_LE(r.residual, r.identity_residual);
  }
}

TEST(FitReplacement, RandomPerturbationsNeverWin) {
  const DecoderModel& teacher = trained_teacher();
  const TrainBatch b = calib();
  const Replacement r = fit_replacement(teacher, 1, b);
  const ForwardCache cache = forward(teacher, b, {.compute_logits = false});
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    LinearMap m = r.map;
    m.weight += random_matrix(16, 16, rng, 1e-3);
    for (double& v : *m.bias) v += 1e-3 * std::normal_distribution<double>()(rng);
    EXPECT_GE(squared_residual(cache.stream[1], m, cache.stream[2]), r.residual * (1 - 1e-12));
  }
}

TEST(FitReplacement, RankDeficientCalibrationWarns) {
  DecoderModel model(small_config(2), 7);
  std::vector<std::string> warnings;
  const Replacement r = fit_replacement(model, 0, contiguous_windows(stream(), 0, 1, 8), &warnings);
  EXPECT_TRUE(r.rank_deficient);
  EXPECT_EQ(warnings.size(), 1u);
  EXPECT_TRUE(r.map.weight.all_finite());
}

DistillConfig quick_distill(std::size_t steps) {
  DistillConfig c;
  c.steps = steps;
  c.seq_len = 32;
  c.eval_windows = 8;
  return c;
}

TEST(Distill, TeacherAsStudentIsAFixedPoint) {
  const DecoderModel& teacher = trained_teacher();
  DistillConfig c = quick_distill(100);
  c.train_all = true;
  const DistillResult r = distill(teacher, teacher, stream(), c);
  double drift = 0.0;
  for (std::size_t i = 0; i < teacher.parameter_count(); ++i)
    drift = std::max(drift, std::abs(r.model.parameters()[i] - teacher.parameters()[i]));
  EXPECT_LT(drift, 1e-6);
  EXPECT_NEAR(r.initial.total, 0.0, 1e-12);
}

TEST(Distill, NeedsATrainableReplacement) {
  const DecoderModel& teacher = trained_teacher();
  EXPECT_EQ(code_of([&] { distill(teacher, teacher, stream(), quick_distill(1)); }), ErrorCode::kInvalidArgument);
}

TEST(Distill, OnlyReplacementsMoveAndMseDrops) {
  const DecoderModel& teacher = trained_teacher();
  PruningPlan plan = rank_layers(forward(teacher, calib()).trace(), 1, PruneMode::kLinearReplace);
  StudentModel s = prune(teacher, plan, calib(), stream(), quick_distill(0));
  const DistillResult r = distill(s.model, teacher, stream(), quick_distill(60));
  EXPECT_LE(r.final.mse, r.initial.mse);
  for (std::size_t i = 0; i < r.model.tensors().size(); ++i) {
    const TensorSlot& slot = r.model.tensors()[i];
    if (slot.name.find("replacement") != std::string::npos) continue;
    const std::span<const double> before = s.model.tensor(i), after = r.model.tensor(i);
    EXPECT_TRUE(std::equal(before.begin(), before.end(), after.begin())) << slot.name;
  }
}

TEST(Distill, FittedInitBeatsZeroInit) {
  const DecoderModel& teacher = trained_teacher();
  const std::size_t layer = rank_layers(forward(teacher, calib()).trace(), 1).removed()[0];
  DecoderModel fitted = teacher, zero = teacher;
  fitted.set_affine(layer, fit_replacement(teacher, layer, calib()).map);
  zero.set_affine(layer, LinearMap{Matrix(16, 16), std::vector<double>(16, 0.0)});
  const DistillConfig c = quick_distill(40);
  EXPECT_LT(distill(fitted, teacher, stream(), c).final.total, distill(zero, teacher, stream(), c).final.total);
}

TEST(Distill, DivergenceGuard) {
  const DecoderModel& teacher = trained_teacher();
  DecoderModel student = teacher;
  student.set_affine(0, LinearMap{Matrix::identity(16), std::vector<double>(16, 0.0)});
  DistillConfig c = quick_distill(5);
  c.divergence_window = 1;
  c.divergence_factor = 0.0;
  EXPECT_EQ(code_of([&] { distill(student, teacher, stream(), c); }), ErrorCode::kDivergence);
}

TEST(Distill, LossGradientMatchesFiniteDifferences) {
  const DecoderModel& teacher = trained_teacher();
  DecoderModel student = teacher;
  std::mt19937_64 rng(8);
  student.set_affine(1, LinearMap{Matrix::identity(16) + random_matrix(16, 16, rng, 0.1), std::vector<double>(16, 0.1)});
  student.set_trainable_all(false);
  const TrainBatch b = contiguous_windows(stream(), 0, 2, 16);
  for (LmTarget target : {LmTarget::kTeacher, LmTarget::kLabels}) {
    DistillConfig c = quick_distill(0);
    c.lm_target = target;
    const ForwardCache tc = forward(teacher, b);
    std::vector<double> g(student.parameter_count(), 0.0);
    distill_loss(student, tc, b, c, g);
    const std::size_t w = student.tensor_index("blocks.1.replacement.weight");
    const std::size_t off = student.tensors()[w].offset;
    for (std::size_t k : {0u, 17u, 100u, 255u}) {
      DecoderModel p = student;
      const double h = 1e-5;
      p.parameters()[off + k] += h;
      const double up = distill_loss(p, tc, b, c, {}).total;
      p.parameters()[off + k] -= 2 * h;
      const double down = distill_loss(p, tc, b, c, {}).total;
      const double num = (up - down) / (2 * h);
      EXPECT_NEAR(g[off + k], num, 1e-6 * std::max(1.0, std::abs(num)));
    }
  }
}

TEST(Pipeline, RowsAndBaseline) {
  const DecoderModel& teacher = trained_teacher();
  PipelineConfig pc;
  pc.ks = {0, 1};
  pc.calibration_tokens = 1024;
  pc.seq_len = 32;
  pc.distill = quick_distill(20);
  pc.probe_examples = 80;
  const std::vector<std::int32_t> held(stream().begin() + 5000, stream().begin() + 7000);
  const auto rows = evaluate_pipeline(teacher, stream(), held, pc);
  ASSERT_EQ(rows.size(), 6u);
  const double base = perplexity(teacher, held);
  for (const auto& r : rows) {
    if (r.k == 0) {
      EXPECT_EQ(r.ppl, base);
      EXPECT_EQ(r.params, teacher.parameter_count());
    } else {
      EXPECT_EQ(r.removed.size(), 1u);
      EXPECT_LT(r.params, teacher.parameter_count());
    }
  }
  const std::string csv = pipeline_to_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "mode,k,removed_layers,params,ppl,probe_acc");
}

}  // namespace
}  // namespace linearlens
