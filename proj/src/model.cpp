#include "linearlens/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>

#include "linearlens/error.hpp"
#include "linearlens/kernels.hpp"

namespace linearlens {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluCoeff = 0.7978845608028654;  // sqrt(2/pi)

// ---- small dense helpers over flat tensors ----

void linear_forward(const Matrix& x, std::span<const double> w, std::span<const double> b, Matrix& out,
                    std::size_t d_out) {
  out = Matrix(x.rows(), d_out);
  kernels::matmul(x.values(), w, out.values(), x.rows(), x.cols(), d_out);
  if (!b.empty()) {
    for (std::size_t r = 0; r < out.rows(); ++r) {
      double* row = out.data() + r * d_out;
      for (std::size_t c = 0; c < d_out; ++c) row[c] += b[c];
    }
  }
}

// d_x (overwritten unless accumulate) = d_out · wᵀ; dw += xᵀ·d_out; db += colsum(d_out).
void linear_backward(const Matrix& x, std::span<const double> w, const Matrix& d_out, Matrix* d_x,
                     double* dw, double* db) {
  const std::size_t n = x.rows(), d_in = x.cols(), d_o = d_out.cols();
  if (d_x) {
    *d_x = Matrix(n, d_in);
    kernels::matmul_nt(d_out.values(), w, d_x->values(), n, d_o, d_in);
  }
  if (dw) kernels::matmul_tn(x.values(), d_out.values(), {dw, d_in * d_o}, n, d_in, d_o, true);
  if (db) {
    for (std::size_t r = 0; r < n; ++r) {
      const double* row = d_out.data() + r * d_o;
      for (std::size_t c = 0; c < d_o; ++c) db[c] += row[c];
    }
  }
}

void layernorm_forward(const Matrix& x, std::span<const double> g, std::span<const double> b, Matrix& out,
                       std::vector<double>& mean, std::vector<double>& rstd) {
  const std::size_t n = x.rows(), d = x.cols();
  out = Matrix(n, d);
  mean.assign(n, 0.0);
  rstd.assign(n, 0.0);
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < static_cast<std::int64_t>(n); ++r) {
    const double* xr = x.data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += xr[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
    double* o = out.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) o[c] = (xr[c] - mu) * rs * g[c] + b[c];
    mean[r] = mu;
    rstd[r] = rs;
  }
}

// Adds dL/dx into d_x.
void layernorm_backward(const Matrix& d_out, const Matrix& x, std::span<const double> g,
                        const std::vector<double>& mean, const std::vector<double>& rstd, Matrix& d_x,
                        double* dg, double* db) {
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> xhat(d), dxhat(d);
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = x.data() + r * d;
    const double* dy = d_out.data() + r * d;
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      xhat[c] = (xr[c] - mean[r]) * rstd[r];
      dxhat[c] = dy[c] * g[c];
      mean_dxhat += dxhat[c];
      mean_dxhat_xhat += dxhat[c] * xhat[c];
      if (dg) dg[c] += dy[c] * xhat[c];
      if (db) db[c] += dy[c];
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    double* dx = d_x.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) dx[c] += rstd[r] * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
  }
}

void gelu_forward(const Matrix& x, Matrix& out) {
  out = Matrix(x.rows(), x.cols());
  const auto in = x.values();
  auto o = out.values();
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(in.size()); ++i) {
    const double v = in[i];
    o[i] = 0.5 * v * (1.0 + std::tanh(kGeluCoeff * (v + 0.044715 * v * v * v)));
  }
}

Matrix gelu_backward(const Matrix& x, const Matrix& d_out) {
  Matrix d_x(x.rows(), x.cols());
  const auto in = x.values();
  const auto g = d_out.values();
  auto o = d_x.values();
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(in.size()); ++i) {
    const double v = in[i];
    const double u = kGeluCoeff * (v + 0.044715 * v * v * v);
    const double t = std::tanh(u);
    const double du = kGeluCoeff * (1.0 + 3.0 * 0.044715 * v * v);
    o[i] = g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
  }
  return d_x;
}

}  // namespace

// ---------------- config ----------------

void ModelConfig::validate() const {
  require(vocab_size > 0 && n_layers > 0 && d_model > 0 && n_heads > 0 && d_ff > 0 && max_seq_len > 0,
          ErrorCode::kInvalidArgument, "model config counts must be positive");
  require(d_model % n_heads == 0, ErrorCode::kInvalidArgument, "d_model must be divisible by n_heads");
  require(dropout == 0.0, ErrorCode::kInvalidArgument, "dropout must be 0 (deterministic decoder)");
  require(init_std > 0.0, ErrorCode::kInvalidArgument, "init_std must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"n_layers", n_layers}, {"d_model", d_model},
          {"n_heads", n_heads},       {"d_ff", d_ff},         {"max_seq_len", max_seq_len},
          {"dropout", dropout},       {"pre_norm", pre_norm}, {"init_std", init_std}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.dropout = j.value("dropout", c.dropout);
  c.pre_norm = j.value("pre_norm", c.pre_norm);
  c.init_std = j.value("init_std", c.init_std);
  c.validate();
  return c;
}

std::string_view to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::kTransformer: return "transformer";
    case BlockKind::kIdentity: return "identity";
    case BlockKind::kAffine: return "affine";
  }
  return "unknown";
}

BlockKind block_kind_from_string(std::string_view s) {
  if (s == "transformer") return BlockKind::kTransformer;
  if (s == "identity") return BlockKind::kIdentity;
  if (s == "affine") return BlockKind::kAffine;
  fail(ErrorCode::kFormat, "unknown block kind '" + std::string(s) + "'");
}

// ---------------- batch ----------------

void TrainBatch::validate(std::size_t vocab_size, std::size_t max_seq_len) const {
  require(batch > 0 && seq > 0, ErrorCode::kInvalidArgument, "empty batch");
  require(tokens.size() == positions() && mask.size() == positions(), ErrorCode::kDimension,
          "batch tokens/mask size does not match batch*seq");
  require(seq <= max_seq_len, ErrorCode::kInvalidArgument, "sequence longer than max_seq_len");
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    require(mask[i] <= 1, ErrorCode::kInvalidArgument, "mask must be boolean");
    require(tokens[i] >= 0 && static_cast<std::size_t>(tokens[i]) < vocab_size, ErrorCode::kInvalidArgument,
            "token id " + std::to_string(tokens[i]) + " outside vocabulary of size " + std::to_string(vocab_size));
  }
  require(labels.empty() || labels.size() == batch, ErrorCode::kDimension, "one label per sequence expected");
}

TrainBatch TrainBatch::from_sequences(const std::vector<std::vector<std::int32_t>>& seqs, std::int32_t pad) {
  TrainBatch b;
  b.batch = seqs.size();
  for (const auto& s : seqs) b.seq = std::max(b.seq, s.size());
  b.tokens.assign(b.positions(), pad);
  b.mask.assign(b.positions(), 0);
  for (std::size_t i = 0; i < seqs.size(); ++i)
    for (std::size_t t = 0; t < seqs[i].size(); ++t) {
      b.tokens[i * b.seq + t] = seqs[i][t];
      b.mask[i * b.seq + t] = 1;
    }
  return b;
}

// ---------------- model ----------------

std::size_t DecoderModel::add(std::string name, std::size_t rows, std::size_t cols) {
  const std::size_t offset = tensors_.empty() ? 0 : tensors_.back().offset + tensors_.back().size();
  tensors_.push_back({std::move(name), offset, rows, cols, true});
  return tensors_.size() - 1;
}

void DecoderModel::build_layout(const std::vector<BlockKind>& kinds) {
  const std::size_t d = config_.d_model, ff = config_.d_ff;
  kinds_ = kinds;
  tensors_.clear();
  blocks_.assign(kinds.size(), {});
  wte_ = add("wte", config_.vocab_size, d);
  wpe_ = add("wpe", config_.max_seq_len, d);
  for (std::size_t b = 0; b < kinds.size(); ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    BlockTensors& t = blocks_[b];
    switch (kinds[b]) {
      case BlockKind::kTransformer:
        t.ln1_g = add(p + "ln1.weight", 1, d);
        t.ln1_b = add(p + "ln1.bias", 1, d);
        t.qkv_w = add(p + "attn.qkv.weight", d, 3 * d);
        t.qkv_b = add(p + "attn.qkv.bias", 1, 3 * d);
        t.out_w = add(p + "attn.out.weight", d, d);
        t.out_b = add(p + "attn.out.bias", 1, d);
        t.ln2_g = add(p + "ln2.weight", 1, d);
        t.ln2_b = add(p + "ln2.bias", 1, d);
        t.fc_w = add(p + "mlp.fc.weight", d, ff);
        t.fc_b = add(p + "mlp.fc.bias", 1, ff);
        t.proj_w = add(p + "mlp.proj.weight", ff, d);
        t.proj_b = add(p + "mlp.proj.bias", 1, d);
        break;
      case BlockKind::kAffine:
        t.affine_w = add(p + "replacement.weight", d, d);
        t.affine_b = add(p + "replacement.bias", 1, d);
        break;
      case BlockKind::kIdentity:
        break;
    }
  }
  lnf_g_ = add("lnf.weight", 1, d);
  lnf_b_ = add("lnf.bias", 1, d);
  head_w_ = add("head.weight", d, config_.vocab_size);
  params_.assign(tensors_.back().offset + tensors_.back().size(), 0.0);
}

DecoderModel::DecoderModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  build_layout(std::vector<BlockKind>(config_.n_layers, BlockKind::kTransformer));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, config_.init_std);
  const double proj_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
  for (const TensorSlot& slot : tensors_) {
    auto values = std::span<double>(params_).subspan(slot.offset, slot.size());
    const std::string& n = slot.name;
    const bool is_bias = n.ends_with(".bias");
    const bool is_norm_gain = n.ends_with("ln1.weight") || n.ends_with("ln2.weight") || n == "lnf.weight";
    if (is_norm_gain) {
      std::fill(values.begin(), values.end(), 1.0);
    } else if (!is_bias) {
      const double scale = (n.ends_with("attn.out.weight") || n.ends_with("mlp.proj.weight")) ? proj_scale : 1.0;
      for (double& v : values) v = normal(rng) * scale;
    }
  }
}

std::size_t DecoderModel::tensor_index(std::string_view name) const {
  for (std::size_t i = 0; i < tensors_.size(); ++i)
    if (tensors_[i].name == name) return i;
  fail(ErrorCode::kInvalidArgument, "no tensor named '" + std::string(name) + "'");
}

std::span<double> DecoderModel::tensor(std::size_t index) {
  const TensorSlot& s = tensors_.at(index);
  return std::span<double>(params_).subspan(s.offset, s.size());
}

std::span<const double> DecoderModel::tensor(std::size_t index) const {
  const TensorSlot& s = tensors_.at(index);
  return std::span<const double>(params_).subspan(s.offset, s.size());
}

void DecoderModel::relayout(const std::vector<BlockKind>& kinds) {
  require(kinds.size() == kinds_.size(), ErrorCode::kInvalidArgument, "relayout must keep the layer count");
  const std::vector<TensorSlot> old_tensors = tensors_;
  const std::vector<double> old_params = params_;
  build_layout(kinds);
  for (TensorSlot& slot : tensors_) {
    auto dst = std::span<double>(params_).subspan(slot.offset, slot.size());
    const auto it = std::find_if(old_tensors.begin(), old_tensors.end(),
                                 [&](const TensorSlot& o) { return o.name == slot.name; });
    if (it != old_tensors.end() && it->rows == slot.rows && it->cols == slot.cols) {
      std::copy_n(old_params.begin() + static_cast<std::ptrdiff_t>(it->offset), slot.size(), dst.begin());
      slot.trainable = it->trainable;
    } else if (slot.name.ends_with("replacement.weight")) {
      for (std::size_t i = 0; i < slot.rows; ++i) dst[i * slot.cols + i] = 1.0;
    }
  }
}

void DecoderModel::set_identity(std::size_t b) {
  auto kinds = kinds_;
  kinds.at(b) = BlockKind::kIdentity;
  relayout(kinds);
}

void DecoderModel::set_affine(std::size_t b, const LinearMap& map) {
  const std::size_t d = config_.d_model;
  require(map.d_in() == d && map.d_out() == d, ErrorCode::kDimension, "replacement must be d_model x d_model");
  require(map.weight.all_finite(), ErrorCode::kNumeric, "replacement weights must be finite");
  auto kinds = kinds_;
  kinds.at(b) = BlockKind::kAffine;
  relayout(kinds);
  auto w = tensor(blocks_[b].affine_w);
  std::copy(map.weight.values().begin(), map.weight.values().end(), w.begin());
  auto bias = tensor(blocks_[b].affine_b);
  if (map.bias) {
    std::copy(map.bias->begin(), map.bias->end(), bias.begin());
  } else {
    std::fill(bias.begin(), bias.end(), 0.0);
  }
}

void DecoderModel::zero_block_output(std::size_t b) {
  require(kinds_.at(b) == BlockKind::kTransformer, ErrorCode::kInvalidArgument,
          "zero_block_output needs a transformer block");
  for (std::size_t idx : {blocks_[b].out_w, blocks_[b].out_b, blocks_[b].proj_w, blocks_[b].proj_b}) {
    auto t = tensor(idx);
    std::fill(t.begin(), t.end(), 0.0);
  }
}

void DecoderModel::set_trainable_all(bool all) {
  for (TensorSlot& s : tensors_) s.trainable = all || s.name.find("replacement") != std::string::npos;
}

std::size_t DecoderModel::trainable_count() const noexcept {
  std::size_t n = 0;
  for (const TensorSlot& s : tensors_)
    if (s.trainable) n += s.size();
  return n;
}

bool DecoderModel::all_finite() const noexcept {
  return std::all_of(params_.begin(), params_.end(), [](double v) { return std::isfinite(v); });
}

// ---------------- forward ----------------

std::vector<std::size_t> ForwardCache::valid_rows() const {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) rows.push_back(i);
  return rows;
}

EmbeddingTrace ForwardCache::trace() const {
  const auto rows = valid_rows();
  EmbeddingTrace t;
  t.layers.reserve(stream.size());
  for (std::size_t l = 0; l < stream.size(); ++l) {
    Matrix m(rows.size(), stream[l].cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto src = stream[l].row(rows[r]);
      std::copy(src.begin(), src.end(), m.row(r).begin());
    }
    t.layers.push_back({l, std::move(m)});
  }
  return t;
}

namespace {

void transformer_forward(const DecoderModel& model, const BlockTensors& t, const Matrix& x, BlockCache& c,
                         Matrix& y, const ForwardCache& fc) {
  const ModelConfig& cfg = model.config();
  const std::size_t d = cfg.d_model;
  const kernels::AttentionShape shape{fc.batch, fc.seq, cfg.n_heads, cfg.head_dim()};

  auto attention = [&](const Matrix& in, Matrix& sum_out) {
    linear_forward(in, model.tensor(t.qkv_w), model.tensor(t.qkv_b), c.qkv, 3 * d);
    c.probs.assign(fc.batch * cfg.n_heads * fc.seq * fc.seq, 0.0);
    c.attn = Matrix(x.rows(), d);
    kernels::attention_forward(c.qkv.values(), fc.mask, c.probs, c.attn.values(), shape);
    Matrix proj;
    linear_forward(c.attn, model.tensor(t.out_w), model.tensor(t.out_b), proj, d);
    sum_out = x;
    sum_out += proj;
  };
  auto mlp = [&](const Matrix& in, const Matrix& residual, Matrix& sum_out) {
    linear_forward(in, model.tensor(t.fc_w), model.tensor(t.fc_b), c.fc_pre, cfg.d_ff);
    gelu_forward(c.fc_pre, c.fc_act);
    Matrix proj;
    linear_forward(c.fc_act, model.tensor(t.proj_w), model.tensor(t.proj_b), proj, d);
    sum_out = residual;
    sum_out += proj;
  };

  if (cfg.pre_norm) {
    layernorm_forward(x, model.tensor(t.ln1_g), model.tensor(t.ln1_b), c.attn_in, c.ln1_mean, c.ln1_rstd);
    attention(c.attn_in, c.mid);
    layernorm_forward(c.mid, model.tensor(t.ln2_g), model.tensor(t.ln2_b), c.mlp_in, c.ln2_mean, c.ln2_rstd);
    mlp(c.mlp_in, c.mid, y);
  } else {
    c.attn_in = x;
    attention(x, c.mid_pre);
    layernorm_forward(c.mid_pre, model.tensor(t.ln1_g), model.tensor(t.ln1_b), c.mid, c.ln1_mean, c.ln1_rstd);
    c.mlp_in = c.mid;
    mlp(c.mid, c.mid, c.out_pre);
    layernorm_forward(c.out_pre, model.tensor(t.ln2_g), model.tensor(t.ln2_b), y, c.ln2_mean, c.ln2_rstd);
  }
}

}  // namespace

ForwardCache forward(const DecoderModel& model, const TrainBatch& batch, const ForwardOptions& options) {
  const ModelConfig& cfg = model.config();
  batch.validate(cfg.vocab_size, cfg.max_seq_len);
  const std::size_t d = cfg.d_model, n = batch.positions();

  ForwardCache c;
  c.batch = batch.batch;
  c.seq = batch.seq;
  c.tokens = batch.tokens;
  c.mask = batch.mask;
  c.stream.resize(model.n_layers() + 1);
  c.blocks.resize(model.n_layers());

  Matrix& h0 = c.stream[0];
  h0 = Matrix(n, d);
  const auto wte = model.tensor(model.wte());
  const auto wpe = model.tensor(model.wpe());
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t tok = static_cast<std::size_t>(batch.tokens[i]);
    const std::size_t pos = i % batch.seq;
    double* row = h0.data() + i * d;
    for (std::size_t k = 0; k < d; ++k) row[k] = wte[tok * d + k] + wpe[pos * d + k];
  }

  for (std::size_t b = 0; b < model.n_layers(); ++b) {
    const Matrix& x = c.stream[b];
    Matrix& y = c.stream[b + 1];
    const BlockTensors& t = model.block_tensors(b);
    switch (model.block_kind(b)) {
      case BlockKind::kTransformer:
        transformer_forward(model, t, x, c.blocks[b], y, c);
        break;
      case BlockKind::kIdentity:
        y = x;
        break;
      case BlockKind::kAffine:
        linear_forward(x, model.tensor(t.affine_w), model.tensor(t.affine_b), y, d);
        break;
    }
  }

  if (options.compute_logits || options.final_norm)
    layernorm_forward(c.stream.back(), model.tensor(model.lnf_g()), model.tensor(model.lnf_b()), c.lnf_out,
                      c.lnf_mean, c.lnf_rstd);
  if (options.compute_logits) {
    linear_forward(c.lnf_out, model.tensor(model.head_w()), {}, c.logits, cfg.vocab_size);
  }
  return c;
}

ForwardResult forward_with_trace(const DecoderModel& model, const TrainBatch& batch) {
  ForwardCache c = forward(model, batch);
  return {std::move(c.logits), c.trace()};
}

// ---------------- backward ----------------

namespace {

double* grad_ptr(const DecoderModel& model, std::size_t index, std::span<double> grads) {
  if (index == BlockTensors::kNone) return nullptr;
  const TensorSlot& s = model.tensors()[index];
  return s.trainable ? grads.data() + s.offset : nullptr;
}

// Returns dL/dx for a transformer block given dL/dy.
Matrix transformer_backward(const DecoderModel& model, const BlockTensors& t, const Matrix& x, const BlockCache& c,
                            const Matrix& y_grad, const ForwardCache& fc, std::span<double> grads) {
  const ModelConfig& cfg = model.config();
  const kernels::AttentionShape shape{fc.batch, fc.seq, cfg.n_heads, cfg.head_dim()};
  auto g = [&](std::size_t idx) { return grad_ptr(model, idx, grads); };

  // MLP: returns dL/d(mlp input) given dL/d(mlp output).
  auto mlp_back = [&](const Matrix& d_out) {
    Matrix d_act;
    linear_backward(c.fc_act, model.tensor(t.proj_w), d_out, &d_act, g(t.proj_w), g(t.proj_b));
    const Matrix d_pre = gelu_backward(c.fc_pre, d_act);
    Matrix d_in;
    linear_backward(c.mlp_in, model.tensor(t.fc_w), d_pre, &d_in, g(t.fc_w), g(t.fc_b));
    return d_in;
  };
  auto attn_back = [&](const Matrix& d_out) {
    Matrix d_attn;
    linear_backward(c.attn, model.tensor(t.out_w), d_out, &d_attn, g(t.out_w), g(t.out_b));
    Matrix d_qkv(c.qkv.rows(), c.qkv.cols());
    kernels::attention_backward(c.qkv.values(), c.probs, d_attn.values(), d_qkv.values(), shape);
    Matrix d_in;
    linear_backward(c.attn_in, model.tensor(t.qkv_w), d_qkv, &d_in, g(t.qkv_w), g(t.qkv_b));
    return d_in;
  };

  if (cfg.pre_norm) {
    Matrix d_mid = y_grad;
    const Matrix d_mlp_in = mlp_back(y_grad);
    layernorm_backward(d_mlp_in, c.mid, model.tensor(t.ln2_g), c.ln2_mean, c.ln2_rstd, d_mid, g(t.ln2_g),
                       g(t.ln2_b));
    Matrix d_x = d_mid;
    const Matrix d_attn_in = attn_back(d_mid);
    layernorm_backward(d_attn_in, x, model.tensor(t.ln1_g), c.ln1_mean, c.ln1_rstd, d_x, g(t.ln1_g),
                       g(t.ln1_b));
    return d_x;
  }
  Matrix d_out_pre(x.rows(), x.cols());
  layernorm_backward(y_grad, c.out_pre, model.tensor(t.ln2_g), c.ln2_mean, c.ln2_rstd, d_out_pre, g(t.ln2_g),
                     g(t.ln2_b));
  Matrix d_mid = d_out_pre;
  d_mid += mlp_back(d_out_pre);
  Matrix d_mid_pre(x.rows(), x.cols());
  layernorm_backward(d_mid, c.mid_pre, model.tensor(t.ln1_g), c.ln1_mean, c.ln1_rstd, d_mid_pre, g(t.ln1_g),
                     g(t.ln1_b));
  Matrix d_x = d_mid_pre;
  d_x += attn_back(d_mid_pre);
  return d_x;
}

}  // namespace

Matrix backward_head(const DecoderModel& model, const ForwardCache& cache, const Matrix& d_logits,
                     std::span<double> grads) {
  require(!cache.logits.empty(), ErrorCode::kInvalidArgument, "forward pass did not compute logits");
  require(grads.size() == model.parameter_count(), ErrorCode::kDimension, "gradient buffer size mismatch");
  Matrix d_lnf;
  linear_backward(cache.lnf_out, model.tensor(model.head_w()), d_logits, &d_lnf,
                  grad_ptr(model, model.head_w(), grads), nullptr);
  return backward_final_norm(model, cache, d_lnf, grads);
}

Matrix backward_final_norm(const DecoderModel& model, const ForwardCache& cache, const Matrix& d_lnf_out,
                           std::span<double> grads) {
  require(!cache.lnf_out.empty(), ErrorCode::kInvalidArgument, "forward pass did not compute the final norm");
  require(grads.size() == model.parameter_count(), ErrorCode::kDimension, "gradient buffer size mismatch");
  Matrix d_top(d_lnf_out.rows(), d_lnf_out.cols());
  layernorm_backward(d_lnf_out, cache.stream.back(), model.tensor(model.lnf_g()), cache.lnf_mean, cache.lnf_rstd,
                     d_top, grad_ptr(model, model.lnf_g(), grads), grad_ptr(model, model.lnf_b(), grads));
  return d_top;
}

void backward_blocks(const DecoderModel& model, const ForwardCache& cache, Matrix d_top,
                     const std::vector<Matrix>& stream_grads, std::span<double> grads) {
  require(grads.size() == model.parameter_count(), ErrorCode::kDimension, "gradient buffer size mismatch");
  require(stream_grads.empty() || stream_grads.size() == model.n_layers() + 1, ErrorCode::kDimension,
          "stream gradients must cover layers 0..L");
  const std::size_t d = model.config().d_model;
  auto inject = [&](std::size_t layer, Matrix& g) {
    if (!stream_grads.empty() && !stream_grads[layer].empty()) g += stream_grads[layer];
  };

  Matrix d_h = std::move(d_top);
  for (std::size_t b = model.n_layers(); b-- > 0;) {
    inject(b + 1, d_h);
    const BlockTensors& t = model.block_tensors(b);
    switch (model.block_kind(b)) {
      case BlockKind::kTransformer:
        d_h = transformer_backward(model, t, cache.stream[b], cache.blocks[b], d_h, cache, grads);
        break;
      case BlockKind::kIdentity:
        break;
      case BlockKind::kAffine: {
        Matrix d_x;
        linear_backward(cache.stream[b], model.tensor(t.affine_w), d_h, &d_x, grad_ptr(model, t.affine_w, grads),
                        grad_ptr(model, t.affine_b, grads));
        d_h = std::move(d_x);
        break;
      }
    }
  }
  inject(0, d_h);

  double* dwte = grad_ptr(model, model.wte(), grads);
  double* dwpe = grad_ptr(model, model.wpe(), grads);
  for (std::size_t i = 0; i < cache.positions(); ++i) {
    const double* row = d_h.data() + i * d;
    const std::size_t tok = static_cast<std::size_t>(cache.tokens[i]);
    const std::size_t pos = i % cache.seq;
    for (std::size_t k = 0; k < d; ++k) {
      if (dwte) dwte[tok * d + k] += row[k];
      if (dwpe) dwpe[pos * d + k] += row[k];
    }
  }
}

}  // namespace linearlens
