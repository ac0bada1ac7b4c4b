// Copyright 2026 The DistilDP Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "distildp/model.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "distildp/common.h"

namespace distildp {
namespace {

using RowVector = Eigen::RowVectorXd;
using ConstMatrixMap = Eigen::Map<const Matrix>;
using MatrixMap = Eigen::Map<Matrix>;
using ConstRowMap = Eigen::Map<const RowVector>;
using RowMap = Eigen::Map<RowVector>;

constexpr double kLayerNormEps = 1e-5;
constexpr double kInitStd = 0.02;
constexpr char kCheckpointMagic[8] = {'D', 'I', 'S', 'T', 'I', 'L', 'D', 'P'};
constexpr uint32_t kCheckpointVersion = 1;

struct LayerOffsets {
  int64_t ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
  int64_t ln2_g, ln2_b, fc_w, fc_b, fc2_w, fc2_b;
};

struct Layout {
  int64_t tok_emb, pos_emb;
  std::vector<LayerOffsets> layers;
  int64_t lnf_g, lnf_b, head_w, head_b;
};

std::vector<ParameterSet::Entry> MakeEntries(const ModelConfig& c) {
  std::vector<ParameterSet::Entry> entries;
  int64_t offset = 0;
  auto add = [&](std::string name, std::vector<int64_t> shape) {
    int64_t size = 1;
    for (int64_t s : shape) size *= s;
    entries.push_back({std::move(name), std::move(shape), offset, size});
    offset += size;
  };
  const int64_t d = c.d_model, v = c.vocab_size, f = c.d_ff;
  add("tok_emb", {v, d});
  add("pos_emb", {c.max_seq_len, d});
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    add(p + "ln1.g", {d});
    add(p + "ln1.b", {d});
    add(p + "attn.qkv.w", {d, 3 * d});
    add(p + "attn.qkv.b", {3 * d});
    add(p + "attn.proj.w", {d, d});
    add(p + "attn.proj.b", {d});
    add(p + "ln2.g", {d});
    add(p + "ln2.b", {d});
    add(p + "mlp.fc.w", {d, f});
    add(p + "mlp.fc.b", {f});
    add(p + "mlp.proj.w", {f, d});
    add(p + "mlp.proj.b", {d});
  }
  add("ln_f.g", {d});
  add("ln_f.b", {d});
  add("lm_head.w", {d, v});
  add("lm_head.b", {v});
  return entries;
}

// Entries are laid out in the fixed order produced by MakeEntries.
Layout MakeLayout(const ModelConfig& c) {
  Layout layout;
  int64_t offset = 0;
  auto take = [&](int64_t size) {
    int64_t at = offset;
    offset += size;
    return at;
  };
  const int64_t d = c.d_model, v = c.vocab_size, f = c.d_ff;
  layout.tok_emb = take(v * d);
  layout.pos_emb = take(int64_t{c.max_seq_len} * d);
  for (int l = 0; l < c.n_layers; ++l) {
    LayerOffsets o;
    o.ln1_g = take(d);
    o.ln1_b = take(d);
    o.qkv_w = take(d * 3 * d);
    o.qkv_b = take(3 * d);
    o.proj_w = take(d * d);
    o.proj_b = take(d);
    o.ln2_g = take(d);
    o.ln2_b = take(d);
    o.fc_w = take(d * f);
    o.fc_b = take(f);
    o.fc2_w = take(f * d);
    o.fc2_b = take(d);
    layout.layers.push_back(o);
  }
  layout.lnf_g = take(d);
  layout.lnf_b = take(d);
  layout.head_w = take(d * v);
  layout.head_b = take(v);
  return layout;
}

double Gelu(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

double GeluGrad(double x) {
  constexpr double k = 0.7978845608028654;
  const double inner = k * (x + 0.044715 * x * x * x);
  const double t = std::tanh(inner);
  return 0.5 * (1.0 + t) +
         0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * x * x);
}

void LayerNormForward(const Matrix& x, const ConstRowMap& gain,
                      const ConstRowMap& bias, Matrix* out, Matrix* xhat,
                      Vector* rstd) {
  const Eigen::Index rows = x.rows();
  out->resize(rows, x.cols());
  xhat->resize(rows, x.cols());
  rstd->resize(rows);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    const double r = 1.0 / std::sqrt(var + kLayerNormEps);
    (*rstd)(i) = r;
    xhat->row(i) = (x.row(i).array() - mean) * r;
    out->row(i) = xhat->row(i).cwiseProduct(gain) + bias;
  }
}

// Returns dx; accumulates gain/bias gradients.
Matrix LayerNormBackward(const Matrix& dy, const Matrix& xhat,
                         const Vector& rstd, const ConstRowMap& gain,
                         RowMap dgain, RowMap dbias) {
  dgain += dy.cwiseProduct(xhat).colwise().sum();
  dbias += dy.colwise().sum();
  Matrix dxhat = dy.array().rowwise() * gain.array();
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double mean_dxhat = dxhat.row(i).mean();
    const double mean_dxhat_xhat = dxhat.row(i).dot(xhat.row(i)) / dy.cols();
    dx.row(i) = rstd(i) * (dxhat.row(i).array() - mean_dxhat -
                           xhat.row(i).array() * mean_dxhat_xhat);
  }
  return dx;
}

void CheckTokens(const ModelConfig& c, std::span<const int> tokens) {
  if (tokens.empty()) throw std::out_of_range("empty token sequence");
  if (static_cast<int>(tokens.size()) > c.max_seq_len) {
    throw std::out_of_range("sequence length " + std::to_string(tokens.size()) +
                            " exceeds max_seq_len " +
                            std::to_string(c.max_seq_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= c.vocab_size) {
      throw std::out_of_range("token id " + std::to_string(t) +
                              " out of range for vocab " +
                              std::to_string(c.vocab_size));
    }
  }
}

bool AllFinite(const Matrix& m) { return m.allFinite(); }

}  // namespace

struct LayerCache {
  Matrix ln1_hat;
  Vector ln1_rstd;
  Matrix a;
  Matrix qkv;
  std::vector<Matrix> probs;
  Matrix attn;
  Matrix ln2_hat;
  Vector ln2_rstd;
  Matrix m;
  Matrix f;
  Matrix g;
};

struct ForwardCache {
  std::vector<int> tokens;
  std::vector<LayerCache> layers;
  Matrix lnf_hat;
  Vector lnf_rstd;
  Matrix hn;
};

void ForwardCacheDeleter::operator()(ForwardCache* cache) const {
  delete cache;
}

void ModelConfig::Validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("model config: ") + what);
  };
  require(n_layers >= 1, "n_layers must be >= 1");
  require(n_heads >= 1, "n_heads must be >= 1");
  require(d_model >= 1, "d_model must be >= 1");
  require(d_ff >= 1, "d_ff must be >= 1");
  require(vocab_size >= 1, "vocab_size must be >= 1");
  require(max_seq_len >= 1, "max_seq_len must be >= 1");
  require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
}

nlohmann::json ModelConfig::ToJson() const {
  return {{"n_layers", n_layers},     {"n_heads", n_heads},
          {"d_model", d_model},       {"d_ff", d_ff},
          {"vocab_size", vocab_size}, {"max_seq_len", max_seq_len}};
}

ModelConfig ModelConfig::FromJson(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.Validate();
  return c;
}

ParameterSet::ParameterSet(const ModelConfig& config) : config_(config) {
  config_.Validate();
  entries_ = MakeEntries(config_);
  const auto& last = entries_.back();
  values_ = Vector::Zero(last.offset + last.size);
}

const ParameterSet::Entry& ParameterSet::entry(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw std::out_of_range("no parameter named " + name);
}

ParameterSet InitParams(const ModelConfig& config, uint64_t seed) {
  ParameterSet params(config);
  Rng rng(seed);
  const double residual_std = kInitStd / std::sqrt(2.0 * config.n_layers);
  auto ends_with = [](const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  for (const auto& e : params.entries()) {
    const bool residual =
        ends_with(e.name, "attn.proj.w") || ends_with(e.name, "mlp.proj.w");
    const bool gain = ends_with(e.name, ".g");
    std::normal_distribution<double> noise(0.0,
                                           residual ? residual_std : kInitStd);
    for (int64_t i = 0; i < e.size; ++i) {
      params.values()(e.offset + i) = (gain ? 1.0 : 0.0) + noise(rng);
    }
  }
  return params;
}

ForwardOutput Forward(const ParameterSet& params, std::span<const int> tokens) {
  return Forward(params, tokens, nullptr);
}

ForwardOutput Forward(const ParameterSet& params, std::span<const int> tokens,
                      ForwardCachePtr* cache_out) {
  const ModelConfig& c = params.config();
  CheckTokens(c, tokens);
  const Layout layout = MakeLayout(c);
  const double* w = params.values().data();
  const int T = static_cast<int>(tokens.size());
  const int d = c.d_model;
  const int heads = c.n_heads;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  ForwardCachePtr cache(new ForwardCache);
  cache->tokens.assign(tokens.begin(), tokens.end());
  cache->layers.resize(c.n_layers);

  ConstMatrixMap tok_emb(w + layout.tok_emb, c.vocab_size, d);
  ConstMatrixMap pos_emb(w + layout.pos_emb, c.max_seq_len, d);
  Matrix x(T, d);
  for (int i = 0; i < T; ++i) x.row(i) = tok_emb.row(tokens[i]) + pos_emb.row(i);

  for (int l = 0; l < c.n_layers; ++l) {
    const LayerOffsets& o = layout.layers[l];
    LayerCache& lc = cache->layers[l];
    LayerNormForward(x, ConstRowMap(w + o.ln1_g, d), ConstRowMap(w + o.ln1_b, d),
                     &lc.a, &lc.ln1_hat, &lc.ln1_rstd);
    lc.qkv.noalias() = lc.a * ConstMatrixMap(w + o.qkv_w, d, 3 * d);
    lc.qkv.rowwise() += ConstRowMap(w + o.qkv_b, 3 * d);
    lc.attn.resize(T, d);
    lc.probs.resize(heads);
    for (int h = 0; h < heads; ++h) {
      const auto q = lc.qkv.middleCols(h * dh, dh);
      const auto k = lc.qkv.middleCols(d + h * dh, dh);
      const auto v = lc.qkv.middleCols(2 * d + h * dh, dh);
      Matrix s = (q * k.transpose()) * scale;
      Matrix& p = lc.probs[h];
      p = Matrix::Zero(T, T);
      for (int i = 0; i < T; ++i) {
        const auto row = s.row(i).head(i + 1);
        const double mx = row.maxCoeff();
        auto e = (row.array() - mx).exp();
        p.row(i).head(i + 1) = e / e.sum();
      }
      lc.attn.middleCols(h * dh, dh).noalias() = p * v;
    }
    Matrix y = lc.attn * ConstMatrixMap(w + o.proj_w, d, d);
    y.rowwise() += ConstRowMap(w + o.proj_b, d);
    x += y;

    LayerNormForward(x, ConstRowMap(w + o.ln2_g, d), ConstRowMap(w + o.ln2_b, d),
                     &lc.m, &lc.ln2_hat, &lc.ln2_rstd);
    lc.f.noalias() = lc.m * ConstMatrixMap(w + o.fc_w, d, c.d_ff);
    lc.f.rowwise() += ConstRowMap(w + o.fc_b, c.d_ff);
    lc.g = lc.f.unaryExpr(&Gelu);
    Matrix z = lc.g * ConstMatrixMap(w + o.fc2_w, c.d_ff, d);
    z.rowwise() += ConstRowMap(w + o.fc2_b, d);
    x += z;
  }

  ForwardOutput out;
  LayerNormForward(x, ConstRowMap(w + layout.lnf_g, d),
                   ConstRowMap(w + layout.lnf_b, d), &out.hidden_last,
                   &cache->lnf_hat, &cache->lnf_rstd);
  out.logits.noalias() =
      out.hidden_last * ConstMatrixMap(w + layout.head_w, d, c.vocab_size);
  out.logits.rowwise() += ConstRowMap(w + layout.head_b, c.vocab_size);
  if (cache_out != nullptr) {
    cache->hn = out.hidden_last;
    *cache_out = std::move(cache);
  }
  return out;
}

void BackwardAccumulate(const ParameterSet& params, const ForwardCache& cache,
                        const Matrix& dlogits, const Matrix* dhidden,
                        Vector* grad) {
  const ModelConfig& c = params.config();
  const Layout layout = MakeLayout(c);
  const double* w = params.values().data();
  double* gw = grad->data();
  const int T = static_cast<int>(cache.tokens.size());
  const int d = c.d_model;
  const int heads = c.n_heads;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  MatrixMap(gw + layout.head_w, d, c.vocab_size).noalias() +=
      cache.hn.transpose() * dlogits;
  RowMap(gw + layout.head_b, c.vocab_size) += dlogits.colwise().sum();
  Matrix dhn = dlogits * ConstMatrixMap(w + layout.head_w, d, c.vocab_size)
                             .transpose();
  if (dhidden != nullptr && dhidden->size() > 0) dhn += *dhidden;
  Matrix dx = LayerNormBackward(dhn, cache.lnf_hat, cache.lnf_rstd,
                                ConstRowMap(w + layout.lnf_g, d),
                                RowMap(gw + layout.lnf_g, d),
                                RowMap(gw + layout.lnf_b, d));

  for (int l = c.n_layers - 1; l >= 0; --l) {
    const LayerOffsets& o = layout.layers[l];
    const LayerCache& lc = cache.layers[l];

    // Feed-forward sublayer; dx flows through the residual unchanged.
    MatrixMap(gw + o.fc2_w, c.d_ff, d).noalias() += lc.g.transpose() * dx;
    RowMap(gw + o.fc2_b, d) += dx.colwise().sum();
    Matrix dg = dx * ConstMatrixMap(w + o.fc2_w, c.d_ff, d).transpose();
    Matrix df = dg.cwiseProduct(lc.f.unaryExpr(&GeluGrad));
    MatrixMap(gw + o.fc_w, d, c.d_ff).noalias() += lc.m.transpose() * df;
    RowMap(gw + o.fc_b, c.d_ff) += df.colwise().sum();
    Matrix dm = df * ConstMatrixMap(w + o.fc_w, d, c.d_ff).transpose();
    dx += LayerNormBackward(dm, lc.ln2_hat, lc.ln2_rstd,
                            ConstRowMap(w + o.ln2_g, d),
                            RowMap(gw + o.ln2_g, d), RowMap(gw + o.ln2_b, d));

    // Attention sublayer.
    MatrixMap(gw + o.proj_w, d, d).noalias() += lc.attn.transpose() * dx;
    RowMap(gw + o.proj_b, d) += dx.colwise().sum();
    Matrix dattn = dx * ConstMatrixMap(w + o.proj_w, d, d).transpose();
    Matrix dqkv(T, 3 * d);
    for (int h = 0; h < heads; ++h) {
      const auto q = lc.qkv.middleCols(h * dh, dh);
      const auto k = lc.qkv.middleCols(d + h * dh, dh);
      const auto v = lc.qkv.middleCols(2 * d + h * dh, dh);
      const Matrix& p = lc.probs[h];
      const auto dout = dattn.middleCols(h * dh, dh);
      Matrix dp = dout * v.transpose();
      dqkv.middleCols(2 * d + h * dh, dh).noalias() = p.transpose() * dout;
      Matrix ds(T, T);
      for (int i = 0; i < T; ++i) {
        const double dot = p.row(i).dot(dp.row(i));
        ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
      }
      ds *= scale;
      dqkv.middleCols(h * dh, dh).noalias() = ds * k;
      dqkv.middleCols(d + h * dh, dh).noalias() = ds.transpose() * q;
    }
    MatrixMap(gw + o.qkv_w, d, 3 * d).noalias() += lc.a.transpose() * dqkv;
    RowMap(gw + o.qkv_b, 3 * d) += dqkv.colwise().sum();
    Matrix da = dqkv * ConstMatrixMap(w + o.qkv_w, d, 3 * d).transpose();
    dx += LayerNormBackward(da, lc.ln1_hat, lc.ln1_rstd,
                            ConstRowMap(w + o.ln1_g, d),
                            RowMap(gw + o.ln1_g, d), RowMap(gw + o.ln1_b, d));
  }

  MatrixMap tok_grad(gw + layout.tok_emb, c.vocab_size, d);
  MatrixMap pos_grad(gw + layout.pos_emb, c.max_seq_len, d);
  for (int i = 0; i < T; ++i) {
    tok_grad.row(cache.tokens[i]) += dx.row(i);
    pos_grad.row(i) += dx.row(i);
  }
}

Matrix LogSoftmaxRows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const double lse =
        mx + std::log((logits.row(i).array() - mx).exp().sum());
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

double NllLossWithGrad(const Matrix& logits, std::span<const int> targets,
                       std::span<const double> mask, Matrix* dlogits) {
  const Eigen::Index rows = logits.rows();
  if (static_cast<Eigen::Index>(targets.size()) != rows ||
      static_cast<Eigen::Index>(mask.size()) != rows) {
    throw std::invalid_argument("NllLoss: length mismatch");
  }
  double weight = 0;
  for (double m : mask) weight += m;
  if (weight <= 0) throw std::invalid_argument("NllLoss: every position masked");
  const Matrix logp = LogSoftmaxRows(logits);
  double total = 0;
  if (dlogits != nullptr) dlogits->setZero(rows, logits.cols());
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (mask[i] == 0) continue;
    const int t = targets[i];
    if (t < 0 || t >= logits.cols()) {
      throw std::out_of_range("NllLoss: target id out of range");
    }
    total += mask[i] * -logp(i, t);
    if (dlogits != nullptr) {
      dlogits->row(i) = logp.row(i).array().exp() * (mask[i] / weight);
      (*dlogits)(i, t) -= mask[i] / weight;
    }
  }
  return total / weight;
}

double NllLoss(const Matrix& logits, std::span<const int> targets,
               std::span<const double> mask) {
  return NllLossWithGrad(logits, targets, mask, nullptr);
}

std::span<const int> InputTokens(const PreparedExample& example) {
  return std::span<const int>(example.tokens).first(example.tokens.size() - 1);
}

std::span<const int> TargetTokens(const PreparedExample& example) {
  return std::span<const int>(example.tokens).subspan(1);
}

std::vector<double> ContentRowMask(const PreparedExample& example) {
  const auto rows = static_cast<int>(example.tokens.size()) - 1;
  std::vector<double> mask(std::max(rows, 0), 0.0);
  for (int i = 0; i < rows; ++i) mask[i] = (i + 1 >= example.boundary) ? 1 : 0;
  return mask;
}

ExampleLossFn NextTokenLoss() {
  return [](size_t, const PreparedExample& ex, const ForwardOutput& out) {
    LossAndGrad lg;
    const std::vector<double> mask = ContentRowMask(ex);
    lg.loss = NllLossWithGrad(out.logits, TargetTokens(ex), mask, &lg.dlogits);
    return lg;
  };
}

namespace {

double ExampleGradient(const ParameterSet& params, size_t index,
                       const PreparedExample& ex, const ExampleLossFn& loss,
                       double scale, Vector* grad) {
  if (ex.tokens.size() < 2) {
    throw std::invalid_argument("example needs at least two tokens");
  }
  ForwardCachePtr cache;
  ForwardOutput out = Forward(params, InputTokens(ex), &cache);
  LossAndGrad lg = loss(index, ex, out);
  if (!std::isfinite(lg.loss) || !AllFinite(lg.dlogits) ||
      (lg.dhidden.size() > 0 && !AllFinite(lg.dhidden))) {
    throw NumericError("non-finite loss for example " + std::to_string(index));
  }
  if (scale != 1.0) {
    lg.dlogits *= scale;
    if (lg.dhidden.size() > 0) lg.dhidden *= scale;
  }
  BackwardAccumulate(params, *cache, lg.dlogits,
                     lg.dhidden.size() > 0 ? &lg.dhidden : nullptr, grad);
  return lg.loss;
}

constexpr size_t kGradientChunk = 8;

}  // namespace

void ForEachExampleGradient(
    const ParameterSet& params, std::span<const PreparedExample> batch,
    const ExampleLossFn& loss,
    const std::function<void(size_t, Vector&, double)>& consume) {
  const size_t n = batch.size();
  std::vector<Vector> buffers(std::min(n, kGradientChunk));
  std::vector<double> losses(buffers.size());
  std::vector<std::exception_ptr> errors(buffers.size());
  for (size_t start = 0; start < n; start += kGradientChunk) {
    const size_t count = std::min(kGradientChunk, n - start);
#pragma omp parallel for schedule(dynamic, 1)
    for (size_t k = 0; k < count; ++k) {
      try {
        buffers[k] = Vector::Zero(params.total_count());
        losses[k] = ExampleGradient(params, start + k, batch[start + k], loss,
                                    1.0, &buffers[k]);
        errors[k] = nullptr;
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
    for (size_t k = 0; k < count; ++k) {
      if (errors[k]) std::rethrow_exception(errors[k]);
      consume(start + k, buffers[k], losses[k]);
    }
  }
}

std::vector<Vector> PerExampleGradients(const ParameterSet& params,
                                        std::span<const PreparedExample> batch,
                                        const ExampleLossFn& loss) {
  if (batch.empty()) throw std::invalid_argument("PerExampleGradients: empty batch");
  std::vector<Vector> grads(batch.size());
  ForEachExampleGradient(params, batch, loss,
                         [&](size_t i, Vector& g, double) { grads[i] = g; });
  return grads;
}

Vector BatchGradient(const ParameterSet& params,
                     std::span<const PreparedExample> batch,
                     const ExampleLossFn& loss, double* mean_loss) {
  if (batch.empty()) throw std::invalid_argument("BatchGradient: empty batch");
  Vector grad = Vector::Zero(params.total_count());
  const double scale = 1.0 / static_cast<double>(batch.size());
  double total = 0;
  for (size_t i = 0; i < batch.size(); ++i) {
    total += ExampleGradient(params, i, batch[i], loss, scale, &grad);
  }
  if (mean_loss != nullptr) *mean_loss = total * scale;
  return grad;
}

IncrementalDecoder::IncrementalDecoder(const ParameterSet& params)
    : params_(params) {
  const ModelConfig& c = params.config();
  keys_.assign(c.n_layers, Matrix(c.max_seq_len, c.d_model));
  values_.assign(c.n_layers, Matrix(c.max_seq_len, c.d_model));
}

const Vector& IncrementalDecoder::Step(int token) {
  const ModelConfig& c = params_.config();
  if (position_ >= c.max_seq_len) {
    throw std::out_of_range("IncrementalDecoder: context is full");
  }
  if (token < 0 || token >= c.vocab_size) {
    throw std::out_of_range("IncrementalDecoder: token id out of range");
  }
  const Layout layout = MakeLayout(c);
  const double* w = params_.values().data();
  const int d = c.d_model;
  const int heads = c.n_heads;
  const int dh = d / heads;
  const int pos = position_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix x = ConstMatrixMap(w + layout.tok_emb, c.vocab_size, d).row(token) +
             ConstMatrixMap(w + layout.pos_emb, c.max_seq_len, d).row(pos);
  Matrix a, hat, m;
  Vector rstd;
  for (int l = 0; l < c.n_layers; ++l) {
    const LayerOffsets& o = layout.layers[l];
    LayerNormForward(x, ConstRowMap(w + o.ln1_g, d), ConstRowMap(w + o.ln1_b, d),
                     &a, &hat, &rstd);
    RowVector qkv = a * ConstMatrixMap(w + o.qkv_w, d, 3 * d);
    qkv += ConstRowMap(w + o.qkv_b, 3 * d);
    keys_[l].row(pos) = qkv.segment(d, d);
    values_[l].row(pos) = qkv.segment(2 * d, d);
    RowVector attn(d);
    for (int h = 0; h < heads; ++h) {
      const auto q = qkv.segment(h * dh, dh);
      const auto k = keys_[l].block(0, h * dh, pos + 1, dh);
      const auto v = values_[l].block(0, h * dh, pos + 1, dh);
      RowVector s = (q * k.transpose()) * scale;
      const double mx = s.maxCoeff();
      s = (s.array() - mx).exp();
      s /= s.sum();
      attn.segment(h * dh, dh) = s * v;
    }
    RowVector y = attn * ConstMatrixMap(w + o.proj_w, d, d);
    x.row(0) += y + ConstRowMap(w + o.proj_b, d);
    LayerNormForward(x, ConstRowMap(w + o.ln2_g, d), ConstRowMap(w + o.ln2_b, d),
                     &m, &hat, &rstd);
    RowVector f = m * ConstMatrixMap(w + o.fc_w, d, c.d_ff);
    f += ConstRowMap(w + o.fc_b, c.d_ff);
    RowVector g = f.unaryExpr(&Gelu);
    RowVector z = g * ConstMatrixMap(w + o.fc2_w, c.d_ff, d);
    x.row(0) += z + ConstRowMap(w + o.fc2_b, d);
  }
  Matrix hn;
  LayerNormForward(x, ConstRowMap(w + layout.lnf_g, d),
                   ConstRowMap(w + layout.lnf_b, d), &hn, &hat, &rstd);
  RowVector logits = hn * ConstMatrixMap(w + layout.head_w, d, c.vocab_size);
  logits += ConstRowMap(w + layout.head_b, c.vocab_size);
  logits_ = logits.transpose();
  ++position_;
  return logits_;
}

// Checkpoint layout (all integers little-endian):
//   magic[8] "DISTILDP" | u32 version | u32 x6 model config | u32 n_arrays |
//   per array: u32 name_len | name | u32 ndim | u64 x ndim shape |
//              f64 x size values
namespace {

template <typename T>
void PutLe(std::string* out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes, bytes + sizeof(T));
  }
  out->append(bytes, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T Get() {
    if (pos_ + sizeof(T) > bytes_.size()) {
      throw ConfigError("checkpoint: truncated");
    }
    char bytes[sizeof(T)];
    std::memcpy(bytes, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
      std::reverse(bytes, bytes + sizeof(T));
    }
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
  }

  std::string_view Take(size_t n) {
    if (pos_ + n > bytes_.size()) throw ConfigError("checkpoint: truncated");
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  size_t pos_ = 0;
};

}  // namespace

std::string SerializeCheckpoint(const ParameterSet& params) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  PutLe<uint32_t>(&out, kCheckpointVersion);
  const ModelConfig& c = params.config();
  for (int v : {c.n_layers, c.n_heads, c.d_model, c.d_ff, c.vocab_size,
                c.max_seq_len}) {
    PutLe<uint32_t>(&out, static_cast<uint32_t>(v));
  }
  PutLe<uint32_t>(&out, static_cast<uint32_t>(params.entries().size()));
  for (const auto& e : params.entries()) {
    PutLe<uint32_t>(&out, static_cast<uint32_t>(e.name.size()));
    out += e.name;
    PutLe<uint32_t>(&out, static_cast<uint32_t>(e.shape.size()));
    for (int64_t s : e.shape) PutLe<uint64_t>(&out, static_cast<uint64_t>(s));
    for (int64_t i = 0; i < e.size; ++i) {
      PutLe<double>(&out, params.values()(e.offset + i));
    }
  }
  return out;
}

ParameterSet DeserializeCheckpoint(std::string_view bytes) {
  Reader reader(bytes);
  if (reader.Take(sizeof(kCheckpointMagic)) !=
      std::string_view(kCheckpointMagic, sizeof(kCheckpointMagic))) {
    throw ConfigError("checkpoint: bad magic");
  }
  if (reader.Get<uint32_t>() != kCheckpointVersion) {
    throw ConfigError("checkpoint: unsupported version");
  }
  ModelConfig c;
  c.n_layers = static_cast<int>(reader.Get<uint32_t>());
  c.n_heads = static_cast<int>(reader.Get<uint32_t>());
  c.d_model = static_cast<int>(reader.Get<uint32_t>());
  c.d_ff = static_cast<int>(reader.Get<uint32_t>());
  c.vocab_size = static_cast<int>(reader.Get<uint32_t>());
  c.max_seq_len = static_cast<int>(reader.Get<uint32_t>());
  ParameterSet params(c);
  if (reader.Get<uint32_t>() != params.entries().size()) {
    throw ConfigError("checkpoint: array count does not match config");
  }
  for (const auto& e : params.entries()) {
    const auto name_len = reader.Get<uint32_t>();
    if (reader.Take(name_len) != e.name) {
      throw ConfigError("checkpoint: expected array " + e.name);
    }
    const auto ndim = reader.Get<uint32_t>();
    if (ndim != e.shape.size()) {
      throw ConfigError("checkpoint: rank mismatch for " + e.name);
    }
    for (int64_t s : e.shape) {
      if (reader.Get<uint64_t>() != static_cast<uint64_t>(s)) {
        throw ConfigError("checkpoint: shape mismatch for " + e.name);
      }
    }
    for (int64_t i = 0; i < e.size; ++i) {
      const double v = reader.Get<double>();
      if (!std::isfinite(v)) {
        throw ConfigError("checkpoint: non-finite value in " + e.name);
      }
      params.values()(e.offset + i) = v;
    }
  }
  if (!reader.done()) throw ConfigError("checkpoint: trailing bytes");
  return params;
}

void SaveCheckpoint(const std::string& path, const ParameterSet& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write checkpoint: " + path);
  const std::string bytes = SerializeCheckpoint(params);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ParameterSet LoadCheckpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return DeserializeCheckpoint(ss.str());
}

}  // namespace distildp
