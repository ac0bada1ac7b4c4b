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

// A small pre-norm decoder-only transformer with hand-written reverse-mode
// gradients. All math is in double precision.

#ifndef DISTILDP_MODEL_H_
#define DISTILDP_MODEL_H_

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "distildp/corpus.h"
#include "json.hpp"

namespace distildp {

using Matrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 2;
  int d_model = 32;
  int d_ff = 128;
  int vocab_size = 79;
  int max_seq_len = 64;

  // Throws ConfigError when the configuration is unusable.
  void Validate() const;
  nlohmann::json ToJson() const;
  static ModelConfig FromJson(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

// Flat parameter store. Every named array is a row-major slice of `values`.
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    std::vector<int64_t> shape;
    int64_t offset = 0;
    int64_t size = 0;
  };

  explicit ParameterSet(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const std::vector<Entry>& entries() const { return entries_; }
  int64_t total_count() const { return values_.size(); }
  const Entry& entry(const std::string& name) const;

  Vector& values() { return values_; }
  const Vector& values() const { return values_; }

  bool operator==(const ParameterSet& other) const {
    return config_ == other.config_ && values_ == other.values_;
  }

 private:
  ModelConfig config_;
  std::vector<Entry> entries_;
  Vector values_;
};

// Zero-mean normal init with std 0.02; residual projections are further
// scaled by 1/sqrt(2 * n_layers). Layer-norm gains are 1 plus that noise.
ParameterSet InitParams(const ModelConfig& config, uint64_t seed);

struct ForwardOutput {
  Matrix logits;       // [T, vocab_size]
  Matrix hidden_last;  // [T, d_model], final-norm output feeding the head
};

// Activations retained for the backward pass.
struct ForwardCache;
struct ForwardCacheDeleter {
  void operator()(ForwardCache* cache) const;
};
using ForwardCachePtr = std::unique_ptr<ForwardCache, ForwardCacheDeleter>;

// Causal forward pass. Throws std::out_of_range for bad token ids or
// sequences longer than max_seq_len.
ForwardOutput Forward(const ParameterSet& params, std::span<const int> tokens);
ForwardOutput Forward(const ParameterSet& params, std::span<const int> tokens,
                      ForwardCachePtr* cache);

// Adds the parameter gradient implied by upstream gradients on the logits
// and (optionally, may be nullptr) the final hidden states into `grad`.
void BackwardAccumulate(const ParameterSet& params, const ForwardCache& cache,
                        const Matrix& dlogits, const Matrix* dhidden,
                        Vector* grad);

// Row-wise log-softmax.
Matrix LogSoftmaxRows(const Matrix& logits);

// Mean over rows with mask > 0 of -log softmax(logits)[target]. Row i of
// `logits` is scored against targets[i]. Throws std::invalid_argument when
// every row is masked.
double NllLoss(const Matrix& logits, std::span<const int> targets,
               std::span<const double> mask);
// Same, also filling d(loss)/d(logits).
double NllLossWithGrad(const Matrix& logits, std::span<const int> targets,
                       std::span<const double> mask, Matrix* dlogits);

// Scalar loss of one example and its gradient with respect to the model's
// outputs. `dhidden` may be left empty.
struct LossAndGrad {
  double loss = 0;
  Matrix dlogits;
  Matrix dhidden;
};

// Computes an example's loss from the model outputs on its input tokens
// (tokens[0 .. n-1)).
using ExampleLossFn = std::function<LossAndGrad(
    size_t index, const PreparedExample& example, const ForwardOutput& out)>;

// Next-token cross entropy on content positions (targets at token index >=
// boundary).
ExampleLossFn NextTokenLoss();

// Input tokens (all but the last), next-token targets, and per-row weights
// selecting targets at token index >= boundary.
std::span<const int> InputTokens(const PreparedExample& example);
std::span<const int> TargetTokens(const PreparedExample& example);
std::vector<double> ContentRowMask(const PreparedExample& example);

// Exact per-example gradients. Non-finite losses raise NumericError.
std::vector<Vector> PerExampleGradients(const ParameterSet& params,
                                        std::span<const PreparedExample> batch,
                                        const ExampleLossFn& loss);

// Streams per-example gradients to `consume(index, grad, loss)` in index
// order. Gradients are computed in chunks, in parallel when OpenMP is
// available, but the consumer always sees them sequentially.
void ForEachExampleGradient(
    const ParameterSet& params, std::span<const PreparedExample> batch,
    const ExampleLossFn& loss,
    const std::function<void(size_t, Vector&, double)>& consume);

// Gradient of the mean loss over the batch, computed in one pass.
Vector BatchGradient(const ParameterSet& params,
                     std::span<const PreparedExample> batch,
                     const ExampleLossFn& loss, double* mean_loss = nullptr);

// Incremental decoding with a key/value cache. Matches Forward() row by row.
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const ParameterSet& params);

  // Feeds one token, returns the logits for the next position.
  const Vector& Step(int token);
  int position() const { return position_; }
  void Reset() { position_ = 0; }

 private:
  const ParameterSet& params_;
  int position_ = 0;
  std::vector<Matrix> keys_;
  std::vector<Matrix> values_;
  Vector logits_;
};

// Versioned little-endian binary checkpoint.
std::string SerializeCheckpoint(const ParameterSet& params);
ParameterSet DeserializeCheckpoint(std::string_view bytes);
void SaveCheckpoint(const std::string& path, const ParameterSet& params);
ParameterSet LoadCheckpoint(const std::string& path);

}  // namespace distildp

#endif  // DISTILDP_MODEL_H_
