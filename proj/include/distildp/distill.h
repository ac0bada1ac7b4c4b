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

// Knowledge-distillation losses and the (non-private) student trainer.
//
// The combined objective per example is
//
//   (1 - lambda) * CE(hard targets, student)
//     + lambda * t^2 * KL(softmax(teacher / t) || softmax(student / t))
//     + alpha * MSE(teacher hidden, student hidden)
//
// with every term averaged over the unmasked (content) positions.

#ifndef DISTILDP_DISTILL_H_
#define DISTILDP_DISTILL_H_

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "distildp/model.h"
#include "json.hpp"

namespace distildp {

enum class SkipPrefix {
  kControlCode,  // mask every position before the content boundary
  kNone,         // train on the control code too
};

struct KdConfig {
  double lambda = 0.4;
  double temperature = 1.0;
  double alpha = 0.0;
  SkipPrefix skip_prefix = SkipPrefix::kControlCode;
  int epochs = 2;
  double learning_rate = 0.5;
  int batch_size = 16;

  void Validate() const;
  nlohmann::json ToJson() const;
};

// KL direction: teacher distribution first.
inline constexpr const char* kKlDirection = "KL(teacher || student)";

// Row-wise softmax(logits / t).
Matrix SoftTargets(const Matrix& logits, double temperature);

struct DistillBatchOutput {
  double total = 0;
  double ce = 0;
  double kl = 0;
  double mse = 0;
  int64_t positions = 0;
};

struct HiddenStates {
  const Matrix* teacher = nullptr;
  const Matrix* student = nullptr;
};

// Gradients with respect to the student's logits and hidden states.
struct KdGradients {
  Matrix dlogits;
  Matrix dhidden;
};

// Rows with mask 0 contribute nothing. `teacher_logits` may be empty only
// when lambda = 0. `hidden` is required when alpha > 0.
DistillBatchOutput KdLoss(const Matrix& teacher_logits,
                          const Matrix& student_logits,
                          std::span<const int> targets,
                          std::span<const double> mask, const KdConfig& config,
                          const HiddenStates& hidden = {},
                          KdGradients* grads = nullptr);

// Mean squared difference over unmasked rows and all channels. Width
// mismatches raise ConfigError.
double MseHiddenLoss(const Matrix& teacher_hidden, const Matrix& student_hidden,
                     std::span<const double> mask,
                     Matrix* dstudent = nullptr);

// Per-token mask over example.tokens: 0 before the boundary, 1 after.
// Throws std::invalid_argument when boundary >= length.
std::vector<double> DistillPrefixMask(const PreparedExample& example);

// Mask over prediction rows (row i predicts token i + 1) for a policy.
std::vector<double> PredictionMask(const PreparedExample& example,
                                   SkipPrefix policy);

// Per-example KD loss against a frozen teacher evaluated on the fly. When
// `sink` is set, sink->at(index) receives the loss components.
ExampleLossFn KdExampleLoss(const ParameterSet* teacher, const KdConfig& config,
                            std::vector<DistillBatchOutput>* sink = nullptr);

struct EpochComponents {
  double ce = 0;
  double kl = 0;
  double mse = 0;
  double total = 0;
};

struct StudentReport {
  ParameterSet final_params;
  std::vector<EpochComponents> epochs;
  // Entry 0 is before training; entry e is after epoch e.
  std::vector<double> validation_ppl;
  int64_t steps = 0;
  std::string teacher_fingerprint;

  nlohmann::json ToJson(const KdConfig& config) const;
};

struct StudentTrainOptions {
  // Returns a validation perplexity for the given parameters.
  std::function<double(const ParameterSet&)> evaluate;
};

// Plain mini-batch SGD on the KD objective over `data` (synthetic examples).
// The teacher is only read. Non-finite losses raise NumericError naming the
// step.
StudentReport TrainStudent(const ParameterSet& teacher,
                           const ParameterSet& student,
                           std::span<const PreparedExample> data,
                           const KdConfig& config, uint64_t seed,
                           const StudentTrainOptions& options = {});

}  // namespace distildp

#endif  // DISTILDP_DISTILL_H_
