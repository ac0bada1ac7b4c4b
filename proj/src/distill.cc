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

#include "distildp/distill.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "distildp/common.h"
#include "distildp/hashing.h"

namespace distildp {

void KdConfig::Validate() const {
  if (!(lambda >= 0 && lambda <= 1)) {
    throw ConfigError("kd: lambda must be in [0, 1]");
  }
  if (!(temperature > 0)) throw ConfigError("kd: temperature must be > 0");
  if (!(alpha >= 0)) throw ConfigError("kd: alpha must be >= 0");
  if (epochs < 0) throw ConfigError("kd: epochs must be >= 0");
  if (!(learning_rate >= 0)) throw ConfigError("kd: learning_rate must be >= 0");
  if (batch_size < 1) throw ConfigError("kd: batch_size must be >= 1");
}

nlohmann::json KdConfig::ToJson() const {
  return {{"lambda", lambda},
          {"temperature", temperature},
          {"alpha", alpha},
          {"skip_prefix",
           skip_prefix == SkipPrefix::kControlCode ? "control_code" : "none"},
          {"kl_direction", kKlDirection},
          {"epochs", epochs},
          {"learning_rate", learning_rate},
          {"batch_size", batch_size}};
}

Matrix SoftTargets(const Matrix& logits, double temperature) {
  if (!(temperature > 0)) throw std::invalid_argument("temperature must be > 0");
  Matrix out = LogSoftmaxRows(logits / temperature);
  return out.array().exp();
}

double MseHiddenLoss(const Matrix& teacher_hidden, const Matrix& student_hidden,
                     std::span<const double> mask, Matrix* dstudent) {
  if (teacher_hidden.cols() != student_hidden.cols()) {
    throw ConfigError(
        "hidden-state alignment needs equal widths (teacher " +
        std::to_string(teacher_hidden.cols()) + ", student " +
        std::to_string(student_hidden.cols()) +
        "); set alpha = 0 or give both models the same d_model");
  }
  if (teacher_hidden.rows() != student_hidden.rows() ||
      static_cast<Eigen::Index>(mask.size()) != student_hidden.rows()) {
    throw std::invalid_argument("MseHiddenLoss: length mismatch");
  }
  double weight = 0;
  for (double m : mask) weight += m;
  if (weight <= 0) throw std::invalid_argument("MseHiddenLoss: all rows masked");
  const double denom = weight * static_cast<double>(student_hidden.cols());
  double total = 0;
  if (dstudent != nullptr) {
    dstudent->setZero(student_hidden.rows(), student_hidden.cols());
  }
  for (Eigen::Index i = 0; i < student_hidden.rows(); ++i) {
    if (mask[i] == 0) continue;
    const auto diff = student_hidden.row(i) - teacher_hidden.row(i);
    total += mask[i] * diff.squaredNorm();
    if (dstudent != nullptr) dstudent->row(i) = (2.0 * mask[i] / denom) * diff;
  }
  return total / denom;
}

DistillBatchOutput KdLoss(const Matrix& teacher_logits,
                          const Matrix& student_logits,
                          std::span<const int> targets,
                          std::span<const double> mask, const KdConfig& config,
                          const HiddenStates& hidden, KdGradients* grads) {
  const Eigen::Index rows = student_logits.rows();
  const Eigen::Index vocab = student_logits.cols();
  if (static_cast<Eigen::Index>(targets.size()) != rows ||
      static_cast<Eigen::Index>(mask.size()) != rows) {
    throw std::invalid_argument("KdLoss: length mismatch");
  }
  const bool use_teacher = teacher_logits.size() > 0;
  if (!use_teacher && config.lambda != 0) {
    throw std::invalid_argument("KdLoss: teacher logits required when lambda > 0");
  }
  if (use_teacher && (teacher_logits.rows() != rows ||
                      teacher_logits.cols() != vocab)) {
    throw std::invalid_argument("KdLoss: teacher/student logits shape mismatch");
  }
  double weight = 0;
  int64_t positions = 0;
  for (double m : mask) {
    weight += m;
    if (m != 0) ++positions;
  }
  if (weight <= 0) throw std::invalid_argument("KdLoss: every position masked");

  const double lambda = config.lambda;
  const double t = config.temperature;
  const Matrix log_ps = LogSoftmaxRows(student_logits);
  Matrix log_pt_soft, log_ps_soft;
  if (use_teacher) {
    log_pt_soft = LogSoftmaxRows(teacher_logits / t);
    log_ps_soft = LogSoftmaxRows(student_logits / t);
  }
  if (grads != nullptr) grads->dlogits.setZero(rows, vocab);

  DistillBatchOutput out;
  out.positions = positions;
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (mask[i] == 0) continue;
    const int y = targets[i];
    if (y < 0 || y >= vocab) throw std::out_of_range("KdLoss: target id");
    const double w = mask[i] / weight;
    out.ce += mask[i] * -log_ps(i, y);
    if (use_teacher) {
      const auto pt = log_pt_soft.row(i).array().exp();
      const double kl =
          (pt * (log_pt_soft.row(i).array() - log_ps_soft.row(i).array())).sum();
      out.kl += mask[i] * std::max(0.0, kl);
    }
    if (grads != nullptr) {
      auto g = grads->dlogits.row(i);
      g = ((1.0 - lambda) * w) * log_ps.row(i).array().exp();
      g(y) -= (1.0 - lambda) * w;
      if (use_teacher && lambda != 0) {
        g.array() += (lambda * t * w) * (log_ps_soft.row(i).array().exp() -
                                         log_pt_soft.row(i).array().exp());
      }
    }
  }
  out.ce /= weight;
  out.kl /= weight;

  if (hidden.teacher != nullptr && hidden.student != nullptr) {
    Matrix dhidden;
    out.mse = MseHiddenLoss(*hidden.teacher, *hidden.student, mask,
                            grads != nullptr ? &dhidden : nullptr);
    if (grads != nullptr && config.alpha != 0) {
      grads->dhidden = config.alpha * dhidden;
    }
  } else if (config.alpha != 0) {
    throw std::invalid_argument("KdLoss: hidden states required when alpha > 0");
  }
  out.total = (1.0 - lambda) * out.ce + lambda * t * t * out.kl +
              config.alpha * out.mse;
  return out;
}

std::vector<double> DistillPrefixMask(const PreparedExample& example) {
  const auto length = static_cast<int>(example.tokens.size());
  if (example.boundary <= 0 || example.boundary >= length) {
    throw std::invalid_argument("DistillPrefixMask: boundary " +
                                std::to_string(example.boundary) +
                                " leaves no content in a sequence of length " +
                                std::to_string(length));
  }
  std::vector<double> mask(length, 1.0);
  std::fill(mask.begin(), mask.begin() + example.boundary, 0.0);
  return mask;
}

std::vector<double> PredictionMask(const PreparedExample& example,
                                   SkipPrefix policy) {
  if (policy == SkipPrefix::kNone) {
    if (example.tokens.size() < 2) {
      throw std::invalid_argument("PredictionMask: sequence too short");
    }
    return std::vector<double>(example.tokens.size() - 1, 1.0);
  }
  const std::vector<double> token_mask = DistillPrefixMask(example);
  return std::vector<double>(token_mask.begin() + 1, token_mask.end());
}

ExampleLossFn KdExampleLoss(const ParameterSet* teacher, const KdConfig& config,
                            std::vector<DistillBatchOutput>* sink) {
  config.Validate();
  return [teacher, config, sink](size_t index, const PreparedExample& ex,
                                 const ForwardOutput& student) {
    const std::vector<double> mask = PredictionMask(ex, config.skip_prefix);
    ForwardOutput teacher_out;
    const bool need_teacher = config.lambda != 0 || config.alpha != 0;
    if (need_teacher) {
      if (teacher == nullptr) {
        throw std::invalid_argument("KD loss needs a teacher");
      }
      teacher_out = Forward(*teacher, InputTokens(ex));
    }
    HiddenStates hidden;
    if (config.alpha != 0) {
      hidden = {&teacher_out.hidden_last, &student.hidden_last};
    }
    KdGradients grads;
    const DistillBatchOutput components =
        KdLoss(teacher_out.logits, student.logits, TargetTokens(ex), mask,
               config, hidden, &grads);
    if (sink != nullptr) sink->at(index) = components;
    return LossAndGrad{components.total, std::move(grads.dlogits),
                       std::move(grads.dhidden)};
  };
}

nlohmann::json StudentReport::ToJson(const KdConfig& config) const {
  nlohmann::json epochs_json = nlohmann::json::array();
  for (size_t e = 0; e < epochs.size(); ++e) {
    epochs_json.push_back({{"epoch", e + 1},
                           {"ce", epochs[e].ce},
                           {"kl", epochs[e].kl},
                           {"mse", epochs[e].mse},
                           {"total", epochs[e].total}});
  }
  return {{"config", config.ToJson()},
          {"epochs", std::move(epochs_json)},
          {"validation_ppl", validation_ppl},
          {"steps", steps},
          {"teacher_fingerprint", teacher_fingerprint}};
}

StudentReport TrainStudent(const ParameterSet& teacher,
                           const ParameterSet& student,
                           std::span<const PreparedExample> data,
                           const KdConfig& config, uint64_t seed,
                           const StudentTrainOptions& options) {
  config.Validate();
  if (data.empty()) throw ConfigError("student training: no examples");
  if (teacher.config().vocab_size != student.config().vocab_size) {
    throw ConfigError("student training: teacher and student vocabularies differ");
  }
  StudentReport report{student, {}, {}, 0, {}};
  report.teacher_fingerprint = Sha256Hex(SerializeCheckpoint(teacher));
  ParameterSet& params = report.final_params;
  if (options.evaluate) report.validation_ppl.push_back(options.evaluate(params));

  Rng rng(seed);
  std::vector<size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<DistillBatchOutput> sink;
  std::vector<PreparedExample> batch;
  const auto batch_size = static_cast<size_t>(config.batch_size);
  const ExampleLossFn loss = KdExampleLoss(&teacher, config, &sink);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochComponents sums;
    for (size_t start = 0; start < order.size(); start += batch_size) {
      const size_t count = std::min(batch_size, order.size() - start);
      batch.clear();
      for (size_t k = 0; k < count; ++k) batch.push_back(data[order[start + k]]);
      sink.assign(count, {});
      Vector grad = Vector::Zero(params.total_count());
      ++report.steps;
      try {
        ForEachExampleGradient(params, batch, loss,
                               [&](size_t, Vector& g, double) { grad += g; });
      } catch (const NumericError& e) {
        throw NumericError("student diverged at step " +
                               std::to_string(report.steps) + ": " + e.what(),
                           report.steps);
      }
      grad /= static_cast<double>(count);
      if (!grad.allFinite()) {
        throw NumericError("student diverged at step " +
                               std::to_string(report.steps),
                           report.steps);
      }
      params.values() -= config.learning_rate * grad;
      for (const auto& c : sink) {
        sums.ce += c.ce;
        sums.kl += c.kl;
        sums.mse += c.mse;
        sums.total += c.total;
      }
    }
    const auto n = static_cast<double>(order.size());
    report.epochs.push_back(
        {sums.ce / n, sums.kl / n, sums.mse / n, sums.total / n});
    if (options.evaluate) {
      report.validation_ppl.push_back(options.evaluate(params));
    }
  }
  return report;
}

}  // namespace distildp
