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

#include "distildp/dpsgd.h"

#include <cmath>
#include <limits>
#include <random>
#include <string>

namespace distildp {
namespace {

constexpr double kClipSlack = 1e-9;
constexpr double kBudgetSlack = 1e-6;

nlohmann::json FiniteOrNull(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

}  // namespace

void DpSgdConfig::Validate() const {
  if (!(clip_norm > 0)) throw ConfigError("dp-sgd: clip_norm must be > 0");
  if (!(noise_multiplier >= 0)) {
    throw ConfigError("dp-sgd: noise_multiplier must be >= 0");
  }
  if (!(sampling_rate > 0 && sampling_rate <= 1)) {
    throw ConfigError("dp-sgd: sampling_rate must be in (0, 1]");
  }
  if (!(expected_batch > 0)) {
    throw ConfigError("dp-sgd: expected_batch must be > 0");
  }
  if (steps < 0) throw ConfigError("dp-sgd: steps must be >= 0");
  if (!(learning_rate >= 0)) {
    throw ConfigError("dp-sgd: learning_rate must be >= 0");
  }
}

nlohmann::json DpSgdConfig::ToJson() const {
  return {{"clip_norm", clip_norm},         {"noise_multiplier", noise_multiplier},
          {"expected_batch", expected_batch}, {"sampling_rate", sampling_rate},
          {"steps", steps},                 {"learning_rate", learning_rate}};
}

int64_t StepsForEpochs(double epochs, double sampling_rate) {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  return static_cast<int64_t>(std::ceil(epochs / sampling_rate - 1e-9));
}

double ClipInPlace(Vector* g, double clip_norm) {
  const double norm = g->norm();
  if (norm > clip_norm) *g *= clip_norm / norm;
  return norm;
}

Vector ClipGradient(const Vector& g, double clip_norm) {
  Vector out = g;
  ClipInPlace(&out, clip_norm);
  return out;
}

Vector NoisyMeanOfSum(Vector sum, double clip_norm, double noise_multiplier,
                      double denominator, Rng& rng) {
  if (!(denominator > 0)) {
    throw std::invalid_argument("NoisyMean: denominator must be > 0");
  }
  if (noise_multiplier > 0) {
    std::normal_distribution<double> noise(0.0, noise_multiplier * clip_norm);
    for (Eigen::Index i = 0; i < sum.size(); ++i) sum(i) += noise(rng);
  }
  sum /= denominator;
  return sum;
}

Vector NoisyMean(std::span<const Vector> clipped, double clip_norm,
                 double noise_multiplier, double denominator, Rng& rng) {
  if (clipped.empty()) throw std::invalid_argument("NoisyMean: no gradients");
  Vector sum = Vector::Zero(clipped[0].size());
  for (const Vector& g : clipped) {
    if (g.norm() > clip_norm + kClipSlack) {
      throw std::invalid_argument("NoisyMean: input exceeds the clip norm");
    }
    sum += g;
  }
  return NoisyMeanOfSum(std::move(sum), clip_norm, noise_multiplier,
                        denominator, rng);
}

void DpSgdStep(ParameterSet* params, std::span<const PreparedExample> batch,
               const DpSgdConfig& config, const ExampleLossFn& loss, Rng& rng,
               StepStats* stats) {
  Vector sum = Vector::Zero(params->total_count());
  double loss_total = 0;
  double max_norm = 0;
  int64_t clipped = 0;
  int64_t within_bound = 0;
  ForEachExampleGradient(*params, batch, loss,
                         [&](size_t, Vector& g, double example_loss) {
                           if (ClipInPlace(&g, config.clip_norm) >
                               config.clip_norm) {
                             ++clipped;
                           }
                           const double norm = g.norm();
                           max_norm = std::max(max_norm, norm);
                           if (norm <= config.clip_norm + kClipSlack) {
                             ++within_bound;
                           }
                           loss_total += example_loss;
                           sum += g;
                         });
  Vector update = NoisyMeanOfSum(std::move(sum), config.clip_norm,
                                 config.noise_multiplier, config.expected_batch,
                                 rng);
  if (!update.allFinite()) throw NumericError("non-finite DP-SGD update");
  params->values() -= config.learning_rate * update;
  if (stats != nullptr) {
    stats->batch_size = static_cast<int64_t>(batch.size());
    stats->mean_loss = batch.empty()
                           ? std::numeric_limits<double>::quiet_NaN()
                           : loss_total / static_cast<double>(batch.size());
    stats->max_clipped_norm = max_norm;
    stats->clipped = clipped;
    stats->within_bound = within_bound;
  }
}

nlohmann::json TrainReport::ToJson(const DpSgdConfig& config) const {
  nlohmann::json losses = nlohmann::json::array();
  for (double l : loss_curve) losses.push_back(FiniteOrNull(l));
  return {{"config", config.ToJson()},
          {"steps", steps},
          {"noise_multiplier", noise_multiplier},
          {"spent_epsilon", spent_epsilon},
          {"delta", delta},
          {"loss_curve", std::move(losses)},
          {"epsilon_curve", epsilon_curve},
          {"max_clipped_norm", max_clipped_norm},
          {"clipped_examples", clipped_examples},
          {"within_bound_examples", within_bound_examples},
          {"total_examples", total_examples}};
}

TrainReport TrainDp(const ParameterSet& init,
                    std::span<const PreparedExample> data,
                    const DpSgdConfig& config, const ExampleLossFn& loss,
                    PrivacyLedger* ledger, uint64_t seed,
                    const DpTrainOptions& options) {
  config.Validate();
  if (data.empty()) throw ConfigError("dp-sgd: empty training set");
  TrainReport report{{}, {}, init};
  report.delta = ledger->target().delta;
  report.noise_multiplier = config.noise_multiplier;
  if (config.steps == 0) return report;

  const std::vector<double> step_rdp =
      RdpStep(config.sampling_rate, config.noise_multiplier, ledger->orders());
  Rng rng(seed);
  std::bernoulli_distribution include(config.sampling_rate);
  std::vector<PreparedExample> batch;
  ParameterSet& params = report.final_params;

  for (int64_t step = 1; step <= config.steps; ++step) {
    PrivacyLedger next = *ledger;
    next.Compose(step_rdp, 1);
    const double eps = EpsilonAt(next, ledger->target().delta).epsilon;
    if (eps > ledger->target().epsilon + kBudgetSlack) {
      throw BudgetExhaustedError(
          "privacy budget exhausted at step " + std::to_string(step) + " of " +
              std::to_string(config.steps) + " (epsilon would reach " +
              std::to_string(eps) + " > " +
              std::to_string(ledger->target().epsilon) + ")",
          step);
    }

    batch.clear();
    for (const PreparedExample& ex : data) {
      if (include(rng)) batch.push_back(ex);
    }
    StepStats stats;
    try {
      DpSgdStep(&params, batch, config, loss, rng, &stats);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " at step " +
                             std::to_string(step),
                         step);
    }
    if (options.check_clip_invariant &&
        stats.max_clipped_norm > config.clip_norm + kClipSlack) {
      throw std::logic_error("post-clip norm exceeds the clip bound");
    }

    *ledger = std::move(next);
    report.steps = step;
    report.spent_epsilon = eps;
    report.loss_curve.push_back(stats.mean_loss);
    report.epsilon_curve.push_back(eps);
    report.max_clipped_norm =
        std::max(report.max_clipped_norm, stats.max_clipped_norm);
    report.total_examples += stats.batch_size;
    report.clipped_examples += stats.clipped;
    report.within_bound_examples += stats.within_bound;
    if (options.on_step) options.on_step(step, stats, eps);
  }
  return report;
}

TrainReport TrainTeacherDp(const ParameterSet& init,
                           std::span<const PreparedExample> data,
                           const DpSgdConfig& config, PrivacyLedger* ledger,
                           uint64_t seed, const DpTrainOptions& options) {
  return TrainDp(init, data, config, NextTokenLoss(), ledger, seed, options);
}

}  // namespace distildp
