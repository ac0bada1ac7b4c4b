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

// DP-SGD: per-example clipping, Gaussian noise on the clipped sum, and a
// Poisson-subsampled training loop that charges a PrivacyLedger.

#ifndef DISTILDP_DPSGD_H_
#define DISTILDP_DPSGD_H_

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "distildp/accountant.h"
#include "distildp/common.h"
#include "distildp/model.h"
#include "json.hpp"

namespace distildp {

struct DpSgdConfig {
  double clip_norm = 1.0;
  double noise_multiplier = 1.0;
  // Sum of clipped gradients is divided by this, not by the realized batch
  // size. Normally sampling_rate * dataset size.
  double expected_batch = 1.0;
  double sampling_rate = 0.05;
  int64_t steps = 0;
  double learning_rate = 0.1;

  void Validate() const;
  nlohmann::json ToJson() const;
};

// ceil(epochs / sampling_rate).
int64_t StepsForEpochs(double epochs, double sampling_rate);

// g * min(1, C / ||g||).
Vector ClipGradient(const Vector& g, double clip_norm);
// Clips in place and returns the norm before clipping.
double ClipInPlace(Vector* g, double clip_norm);

// (sum(clipped) + N(0, (sigma * C)^2 I)) / denominator.
Vector NoisyMean(std::span<const Vector> clipped, double clip_norm,
                 double noise_multiplier, double denominator, Rng& rng);
// Same, starting from an already-summed vector (consumed).
Vector NoisyMeanOfSum(Vector sum, double clip_norm, double noise_multiplier,
                      double denominator, Rng& rng);

struct StepStats {
  double mean_loss = 0;       // over the realized batch, before clipping
  double max_clipped_norm = 0;
  int64_t batch_size = 0;
  int64_t clipped = 0;         // examples whose norm exceeded C
  int64_t within_bound = 0;    // examples with post-clip norm <= C + 1e-9
};

// One update: params -= lr * NoisyMean(clip(per-example grads)).
void DpSgdStep(ParameterSet* params, std::span<const PreparedExample> batch,
               const DpSgdConfig& config, const ExampleLossFn& loss, Rng& rng,
               StepStats* stats = nullptr);

struct TrainReport {
  std::vector<double> loss_curve;     // NaN for steps with an empty batch
  std::vector<double> epsilon_curve;  // spent epsilon after each step
  ParameterSet final_params;
  double spent_epsilon = 0;
  double delta = 0;
  int64_t steps = 0;
  double noise_multiplier = 0;
  double max_clipped_norm = 0;
  int64_t clipped_examples = 0;  // examples whose norm exceeded C
  int64_t within_bound_examples = 0;
  int64_t total_examples = 0;

  nlohmann::json ToJson(const DpSgdConfig& config) const;
};

struct DpTrainOptions {
  // Fail loudly if any post-clip norm exceeds C + 1e-9.
  bool check_clip_invariant = true;
  // Called after every step with the ledger state.
  std::function<void(int64_t step, const StepStats&, double epsilon)> on_step;
};

// Poisson-subsampled DP-SGD for config.steps steps. The ledger is charged
// once per step; a step that would push the spent epsilon past the target
// (plus 1e-6) raises BudgetExhaustedError without being applied.
TrainReport TrainDp(const ParameterSet& init,
                    std::span<const PreparedExample> data,
                    const DpSgdConfig& config, const ExampleLossFn& loss,
                    PrivacyLedger* ledger, uint64_t seed,
                    const DpTrainOptions& options = {});

// TrainDp with the next-token loss on content positions.
TrainReport TrainTeacherDp(const ParameterSet& init,
                           std::span<const PreparedExample> data,
                           const DpSgdConfig& config, PrivacyLedger* ledger,
                           uint64_t seed, const DpTrainOptions& options = {});

}  // namespace distildp

#endif  // DISTILDP_DPSGD_H_
