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

// Control-code-conditioned autoregressive sampling with top-k / top-p
// truncation, and bulk synthetic dataset generation.

#ifndef DISTILDP_SAMPLER_H_
#define DISTILDP_SAMPLER_H_

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "distildp/common.h"
#include "distildp/corpus.h"
#include "distildp/model.h"
#include "json.hpp"

namespace distildp {

struct SamplerConfig {
  std::optional<int> top_k = 50;
  std::optional<double> top_p = 0.9;
  int max_new_tokens = 64;
  bool stop_at_eos = true;

  void Validate() const;
  nlohmann::json ToJson() const;
};

// Keeps the k most probable tokens (ties broken toward the lower id) and
// renormalizes. Throws std::invalid_argument for k = 0.
Vector TruncateTopK(const Vector& probs, int k);

// Keeps the shortest descending-probability prefix whose mass reaches p,
// including the token that crosses p, and renormalizes.
Vector TruncateTopP(const Vector& probs, double p);

// Softmax followed by top-k then top-p.
Vector NextTokenDistribution(const Vector& logits, const SamplerConfig& config);

// Inverse-CDF draw from a distribution.
int SampleIndex(const Vector& probs, Rng& rng);

// Samples a continuation of the rendered control code. The returned sequence
// includes the code (with its separator) followed by the generated tokens.
std::vector<int> SampleSequence(const ParameterSet& params,
                                const ControlCode& code,
                                const SamplerConfig& config, Rng& rng);

struct SyntheticExample {
  ControlCode code;
  std::vector<int> tokens;  // code tokens followed by generated tokens

  int boundary() const { return static_cast<int>(code.rendered.size()); }
  bool ends_with_eos() const {
    return !tokens.empty() && tokens.back() == Vocabulary::kEos;
  }
};

struct SyntheticDataset {
  std::vector<SyntheticExample> examples;
  std::string generator_fingerprint;  // checkpoint hash
  SamplerConfig config;
  uint64_t seed = 0;

  // First n examples (the pool is consumed by prefix).
  SyntheticDataset Prefix(size_t n) const;
  // Training view with boundary at the code separator.
  std::vector<PreparedExample> AsPrepared() const;
  nlohmann::json Manifest() const;
};

// One sequence per code, in order. Sequence i uses the rng stream
// DeriveSeed(seed, i), so the output does not depend on scheduling.
SyntheticDataset GenerateSynthetic(const ParameterSet& params,
                                   std::span<const ControlCode> codes,
                                   const SamplerConfig& config, uint64_t seed);

// JSON lines: {"control": {...}, "text": "...", "eos": bool}.
void SaveSynthetic(const std::string& path, const std::string& manifest_path,
                   const SyntheticDataset& data, const Vocabulary& vocab);
SyntheticDataset LoadSynthetic(const std::string& path,
                               const std::string& manifest_path,
                               const Schema& schema, const Vocabulary& vocab);

}  // namespace distildp

#endif  // DISTILDP_SAMPLER_H_
