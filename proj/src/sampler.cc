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

#include "distildp/sampler.h"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>
#include <random>

#include "distildp/hashing.h"

namespace distildp {
namespace {

using json = nlohmann::json;

// Token ids sorted by descending probability, lower id first on ties.
std::vector<int> RankTokens(const Vector& probs) {
  std::vector<int> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return probs(a) > probs(b); });
  return order;
}

Vector KeepAndRenormalize(const Vector& probs, std::span<const int> keep) {
  Vector out = Vector::Zero(probs.size());
  double mass = 0;
  for (int id : keep) {
    out(id) = probs(id);
    mass += probs(id);
  }
  if (!(mass > 0)) throw std::invalid_argument("truncation kept zero mass");
  return out / mass;
}

}  // namespace

void SamplerConfig::Validate() const {
  if (top_k && *top_k < 1) throw ConfigError("sampler: top_k must be >= 1");
  if (top_p && !(*top_p > 0 && *top_p <= 1)) {
    throw ConfigError("sampler: top_p must be in (0, 1]");
  }
  if (max_new_tokens < 1) {
    throw ConfigError("sampler: max_new_tokens must be >= 1");
  }
}

json SamplerConfig::ToJson() const {
  return {{"top_k", top_k ? json(*top_k) : json(nullptr)},
          {"top_p", top_p ? json(*top_p) : json(nullptr)},
          {"max_new_tokens", max_new_tokens},
          {"stop_at_eos", stop_at_eos}};
}

Vector TruncateTopK(const Vector& probs, int k) {
  if (k <= 0) throw std::invalid_argument("TruncateTopK: k must be >= 1");
  if (k >= probs.size()) return probs;
  const std::vector<int> order = RankTokens(probs);
  return KeepAndRenormalize(probs, std::span<const int>(order).first(k));
}

Vector TruncateTopP(const Vector& probs, double p) {
  if (!(p > 0)) throw std::invalid_argument("TruncateTopP: p must be > 0");
  if (p >= 1.0) return probs;
  const std::vector<int> order = RankTokens(probs);
  double cumulative = 0;
  size_t keep = 0;
  while (keep < order.size()) {
    cumulative += probs(order[keep]);
    ++keep;
    if (cumulative >= p) break;
  }
  return KeepAndRenormalize(probs, std::span<const int>(order).first(keep));
}

Vector NextTokenDistribution(const Vector& logits, const SamplerConfig& config) {
  const double mx = logits.maxCoeff();
  Vector probs = (logits.array() - mx).exp();
  probs /= probs.sum();
  if (config.top_k) probs = TruncateTopK(probs, *config.top_k);
  if (config.top_p) probs = TruncateTopP(probs, *config.top_p);
  return probs;
}

int SampleIndex(const Vector& probs, Rng& rng) {
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const double u = uniform(rng);
  double cumulative = 0;
  int last_nonzero = 0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    if (probs(i) <= 0) continue;
    last_nonzero = static_cast<int>(i);
    cumulative += probs(i);
    if (u < cumulative) return static_cast<int>(i);
  }
  return last_nonzero;
}

std::vector<int> SampleSequence(const ParameterSet& params,
                                const ControlCode& code,
                                const SamplerConfig& config, Rng& rng) {
  config.Validate();
  const int max_len = params.config().max_seq_len;
  if (code.rendered.empty() ||
      static_cast<int>(code.rendered.size()) >= max_len) {
    throw std::out_of_range("control code leaves no room in the model context");
  }
  IncrementalDecoder decoder(params);
  std::vector<int> tokens = code.rendered;
  const Vector* logits = nullptr;
  for (int t : tokens) logits = &decoder.Step(t);
  for (int n = 0; n < config.max_new_tokens; ++n) {
    const int next = SampleIndex(NextTokenDistribution(*logits, config), rng);
    tokens.push_back(next);
    if (config.stop_at_eos && next == Vocabulary::kEos) break;
    if (static_cast<int>(tokens.size()) >= max_len) break;
    if (n + 1 < config.max_new_tokens) logits = &decoder.Step(next);
  }
  return tokens;
}

SyntheticDataset SyntheticDataset::Prefix(size_t n) const {
  if (n > examples.size()) {
    throw std::out_of_range("synthetic pool smaller than requested prefix");
  }
  SyntheticDataset out;
  out.examples.assign(examples.begin(), examples.begin() + n);
  out.generator_fingerprint = generator_fingerprint;
  out.config = config;
  out.seed = seed;
  return out;
}

std::vector<PreparedExample> SyntheticDataset::AsPrepared() const {
  std::vector<PreparedExample> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    out.push_back({ex.tokens, ex.boundary(), ex.code.attributes});
  }
  return out;
}

json SyntheticDataset::Manifest() const {
  return {{"version", 1},
          {"count", examples.size()},
          {"generator_fingerprint", generator_fingerprint},
          {"sampler", config.ToJson()},
          {"seed", seed}};
}

SyntheticDataset GenerateSynthetic(const ParameterSet& params,
                                   std::span<const ControlCode> codes,
                                   const SamplerConfig& config, uint64_t seed) {
  if (codes.empty()) throw std::invalid_argument("GenerateSynthetic: no codes");
  config.Validate();
  SyntheticDataset out;
  out.generator_fingerprint = Sha256Hex(SerializeCheckpoint(params));
  out.config = config;
  out.seed = seed;
  out.examples.resize(codes.size());
  std::vector<std::exception_ptr> errors(codes.size());
  const auto n = static_cast<int64_t>(codes.size());
#pragma omp parallel for schedule(dynamic, 16)
  for (int64_t i = 0; i < n; ++i) {
    try {
      Rng rng(DeriveSeed(seed, static_cast<uint64_t>(i)));
      out.examples[i].code = codes[i];
      out.examples[i].tokens = SampleSequence(params, codes[i], config, rng);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  std::string failures;
  int failed = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (!errors[i]) continue;
    if (++failed <= 5) {
      try {
        std::rethrow_exception(errors[i]);
      } catch (const std::exception& e) {
        failures += "\n  sequence " + std::to_string(i) + ": " + e.what();
      }
    }
  }
  if (failed > 0) {
    throw std::runtime_error("generation failed for " + std::to_string(failed) +
                             " sequences:" + failures);
  }
  return out;
}

void SaveSynthetic(const std::string& path, const std::string& manifest_path,
                   const SyntheticDataset& data, const Vocabulary& vocab) {
  std::string out;
  for (const auto& ex : data.examples) {
    std::span<const int> generated =
        std::span<const int>(ex.tokens).subspan(ex.boundary());
    std::span<const int> content = generated;
    if (ex.ends_with_eos()) content = generated.first(generated.size() - 1);
    json line = {{"control", ex.code.attributes},
                 {"text", vocab.Decode(content)},
                 {"eos", ex.ends_with_eos()},
                 {"tokens", std::vector<int>(generated.begin(), generated.end())}};
    out += line.dump();
    out += '\n';
  }
  WriteFileBytes(path, out);
  WriteFileBytes(manifest_path, data.Manifest().dump(2) + "\n");
}

SyntheticDataset LoadSynthetic(const std::string& path,
                               const std::string& manifest_path,
                               const Schema& schema, const Vocabulary& vocab) {
  SyntheticDataset data;
  try {
    const json manifest = json::parse(ReadFileBytes(manifest_path));
    data.generator_fingerprint =
        manifest.at("generator_fingerprint").get<std::string>();
    data.seed = manifest.at("seed").get<uint64_t>();
    const json& s = manifest.at("sampler");
    data.config.top_k = s.at("top_k").is_null()
                            ? std::nullopt
                            : std::optional<int>(s.at("top_k").get<int>());
    data.config.top_p = s.at("top_p").is_null()
                            ? std::nullopt
                            : std::optional<double>(s.at("top_p").get<double>());
    data.config.max_new_tokens = s.at("max_new_tokens").get<int>();
    data.config.stop_at_eos = s.at("stop_at_eos").get<bool>();
  } catch (const json::exception& e) {
    throw ConfigError(manifest_path + ": " + e.what());
  }
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open synthetic dataset: " + path);
  std::string line;
  int64_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      SyntheticExample ex;
      ex.code = RenderControlCode(j.at("control").get<Attributes>(), schema,
                                  vocab);
      ex.tokens = ex.code.rendered;
      for (int t : j.at("tokens").get<std::vector<int>>()) {
        if (t < 0 || t >= vocab.size()) throw ConfigError("token out of range");
        ex.tokens.push_back(t);
      }
      data.examples.push_back(std::move(ex));
    } catch (const std::exception& e) {
      throw ConfigError(path + ": line " + std::to_string(line_number) + ": " +
                        e.what());
    }
  }
  return data;
}

}  // namespace distildp
