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

// End-to-end experiments: the private teacher -> synthetic data -> student
// pipeline, its baselines, perplexity evaluation and ablation sweeps.

#ifndef DISTILDP_PIPELINE_H_
#define DISTILDP_PIPELINE_H_

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "distildp/accountant.h"
#include "distildp/corpus.h"
#include "distildp/distill.h"
#include "distildp/dpsgd.h"
#include "distildp/model.h"
#include "distildp/sampler.h"
#include "json.hpp"

namespace distildp {

enum class Method { kDistilDp, kDpSgdStudent, kDpKd, kDpSyn, kZeroShot };

std::string MethodName(Method method);
// Throws ConfigError for unknown names.
Method ParseMethod(const std::string& name);

struct CorpusConfig {
  // "toy" generates records; "file" reads records_path with schema_path.
  std::string source = "toy";
  std::string records_path;
  std::string schema_path;
  int64_t toy_size = 2400;
  std::array<double, 3> split = {2000.0 / 2400, 200.0 / 2400, 200.0 / 2400};
  int max_len = 64;

  nlohmann::json ToJson() const;
};

// DP-SGD settings before they are tied to a dataset size and budget.
struct DpPhaseConfig {
  double clip_norm = 1.0;
  double sampling_rate = 0.05;
  double epochs = 10;
  double learning_rate = 1.0;
  // Calibrated to the phase budget when unset.
  std::optional<double> noise_multiplier;

  nlohmann::json ToJson() const;
  DpSgdConfig Resolve(int64_t dataset_size, const PrivacyBudget& budget) const;
};

// Architecture without the vocabulary and context length, which come from
// the prepared data.
struct ArchConfig {
  int n_layers = 2;
  int n_heads = 2;
  int d_model = 32;
  int d_ff = 64;

  ModelConfig ToModel(int vocab_size, int max_seq_len) const;
  nlohmann::json ToJson() const;
};

struct ExperimentConfig {
  Method method = Method::kDistilDp;
  uint64_t seed = 1234;
  CorpusConfig corpus;
  ArchConfig teacher{4, 4, 48, 192};
  DpPhaseConfig teacher_dp;
  SamplerConfig sampler;
  int64_t synthetic_count = 20000;
  ArchConfig student;
  KdConfig kd;
  // DP-SGD settings for the student in dpsgd_student and dpkd.
  DpPhaseConfig student_dp;
  // Total budget. A non-positive delta means 1 / |train|.
  double epsilon = 2.0;
  double delta = 0.0;

  void Validate() const;
  nlohmann::json ToJson() const;
  PrivacyBudget Budget(int64_t train_size) const;
};

// A prepared dataset as written by the prepare step.
struct PreparedData {
  Schema schema;
  Vocabulary vocab;
  std::vector<PreparedExample> train;
  std::vector<PreparedExample> validation;
  std::vector<PreparedExample> test;
};

// Generates or loads the records, splits them and prepends control codes.
PreparedData PrepareData(const CorpusConfig& config, uint64_t seed);

// Token-weighted negative log-likelihood over content positions.
struct PplAccumulator {
  double nll_sum = 0;
  int64_t count = 0;

  void Merge(const PplAccumulator& other) {
    nll_sum += other.nll_sum;
    count += other.count;
  }
  // Throws std::invalid_argument when no position was counted.
  double Ppl() const;
};

PplAccumulator AccumulateNll(const ParameterSet& params,
                             std::span<const PreparedExample> data);
double EvaluatePpl(const ParameterSet& params,
                   std::span<const PreparedExample> data);

struct PhaseReport {
  std::string name;  // "teacher", "generation" or "student"
  double target_epsilon = 0;
  double delta = 0;
  double spent_epsilon = 0;
  int64_t ledger_steps = 0;
  std::optional<double> noise_multiplier;
  int64_t steps = 0;
  std::vector<double> loss_curve;
  nlohmann::json details;
  double seconds = 0;

  nlohmann::json ToJson() const;
};

struct ExperimentReport {
  Method method = Method::kDistilDp;
  nlohmann::json config;
  PrivacyBudget budget;
  std::vector<PhaseReport> phases;
  double test_ppl = 0;
  std::optional<double> teacher_test_ppl;
  std::vector<double> validation_ppl;
  std::map<std::string, std::string> fingerprints;
  double seconds = 0;

  std::optional<ParameterSet> teacher;
  std::optional<ParameterSet> student;
  std::shared_ptr<const SyntheticDataset> synthetic;

  const PhaseReport& phase(const std::string& name) const;
  double total_spent_epsilon() const;
  // Wall-clock fields are left out so reruns compare byte for byte.
  nlohmann::json ToJson() const;
};

// Reuses DP teachers and synthetic pools across runs that share their
// inputs. Every cached artifact is a deterministic function of its key.
class PhaseCache {
 public:
  struct Teacher {
    TrainReport report;
    PhaseReport phase;
    PrivacyLedger ledger;  // snapshot after the teacher phase
  };
  std::shared_ptr<const Teacher> FindTeacher(const std::string& key) const;
  void StoreTeacher(const std::string& key, std::shared_ptr<const Teacher> t);
  // Returns the first n examples of a cached pool of at least n examples.
  std::shared_ptr<const SyntheticDataset> FindPool(const std::string& key,
                                                   int64_t n) const;
  void StorePool(const std::string& key,
                 std::shared_ptr<const SyntheticDataset> pool);

 private:
  std::map<std::string, std::shared_ptr<const Teacher>> teachers_;
  std::map<std::string, std::shared_ptr<const SyntheticDataset>> pools_;
};

struct RunOptions {
  PhaseCache* cache = nullptr;
  // Generate at least this many synthetic examples so that later runs can
  // take prefixes of the same pool.
  int64_t pool_size = 0;
  bool verbose = false;
};

// Private teacher, synthetic generation and distillation. Requires
// method distildp or dpsyn.
ExperimentReport RunDistilDp(const ExperimentConfig& config,
                             const PreparedData& data,
                             const RunOptions& options = {});

// dpsgd_student, dpkd, dpsyn or zero_shot.
ExperimentReport RunBaseline(const ExperimentConfig& config,
                             const PreparedData& data,
                             const RunOptions& options = {});

// Dispatches on config.method.
ExperimentReport RunExperiment(const ExperimentConfig& config,
                               const PreparedData& data,
                               const RunOptions& options = {});

enum class SweepAxis { kLambda, kTemperature, kSyntheticCount, kAlpha };
SweepAxis ParseSweepAxis(const std::string& name);
std::string SweepAxisName(SweepAxis axis);

struct SweepRow {
  double value = 0;
  std::optional<ExperimentReport> report;
  std::string error;
};

// One run per value with every other setting fixed. Teacher and synthetic
// pool are shared across rows; failures are recorded and the sweep goes on.
std::vector<SweepRow> AblationSweep(const ExperimentConfig& base,
                                    const PreparedData& data, SweepAxis axis,
                                    std::span<const double> values,
                                    const RunOptions& options = {});

// CSV with columns method, epsilon, delta, lambda, temperature, alpha,
// synthetic_count, ppl, seconds, teacher_fingerprint, error.
std::string CsvHeader();
std::string CsvRow(const ExperimentConfig& config,
                   const ExperimentReport& report);
std::string CsvErrorRow(const ExperimentConfig& config,
                        const std::string& error);
std::string SweepCsv(const ExperimentConfig& base, SweepAxis axis,
                     std::span<const SweepRow> rows);

}  // namespace distildp

#endif  // DISTILDP_PIPELINE_H_
