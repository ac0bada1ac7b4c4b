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

#include "distildp/pipeline.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <sstream>
#include <utility>

#include "distildp/common.h"
#include "distildp/hashing.h"

namespace distildp {
namespace {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

double SecondsSince(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

json FiniteOrNull(double v) {
  return std::isfinite(v) ? json(v) : json(nullptr);
}

// Rethrows an error from inside a phase with the phase name prepended,
// keeping the error type so exit codes survive.
template <typename F>
auto InPhase(const std::string& name, F&& body) {
  const std::string prefix = name + " phase: ";
  try {
    return body();
  } catch (const BudgetExhaustedError& e) {
    throw BudgetExhaustedError(prefix + e.what(), e.step());
  } catch (const NumericError& e) {
    throw NumericError(prefix + e.what(), e.step());
  } catch (const ConfigError& e) {
    throw ConfigError(prefix + e.what());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(prefix + e.what());
  } catch (const std::logic_error& e) {
    throw std::logic_error(prefix + e.what());
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(prefix + e.what());
  }
}

void Log(const RunOptions& options, const std::string& message) {
  if (options.verbose) std::fprintf(stderr, "[distildp] %s\n", message.c_str());
}

std::string DataFingerprint(std::span<const PreparedExample> examples) {
  std::string bytes;
  for (const auto& ex : examples) {
    bytes += PreparedToJson(ex).dump();
    bytes += '\n';
  }
  return Sha256Hex(bytes);
}

std::string SyntheticFingerprint(const SyntheticDataset& pool) {
  std::string bytes;
  for (const auto& ex : pool.examples) {
    for (int t : ex.tokens) {
      bytes += std::to_string(t);
      bytes += ',';
    }
    bytes += '\n';
  }
  return Sha256Hex(bytes);
}

struct Seeds {
  uint64_t teacher_init, teacher_sgd;
  uint64_t codes, sampling;
  uint64_t student_init, student_train;
};

Seeds DeriveSeeds(uint64_t root) {
  const uint64_t teacher = DeriveSeed(root, "teacher");
  const uint64_t generation = DeriveSeed(root, "generation");
  const uint64_t student = DeriveSeed(root, "student");
  return {DeriveSeed(teacher, uint64_t{0}),    DeriveSeed(teacher, uint64_t{1}),
          DeriveSeed(generation, uint64_t{0}), DeriveSeed(generation, uint64_t{1}),
          DeriveSeed(student, uint64_t{0}),    DeriveSeed(student, uint64_t{1})};
}

ModelConfig TeacherModel(const ExperimentConfig& c, const PreparedData& d) {
  return c.teacher.ToModel(d.vocab.size(), c.corpus.max_len);
}

ModelConfig StudentModel(const ExperimentConfig& c, const PreparedData& d) {
  return c.student.ToModel(d.vocab.size(), c.corpus.max_len);
}

// Phase report for a phase that must not touch the ledger: the spend is the
// epsilon difference between the snapshots taken around it.
PhaseReport LedgerFreePhase(const std::string& name,
                            const PrivacyLedger& before,
                            const PrivacyLedger& after) {
  if (!(before == after)) {
    throw std::logic_error(name + " phase wrote to the privacy ledger");
  }
  PhaseReport phase;
  phase.name = name;
  phase.delta = before.target().delta;
  const double eps_before =
      before.steps_recorded() == 0 ? 0 : EpsilonAt(before, phase.delta).epsilon;
  const double eps_after =
      after.steps_recorded() == 0 ? 0 : EpsilonAt(after, phase.delta).epsilon;
  phase.spent_epsilon = eps_after - eps_before;
  phase.ledger_steps = after.steps_recorded();
  return phase;
}

PhaseReport DpPhaseReport(const std::string& name, const PrivacyLedger& ledger,
                          const TrainReport& report,
                          const DpSgdConfig& dp_config) {
  PhaseReport phase;
  phase.name = name;
  phase.target_epsilon = ledger.target().epsilon;
  phase.delta = ledger.target().delta;
  phase.spent_epsilon = report.spent_epsilon;
  phase.ledger_steps = ledger.steps_recorded();
  phase.noise_multiplier = dp_config.noise_multiplier;
  phase.steps = report.steps;
  phase.loss_curve = report.loss_curve;
  phase.details = report.ToJson(dp_config);
  phase.details.erase("loss_curve");
  phase.details["ledger"] = ledger.ToJson();
  return phase;
}

// Trains the private teacher on the real training set, or returns the
// cached one for identical inputs.
std::shared_ptr<const PhaseCache::Teacher> TeacherPhase(
    const ExperimentConfig& config, const PreparedData& data,
    const PrivacyBudget& budget, const RunOptions& options) {
  const Seeds seeds = DeriveSeeds(config.seed);
  const ModelConfig model = TeacherModel(config, data);
  const json key_json = {{"model", model.ToJson()},
                         {"dp", config.teacher_dp.ToJson()},
                         {"epsilon", budget.epsilon},
                         {"delta", budget.delta},
                         {"seed", config.seed},
                         {"train", DataFingerprint(data.train)}};
  const std::string key = key_json.dump();
  if (options.cache != nullptr) {
    if (auto hit = options.cache->FindTeacher(key)) {
      Log(options, "teacher: reusing cached checkpoint");
      return hit;
    }
  }
  return InPhase("teacher", [&] {
    const auto start = Clock::now();
    const DpSgdConfig dp =
        config.teacher_dp.Resolve(static_cast<int64_t>(data.train.size()),
                                  budget);
    Log(options, "teacher: " + std::to_string(dp.steps) +
                     " DP-SGD steps, noise multiplier " +
                     std::to_string(dp.noise_multiplier));
    PrivacyLedger ledger(budget);
    DpTrainOptions train_options;
    if (options.verbose) {
      train_options.on_step = [&](int64_t step, const StepStats& stats,
                                  double eps) {
        if (step % 25 == 0 || step == dp.steps) {
          Log(options, "teacher: step " + std::to_string(step) + " loss " +
                           std::to_string(stats.mean_loss) + " eps " +
                           std::to_string(eps));
        }
      };
    }
    TrainReport trained =
        TrainTeacherDp(InitParams(model, seeds.teacher_init), data.train, dp,
                       &ledger, seeds.teacher_sgd, train_options);
    PhaseReport phase = DpPhaseReport("teacher", ledger, trained, dp);
    auto teacher = std::make_shared<PhaseCache::Teacher>(PhaseCache::Teacher{
        std::move(trained), std::move(phase), ledger});
    teacher->phase.seconds = SecondsSince(start);
    if (options.cache != nullptr) options.cache->StoreTeacher(key, teacher);
    return std::shared_ptr<const PhaseCache::Teacher>(teacher);
  });
}

// Synthetic data from the teacher, prompted by control codes subsampled
// from the training set.
std::shared_ptr<const SyntheticDataset> GenerationPhase(
    const ExperimentConfig& config, const PreparedData& data,
    const ParameterSet& teacher, const RunOptions& options,
    double* seconds) {
  const Seeds seeds = DeriveSeeds(config.seed);
  const std::string key =
      json{{"teacher", Sha256Hex(SerializeCheckpoint(teacher))},
           {"sampler", config.sampler.ToJson()},
           {"seed", config.seed}}
          .dump();
  const int64_t count = config.synthetic_count;
  if (options.cache != nullptr) {
    if (auto hit = options.cache->FindPool(key, count)) {
      Log(options, "generation: reusing cached pool");
      *seconds = 0;
      return hit;
    }
  }
  return InPhase("generation", [&] {
    const auto start = Clock::now();
    const int64_t pool_size = std::max(count, options.pool_size);
    std::vector<ControlCode> codes;
    codes.reserve(data.train.size());
    for (const auto& ex : data.train) {
      codes.push_back(RenderControlCode(ex.attributes, data.schema, data.vocab));
    }
    const std::vector<ControlCode> prompts =
        SubsampleControlCodes(codes, pool_size, seeds.codes);
    Log(options, "generation: sampling " + std::to_string(pool_size) +
                     " sequences");
    auto pool = std::make_shared<const SyntheticDataset>(
        GenerateSynthetic(teacher, prompts, config.sampler, seeds.sampling));
    if (options.cache != nullptr) options.cache->StorePool(key, pool);
    *seconds = SecondsSince(start);
    if (pool_size == count) return pool;
    return std::make_shared<const SyntheticDataset>(pool->Prefix(count));
  });
}

StudentTrainOptions EvaluateOn(const PreparedData& data,
                               const RunOptions& options) {
  StudentTrainOptions out;
  out.evaluate = [&data, &options](const ParameterSet& params) {
    const double ppl = EvaluatePpl(params, data.validation);
    Log(options, "student: validation ppl " + std::to_string(ppl));
    return ppl;
  };
  return out;
}

ExperimentReport NewReport(const ExperimentConfig& config,
                           const PreparedData& data) {
  ExperimentReport report;
  report.method = config.method;
  report.config = config.ToJson();
  report.budget = config.Budget(static_cast<int64_t>(data.train.size()));
  report.fingerprints["train_data"] = DataFingerprint(data.train);
  return report;
}

void FinishReport(ExperimentReport* report, const PreparedData& data,
                  Clock::time_point start) {
  report->test_ppl =
      InPhase("evaluation", [&] { return EvaluatePpl(*report->student, data.test); });
  report->fingerprints["student"] =
      Sha256Hex(SerializeCheckpoint(*report->student));
  if (report->teacher) {
    report->teacher_test_ppl = EvaluatePpl(*report->teacher, data.test);
  }
  report->seconds = SecondsSince(start);
}

ExperimentReport RunSynthetic(const ExperimentConfig& config,
                              const PreparedData& data,
                              const RunOptions& options) {
  const auto start = Clock::now();
  ExperimentConfig effective = config;
  if (config.method == Method::kDpSyn) {
    effective.kd.lambda = 0;
    effective.kd.alpha = 0;
  }
  effective.Validate();
  ExperimentReport report = NewReport(effective, data);
  const Seeds seeds = DeriveSeeds(config.seed);

  auto teacher = TeacherPhase(effective, data, report.budget, options);
  report.phases.push_back(teacher->phase);
  report.teacher = teacher->report.final_params;
  report.fingerprints["teacher"] =
      Sha256Hex(SerializeCheckpoint(teacher->report.final_params));

  // Later phases only read the teacher checkpoint and never receive the
  // ledger, so its snapshots around them must agree.
  const PrivacyLedger ledger = teacher->ledger;
  const PrivacyLedger before_generation = ledger;
  double generation_seconds = 0;
  auto pool = GenerationPhase(effective, data, *report.teacher, options,
                              &generation_seconds);
  PhaseReport generation = LedgerFreePhase("generation", before_generation, ledger);
  generation.details = pool->Manifest();
  generation.details["assumed_disclosures"] = {
      "control-code distribution of the training set (prompts are drawn "
      "from it exactly, without noise, and are not charged to the ledger)"};
  generation.seconds = generation_seconds;
  report.phases.push_back(std::move(generation));
  report.synthetic = pool;
  report.fingerprints["synthetic"] = SyntheticFingerprint(*pool);

  const PrivacyLedger before_student = ledger;
  const auto student_start = Clock::now();
  StudentReport student = InPhase("student", [&] {
    Log(options, "student: distilling on " +
                     std::to_string(pool->examples.size()) + " examples");
    return TrainStudent(*report.teacher,
                        InitParams(StudentModel(effective, data),
                                   seeds.student_init),
                        pool->AsPrepared(), effective.kd, seeds.student_train,
                        EvaluateOn(data, options));
  });
  PhaseReport student_phase =
      LedgerFreePhase("student", before_student, ledger);
  student_phase.steps = student.steps;
  for (const auto& e : student.epochs) student_phase.loss_curve.push_back(e.total);
  student_phase.details = student.ToJson(effective.kd);
  student_phase.seconds = SecondsSince(student_start);
  report.phases.push_back(std::move(student_phase));
  report.validation_ppl = student.validation_ppl;
  report.student = std::move(student.final_params);

  FinishReport(&report, data, start);
  return report;
}
ExperimentReport RunDpSgdStudent(const ExperimentConfig& config,
                                 const PreparedData& data,
                                 const RunOptions& options) {
  const auto start = Clock::now();
  config.Validate();
  ExperimentReport report = NewReport(config, data);
  const Seeds seeds = DeriveSeeds(config.seed);
  PrivacyLedger ledger(report.budget);
  report.student = InPhase("student", [&] {
    const DpSgdConfig dp = config.student_dp.Resolve(
        static_cast<int64_t>(data.train.size()), report.budget);
    Log(options, "student: " + std::to_string(dp.steps) + " DP-SGD steps");
    TrainReport trained = TrainDp(
        InitParams(StudentModel(config, data), seeds.student_init), data.train,
        dp, NextTokenLoss(), &ledger, seeds.student_train);
    PhaseReport phase = DpPhaseReport("student", ledger, trained, dp);
    phase.seconds = SecondsSince(start);
    report.phases.push_back(std::move(phase));
    return std::move(trained.final_params);
  });
  FinishReport(&report, data, start);
  return report;
}

// Teacher and student each get half of epsilon and half of delta, with
// separate ledgers. The student trains with DP-SGD on the real data.
ExperimentReport RunDpKd(const ExperimentConfig& config,
                         const PreparedData& data, const RunOptions& options) {
  const auto start = Clock::now();
  config.Validate();
  ExperimentReport report = NewReport(config, data);
  const Seeds seeds = DeriveSeeds(config.seed);
  const PrivacyBudget half{report.budget.epsilon / 2, report.budget.delta / 2};

  auto teacher = TeacherPhase(config, data, half, options);
  report.phases.push_back(teacher->phase);
  report.teacher = teacher->report.final_params;
  report.fingerprints["teacher"] =
      Sha256Hex(SerializeCheckpoint(*report.teacher));

  PrivacyLedger ledger(half);
  const auto student_start = Clock::now();
  report.student = InPhase("student", [&] {
    const DpSgdConfig dp = config.student_dp.Resolve(
        static_cast<int64_t>(data.train.size()), half);
    Log(options, "student: " + std::to_string(dp.steps) +
                     " DP-SGD distillation steps");
    TrainReport trained = TrainDp(
        InitParams(StudentModel(config, data), seeds.student_init), data.train,
        dp, KdExampleLoss(&*report.teacher, config.kd), &ledger,
        seeds.student_train);
    PhaseReport phase = DpPhaseReport("student", ledger, trained, dp);
    phase.details["kd"] = config.kd.ToJson();
    phase.seconds = SecondsSince(student_start);
    report.phases.push_back(std::move(phase));
    return std::move(trained.final_params);
  });
  FinishReport(&report, data, start);
  return report;
}

ExperimentReport RunZeroShot(const ExperimentConfig& config,
                             const PreparedData& data) {
  const auto start = Clock::now();
  config.Validate();
  ExperimentReport report = NewReport(config, data);
  report.student =
      InitParams(StudentModel(config, data), DeriveSeeds(config.seed).student_init);
  FinishReport(&report, data, start);
  return report;
}

// Writes `value` into the knob named by `axis`.
void SetAxis(ExperimentConfig* config, SweepAxis axis, double value) {
  switch (axis) {
    case SweepAxis::kLambda:
      config->kd.lambda = value;
      break;
    case SweepAxis::kTemperature:
      config->kd.temperature = value;
      break;
    case SweepAxis::kAlpha:
      config->kd.alpha = value;
      break;
    case SweepAxis::kSyntheticCount:
      if (!(value >= 1) || value != std::floor(value)) {
        throw ConfigError("synthetic_count must be a positive integer");
      }
      config->synthetic_count = static_cast<int64_t>(value);
      break;
  }
}

std::string CsvEscape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

std::string FormatNumber(double v) {
  std::ostringstream out;
  out << std::setprecision(10) << v;
  return out.str();
}

std::string CsvLine(const ExperimentConfig& config, double delta,
                    const std::string& ppl, const std::string& seconds,
                    const std::string& teacher, const std::string& error) {
  std::ostringstream out;
  out << MethodName(config.method) << ',' << FormatNumber(config.epsilon) << ','
      << FormatNumber(delta) << ',' << FormatNumber(config.kd.lambda) << ','
      << FormatNumber(config.kd.temperature) << ','
      << FormatNumber(config.kd.alpha) << ',' << config.synthetic_count << ','
      << ppl << ',' << seconds << ',' << teacher << ',' << CsvEscape(error)
      << '\n';
  return out.str();
}

}  // namespace

std::string MethodName(Method method) {
  switch (method) {
    case Method::kDistilDp:
      return "distildp";
    case Method::kDpSgdStudent:
      return "dpsgd_student";
    case Method::kDpKd:
      return "dpkd";
    case Method::kDpSyn:
      return "dpsyn";
    case Method::kZeroShot:
      return "zero_shot";
  }
  return "unknown";
}

Method ParseMethod(const std::string& name) {
  for (Method m : {Method::kDistilDp, Method::kDpSgdStudent, Method::kDpKd,
                   Method::kDpSyn, Method::kZeroShot}) {
    if (MethodName(m) == name) return m;
  }
  throw ConfigError("unknown method '" + name +
                    "' (expected distildp, dpsgd_student, dpkd, dpsyn or "
                    "zero_shot)");
}

json CorpusConfig::ToJson() const {
  return {{"source", source},     {"records_path", records_path},
          {"schema_path", schema_path}, {"toy_size", toy_size},
          {"split", split},       {"max_len", max_len}};
}

json DpPhaseConfig::ToJson() const {
  return {{"clip_norm", clip_norm},
          {"sampling_rate", sampling_rate},
          {"epochs", epochs},
          {"learning_rate", learning_rate},
          {"noise_multiplier",
           noise_multiplier ? json(*noise_multiplier) : json(nullptr)}};
}

DpSgdConfig DpPhaseConfig::Resolve(int64_t dataset_size,
                                   const PrivacyBudget& budget) const {
  if (dataset_size <= 0) throw ConfigError("dp-sgd: empty training set");
  DpSgdConfig out;
  out.clip_norm = clip_norm;
  out.sampling_rate = sampling_rate;
  out.learning_rate = learning_rate;
  out.steps = StepsForEpochs(epochs, sampling_rate);
  out.expected_batch = sampling_rate * static_cast<double>(dataset_size);
  if (noise_multiplier) {
    out.noise_multiplier = *noise_multiplier;
  } else if (std::isinf(budget.epsilon) || out.steps == 0) {
    out.noise_multiplier = 0;
  } else {
    out.noise_multiplier = CalibrateSigma(budget, sampling_rate, out.steps);
  }
  out.Validate();
  return out;
}

ModelConfig ArchConfig::ToModel(int vocab_size, int max_seq_len) const {
  ModelConfig m;
  m.n_layers = n_layers;
  m.n_heads = n_heads;
  m.d_model = d_model;
  m.d_ff = d_ff;
  m.vocab_size = vocab_size;
  m.max_seq_len = max_seq_len;
  m.Validate();
  return m;
}

json ArchConfig::ToJson() const {
  return {{"n_layers", n_layers},
          {"n_heads", n_heads},
          {"d_model", d_model},
          {"d_ff", d_ff}};
}

void ExperimentConfig::Validate() const {
  if (corpus.source != "toy" && corpus.source != "file") {
    throw ConfigError("corpus.source must be 'toy' or 'file'");
  }
  if (corpus.source == "file" &&
      (corpus.records_path.empty() || corpus.schema_path.empty())) {
    throw ConfigError("corpus.records_path and corpus.schema_path are required "
                      "when corpus.source = file");
  }
  if (corpus.toy_size <= 0) throw ConfigError("corpus.toy_size must be > 0");
  if (corpus.max_len < 2) throw ConfigError("corpus.max_len must be >= 2");
  for (double f : corpus.split) {
    if (!(f > 0)) throw ConfigError("corpus split fractions must be > 0");
  }
  if (std::abs(corpus.split[0] + corpus.split[1] + corpus.split[2] - 1) > 1e-6) {
    throw ConfigError("corpus split fractions must sum to 1");
  }
  auto check_arch = [](const ArchConfig& a, const std::string& section) {
    try {
      a.ToModel(Vocabulary::Ascii().size(), 64);
    } catch (const ConfigError& e) {
      throw ConfigError(section + ": " + e.what());
    }
  };
  check_arch(teacher, "teacher");
  check_arch(student, "student");
  auto check_dp = [](const DpPhaseConfig& d, const std::string& section) {
    if (!(d.clip_norm > 0)) throw ConfigError(section + ".clip_norm must be > 0");
    if (!(d.sampling_rate > 0 && d.sampling_rate <= 1)) {
      throw ConfigError(section + ".sampling_rate must be in (0, 1]");
    }
    if (!(d.epochs >= 0)) throw ConfigError(section + ".epochs must be >= 0");
    if (!(d.learning_rate >= 0)) {
      throw ConfigError(section + ".learning_rate must be >= 0");
    }
    if (d.noise_multiplier && !(*d.noise_multiplier >= 0)) {
      throw ConfigError(section + ".noise_multiplier must be >= 0");
    }
  };
  check_dp(teacher_dp, "teacher_dp");
  check_dp(student_dp, "student_dp");
  sampler.Validate();
  kd.Validate();
  if (kd.alpha > 0 && teacher.d_model != student.d_model) {
    throw ConfigError("kd.alpha > 0 needs teacher.d_model == student.d_model");
  }
  if (synthetic_count < 1) throw ConfigError("sampler.count must be >= 1");
  if (!(epsilon > 0)) throw ConfigError("privacy.epsilon must be > 0");
  if (!(delta < 1)) throw ConfigError("privacy.delta must be < 1");
}

json ExperimentConfig::ToJson() const {
  return {{"method", MethodName(method)},
          {"seed", seed},
          {"corpus", corpus.ToJson()},
          {"teacher", teacher.ToJson()},
          {"teacher_dp", teacher_dp.ToJson()},
          {"sampler", sampler.ToJson()},
          {"synthetic_count", synthetic_count},
          {"student", student.ToJson()},
          {"kd", kd.ToJson()},
          {"student_dp", student_dp.ToJson()},
          {"epsilon", std::isfinite(epsilon) ? json(epsilon) : json("inf")},
          {"delta", delta}};
}

PrivacyBudget ExperimentConfig::Budget(int64_t train_size) const {
  PrivacyBudget budget;
  budget.epsilon = epsilon;
  budget.delta = delta > 0 ? delta : PrivacyBudget::DefaultDelta(train_size);
  budget.Validate();
  return budget;
}

PreparedData PrepareData(const CorpusConfig& config, uint64_t seed) {
  PreparedData out;
  out.vocab = Vocabulary::Ascii();
  std::vector<Record> records;
  if (config.source == "toy") {
    out.schema = ToySchema();
    records = GenerateToyCorpus(seed, config.toy_size, out.schema);
  } else if (config.source == "file") {
    out.schema = Schema::Load(config.schema_path);
    records = LoadRecords(config.records_path, out.schema);
  } else {
    throw ConfigError("corpus.source must be 'toy' or 'file'");
  }
  const DatasetSplit split =
      SplitDataset(records, config.split, DeriveSeed(seed, "split"));
  PrepareOptions options;
  options.max_len = config.max_len;
  out.train = PrependAndTokenize(split.train, out.schema, out.vocab, options);
  out.validation =
      PrependAndTokenize(split.validation, out.schema, out.vocab, options);
  out.test = PrependAndTokenize(split.test, out.schema, out.vocab, options);
  return out;
}

double PplAccumulator::Ppl() const {
  if (count <= 0) throw std::invalid_argument("perplexity over zero positions");
  return std::exp(nll_sum / static_cast<double>(count));
}

PplAccumulator AccumulateNll(const ParameterSet& params,
                             std::span<const PreparedExample> data) {
  std::vector<PplAccumulator> parts(data.size());
  const auto n = static_cast<int64_t>(data.size());
#pragma omp parallel for schedule(dynamic, 4)
  for (int64_t k = 0; k < n; ++k) {
    const PreparedExample& ex = data[k];
    if (ex.tokens.size() < 2) continue;
    const std::vector<double> mask = ContentRowMask(ex);
    const Matrix log_probs =
        LogSoftmaxRows(Forward(params, InputTokens(ex)).logits);
    const std::span<const int> targets = TargetTokens(ex);
    for (size_t i = 0; i < mask.size(); ++i) {
      if (mask[i] == 0) continue;
      parts[k].nll_sum -= log_probs(static_cast<Eigen::Index>(i), targets[i]);
      parts[k].count += 1;
    }
  }
  PplAccumulator total;
  for (const auto& p : parts) total.Merge(p);
  return total;
}

double EvaluatePpl(const ParameterSet& params,
                   std::span<const PreparedExample> data) {
  if (data.empty()) throw std::invalid_argument("EvaluatePpl: empty dataset");
  return AccumulateNll(params, data).Ppl();
}

json PhaseReport::ToJson() const {
  json losses = json::array();
  for (double l : loss_curve) losses.push_back(FiniteOrNull(l));
  return {{"name", name},
          {"target_epsilon", target_epsilon},
          {"delta", delta},
          {"spent_epsilon", spent_epsilon},
          {"ledger_steps", ledger_steps},
          {"noise_multiplier",
           noise_multiplier ? json(*noise_multiplier) : json(nullptr)},
          {"steps", steps},
          {"loss_curve", std::move(losses)},
          {"details", details.is_null() ? json::object() : details}};
}

const PhaseReport& ExperimentReport::phase(const std::string& name) const {
  for (const auto& p : phases) {
    if (p.name == name) return p;
  }
  throw std::out_of_range("report has no phase '" + name + "'");
}

double ExperimentReport::total_spent_epsilon() const {
  double total = 0;
  for (const auto& p : phases) total += p.spent_epsilon;
  return total;
}

json ExperimentReport::ToJson() const {
  json phases_json = json::array();
  for (const auto& p : phases) phases_json.push_back(p.ToJson());
  return {{"version", 1},
          {"method", MethodName(method)},
          {"config", config},
          {"budget", {{"epsilon", budget.epsilon}, {"delta", budget.delta}}},
          {"phases", std::move(phases_json)},
          {"total_spent_epsilon", total_spent_epsilon()},
          {"test_ppl", test_ppl},
          {"teacher_test_ppl",
           teacher_test_ppl ? json(*teacher_test_ppl) : json(nullptr)},
          {"validation_ppl", validation_ppl},
          {"fingerprints", fingerprints}};
}

std::shared_ptr<const PhaseCache::Teacher> PhaseCache::FindTeacher(
    const std::string& key) const {
  auto it = teachers_.find(key);
  return it == teachers_.end() ? nullptr : it->second;
}

void PhaseCache::StoreTeacher(const std::string& key,
                              std::shared_ptr<const Teacher> t) {
  teachers_[key] = std::move(t);
}

std::shared_ptr<const SyntheticDataset> PhaseCache::FindPool(
    const std::string& key, int64_t n) const {
  auto it = pools_.find(key);
  if (it == pools_.end() ||
      static_cast<int64_t>(it->second->examples.size()) < n) {
    return nullptr;
  }
  if (static_cast<int64_t>(it->second->examples.size()) == n) return it->second;
  return std::make_shared<const SyntheticDataset>(
      it->second->Prefix(static_cast<size_t>(n)));
}

void PhaseCache::StorePool(const std::string& key,
                           std::shared_ptr<const SyntheticDataset> pool) {
  auto it = pools_.find(key);
  if (it != pools_.end() && it->second->examples.size() >= pool->examples.size()) {
    return;
  }
  pools_[key] = std::move(pool);
}

ExperimentReport RunDistilDp(const ExperimentConfig& config,
                             const PreparedData& data,
                             const RunOptions& options) {
  if (config.method != Method::kDistilDp && config.method != Method::kDpSyn) {
    throw ConfigError("RunDistilDp needs method distildp or dpsyn, got " +
                      MethodName(config.method));
  }
  return RunSynthetic(config, data, options);
}

ExperimentReport RunBaseline(const ExperimentConfig& config,
                             const PreparedData& data,
                             const RunOptions& options) {
  switch (config.method) {
    case Method::kDpSgdStudent:
      return RunDpSgdStudent(config, data, options);
    case Method::kDpKd:
      return RunDpKd(config, data, options);
    case Method::kDpSyn:
      return RunSynthetic(config, data, options);
    case Method::kZeroShot:
      return RunZeroShot(config, data);
    case Method::kDistilDp:
      break;
  }
  throw ConfigError("RunBaseline does not run method distildp");
}

ExperimentReport RunExperiment(const ExperimentConfig& config,
                               const PreparedData& data,
                               const RunOptions& options) {
  if (config.method == Method::kDistilDp) {
    return RunDistilDp(config, data, options);
  }
  return RunBaseline(config, data, options);
}

SweepAxis ParseSweepAxis(const std::string& name) {
  for (SweepAxis a : {SweepAxis::kLambda, SweepAxis::kTemperature,
                      SweepAxis::kSyntheticCount, SweepAxis::kAlpha}) {
    if (SweepAxisName(a) == name) return a;
  }
  throw ConfigError("unknown sweep axis '" + name +
                    "' (expected lambda, temperature, synthetic_count or alpha)");
}

std::string SweepAxisName(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::kLambda:
      return "lambda";
    case SweepAxis::kTemperature:
      return "temperature";
    case SweepAxis::kSyntheticCount:
      return "synthetic_count";
    case SweepAxis::kAlpha:
      return "alpha";
  }
  return "unknown";
}

std::vector<SweepRow> AblationSweep(const ExperimentConfig& base,
                                    const PreparedData& data, SweepAxis axis,
                                    std::span<const double> values,
                                    const RunOptions& options) {
  if (values.empty()) throw ConfigError("sweep: values list is empty");
  base.Validate();
  PhaseCache local_cache;
  RunOptions run_options = options;
  if (run_options.cache == nullptr) run_options.cache = &local_cache;
  if (axis == SweepAxis::kSyntheticCount) {
    for (double v : values) {
      if (v >= 1) {
        run_options.pool_size =
            std::max(run_options.pool_size, static_cast<int64_t>(v));
      }
    }
  }
  std::vector<SweepRow> rows;
  for (double value : values) {
    SweepRow row;
    row.value = value;
    try {
      ExperimentConfig config = base;
      SetAxis(&config, axis, value);
      Log(options, "sweep: " + SweepAxisName(axis) + " = " + FormatNumber(value));
      row.report = RunExperiment(config, data, run_options);
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string CsvHeader() {
  return "method,epsilon,delta,lambda,temperature,alpha,synthetic_count,ppl,"
         "seconds,teacher_fingerprint,error\n";
}

std::string CsvRow(const ExperimentConfig& config,
                   const ExperimentReport& report) {
  auto it = report.fingerprints.find("teacher");
  return CsvLine(config, report.budget.delta, FormatNumber(report.test_ppl),
                 FormatNumber(report.seconds),
                 it == report.fingerprints.end() ? "" : it->second, "");
}

std::string CsvErrorRow(const ExperimentConfig& config,
                        const std::string& error) {
  return CsvLine(config, config.delta, "", "", "", error.empty() ? "error" : error);
}

std::string SweepCsv(const ExperimentConfig& base, SweepAxis axis,
                     std::span<const SweepRow> rows) {
  std::string out = CsvHeader();
  for (const auto& row : rows) {
    ExperimentConfig config = base;
    try {
      SetAxis(&config, axis, row.value);
    } catch (const ConfigError&) {
    }
    out += row.report ? CsvRow(config, *row.report)
                      : CsvErrorRow(config, row.error);
  }
  return out;
}

}  // namespace distildp
