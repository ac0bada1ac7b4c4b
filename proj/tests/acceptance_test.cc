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


// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails. The toy-scale runs share one teacher and
// one synthetic pool through a PhaseCache.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "distildp/accountant.h"
#include "distildp/config.h"
#include "distildp/distill.h"
#include "distildp/dpsgd.h"
#include "distildp/hashing.h"
#include "distildp/model.h"
#include "distildp/pipeline.h"
#include "distildp/sampler.h"
#include "rdp_oracle.h"
#include "test_util.h"

namespace distildp {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string Fmt(const char* format, double a, double b = 0, double c = 0,
                double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), format, a, b, c, d);
  return buf;
}

double Seconds(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void Progress(const std::string& message) {
  std::fprintf(stderr, "[acceptance] %s\n", message.c_str());
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness.

double ExampleLoss(const ParameterSet& params, const PreparedExample& ex) {
  return NllLoss(Forward(params, InputTokens(ex)).logits, TargetTokens(ex),
                 ContentRowMask(ex));
}

Outcome GradientCorrectness() {
  const auto start = Clock::now();
  const ModelConfig config = testing::TinyConfig();
  const ParameterSet params = InitParams(config, 21);
  if (params.total_count() > 10000) return {false, "model too large"};
  const auto examples = testing::ToyExamples(8, 2, config.max_seq_len);
  const auto grads = PerExampleGradients(params, examples, NextTokenLoss());
  double worst = 0;
  for (size_t k = 0; k < examples.size(); ++k) {
    ParameterSet probe = params;
    const Vector fd = testing::CentralDifferences(
        [&](const Vector& v) {
          probe.values() = v;
          return ExampleLoss(probe, examples[k]);
        },
        params.values(), 1e-4);
    worst = std::max(worst, testing::MaxRelativeError(grads[k], fd, 1e-6));
  }
  const double seconds = Seconds(start);
  return {worst < 1e-4 && seconds < 120,
          Fmt("%.0f params, max relative error %.2e (floor 1e-6), %.1f s",
              static_cast<double>(params.total_count()), worst, seconds)};
}

// ---------------------------------------------------------------------------
// 2. DP-SGD with no noise and no clipping is plain SGD.

// Plain SGD on the mean loss, with the mean formed from per-example
// gradients in index order.
Vector MeanGradient(const ParameterSet& params,
                    std::span<const PreparedExample> data) {
  Vector sum = Vector::Zero(params.total_count());
  for (const Vector& g : PerExampleGradients(params, data, NextTokenLoss())) {
    sum += g;
  }
  return sum / static_cast<double>(data.size());
}

Outcome DpSgdReduction() {
  const ModelConfig config = testing::TinyConfig();
  const ParameterSet init = InitParams(config, 22);
  const auto data = testing::ToyExamples(9, 12, config.max_seq_len);
  DpSgdConfig dp;
  dp.noise_multiplier = 0;
  dp.clip_norm = 1e9;
  dp.expected_batch = static_cast<double>(data.size());
  dp.learning_rate = 0.2;
  ParameterSet private_params = init, plain = init, fused = init;
  Rng rng(1);
  int64_t clipped = 0;
  for (int step = 0; step < 50; ++step) {
    StepStats stats;
    DpSgdStep(&private_params, data, dp, NextTokenLoss(), rng, &stats);
    clipped += stats.clipped;
    plain.values() -= dp.learning_rate * MeanGradient(plain, data);
    fused.values() -=
        dp.learning_rate * BatchGradient(fused, data, NextTokenLoss());
  }
  const double diff =
      (private_params.values() - plain.values()).cwiseAbs().maxCoeff();
  const double fused_diff =
      (private_params.values() - fused.values()).cwiseAbs().maxCoeff();
  return {diff <= 1e-12 && clipped == 0,
          Fmt("50 steps, max coordinate difference %.2e, %.0f clipped "
              "(single-pass batch gradient differs by %.2e from rounding)",
              diff, static_cast<double>(clipped), fused_diff)};
}

// ---------------------------------------------------------------------------
// 4. Accountant.

Outcome Accountant() {
  // (a) Closed form at q = 1.
  double closed_form_err = 0;
  for (double sigma : {0.5, 1.0, 2.0, 4.0}) {
    for (double alpha : DefaultOrders()) {
      closed_form_err = std::max(
          closed_form_err,
          std::abs(RdpAtOrder(1.0, sigma, alpha) - alpha / (2 * sigma * sigma)));
    }
  }
  // (b) Monotonicity lattice.
  const double qs[] = {0.005, 0.02, 0.05, 0.2};
  const double sigmas[] = {0.6, 1.0, 1.5, 3.0};
  const int64_t steps[] = {10, 100, 1000, 10000};
  const double deltas[] = {1e-7, 1e-5, 1e-3, 1e-1};
  int violations = 0;
  for (int a = 0; a < 4; ++a) {
    for (int b = 0; b < 4; ++b) {
      for (int c = 0; c < 4; ++c) {
        for (int i = 0; i + 1 < 4; ++i) {
          violations += ComputeEpsilon(qs[i], sigmas[a], steps[b], deltas[c]) >
                        ComputeEpsilon(qs[i + 1], sigmas[a], steps[b], deltas[c]);
          violations += ComputeEpsilon(qs[a], sigmas[i], steps[b], deltas[c]) <
                        ComputeEpsilon(qs[a], sigmas[i + 1], steps[b], deltas[c]);
          violations += ComputeEpsilon(qs[a], sigmas[b], steps[i], deltas[c]) >
                        ComputeEpsilon(qs[a], sigmas[b], steps[i + 1], deltas[c]);
          violations += ComputeEpsilon(qs[a], sigmas[b], steps[c], deltas[i]) <
                        ComputeEpsilon(qs[a], sigmas[b], steps[c], deltas[i + 1]);
        }
      }
    }
  }
  // (c) Oracle agreement on sampled configurations.
  std::mt19937_64 rng(404);
  std::uniform_real_distribution<double> log_q(std::log(0.002), std::log(0.3));
  std::uniform_real_distribution<double> sigma_dist(0.7, 4.0);
  std::uniform_real_distribution<double> log_t(std::log(20.0), std::log(5000.0));
  std::uniform_real_distribution<double> log_delta(std::log(1e-7), std::log(1e-3));
  double oracle_err = 0;
  for (int i = 0; i < 10; ++i) {
    const double q = std::exp(log_q(rng));
    const double sigma = sigma_dist(rng);
    const auto t = static_cast<int64_t>(std::exp(log_t(rng)));
    const double delta = std::exp(log_delta(rng));
    const double want = oracle::Epsilon(q, sigma, t, delta);
    const double got = ComputeEpsilon(q, sigma, t, delta);
    oracle_err = std::max(oracle_err, std::abs(got - want) / want);
  }
  // (d) Calibration round trip.
  double round_trip_err = 0;
  for (double target : {0.5, 1.0, 2.0, 8.0}) {
    const double sigma = CalibrateSigma({target, 1.0 / 2000}, 0.05, 200);
    const double spent = ComputeEpsilon(0.05, sigma, 200, 1.0 / 2000);
    round_trip_err = std::max(round_trip_err, std::abs(spent - target) / target);
  }
  const bool pass = closed_form_err <= 1e-12 && violations == 0 &&
                    oracle_err <= 0.02 && round_trip_err <= 0.01;
  return {pass,
          Fmt("closed-form err %.1e, %.0f monotonicity violations, oracle err "
              "%.2f%%, round-trip err %.2f%%",
              closed_form_err, violations, 100 * oracle_err,
              100 * round_trip_err)};
}

// ---------------------------------------------------------------------------
// 5. Distillation objective identities.

Matrix RandomLogits(Eigen::Index rows, Eigen::Index cols, uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 2.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

Outcome DistillIdentities() {
  const Matrix teacher = RandomLogits(8, 20, 1);
  const Matrix student = RandomLogits(8, 20, 2);
  const std::vector<int> targets = {1, 4, 19, 0, 7, 7, 3, 11};
  const std::vector<double> mask = {0, 0, 1, 1, 1, 1, 1, 1};
  KdConfig c;
  double worst_ce = 0, worst_hard = 0, worst_kl = 0, worst_total = 0;

  c.lambda = 0;
  for (double t : {0.5, 1.0, 2.0}) {
    c.temperature = t;
    worst_ce = std::max(worst_ce,
                        std::abs(KdLoss(teacher, student, targets, mask, c).total -
                                 NllLoss(student, targets, mask)));
  }
  c.lambda = 1;
  c.temperature = 2;
  const double base = KdLoss(teacher, student, targets, mask, c).total;
  std::vector<int> shuffled = targets;
  for (int& y : shuffled) y = (y + 5) % 20;
  worst_hard = std::abs(KdLoss(teacher, student, shuffled, mask, c).total - base);

  for (double t : {0.5, 1.0, 2.0, 5.0}) {
    c.temperature = t;
    worst_kl = std::max(worst_kl,
                        std::abs(KdLoss(student, student, targets, mask, c).kl));
  }
  const Matrix th = RandomLogits(8, 6, 3), sh = RandomLogits(8, 6, 4);
  for (double lambda : {0.0, 0.4, 1.0}) {
    for (double t : {0.5, 1.0, 2.0, 5.0}) {
      c.lambda = lambda;
      c.temperature = t;
      c.alpha = 0.3;
      const auto out = KdLoss(teacher, student, targets, mask, c, {&th, &sh});
      worst_total = std::max(
          worst_total, std::abs(out.total - ((1 - lambda) * out.ce +
                                             lambda * t * t * out.kl +
                                             0.3 * out.mse)));
    }
  }
  const bool pass = worst_ce <= 1e-12 && worst_hard <= 1e-12 &&
                    worst_kl == 0.0 && worst_total <= 1e-12;
  return {pass, Fmt("lambda=0 vs CE %.1e, hard-target shift %.1e, self-KL "
                    "%.1e, total decomposition %.1e",
                    worst_ce, worst_hard, worst_kl, worst_total)};
}

// ---------------------------------------------------------------------------
// 6. Sampler.

Outcome Sampler() {
  Rng rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 2.0);
  double renorm_err = 0;
  int argmax_failures = 0;
  for (int trial = 0; trial < 500; ++trial) {
    Vector logits(79);
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits(i) = normal(rng);
    SamplerConfig c;
    c.top_k = 1 + static_cast<int>(u(rng) * 79);
    c.top_p = std::max(1e-3, u(rng));
    renorm_err = std::max(renorm_err,
                          std::abs(NextTokenDistribution(logits, c).sum() - 1));
    Eigen::Index argmax;
    logits.maxCoeff(&argmax);
    Vector onehot = Vector::Zero(79);
    onehot(argmax) = 1;
    SamplerConfig greedy_k;
    greedy_k.top_k = 1;
    greedy_k.top_p.reset();
    argmax_failures += NextTokenDistribution(logits, greedy_k) != onehot;
    Vector probs = (logits.array() - logits.maxCoeff()).exp();
    probs /= probs.sum();
    SamplerConfig greedy_p;
    greedy_p.top_k.reset();
    greedy_p.top_p = 0.999 * probs.maxCoeff();
    argmax_failures += NextTokenDistribution(logits, greedy_p) != onehot;
  }

  Vector logits(12);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits(i) = normal(rng);
  SamplerConfig c;
  c.top_k = 8;
  c.top_p = 0.9;
  const Vector p = NextTokenDistribution(logits, c);
  std::vector<int> counts(p.size(), 0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) ++counts[SampleIndex(p, rng)];
  double stat = 0;
  int support = 0, outside = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p(i) == 0) {
      outside += counts[i];
      continue;
    }
    ++support;
    const double e = draws * p(i);
    stat += (counts[i] - e) * (counts[i] - e) / e;
  }
  double p_value = 1;
  if (support > 1) {
    p_value = boost::math::cdf(
        boost::math::complement(boost::math::chi_squared(support - 1), stat));
  }
  const bool pass = renorm_err <= 1e-9 && argmax_failures == 0 &&
                    p_value > 0.01 && outside == 0;
  return {pass, Fmt("renormalization err %.1e, %.0f argmax failures, "
                    "chi-square p = %.3f over %.0f tokens",
                    renorm_err, argmax_failures, p_value, support)};
}

// ---------------------------------------------------------------------------
// Toy-scale experiments shared by criteria 3, 7, 8 and 9.

struct ToyRuns {
  ExperimentConfig config;
  PreparedData data;
  PhaseCache cache;
  std::optional<ExperimentReport> distildp;
  std::optional<ExperimentReport> dpsyn;
  std::optional<ExperimentReport> zero_shot;
  std::optional<ExperimentReport> dpkd;
  std::vector<SweepRow> sweep;
  double distildp_seconds = 0;
};

RunOptions Options(ToyRuns& runs) {
  RunOptions o;
  o.cache = &runs.cache;
  o.pool_size = runs.config.synthetic_count;
  o.verbose = true;
  return o;
}

ExperimentConfig WithMethod(ExperimentConfig c, Method m) {
  c.method = m;
  return c;
}

Outcome ClippingInvariant(ToyRuns& runs) {
  if (!runs.distildp) return {false, "toy run failed"};
  const auto& d = runs.distildp->phase("teacher").details;
  const auto total = d.at("total_examples").get<int64_t>();
  const auto within = d.at("within_bound_examples").get<int64_t>();
  const double max_norm = d.at("max_clipped_norm").get<double>();
  const double clip = d.at("config").at("clip_norm").get<double>();
  return {total > 0 && within == total && max_norm <= clip + 1e-9,
          Fmt("%.0f of %.0f post-clip norms within C, max %.12f (C = %g)",
              static_cast<double>(within), static_cast<double>(total), max_norm,
              clip)};
}

Outcome PrivacyStructure(ToyRuns& runs) {
  if (!runs.distildp || !runs.dpkd) return {false, "toy run failed"};
  const ExperimentReport& r = *runs.distildp;
  const double target = r.budget.epsilon;
  const double teacher = r.phase("teacher").spent_epsilon;
  const double later = r.phase("generation").spent_epsilon +
                       r.phase("student").spent_epsilon;
  const bool same_ledger =
      r.phase("generation").ledger_steps == r.phase("teacher").ledger_steps &&
      r.phase("student").ledger_steps == r.phase("teacher").ledger_steps;
  double worst_dpkd = 0;
  for (const auto& p : runs.dpkd->phases) {
    worst_dpkd = std::max(worst_dpkd, p.spent_epsilon);
  }
  const bool pass = teacher >= 0.99 * target && teacher <= target &&
                    later == 0.0 && same_ledger &&
                    worst_dpkd <= target / 2 + 1e-6;
  return {pass, Fmt("distildp teacher eps %.5f of %.2f, later phases %.1f; "
                    "dpkd max phase eps %.5f",
                    teacher, target, later, worst_dpkd)};
}

Outcome EndToEndOrdering(ToyRuns& runs) {
  if (!runs.distildp || !runs.dpsyn || !runs.zero_shot) {
    return {false, "toy run failed"};
  }
  const double distil = runs.distildp->test_ppl;
  const double syn = runs.dpsyn->test_ppl;
  const double zero = runs.zero_shot->test_ppl;
  const bool pass = distil <= 0.8 * zero && distil <= 1.02 * syn &&
                    runs.distildp_seconds < 1800;
  return {pass, Fmt("test PPL distildp %.4f, dpsyn %.4f, zero-shot %.4f; "
                    "distildp run %.0f s",
                    distil, syn, zero, runs.distildp_seconds)};
}

Outcome SyntheticCountSweep(ToyRuns& runs) {
  if (!runs.distildp || runs.sweep.size() != 3) return {false, "toy run failed"};
  std::string detail = "PPL by N:";
  std::vector<double> ppl;
  for (const auto& row : runs.sweep) {
    if (!row.report) return {false, "N = " + Fmt("%.0f", row.value) + ": " + row.error};
    ppl.push_back(row.report->test_ppl);
    detail += Fmt(" %.0f=%.4f", row.value, row.report->test_ppl);
  }
  ppl.push_back(runs.distildp->test_ppl);
  detail += Fmt(" 20000=%.4f", runs.distildp->test_ppl);
  return {ppl.back() < ppl.front(), detail};
}

void RunToyExperiments(ToyRuns& runs) {
  const LoadedConfig loaded = LoadConfig(DISTILDP_SOURCE_DIR "/configs/toy.ini");
  runs.config = loaded.experiment;
  runs.data = PrepareData(runs.config.corpus, runs.config.seed);
  const RunOptions options = Options(runs);
  auto attempt = [](const char* name, auto&& body) {
    try {
      body();
    } catch (const std::exception& e) {
      Progress(std::string(name) + " failed: " + e.what());
    }
  };
  attempt("distildp", [&] {
    Progress("distildp on the toy corpus");
    const auto start = Clock::now();
    runs.distildp = RunExperiment(WithMethod(runs.config, Method::kDistilDp),
                                  runs.data, options);
    runs.distildp_seconds = Seconds(start);
  });
  attempt("dpsyn", [&] {
    Progress("dpsyn (shares the teacher and pool)");
    runs.dpsyn = RunExperiment(WithMethod(runs.config, Method::kDpSyn),
                               runs.data, options);
  });
  attempt("zero_shot", [&] {
    runs.zero_shot = RunExperiment(WithMethod(runs.config, Method::kZeroShot),
                                   runs.data, options);
  });
  attempt("dpkd", [&] {
    Progress("dpkd");
    runs.dpkd = RunExperiment(WithMethod(runs.config, Method::kDpKd), runs.data,
                              options);
  });
  attempt("sweep", [&] {
    Progress("synthetic-count sweep over 2000, 5000, 10000");
    const std::vector<double> values = {2000, 5000, 10000};
    runs.sweep = AblationSweep(WithMethod(runs.config, Method::kDistilDp),
                               runs.data, SweepAxis::kSyntheticCount, values,
                               options);
  });
}

// ---------------------------------------------------------------------------
// 10. Determinism of the run command.

int Shell(const std::string& command) {
  const int status = std::system(command.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

constexpr char kSmallIni[] = R"([experiment]
seed = 11
[corpus]
toy_size = 300
[teacher]
n_layers = 1
n_heads = 2
d_model = 16
d_ff = 32
[teacher_dp]
epochs = 1
sampling_rate = 0.1
[sampler]
max_new_tokens = 16
count = 40
[student]
n_layers = 1
n_heads = 2
d_model = 16
d_ff = 32
[kd]
epochs = 1
batch_size = 8
[student_dp]
epochs = 1
sampling_rate = 0.1
)";

Outcome RunDeterminism() {
  const fs::path dir = fs::temp_directory_path() / "distildp_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string config = (dir / "small.ini").string();
  WriteFileBytes(config, kSmallIni);
  const std::string cli = DISTILDP_CLI_PATH;
  int mismatches = 0, compared = 0;
  for (const char* method :
       {"distildp", "dpsyn", "dpkd", "dpsgd_student", "zero_shot"}) {
    std::vector<std::map<std::string, std::string>> outputs;
    for (const char* run : {"a", "b"}) {
      const fs::path out = dir / run;
      const std::string prefix = cli + " prepare -c " + config + " -o " +
                                 out.string() + " >/dev/null && " + cli +
                                 " run -q -c " + config + " -o " + out.string() +
                                 " -m " + method + " >/dev/null";
      if (Shell(prefix) != 0) {
        return {false, std::string("run failed for method ") + method};
      }
      std::map<std::string, std::string> files;
      for (const auto& entry : fs::directory_iterator(out / "runs" / method)) {
        const std::string name = entry.path().filename().string();
        if (name == "report.json" || name.ends_with(".ckpt")) {
          files[name] = Sha256File(entry.path().string());
        }
      }
      outputs.push_back(std::move(files));
    }
    compared += static_cast<int>(outputs[0].size());
    if (outputs[0] != outputs[1] || outputs[0].empty()) ++mismatches;
  }
  fs::remove_all(dir);
  return {mismatches == 0,
          Fmt("%.0f report/checkpoint files compared across 5 methods, %.0f "
              "methods differ",
              compared, mismatches)};
}

}  // namespace
}  // namespace distildp

int main() {
  using distildp::Outcome;
  std::vector<std::pair<std::string, std::function<Outcome()>>> criteria;
  distildp::ToyRuns runs;
  bool toy_done = false;
  auto toy = [&](auto check) {
    return [&, check]() {
      if (!toy_done) {
        distildp::RunToyExperiments(runs);
        toy_done = true;
      }
      return check(runs);
    };
  };
  criteria.emplace_back("1 gradient correctness", distildp::GradientCorrectness);
  criteria.emplace_back("2 DP-SGD reduces to SGD", distildp::DpSgdReduction);
  criteria.emplace_back("3 clipping invariant", toy(distildp::ClippingInvariant));
  criteria.emplace_back("4 accountant", distildp::Accountant);
  criteria.emplace_back("5 distillation identities", distildp::DistillIdentities);
  criteria.emplace_back("6 sampler", distildp::Sampler);
  criteria.emplace_back("7 privacy structure", toy(distildp::PrivacyStructure));
  criteria.emplace_back("8 end-to-end ordering", toy(distildp::EndToEndOrdering));
  criteria.emplace_back("9 synthetic-count sweep",
                        toy(distildp::SyntheticCountSweep));
  criteria.emplace_back("10 run determinism", distildp::RunDeterminism);

  int failures = 0;
  std::vector<std::string> lines;
  for (auto& [name, check] : criteria) {
    Outcome outcome;
    try {
      outcome = check();
    } catch (const std::exception& e) {
      outcome = {false, std::string("exception: ") + e.what()};
    }
    failures += !outcome.pass;
    const std::string line = std::string(outcome.pass ? "PASS" : "FAIL") +
                             " criterion " + name + ": " + outcome.detail;
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    lines.push_back(line);
  }
  std::printf("\nSummary\n");
  for (const auto& line : lines) std::printf("%s\n", line.c_str());
  std::printf("%d of %zu criteria passed\n",
              static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
