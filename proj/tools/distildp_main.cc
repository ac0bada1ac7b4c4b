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

// distildp: prepare data, run experiments and sweeps, and query the privacy
// accountant.
//
//   distildp prepare --config toy.ini
//   distildp run --config toy.ini [--method dpsyn]
//   distildp sweep --config toy.ini --axis lambda --values 0,0.4,1
//   distildp account --q 0.01 --sigma 1.1 --steps 1000 --delta 1e-5
//   distildp generate-toy --n 2000 --seed 7 --out records.jsonl
//
// Exit codes: 0 success, 2 configuration error, 3 privacy budget exhausted,
// 4 numerical divergence.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "distildp/accountant.h"
#include "distildp/common.h"
#include "distildp/config.h"
#include "distildp/corpus.h"
#include "distildp/hashing.h"
#include "distildp/pipeline.h"
#include "json.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace distildp {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

constexpr const char* kToolVersion = "0.1.0";
constexpr const char* kOutputEnv = "DISTILDP_OUTPUT_DIR";

// Collects every file written by a command so the manifest can list it.
class OutputSet {
 public:
  explicit OutputSet(fs::path root) : root_(std::move(root)) {}

  const fs::path& root() const { return root_; }

  void Write(const std::string& name, const std::string& bytes) {
    const fs::path path = root_ / name;
    fs::create_directories(path.parent_path());
    WriteFileBytes(path.string(), bytes);
    Add(name);
  }

  void Add(const std::string& name) {
    files_.push_back(
        {{"path", name}, {"sha256", Sha256File((root_ / name).string())}});
  }

  void WriteManifest(json manifest) {
    manifest["tool_version"] = kToolVersion;
    manifest["outputs"] = files_;
    WriteFileBytes((root_ / "manifest.json").string(), manifest.dump(2) + "\n");
  }

 private:
  fs::path root_;
  json files_ = json::array();
};

std::string OutputDir(const std::string& flag, const LoadedConfig& config) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kOutputEnv); env != nullptr && *env) {
    return env;
  }
  return config.output_dir;
}

void SetThreads(int threads) {
  if (threads < 1) throw ConfigError("--threads must be >= 1");
#ifdef _OPENMP
  omp_set_num_threads(threads);
#endif
}

std::string JsonLines(std::span<const PreparedExample> examples) {
  std::string out;
  for (const auto& ex : examples) {
    out += PreparedToJson(ex).dump();
    out += '\n';
  }
  return out;
}

const char* const kSplitFiles[] = {"train.jsonl", "validation.jsonl",
                                   "test.jsonl"};

int CmdPrepare(const std::string& config_path, const std::string& output_flag) {
  const LoadedConfig config = LoadConfig(config_path);
  const fs::path dir = fs::path(OutputDir(output_flag, config)) / "data";
  const PreparedData data =
      PrepareData(config.experiment.corpus, config.experiment.seed);
  OutputSet out(dir);
  out.Write(kSplitFiles[0], JsonLines(data.train));
  out.Write(kSplitFiles[1], JsonLines(data.validation));
  out.Write(kSplitFiles[2], JsonLines(data.test));
  out.Write("vocab.json", data.vocab.ToJson().dump(2) + "\n");
  out.Write("schema.json", data.schema.ToJson().dump(2) + "\n");
  json inputs = json::object();
  if (config.experiment.corpus.source == "file") {
    inputs[config.experiment.corpus.records_path] =
        Sha256File(config.experiment.corpus.records_path);
    inputs[config.experiment.corpus.schema_path] =
        Sha256File(config.experiment.corpus.schema_path);
  }
  out.WriteManifest({{"command", "prepare"},
                     {"config_hash", config.config_hash},
                     {"corpus", config.experiment.corpus.ToJson()},
                     {"seeds", {{"root", config.experiment.seed}}},
                     {"inputs", inputs},
                     {"sizes",
                      {{"train", data.train.size()},
                       {"validation", data.validation.size()},
                       {"test", data.test.size()}}}});
  std::printf("prepared %zu/%zu/%zu examples in %s\n", data.train.size(),
              data.validation.size(), data.test.size(), dir.c_str());
  return 0;
}

// Reads the prepare step's output and checks it against its manifest.
PreparedData LoadPreparedDir(const fs::path& dir, json* hashes) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) {
    throw ConfigError("no prepared dataset in " + dir.string() +
                      " (run 'distildp prepare' first)");
  }
  const json manifest = json::parse(ReadFileBytes(manifest_path.string()));
  for (const auto& entry : manifest.at("outputs")) {
    const std::string name = entry.at("path").get<std::string>();
    const std::string actual = Sha256File((dir / name).string());
    if (actual != entry.at("sha256").get<std::string>()) {
      throw ConfigError("prepared file " + (dir / name).string() +
                        " does not match its manifest hash");
    }
    (*hashes)["data/" + name] = actual;
  }
  PreparedData data;
  data.vocab = Vocabulary::Load((dir / "vocab.json").string());
  data.schema = Schema::Load((dir / "schema.json").string());
  data.train = LoadPrepared((dir / kSplitFiles[0]).string());
  data.validation = LoadPrepared((dir / kSplitFiles[1]).string());
  data.test = LoadPrepared((dir / kSplitFiles[2]).string());
  return data;
}

json SeedsJson(uint64_t seed) {
  return {{"root", seed},
          {"teacher", DeriveSeed(seed, "teacher")},
          {"generation", DeriveSeed(seed, "generation")},
          {"student", DeriveSeed(seed, "student")},
          {"eval", DeriveSeed(seed, "eval")}};
}

int CmdRun(const std::string& config_path, const std::string& output_flag,
           const std::string& method_flag, bool quiet) {
  LoadedConfig config = LoadConfig(config_path);
  if (!method_flag.empty()) config.experiment.method = ParseMethod(method_flag);
  config.experiment.Validate();
  const fs::path root = OutputDir(output_flag, config);
  json inputs = json::object();
  const PreparedData data = LoadPreparedDir(root / "data", &inputs);

  RunOptions options;
  options.verbose = !quiet;
  const ExperimentReport report =
      RunExperiment(config.experiment, data, options);

  const std::string method = MethodName(config.experiment.method);
  OutputSet out(root / "runs" / method);
  fs::create_directories(out.root());
  if (report.teacher) {
    SaveCheckpoint((out.root() / "teacher.ckpt").string(), *report.teacher);
    out.Add("teacher.ckpt");
  }
  SaveCheckpoint((out.root() / "student.ckpt").string(), *report.student);
  out.Add("student.ckpt");
  if (report.synthetic) {
    SaveSynthetic((out.root() / "synthetic.jsonl").string(),
                  (out.root() / "synthetic_manifest.json").string(),
                  *report.synthetic, data.vocab);
    out.Add("synthetic.jsonl");
    out.Add("synthetic_manifest.json");
  }
  out.Write("report.json", report.ToJson().dump(2) + "\n");
  out.Write("results.csv", CsvHeader() + CsvRow(config.experiment, report));
  out.WriteManifest({{"command", "run"},
                     {"method", method},
                     {"config_hash", config.config_hash},
                     {"seeds", SeedsJson(config.experiment.seed)},
                     {"inputs", inputs}});
  std::printf("%s: test ppl %.4f, spent epsilon %.4f (budget %.4f)\n",
              method.c_str(), report.test_ppl, report.total_spent_epsilon(),
              report.budget.epsilon);
  return 0;
}

std::vector<double> ParseValues(const std::string& text) {
  std::vector<double> values;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    try {
      size_t used = 0;
      values.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--values: cannot parse '" + item + "'");
    }
  }
  if (values.empty()) throw ConfigError("--values: empty list");
  return values;
}

int CmdSweep(const std::string& config_path, const std::string& output_flag,
             const std::string& axis_name, const std::string& values_text,
             bool quiet) {
  const LoadedConfig config = LoadConfig(config_path);
  const SweepAxis axis = ParseSweepAxis(axis_name);
  const std::vector<double> values = ParseValues(values_text);
  const fs::path root = OutputDir(output_flag, config);
  json inputs = json::object();
  const PreparedData data = LoadPreparedDir(root / "data", &inputs);

  RunOptions options;
  options.verbose = !quiet;
  const std::vector<SweepRow> rows =
      AblationSweep(config.experiment, data, axis, values, options);
  const std::string csv = SweepCsv(config.experiment, axis, rows);

  OutputSet out(root / "sweeps" / axis_name);
  out.Write("results.csv", csv);
  json row_reports = json::array();
  for (const auto& row : rows) {
    row_reports.push_back(row.report ? row.report->ToJson()
                                     : json{{"error", row.error}});
  }
  out.Write("reports.json", row_reports.dump(2) + "\n");
  out.WriteManifest({{"command", "sweep"},
                     {"axis", axis_name},
                     {"values", values},
                     {"config_hash", config.config_hash},
                     {"seeds", SeedsJson(config.experiment.seed)},
                     {"inputs", inputs}});
  std::fputs(csv.c_str(), stdout);
  return 0;
}

int CmdAccount(double q, double sigma, int64_t steps, double delta) {
  if (!(q > 0 && q <= 1)) throw ConfigError("--q must be in (0, 1]");
  if (!(sigma > 0)) throw ConfigError("--sigma must be > 0");
  if (steps < 0) throw ConfigError("--steps must be >= 0");
  if (!(delta > 0 && delta < 1)) throw ConfigError("--delta must be in (0, 1)");
  const std::vector<double>& orders = DefaultOrders();
  const std::vector<double> step_rdp = RdpStep(q, sigma, orders);
  std::printf("order,rdp,epsilon\n");
  double best_eps = std::numeric_limits<double>::infinity();
  double best_order = orders.front();
  double best_rdp = 0;
  for (size_t i = 0; i < orders.size(); ++i) {
    const double rdp = step_rdp[i] * static_cast<double>(steps);
    const double eps = steps == 0 ? 0.0 : EpsilonFromRdp(rdp, orders[i], delta);
    std::printf("%g,%.10g,%.10g\n", orders[i], rdp, eps);
    if (eps < best_eps) {
      best_eps = eps;
      best_order = orders[i];
      best_rdp = rdp;
    }
  }
  std::printf("min,%g,%.10g,%.10g\n", best_order, best_rdp, best_eps);
  return 0;
}

int CmdGenerateToy(int64_t n, uint64_t seed, const std::string& out_path,
                   const std::string& schema_path) {
  if (n <= 0) throw ConfigError("--n must be > 0");
  const Schema schema = ToySchema();
  const std::vector<Record> records = GenerateToyCorpus(seed, n, schema);
  SaveRecords(out_path, records);
  if (!schema_path.empty()) schema.Save(schema_path);
  std::printf("wrote %lld records to %s\n", static_cast<long long>(n),
              out_path.c_str());
  return 0;
}

int Main(int argc, char** argv) {
  CLI::App app{"Differentially private distillation through synthetic text"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "Worker threads for per-example work");

  std::string config_path, output_dir, method, axis, values;
  bool quiet = false;

  auto* prepare = app.add_subcommand("prepare", "Build the prepared dataset");
  prepare->add_option("-c,--config", config_path, "Config file")->required();
  prepare->add_option("-o,--output", output_dir, "Output directory");

  auto* run = app.add_subcommand("run", "Run one experiment");
  run->add_option("-c,--config", config_path, "Config file")->required();
  run->add_option("-o,--output", output_dir, "Output directory");
  run->add_option("-m,--method", method, "Override experiment.method");
  run->add_flag("-q,--quiet", quiet, "No progress output");

  auto* sweep = app.add_subcommand("sweep", "Ablation sweep over one axis");
  sweep->add_option("-c,--config", config_path, "Config file")->required();
  sweep->add_option("-o,--output", output_dir, "Output directory");
  sweep->add_option("--axis", axis, "lambda, temperature, synthetic_count or alpha")
      ->required();
  sweep->add_option("--values", values, "Comma-separated values")->required();
  sweep->add_flag("-q,--quiet", quiet, "No progress output");

  double q = 0, sigma = 0, delta = 0;
  int64_t steps = 0;
  auto* account = app.add_subcommand("account", "Print the epsilon table");
  account->add_option("--q", q, "Sampling rate")->required();
  account->add_option("--sigma", sigma, "Noise multiplier")->required();
  account->add_option("--steps", steps, "Number of steps")->required();
  account->add_option("--delta", delta, "Target delta")->required();

  int64_t n = 2000;
  uint64_t seed = 0;
  std::string out_path, schema_out;
  auto* toy = app.add_subcommand("generate-toy", "Write a toy record corpus");
  toy->add_option("--n", n, "Number of records");
  toy->add_option("--seed", seed, "Seed");
  toy->add_option("--out", out_path, "Output JSON-lines path")->required();
  toy->add_option("--schema-out", schema_out, "Also write the schema here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ExitCode::kConfig);
  }

  try {
    SetThreads(threads);
    if (*prepare) return CmdPrepare(config_path, output_dir);
    if (*run) return CmdRun(config_path, output_dir, method, quiet);
    if (*sweep) return CmdSweep(config_path, output_dir, axis, values, quiet);
    if (*account) return CmdAccount(q, sigma, steps, delta);
    if (*toy) return CmdGenerateToy(n, seed, out_path, schema_out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return static_cast<int>(ExitCode::kConfig);
  } catch (const BudgetExhaustedError& e) {
    std::fprintf(stderr, "budget exhausted: %s\n", e.what());
    return static_cast<int>(ExitCode::kBudget);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return static_cast<int>(ExitCode::kNumeric);
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return static_cast<int>(ExitCode::kConfig);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

}  // namespace
}  // namespace distildp

int main(int argc, char** argv) { return distildp::Main(argc, argv); }
