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

#include "distildp/config.h"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <sstream>

#include "distildp/common.h"
#include "distildp/hashing.h"

namespace distildp {
namespace {

namespace pt = boost::property_tree;

const std::set<std::string> kArchKeys = {"n_layers", "n_heads", "d_model",
                                         "d_ff"};
const std::set<std::string> kDpKeys = {"clip_norm", "sampling_rate", "epochs",
                                       "learning_rate", "noise_multiplier"};

class Reader {
 public:
  explicit Reader(const pt::ptree& tree) : tree_(tree) {}

  const std::string* Raw(const std::string& section, const std::string& key) {
    auto s = tree_.find(section);
    if (s == tree_.not_found()) return nullptr;
    auto k = s->second.find(key);
    if (k == s->second.not_found()) return nullptr;
    return &k->second.data();
  }

  void Double(const std::string& section, const std::string& key,
              double* out) {
    const std::string* raw = Raw(section, key);
    if (raw == nullptr) return;
    *out = ParseDouble(section, key, *raw);
  }

  void OptionalDouble(const std::string& section, const std::string& key,
                      std::optional<double>* out) {
    const std::string* raw = Raw(section, key);
    if (raw == nullptr) return;
    if (IsNone(*raw)) {
      out->reset();
    } else {
      *out = ParseDouble(section, key, *raw);
    }
  }

  template <typename Int>
  void Integer(const std::string& section, const std::string& key, Int* out) {
    const std::string* raw = Raw(section, key);
    if (raw == nullptr) return;
    *out = static_cast<Int>(ParseInt(section, key, *raw));
  }

  void OptionalInt(const std::string& section, const std::string& key,
                   std::optional<int>* out) {
    const std::string* raw = Raw(section, key);
    if (raw == nullptr) return;
    if (IsNone(*raw)) {
      out->reset();
    } else {
      *out = static_cast<int>(ParseInt(section, key, *raw));
    }
  }

  void Bool(const std::string& section, const std::string& key, bool* out) {
    const std::string* raw = Raw(section, key);
    if (raw == nullptr) return;
    if (*raw == "true") {
      *out = true;
    } else if (*raw == "false") {
      *out = false;
    } else {
      throw ConfigError(section + "." + key + ": expected true or false, got '" +
                        *raw + "'");
    }
  }

  void String(const std::string& section, const std::string& key,
              std::string* out) {
    const std::string* raw = Raw(section, key);
    if (raw != nullptr) *out = Unquote(*raw);
  }

 private:
  static bool IsNone(const std::string& raw) {
    return raw == "none" || raw == "off";
  }

  static std::string Unquote(const std::string& raw) {
    if (raw.size() >= 2 && raw.front() == '"' && raw.back() == '"') {
      return raw.substr(1, raw.size() - 2);
    }
    return raw;
  }

  static double ParseDouble(const std::string& section, const std::string& key,
                            const std::string& raw) {
    if (raw == "inf") return std::numeric_limits<double>::infinity();
    errno = 0;
    char* end = nullptr;
    const double v = std::strtod(raw.c_str(), &end);
    if (raw.empty() || end != raw.c_str() + raw.size() || errno == ERANGE ||
        std::isnan(v)) {
      throw ConfigError(section + "." + key + ": expected a number, got '" +
                        raw + "'");
    }
    return v;
  }

  static long long ParseInt(const std::string& section, const std::string& key,
                            const std::string& raw) {
    errno = 0;
    char* end = nullptr;
    const long long v = std::strtoll(raw.c_str(), &end, 10);
    if (raw.empty() || end != raw.c_str() + raw.size() || errno == ERANGE) {
      throw ConfigError(section + "." + key + ": expected an integer, got '" +
                        raw + "'");
    }
    return v;
  }

  const pt::ptree& tree_;
};

void ReadArch(Reader& r, const std::string& section, ArchConfig* a) {
  r.Integer(section, "n_layers", &a->n_layers);
  r.Integer(section, "n_heads", &a->n_heads);
  r.Integer(section, "d_model", &a->d_model);
  r.Integer(section, "d_ff", &a->d_ff);
  try {
    a->ToModel(Vocabulary::Ascii().size(), 64);
  } catch (const ConfigError& e) {
    throw ConfigError(section + ": " + e.what());
  }
}

void ReadDp(Reader& r, const std::string& section, DpPhaseConfig* d) {
  r.Double(section, "clip_norm", &d->clip_norm);
  r.Double(section, "sampling_rate", &d->sampling_rate);
  r.Double(section, "epochs", &d->epochs);
  r.Double(section, "learning_rate", &d->learning_rate);
  r.OptionalDouble(section, "noise_multiplier", &d->noise_multiplier);
}

// Range checks that can name the offending key directly.
void CheckRanges(const LoadedConfig& c) {
  const ExperimentConfig& e = c.experiment;
  auto require = [](bool ok, const std::string& field, const std::string& what) {
    if (!ok) throw ConfigError(field + ": " + what);
  };
  require(e.corpus.toy_size > 0, "corpus.toy_size", "must be > 0");
  require(e.corpus.max_len >= 2, "corpus.max_len", "must be >= 2");
  const char* fractions[] = {"corpus.train_fraction",
                             "corpus.validation_fraction",
                             "corpus.test_fraction"};
  for (int i = 0; i < 3; ++i) {
    require(e.corpus.split[i] > 0, fractions[i], "must be > 0");
  }
  for (const auto& [name, dp] :
       {std::pair<std::string, const DpPhaseConfig*>{"teacher_dp", &e.teacher_dp},
        {"student_dp", &e.student_dp}}) {
    require(dp->clip_norm > 0, name + ".clip_norm", "must be > 0");
    require(dp->sampling_rate > 0 && dp->sampling_rate <= 1,
            name + ".sampling_rate", "must be in (0, 1]");
    require(dp->epochs >= 0, name + ".epochs", "must be >= 0");
    require(dp->learning_rate >= 0, name + ".learning_rate", "must be >= 0");
    require(!dp->noise_multiplier || *dp->noise_multiplier >= 0,
            name + ".noise_multiplier", "must be >= 0");
  }
  require(!e.sampler.top_k || *e.sampler.top_k >= 1, "sampler.top_k",
          "must be >= 1 or none");
  require(!e.sampler.top_p || (*e.sampler.top_p > 0 && *e.sampler.top_p <= 1),
          "sampler.top_p", "must be in (0, 1] or none");
  require(e.sampler.max_new_tokens >= 1, "sampler.max_new_tokens",
          "must be >= 1");
  require(e.synthetic_count >= 1, "sampler.count", "must be >= 1");
  require(e.kd.lambda >= 0 && e.kd.lambda <= 1, "kd.lambda", "must be in [0, 1]");
  require(e.kd.temperature > 0, "kd.temperature", "must be > 0");
  require(e.kd.alpha >= 0, "kd.alpha", "must be >= 0");
  require(e.kd.epochs >= 0, "kd.epochs", "must be >= 0");
  require(e.kd.learning_rate >= 0, "kd.learning_rate", "must be >= 0");
  require(e.kd.batch_size >= 1, "kd.batch_size", "must be >= 1");
  require(e.epsilon > 0, "privacy.epsilon", "must be > 0");
  require(e.delta < 1, "privacy.delta", "must be < 1");
  require(!c.output_dir.empty(), "output.dir", "must not be empty");
}

}  // namespace

const std::map<std::string, std::set<std::string>>& ConfigSchema() {
  static const auto* schema = new std::map<std::string, std::set<std::string>>{
      {"experiment", {"method", "seed"}},
      {"corpus",
       {"source", "records_path", "schema_path", "toy_size", "train_fraction",
        "validation_fraction", "test_fraction", "max_len"}},
      {"teacher", kArchKeys},
      {"teacher_dp", kDpKeys},
      {"sampler", {"top_k", "top_p", "max_new_tokens", "stop_at_eos", "count"}},
      {"student", kArchKeys},
      {"kd",
       {"lambda", "temperature", "alpha", "skip_prefix", "epochs",
        "learning_rate", "batch_size"}},
      {"student_dp", kDpKeys},
      {"privacy", {"epsilon", "delta"}},
      {"output", {"dir"}},
  };
  return *schema;
}

LoadedConfig ParseConfig(const std::string& text, const std::string& base_dir) {
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " +
                      e.message());
  }
  const auto& schema = ConfigSchema();
  for (const auto& [section, keys] : tree) {
    auto it = schema.find(section);
    if (it == schema.end()) {
      if (keys.empty()) {
        throw ConfigError(section + ": key outside of any section");
      }
      throw ConfigError(section + ": unknown section");
    }
    for (const auto& [key, value] : keys) {
      if (!it->second.contains(key)) {
        throw ConfigError(section + "." + key + ": unknown key");
      }
    }
  }

  LoadedConfig out;
  out.config_hash = Sha256Hex(text);
  ExperimentConfig& e = out.experiment;
  Reader r(tree);

  std::string method = MethodName(e.method);
  r.String("experiment", "method", &method);
  try {
    e.method = ParseMethod(method);
  } catch (const ConfigError& err) {
    throw ConfigError(std::string("experiment.method: ") + err.what());
  }
  r.Integer("experiment", "seed", &e.seed);

  r.String("corpus", "source", &e.corpus.source);
  if (e.corpus.source != "toy" && e.corpus.source != "file") {
    throw ConfigError("corpus.source: expected toy or file, got '" +
                      e.corpus.source + "'");
  }
  r.String("corpus", "records_path", &e.corpus.records_path);
  r.String("corpus", "schema_path", &e.corpus.schema_path);
  for (std::string* path : {&e.corpus.records_path, &e.corpus.schema_path}) {
    if (!path->empty() && std::filesystem::path(*path).is_relative()) {
      *path = (std::filesystem::path(base_dir) / *path).lexically_normal();
    }
  }
  r.Integer("corpus", "toy_size", &e.corpus.toy_size);
  r.Double("corpus", "train_fraction", &e.corpus.split[0]);
  r.Double("corpus", "validation_fraction", &e.corpus.split[1]);
  r.Double("corpus", "test_fraction", &e.corpus.split[2]);
  r.Integer("corpus", "max_len", &e.corpus.max_len);

  ReadArch(r, "teacher", &e.teacher);
  ReadDp(r, "teacher_dp", &e.teacher_dp);
  r.OptionalInt("sampler", "top_k", &e.sampler.top_k);
  r.OptionalDouble("sampler", "top_p", &e.sampler.top_p);
  r.Integer("sampler", "max_new_tokens", &e.sampler.max_new_tokens);
  r.Bool("sampler", "stop_at_eos", &e.sampler.stop_at_eos);
  r.Integer("sampler", "count", &e.synthetic_count);
  ReadArch(r, "student", &e.student);

  r.Double("kd", "lambda", &e.kd.lambda);
  r.Double("kd", "temperature", &e.kd.temperature);
  r.Double("kd", "alpha", &e.kd.alpha);
  std::string skip = "control_code";
  r.String("kd", "skip_prefix", &skip);
  if (skip == "control_code") {
    e.kd.skip_prefix = SkipPrefix::kControlCode;
  } else if (skip == "none") {
    e.kd.skip_prefix = SkipPrefix::kNone;
  } else {
    throw ConfigError("kd.skip_prefix: expected control_code or none, got '" +
                      skip + "'");
  }
  r.Integer("kd", "epochs", &e.kd.epochs);
  r.Double("kd", "learning_rate", &e.kd.learning_rate);
  r.Integer("kd", "batch_size", &e.kd.batch_size);
  ReadDp(r, "student_dp", &e.student_dp);

  r.Double("privacy", "epsilon", &e.epsilon);
  r.Double("privacy", "delta", &e.delta);
  r.String("output", "dir", &out.output_dir);

  CheckRanges(out);
  e.Validate();
  return out;
}

LoadedConfig LoadConfig(const std::string& path) {
  std::string text;
  try {
    text = ReadFileBytes(path);
  } catch (const std::exception& e) {
    throw ConfigError("cannot read config " + path + ": " + e.what());
  }
  const std::string base =
      std::filesystem::path(path).parent_path().string();
  return ParseConfig(text, base.empty() ? "." : base);
}

}  // namespace distildp
