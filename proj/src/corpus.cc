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

#include "distildp/corpus.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "distildp/common.h"

namespace distildp {
namespace {

using json = nlohmann::json;

constexpr std::string_view kPunctuation = ".,:;!?'-|()/&";

struct ToyGrammar {
  std::map<std::string, std::map<std::string, std::vector<std::string>>>
      keywords;
  std::vector<std::string> openers;
  std::vector<std::string> verbs;
  std::map<std::string, std::vector<std::string>> tails;  // by stars
};

const ToyGrammar& Grammar() {
  static const ToyGrammar* grammar = [] {
    auto* g = new ToyGrammar;
    g->keywords["type"] = {
        {"cafe", {"coffee", "cake", "tea", "latte"}},
        {"bar", {"beer", "wine", "music", "crowd"}},
        {"shop", {"staff", "prices", "shelves", "deals"}},
        {"hotel", {"room", "bed", "pool", "lobby"}},
    };
    g->keywords["stars"] = {
        {"1", {"awful", "rude", "dirty"}},
        {"2", {"bland", "slow", "meh"}},
        {"3", {"fine", "okay", "decent"}},
        {"4", {"good", "nice", "tasty"}},
        {"5", {"great", "superb", "perfect"}},
    };
    g->openers = {"the", "our", "my"};
    g->verbs = {"was", "felt", "seemed"};
    g->tails = {
        {"1", {". never again.", ". not worth it."}},
        {"2", {". not worth it.", ". could be better."}},
        {"3", {". it was ok.", ". no complaints."}},
        {"4", {". loved it.", "! will return."}},
        {"5", {"! will return.", "! loved it."}},
    };
    return g;
  }();
  return *grammar;
}

template <typename T>
const T& Pick(const std::vector<T>& items, Rng& rng) {
  std::uniform_int_distribution<size_t> dist(0, items.size() - 1);
  return items[dist(rng)];
}

std::string ReadFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void WriteFile(const std::string& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write file: " + path);
  out << contents;
}

}  // namespace

const AttributeSpec* Schema::Find(std::string_view name) const {
  for (const auto& a : attributes) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

json Schema::ToJson() const {
  json attrs = json::array();
  for (const auto& a : attributes) {
    json j = {{"name", a.name}, {"label", a.label}, {"values", a.values}};
    if (!a.marginals.empty()) j["marginals"] = a.marginals;
    attrs.push_back(std::move(j));
  }
  return {{"version", kVersion}, {"attributes", std::move(attrs)}};
}

Schema Schema::FromJson(const json& j) {
  try {
    if (j.at("version").get<int>() != kVersion) {
      throw ConfigError("schema: unsupported version");
    }
    Schema schema;
    for (const auto& a : j.at("attributes")) {
      AttributeSpec spec;
      spec.name = a.at("name").get<std::string>();
      spec.label = a.value("label", spec.name);
      spec.values = a.at("values").get<std::vector<std::string>>();
      if (a.contains("marginals")) {
        spec.marginals = a.at("marginals").get<std::vector<double>>();
      }
      if (spec.values.empty()) {
        throw ConfigError("schema: attribute '" + spec.name + "' has no values");
      }
      if (!spec.marginals.empty() &&
          spec.marginals.size() != spec.values.size()) {
        throw ConfigError("schema: attribute '" + spec.name +
                          "' marginals/values length mismatch");
      }
      if (schema.Find(spec.name) != nullptr) {
        throw ConfigError("schema: duplicate attribute '" + spec.name + "'");
      }
      schema.attributes.push_back(std::move(spec));
    }
    if (schema.attributes.empty()) throw ConfigError("schema: no attributes");
    return schema;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("schema: ") + e.what());
  }
}

Schema Schema::Load(const std::string& path) {
  json j;
  try {
    j = json::parse(ReadFile(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return FromJson(j);
}

void Schema::Save(const std::string& path) const {
  WriteFile(path, ToJson().dump(2) + "\n");
}

Schema ToySchema() {
  Schema schema;
  schema.attributes.push_back({"type",
                               "Type",
                               {"cafe", "bar", "shop", "hotel"},
                               {0.4, 0.3, 0.2, 0.1}});
  schema.attributes.push_back({"stars",
                               "Stars",
                               {"1", "2", "3", "4", "5"},
                               {0.1, 0.15, 0.2, 0.3, 0.25}});
  return schema;
}

Vocabulary Vocabulary::Ascii() {
  Vocabulary v;
  v.symbols_ = {"<pad>", "<eos>", "<sep>", " "};
  for (char c = 'a'; c <= 'z'; ++c) v.symbols_.emplace_back(1, c);
  for (char c = 'A'; c <= 'Z'; ++c) v.symbols_.emplace_back(1, c);
  for (char c = '0'; c <= '9'; ++c) v.symbols_.emplace_back(1, c);
  for (char c : kPunctuation) v.symbols_.emplace_back(1, c);
  return FromJson(v.ToJson());
}

Vocabulary Vocabulary::FromJson(const json& j) {
  Vocabulary v;
  try {
    if (j.at("version").get<int>() != kVersion) {
      throw ConfigError("vocabulary: unsupported version");
    }
    v.symbols_ = j.at("symbols").get<std::vector<std::string>>();
    const auto& reserved = j.at("reserved");
    if (reserved.at("pad").get<int>() != kPad ||
        reserved.at("eos").get<int>() != kEos ||
        reserved.at("sep").get<int>() != kSep) {
      throw ConfigError("vocabulary: unexpected reserved ids");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("vocabulary: ") + e.what());
  }
  if (v.symbols_.size() < 4) throw ConfigError("vocabulary: too few symbols");
  v.char_to_id_.fill(-1);
  for (size_t id = 3; id < v.symbols_.size(); ++id) {
    const std::string& s = v.symbols_[id];
    if (s.size() != 1) {
      throw ConfigError("vocabulary: symbol '" + s + "' is not one character");
    }
    auto c = static_cast<unsigned char>(s[0]);
    if (v.char_to_id_[c] != -1) {
      throw ConfigError("vocabulary: duplicate symbol '" + s + "'");
    }
    v.char_to_id_[c] = static_cast<int>(id);
  }
  return v;
}

Vocabulary Vocabulary::Load(const std::string& path) {
  try {
    return FromJson(json::parse(ReadFile(path)));
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

bool Vocabulary::Contains(char c) const {
  return char_to_id_[static_cast<unsigned char>(c)] >= 0;
}

std::vector<int> Vocabulary::Encode(std::string_view text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (size_t i = 0; i < text.size(); ++i) {
    int id = char_to_id_[static_cast<unsigned char>(text[i])];
    if (id < 0) {
      throw ConfigError("character at offset " + std::to_string(i) +
                        " is outside the vocabulary");
    }
    ids.push_back(id);
  }
  return ids;
}

std::string Vocabulary::Decode(std::span<const int> ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= size()) {
      throw std::out_of_range("token id " + std::to_string(id));
    }
    out += symbols_[id];
  }
  return out;
}

json Vocabulary::ToJson() const {
  return {{"version", kVersion},
          {"symbols", symbols_},
          {"reserved", {{"pad", kPad}, {"eos", kEos}, {"sep", kSep}}}};
}

void Vocabulary::Save(const std::string& path) const {
  WriteFile(path, ToJson().dump(2) + "\n");
}

Record ParseRecordLine(std::string_view line, const Schema& schema,
                       int64_t line_number) {
  const std::string where = "line " + std::to_string(line_number) + ": ";
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ConfigError(where + "invalid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError(where + "expected a JSON object");
  Record record;
  if (!j.contains("text") || !j["text"].is_string()) {
    throw ConfigError(where + "field 'text': expected a string");
  }
  record.text = j["text"].get<std::string>();
  if (record.text.empty()) {
    throw ConfigError(where + "field 'text': must be non-empty");
  }
  if (!j.contains("attributes") || !j["attributes"].is_object()) {
    throw ConfigError(where + "field 'attributes': expected an object");
  }
  for (const auto& [name, value] : j["attributes"].items()) {
    const AttributeSpec* spec = schema.Find(name);
    if (spec == nullptr) {
      throw ConfigError(where + "attribute '" + name + "': not in schema");
    }
    if (!value.is_string()) {
      throw ConfigError(where + "attribute '" + name + "': expected a string");
    }
    auto v = value.get<std::string>();
    if (std::find(spec->values.begin(), spec->values.end(), v) ==
        spec->values.end()) {
      throw ConfigError(where + "attribute '" + name + "': unknown value '" +
                        v + "'");
    }
    record.attributes[name] = std::move(v);
  }
  for (const auto& spec : schema.attributes) {
    if (!record.attributes.contains(spec.name)) {
      throw ConfigError(where + "missing attribute '" + spec.name + "'");
    }
  }
  return record;
}

std::vector<Record> LoadRecords(const std::string& path, const Schema& schema) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open records file: " + path);
  std::vector<Record> records;
  std::string line;
  int64_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    records.push_back(ParseRecordLine(line, schema, line_number));
  }
  return records;
}

std::string RecordToJsonLine(const Record& record) {
  json j = {{"text", record.text}, {"attributes", record.attributes}};
  return j.dump();
}

void SaveRecords(const std::string& path, std::span<const Record> records) {
  std::string out;
  for (const auto& r : records) {
    out += RecordToJsonLine(r);
    out += '\n';
  }
  WriteFile(path, out);
}

const std::map<std::string, std::map<std::string, std::vector<std::string>>>&
ToyGrammarKeywords() {
  return Grammar().keywords;
}

std::vector<Record> GenerateToyCorpus(uint64_t seed, int64_t n,
                                      const Schema& schema) {
  if (n < 1) throw std::invalid_argument("GenerateToyCorpus: n must be >= 1");
  const ToyGrammar& g = Grammar();
  for (const char* name : {"type", "stars"}) {
    const AttributeSpec* spec = schema.Find(name);
    if (spec == nullptr || spec->marginals.empty()) {
      throw ConfigError(std::string("toy grammar needs attribute '") + name +
                        "' with declared marginals");
    }
    for (const auto& v : spec->values) {
      if (!g.keywords.at(name).contains(v)) {
        throw ConfigError(std::string("toy grammar has no words for ") + name +
                          "=" + v);
      }
    }
  }
  Rng rng(DeriveSeed(seed, "toy-corpus"));
  std::vector<std::discrete_distribution<size_t>> draws;
  for (const auto& spec : schema.attributes) {
    if (spec.marginals.empty()) {
      throw ConfigError("toy corpus: attribute '" + spec.name +
                        "' lacks marginals");
    }
    draws.emplace_back(spec.marginals.begin(), spec.marginals.end());
  }

  std::vector<Record> records;
  records.reserve(n);
  for (int64_t i = 0; i < n; ++i) {
    Record r;
    for (size_t a = 0; a < schema.attributes.size(); ++a) {
      const auto& spec = schema.attributes[a];
      r.attributes[spec.name] = spec.values[draws[a](rng)];
    }
    const std::string& type = r.attributes.at("type");
    const std::string& stars = r.attributes.at("stars");
    r.text = Pick(g.openers, rng) + " " +
             Pick(g.keywords.at("type").at(type), rng) + " " +
             Pick(g.verbs, rng) + " " +
             Pick(g.keywords.at("stars").at(stars), rng) +
             Pick(g.tails.at(stars), rng);
    records.push_back(std::move(r));
  }
  return records;
}

std::string RenderControlText(const Attributes& attributes,
                              const Schema& schema) {
  std::string text;
  for (const auto& spec : schema.attributes) {
    auto it = attributes.find(spec.name);
    if (it == attributes.end()) {
      throw ConfigError("control code: missing attribute '" + spec.name + "'");
    }
    if (!text.empty()) text += " | ";
    text += spec.label + ": " + it->second;
  }
  return text;
}

ControlCode RenderControlCode(const Attributes& attributes,
                              const Schema& schema, const Vocabulary& vocab) {
  ControlCode code;
  code.attributes = attributes;
  code.text = RenderControlText(attributes, schema);
  code.rendered = vocab.Encode(code.text);
  code.rendered.push_back(vocab.sep_id());
  return code;
}

std::vector<PreparedExample> PrependAndTokenize(std::span<const Record> records,
                                                const Schema& schema,
                                                const Vocabulary& vocab,
                                                const PrepareOptions& options) {
  std::vector<PreparedExample> out;
  out.reserve(records.size());
  for (size_t i = 0; i < records.size(); ++i) {
    const Record& r = records[i];
    ControlCode code = RenderControlCode(r, schema, vocab);
    if (static_cast<int>(code.rendered.size()) > options.max_len) {
      throw ConfigError("record " + std::to_string(i) + ": control code (" +
                        std::to_string(code.rendered.size()) +
                        " tokens) exceeds max_len " +
                        std::to_string(options.max_len));
    }
    PreparedExample ex;
    ex.boundary = static_cast<int>(code.rendered.size());
    ex.tokens = std::move(code.rendered);
    std::vector<int> content;
    try {
      content = vocab.Encode(r.text);
    } catch (const ConfigError& e) {
      throw ConfigError("record " + std::to_string(i) + ": " + e.what());
    }
    ex.tokens.insert(ex.tokens.end(), content.begin(), content.end());
    if (options.append_eos) ex.tokens.push_back(vocab.eos_id());
    if (static_cast<int>(ex.tokens.size()) > options.max_len) {
      ex.tokens.resize(options.max_len);
    }
    ex.attributes = r.attributes;
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<ControlCode> SubsampleControlCodes(std::span<const ControlCode> codes,
                                               int64_t n, uint64_t seed) {
  if (codes.empty()) {
    throw std::invalid_argument("SubsampleControlCodes: no codes");
  }
  if (n <= 0) throw std::invalid_argument("SubsampleControlCodes: n must be > 0");
  Rng rng(seed);
  std::uniform_int_distribution<size_t> pick(0, codes.size() - 1);
  std::vector<ControlCode> out;
  out.reserve(n);
  for (int64_t i = 0; i < n; ++i) out.push_back(codes[pick(rng)]);
  return out;
}

DatasetSplit SplitDataset(std::span<const Record> records,
                          const std::array<double, 3>& fractions,
                          uint64_t seed) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(total - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1");
  }
  for (double f : fractions) {
    if (f < 0) throw ConfigError("split fractions must be non-negative");
  }
  const auto n = static_cast<int64_t>(records.size());
  const int64_t n_train = std::llround(fractions[0] * n);
  const int64_t n_val = std::llround(fractions[1] * n);
  const int64_t n_test = n - n_train - n_val;
  if (n_train <= 0 || n_val <= 0 || n_test <= 0) {
    throw ConfigError("split of " + std::to_string(n) +
                      " records leaves an empty partition");
  }
  std::vector<size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  DatasetSplit split;
  for (int64_t i = 0; i < n; ++i) {
    const Record& r = records[order[i]];
    if (i < n_train) {
      split.train.push_back(r);
    } else if (i < n_train + n_val) {
      split.validation.push_back(r);
    } else {
      split.test.push_back(r);
    }
  }
  return split;
}

json PreparedToJson(const PreparedExample& example) {
  return {{"tokens", example.tokens},
          {"boundary", example.boundary},
          {"attributes", example.attributes}};
}

PreparedExample PreparedFromJson(const json& j) {
  PreparedExample ex;
  ex.tokens = j.at("tokens").get<std::vector<int>>();
  ex.boundary = j.at("boundary").get<int>();
  ex.attributes = j.at("attributes").get<Attributes>();
  if (ex.boundary <= 0 || ex.boundary > static_cast<int>(ex.tokens.size()) ||
      ex.tokens[ex.boundary - 1] != Vocabulary::kSep) {
    throw ConfigError("prepared example: invalid boundary");
  }
  return ex;
}

void SavePrepared(const std::string& path,
                  std::span<const PreparedExample> examples) {
  std::string out;
  for (const auto& ex : examples) {
    out += PreparedToJson(ex).dump();
    out += '\n';
  }
  WriteFile(path, out);
}

std::vector<PreparedExample> LoadPrepared(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open prepared dataset: " + path);
  std::vector<PreparedExample> out;
  std::string line;
  int64_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    try {
      out.push_back(PreparedFromJson(json::parse(line)));
    } catch (const std::exception& e) {
      throw ConfigError(path + ": line " + std::to_string(line_number) + ": " +
                        e.what());
    }
  }
  return out;
}

}  // namespace distildp
