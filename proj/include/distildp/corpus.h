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

// Labeled text records, control codes, the character vocabulary, and the
// bundled toy corpus generator.

#ifndef DISTILDP_CORPUS_H_
#define DISTILDP_CORPUS_H_

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace distildp {

// Attribute name -> categorical value.
using Attributes = std::map<std::string, std::string>;

struct AttributeSpec {
  std::string name;   // key used in records, e.g. "type"
  std::string label;  // rendered name, e.g. "Business Type"
  std::vector<std::string> values;
  // Declared marginal distribution over `values`. Optional for loaded
  // corpora; required by the toy generator.
  std::vector<double> marginals;
};

// Ordered attribute list. The order fixes the control-code rendering order.
struct Schema {
  static constexpr int kVersion = 1;
  std::vector<AttributeSpec> attributes;

  const AttributeSpec* Find(std::string_view name) const;
  nlohmann::json ToJson() const;
  static Schema FromJson(const nlohmann::json& j);
  static Schema Load(const std::string& path);
  void Save(const std::string& path) const;
};

// The two-attribute schema understood by the toy grammar.
Schema ToySchema();

struct Record {
  std::string text;
  Attributes attributes;

  bool operator==(const Record&) const = default;
};

// Character-level vocabulary over a closed ASCII subset plus three reserved
// ids (pad, end-of-sequence, control separator).
class Vocabulary {
 public:
  static constexpr int kVersion = 1;
  static constexpr int kPad = 0;
  static constexpr int kEos = 1;
  static constexpr int kSep = 2;

  // Letters, digits, space and basic punctuation.
  static Vocabulary Ascii();
  static Vocabulary FromJson(const nlohmann::json& j);
  static Vocabulary Load(const std::string& path);

  int size() const { return static_cast<int>(symbols_.size()); }
  int pad_id() const { return kPad; }
  int eos_id() const { return kEos; }
  int sep_id() const { return kSep; }

  bool Contains(char c) const;
  // Throws ConfigError on out-of-vocabulary characters.
  std::vector<int> Encode(std::string_view text) const;
  // Reserved ids are rendered as their symbolic names ("<eos>", ...).
  std::string Decode(std::span<const int> ids) const;

  nlohmann::json ToJson() const;
  void Save(const std::string& path) const;
  bool operator==(const Vocabulary&) const = default;

 private:
  std::vector<std::string> symbols_;  // id -> symbol
  std::array<int, 256> char_to_id_{};
};

struct ControlCode {
  Attributes attributes;
  std::string text;          // "Name: value | Name: value"
  std::vector<int> rendered;  // encoded text followed by the separator id

  bool operator==(const ControlCode&) const = default;
};

struct PreparedExample {
  std::vector<int> tokens;
  // Index of the first content token; tokens[boundary - 1] is the separator.
  int boundary = 0;
  Attributes attributes;

  bool operator==(const PreparedExample&) const = default;
};

// Parses one JSON-lines record. `line_number` is 1-based and only used in
// error messages.
Record ParseRecordLine(std::string_view line, const Schema& schema,
                       int64_t line_number);
std::vector<Record> LoadRecords(const std::string& path, const Schema& schema);
void SaveRecords(const std::string& path, std::span<const Record> records);
std::string RecordToJsonLine(const Record& record);

// Deterministic in (seed, n, schema). Attribute values are drawn from the
// schema's declared marginals and the text words depend on them.
std::vector<Record> GenerateToyCorpus(uint64_t seed, int64_t n,
                                      const Schema& schema);

// Words the toy grammar ties to each attribute value:
// attribute name -> value -> keywords.
const std::map<std::string, std::map<std::string, std::vector<std::string>>>&
ToyGrammarKeywords();

std::string RenderControlText(const Attributes& attributes,
                              const Schema& schema);
ControlCode RenderControlCode(const Attributes& attributes,
                              const Schema& schema, const Vocabulary& vocab);
inline ControlCode RenderControlCode(const Record& record, const Schema& schema,
                                     const Vocabulary& vocab) {
  return RenderControlCode(record.attributes, schema, vocab);
}

struct PrepareOptions {
  int max_len = 64;
  bool append_eos = true;
};

// Prepends the rendered control code to each record's text and tokenizes.
// Sequences longer than max_len are truncated to exactly max_len tokens.
std::vector<PreparedExample> PrependAndTokenize(std::span<const Record> records,
                                                const Schema& schema,
                                                const Vocabulary& vocab,
                                                const PrepareOptions& options);

// Uniform sampling with replacement; preserves the categorical distribution
// of `codes` in expectation.
std::vector<ControlCode> SubsampleControlCodes(std::span<const ControlCode> codes,
                                               int64_t n, uint64_t seed);

struct DatasetSplit {
  std::vector<Record> train;
  std::vector<Record> validation;
  std::vector<Record> test;
};

DatasetSplit SplitDataset(std::span<const Record> records,
                          const std::array<double, 3>& fractions,
                          uint64_t seed);

nlohmann::json PreparedToJson(const PreparedExample& example);
PreparedExample PreparedFromJson(const nlohmann::json& j);
void SavePrepared(const std::string& path,
                  std::span<const PreparedExample> examples);
std::vector<PreparedExample> LoadPrepared(const std::string& path);

}  // namespace distildp

#endif  // DISTILDP_CORPUS_H_
