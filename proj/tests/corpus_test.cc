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
#include <boost/math/distributions/chi_squared.hpp>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "distildp/common.h"
#include "distildp/hashing.h"
#include "gmock/gmock.h"
#include "gtest/gtest.h"

namespace distildp {
namespace {

using ::testing::ElementsAre;
using ::testing::HasSubstr;

std::string TempPath(const std::string& name) {
  return (std::filesystem::temp_directory_path() /
          ("distildp_corpus_" + name))
      .string();
}

std::string ErrorMessage(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

Schema BusinessSchema() {
  Schema schema;
  schema.attributes.push_back(
      {"type", "Business Type", {"Restaurant", "Hotel"}, {}});
  schema.attributes.push_back({"stars", "Review Stars", {"1.0", "3.0"}, {}});
  return schema;
}

TEST(LoadRecordsTest, KeepsFileOrder) {
  const std::string path = TempPath("three.jsonl");
  WriteFileBytes(path,
                 R"({"text": "a", "attributes": {"type": "bar", "stars": "1"}})"
                 "\n"
                 R"({"text": "b", "attributes": {"type": "cafe", "stars": "2"}})"
                 "\n"
                 R"({"text": "c", "attributes": {"type": "shop", "stars": "5"}})"
                 "\n");
  const std::vector<Record> records = LoadRecords(path, ToySchema());
  ASSERT_EQ(records.size(), 3u);
  EXPECT_EQ(records[0].text, "a");
  EXPECT_EQ(records[1].text, "b");
  EXPECT_EQ(records[2].text, "c");
  EXPECT_EQ(records[2].attributes.at("type"), "shop");
}

TEST(LoadRecordsTest, MissingAttributeNamesAttributeAndLine) {
  const std::string path = TempPath("missing.jsonl");
  WriteFileBytes(path,
                 R"({"text": "a", "attributes": {"type": "bar", "stars": "1"}})"
                 "\n"
                 R"({"text": "b", "attributes": {"type": "cafe"}})"
                 "\n");
  const std::string message =
      ErrorMessage([&] { LoadRecords(path, ToySchema()); });
  EXPECT_THAT(message, HasSubstr("line 2"));
  EXPECT_THAT(message, HasSubstr("'stars'"));
}

TEST(LoadRecordsTest, UnknownValueIsAnError) {
  const std::string message = ErrorMessage([] {
    ParseRecordLine(R"({"text": "a", "attributes": {"type": "zoo", "stars": "1"}})",
                    ToySchema(), 4);
  });
  EXPECT_THAT(message, HasSubstr("line 4"));
  EXPECT_THAT(message, HasSubstr("'type'"));
  EXPECT_THAT(message, HasSubstr("'zoo'"));
}

TEST(LoadRecordsTest, MalformedFieldsNameTheField) {
  EXPECT_THAT(ErrorMessage([] {
                ParseRecordLine(R"({"attributes": {}})", ToySchema(), 1);
              }),
              HasSubstr("'text'"));
  EXPECT_THAT(ErrorMessage([] {
                ParseRecordLine(R"({"text": "x"})", ToySchema(), 1);
              }),
              HasSubstr("'attributes'"));
  EXPECT_THAT(ErrorMessage([] { ParseRecordLine("{oops", ToySchema(), 9); }),
              HasSubstr("line 9"));
}

TEST(LoadRecordsTest, ToyCorpusRoundTripsByteIdentically) {
  const std::vector<Record> corpus = GenerateToyCorpus(11, 2000, ToySchema());
  const std::string first = TempPath("rt1.jsonl");
  const std::string second = TempPath("rt2.jsonl");
  SaveRecords(first, corpus);
  const std::vector<Record> loaded = LoadRecords(first, ToySchema());
  EXPECT_EQ(loaded, corpus);
  SaveRecords(second, loaded);
  EXPECT_EQ(ReadFileBytes(first), ReadFileBytes(second));
}

TEST(ToyCorpusTest, DeterministicForFixedSeed) {
  EXPECT_EQ(GenerateToyCorpus(7, 1, ToySchema()),
            GenerateToyCorpus(7, 1, ToySchema()));
}

TEST(ToyCorpusTest, DifferentSeedsDiffer) {
  EXPECT_NE(GenerateToyCorpus(1, 50, ToySchema()),
            GenerateToyCorpus(2, 50, ToySchema()));
}

TEST(ToyCorpusTest, MarginalsMatchDeclaredDistribution) {
  const Schema schema = ToySchema();
  const std::vector<Record> corpus = GenerateToyCorpus(3, 10000, schema);
  for (const auto& spec : schema.attributes) {
    std::map<std::string, int> counts;
    for (const auto& r : corpus) ++counts[r.attributes.at(spec.name)];
    for (size_t v = 0; v < spec.values.size(); ++v) {
      const double freq = counts[spec.values[v]] / 10000.0;
      EXPECT_NEAR(freq, spec.marginals[v], 0.03)
          << spec.name << "=" << spec.values[v];
    }
  }
}

TEST(ToyCorpusTest, AttributesAreRecoverableFromText) {
  const auto& keywords = ToyGrammarKeywords();
  for (const Record& r : GenerateToyCorpus(5, 500, ToySchema())) {
    for (const auto& [name, by_value] : keywords) {
      const auto& words = by_value.at(r.attributes.at(name));
      const bool found = std::any_of(words.begin(), words.end(), [&](auto& w) {
        return r.text.find(w) != std::string::npos;
      });
      EXPECT_TRUE(found) << name << " in '" << r.text << "'";
    }
  }
}

TEST(ToyCorpusTest, TextsStayInVocabulary) {
  const Vocabulary vocab = Vocabulary::Ascii();
  for (const Record& r : GenerateToyCorpus(6, 300, ToySchema())) {
    EXPECT_FALSE(r.text.empty());
    EXPECT_NO_THROW(vocab.Encode(r.text)) << r.text;
  }
}

TEST(ControlCodeTest, RendersNameValuePairsInSchemaOrder) {
  const Vocabulary vocab = Vocabulary::Ascii();
  const ControlCode code = RenderControlCode(
      Attributes{{"stars", "3.0"}, {"type", "Restaurant"}}, BusinessSchema(),
      vocab);
  EXPECT_EQ(code.text, "Business Type: Restaurant | Review Stars: 3.0");
  std::vector<int> expected = vocab.Encode(code.text);
  expected.push_back(Vocabulary::kSep);
  EXPECT_EQ(code.rendered, expected);
  EXPECT_EQ(std::count(code.rendered.begin(), code.rendered.end(),
                       Vocabulary::kSep),
            1);
}

TEST(ControlCodeTest, Deterministic) {
  const Attributes a{{"type", "bar"}, {"stars", "4"}};
  EXPECT_EQ(RenderControlCode(a, ToySchema(), Vocabulary::Ascii()),
            RenderControlCode(a, ToySchema(), Vocabulary::Ascii()));
}

TEST(ControlCodeTest, SingleAttributeHasNoDelimiter) {
  Schema schema;
  schema.attributes.push_back({"type", "Type", {"bar"}, {}});
  const ControlCode code =
      RenderControlCode(Attributes{{"type", "bar"}}, schema, Vocabulary::Ascii());
  EXPECT_EQ(code.text, "Type: bar");
  EXPECT_EQ(code.text.find('|'), std::string::npos);
}

TEST(ControlCodeTest, MissingAttributeIsAnError) {
  EXPECT_THAT(ErrorMessage([] {
                RenderControlCode(Attributes{{"type", "bar"}}, ToySchema(),
                                  Vocabulary::Ascii());
              }),
              HasSubstr("'stars'"));
}

TEST(VocabularyTest, ReservedIdsAreDistinctAndBijective) {
  const Vocabulary vocab = Vocabulary::Ascii();
  EXPECT_NE(vocab.pad_id(), vocab.eos_id());
  EXPECT_NE(vocab.eos_id(), vocab.sep_id());
  EXPECT_NE(vocab.pad_id(), vocab.sep_id());
  std::set<std::string> seen;
  for (int id = 0; id < vocab.size(); ++id) {
    const int ids[] = {id};
    EXPECT_TRUE(seen.insert(vocab.Decode(ids)).second) << id;
  }
  for (int c = 0; c < 256; ++c) {
    if (!vocab.Contains(static_cast<char>(c))) continue;
    const std::string s(1, static_cast<char>(c));
    EXPECT_EQ(vocab.Decode(vocab.Encode(s)), s);
  }
}

TEST(VocabularyTest, RoundTripOnRandomInVocabularyStrings) {
  const Vocabulary vocab = Vocabulary::Ascii();
  std::vector<char> alphabet;
  for (int c = 0; c < 256; ++c) {
    if (vocab.Contains(static_cast<char>(c))) alphabet.push_back(static_cast<char>(c));
  }
  ASSERT_FALSE(alphabet.empty());
  Rng rng(99);
  std::uniform_int_distribution<size_t> pick(0, alphabet.size() - 1);
  std::uniform_int_distribution<int> length(0, 80);
  for (int trial = 0; trial < 500; ++trial) {
    std::string s(length(rng), ' ');
    for (char& c : s) c = alphabet[pick(rng)];
    EXPECT_EQ(vocab.Decode(vocab.Encode(s)), s);
  }
}

TEST(VocabularyTest, OutOfVocabularyIsAConfigError) {
  EXPECT_THROW(Vocabulary::Ascii().Encode("caf\xc3\xa9"), ConfigError);
}

TEST(VocabularyTest, JsonRoundTrip) {
  const Vocabulary vocab = Vocabulary::Ascii();
  EXPECT_EQ(Vocabulary::FromJson(vocab.ToJson()), vocab);
}

TEST(PrependTest, BoundaryFollowsSeparator) {
  const Vocabulary vocab = Vocabulary::Ascii();
  const auto corpus = GenerateToyCorpus(8, 200, ToySchema());
  for (const auto& ex : PrependAndTokenize(corpus, ToySchema(), vocab, {})) {
    ASSERT_GT(ex.boundary, 0);
    ASSERT_LT(ex.boundary, static_cast<int>(ex.tokens.size()));
    EXPECT_EQ(ex.tokens[ex.boundary - 1], Vocabulary::kSep);
    EXPECT_EQ(std::count(ex.tokens.begin() + ex.boundary, ex.tokens.end(),
                         Vocabulary::kSep),
              0);
    EXPECT_LE(ex.tokens.size(), 64u);
  }
}

TEST(PrependTest, EmptyTextLeavesOnlyTheCode) {
  const Record r{"", {{"type", "bar"}, {"stars", "2"}}};
  PrepareOptions options;
  options.append_eos = false;
  const auto out = PrependAndTokenize(std::span<const Record>(&r, 1),
                                      ToySchema(), Vocabulary::Ascii(), options);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(static_cast<int>(out[0].tokens.size()), out[0].boundary);
}

TEST(PrependTest, LongTextIsTruncatedToMaxLen) {
  const Record r{std::string(500, 'a'), {{"type", "bar"}, {"stars", "2"}}};
  PrepareOptions options;
  options.max_len = 40;
  const auto out = PrependAndTokenize(std::span<const Record>(&r, 1),
                                      ToySchema(), Vocabulary::Ascii(), options);
  EXPECT_EQ(out[0].tokens.size(), 40u);
}

TEST(PrependTest, CodeLongerThanMaxLenIsAnError) {
  const Record r{"hi", {{"type", "bar"}, {"stars", "2"}}};
  PrepareOptions options;
  options.max_len = 5;
  EXPECT_THROW(PrependAndTokenize(std::span<const Record>(&r, 1), ToySchema(),
                                  Vocabulary::Ascii(), options),
               ConfigError);
}

TEST(PrependTest, PreparedJsonRoundTrip) {
  const auto corpus = GenerateToyCorpus(8, 20, ToySchema());
  const auto prepared =
      PrependAndTokenize(corpus, ToySchema(), Vocabulary::Ascii(), {});
  const std::string path = TempPath("prepared.jsonl");
  SavePrepared(path, prepared);
  EXPECT_EQ(LoadPrepared(path), prepared);
}

std::vector<ControlCode> TwoCodes(int first, int second) {
  const Vocabulary vocab = Vocabulary::Ascii();
  std::vector<ControlCode> codes;
  const ControlCode a =
      RenderControlCode(Attributes{{"type", "bar"}, {"stars", "1"}}, ToySchema(), vocab);
  const ControlCode b =
      RenderControlCode(Attributes{{"type", "cafe"}, {"stars", "5"}}, ToySchema(), vocab);
  for (int i = 0; i < first; ++i) codes.push_back(a);
  for (int i = 0; i < second; ++i) codes.push_back(b);
  return codes;
}

TEST(SubsampleTest, SingleCode) {
  const auto codes = TwoCodes(1, 0);
  EXPECT_THAT(SubsampleControlCodes(codes, 1, 3), ElementsAre(codes[0]));
}

TEST(SubsampleTest, PreservesSplit) {
  const auto codes = TwoCodes(70, 30);
  const auto sample = SubsampleControlCodes(codes, 50000, 17);
  const auto first = std::count(sample.begin(), sample.end(), codes[0]);
  EXPECT_NEAR(first / 50000.0, 0.7, 0.02);
}

TEST(SubsampleTest, Deterministic) {
  const auto codes = TwoCodes(3, 4);
  EXPECT_EQ(SubsampleControlCodes(codes, 100, 5),
            SubsampleControlCodes(codes, 100, 5));
}

TEST(SubsampleTest, ZeroIsAnError) {
  const auto codes = TwoCodes(1, 1);
  EXPECT_THROW(SubsampleControlCodes(codes, 0, 1), std::invalid_argument);
}

TEST(SubsampleTest, LongerDrawExtendsShorterOne) {
  const auto codes = TwoCodes(5, 9);
  const auto short_draw = SubsampleControlCodes(codes, 40, 8);
  const auto long_draw = SubsampleControlCodes(codes, 400, 8);
  EXPECT_TRUE(std::equal(short_draw.begin(), short_draw.end(), long_draw.begin()));
}

TEST(SubsampleTest, ChiSquareAgainstTrainingCategories) {
  const Vocabulary vocab = Vocabulary::Ascii();
  const auto corpus = GenerateToyCorpus(21, 2000, ToySchema());
  std::vector<ControlCode> codes;
  std::map<std::string, double> expected;
  for (const auto& r : corpus) {
    codes.push_back(RenderControlCode(r, ToySchema(), vocab));
    expected[codes.back().text] += 1.0 / corpus.size();
  }
  const int n = 50000;
  std::map<std::string, int> observed;
  for (const auto& c : SubsampleControlCodes(codes, n, 77)) ++observed[c.text];
  double stat = 0;
  for (const auto& [text, p] : expected) {
    const double e = p * n;
    stat += (observed[text] - e) * (observed[text] - e) / e;
  }
  boost::math::chi_squared dist(static_cast<double>(expected.size() - 1));
  EXPECT_LT(stat, boost::math::quantile(dist, 0.99));
}

TEST(SplitTest, SizesFollowFractions) {
  const auto corpus = GenerateToyCorpus(1, 10, ToySchema());
  const DatasetSplit split = SplitDataset(corpus, {0.8, 0.1, 0.1}, 4);
  EXPECT_EQ(split.train.size(), 8u);
  EXPECT_EQ(split.validation.size(), 1u);
  EXPECT_EQ(split.test.size(), 1u);
}

TEST(SplitTest, PartitionsTheInput) {
  const auto corpus = GenerateToyCorpus(2, 97, ToySchema());
  const DatasetSplit split = SplitDataset(corpus, {0.6, 0.2, 0.2}, 4);
  std::vector<std::string> all, parts;
  for (const auto& r : corpus) all.push_back(RecordToJsonLine(r));
  for (const auto* part : {&split.train, &split.validation, &split.test}) {
    for (const auto& r : *part) parts.push_back(RecordToJsonLine(r));
  }
  std::sort(all.begin(), all.end());
  std::sort(parts.begin(), parts.end());
  EXPECT_EQ(all, parts);
}

TEST(SplitTest, Deterministic) {
  const auto corpus = GenerateToyCorpus(2, 50, ToySchema());
  const DatasetSplit a = SplitDataset(corpus, {0.6, 0.2, 0.2}, 4);
  const DatasetSplit b = SplitDataset(corpus, {0.6, 0.2, 0.2}, 4);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.validation, b.validation);
  EXPECT_EQ(a.test, b.test);
}

TEST(SplitTest, EmptyPartitionIsAnError) {
  const auto corpus = GenerateToyCorpus(2, 4, ToySchema());
  EXPECT_THROW(SplitDataset(corpus, {0.9, 0.05, 0.05}, 4), ConfigError);
}

TEST(SchemaTest, JsonRoundTrip) {
  const Schema schema = ToySchema();
  const Schema back = Schema::FromJson(schema.ToJson());
  EXPECT_EQ(back.ToJson(), schema.ToJson());
}

}  // namespace
}  // namespace distildp
