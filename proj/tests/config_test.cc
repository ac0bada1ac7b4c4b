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

#include <gmock/gmock.h>
#include <gtest/gtest.h>

#include <string>

#include "distildp/common.h"

namespace distildp {
namespace {

using ::testing::HasSubstr;

std::string ErrorOf(const std::string& text) {
  try {
    ParseConfig(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

TEST(ConfigTest, ShippedToyConfigLoads) {
  const LoadedConfig c = LoadConfig(DISTILDP_SOURCE_DIR "/configs/toy.ini");
  const ExperimentConfig& e = c.experiment;
  EXPECT_EQ(e.method, Method::kDistilDp);
  EXPECT_EQ(e.seed, 1234u);
  EXPECT_EQ(e.corpus.toy_size, 2400);
  EXPECT_EQ(e.teacher.n_layers, 4);
  EXPECT_EQ(e.teacher.d_model, 48);
  EXPECT_EQ(e.student.d_model, 32);
  EXPECT_EQ(e.synthetic_count, 20000);
  EXPECT_DOUBLE_EQ(e.kd.lambda, 0.4);
  EXPECT_EQ(e.kd.skip_prefix, SkipPrefix::kControlCode);
  EXPECT_DOUBLE_EQ(e.epsilon, 2.0);
  EXPECT_EQ(e.delta, 0.0);
  EXPECT_FALSE(e.teacher_dp.noise_multiplier.has_value());
  EXPECT_EQ(c.output_dir, "out/toy");
  EXPECT_EQ(c.config_hash.size(), 64u);
}

TEST(ConfigTest, EmptyTextGivesDefaults) {
  const LoadedConfig c = ParseConfig("");
  EXPECT_EQ(c.experiment.ToJson(), ExperimentConfig{}.ToJson());
}

TEST(ConfigTest, HashTracksContents) {
  EXPECT_EQ(ParseConfig("[kd]\nlambda = 0.5\n").config_hash,
            ParseConfig("[kd]\nlambda = 0.5\n").config_hash);
  EXPECT_NE(ParseConfig("[kd]\nlambda = 0.5\n").config_hash,
            ParseConfig("[kd]\nlambda = 0.6\n").config_hash);
}

TEST(ConfigTest, UnknownKeyIsNamed) {
  EXPECT_THAT(ErrorOf("[kd]\nlamda = 0.5\n"), HasSubstr("kd.lamda"));
}

TEST(ConfigTest, UnknownSectionIsNamed) {
  EXPECT_THAT(ErrorOf("[teachr]\nn_layers = 2\n"), HasSubstr("teachr"));
}

TEST(ConfigTest, MalformedNumberIsNamed) {
  EXPECT_THAT(ErrorOf("[privacy]\nepsilon = two\n"),
              HasSubstr("privacy.epsilon"));
  EXPECT_THAT(ErrorOf("[student]\nn_layers = 2.5\n"),
              HasSubstr("student.n_layers"));
}

TEST(ConfigTest, OutOfRangeValueIsNamed) {
  EXPECT_THAT(ErrorOf("[kd]\nlambda = 1.5\n"), HasSubstr("kd.lambda"));
  EXPECT_THAT(ErrorOf("[teacher_dp]\nsampling_rate = 0\n"),
              HasSubstr("teacher_dp.sampling_rate"));
  EXPECT_THAT(ErrorOf("[sampler]\ntop_p = 1.2\n"), HasSubstr("sampler.top_p"));
  EXPECT_THAT(ErrorOf("[privacy]\nepsilon = 0\n"),
              HasSubstr("privacy.epsilon"));
}

TEST(ConfigTest, BadEnumsAreNamed) {
  EXPECT_THAT(ErrorOf("[experiment]\nmethod = magic\n"),
              HasSubstr("experiment.method"));
  EXPECT_THAT(ErrorOf("[kd]\nskip_prefix = half\n"),
              HasSubstr("kd.skip_prefix"));
  EXPECT_THAT(ErrorOf("[sampler]\nstop_at_eos = yes\n"),
              HasSubstr("sampler.stop_at_eos"));
}

TEST(ConfigTest, NoneDisablesOptionalValues) {
  const LoadedConfig c = ParseConfig(
      "[sampler]\ntop_k = none\ntop_p = off\n[teacher_dp]\n"
      "noise_multiplier = 1.25\n");
  EXPECT_FALSE(c.experiment.sampler.top_k.has_value());
  EXPECT_FALSE(c.experiment.sampler.top_p.has_value());
  EXPECT_EQ(c.experiment.teacher_dp.noise_multiplier, 1.25);
}

TEST(ConfigTest, RelativeCorpusPathsFollowConfigDirectory) {
  const LoadedConfig c = ParseConfig(
      "[corpus]\nsource = file\nrecords_path = data/r.jsonl\n"
      "schema_path = /abs/schema.json\n",
      "/etc/exp");
  EXPECT_EQ(c.experiment.corpus.records_path, "/etc/exp/data/r.jsonl");
  EXPECT_EQ(c.experiment.corpus.schema_path, "/abs/schema.json");
}

TEST(ConfigTest, FileSourceNeedsPaths) {
  EXPECT_THAT(ErrorOf("[corpus]\nsource = file\n"), HasSubstr("corpus"));
}

TEST(ConfigTest, MismatchedHiddenWidthsRejected) {
  EXPECT_THAT(ErrorOf("[kd]\nalpha = 0.5\n"), HasSubstr("d_model"));
}

TEST(ConfigTest, MissingFileIsConfigError) {
  EXPECT_THROW(LoadConfig("/nonexistent/exp.ini"), ConfigError);
}

TEST(ConfigTest, SchemaListsEverySection) {
  for (const char* s : {"experiment", "corpus", "teacher", "teacher_dp",
                        "sampler", "student", "kd", "student_dp", "privacy",
                        "output"}) {
    EXPECT_TRUE(ConfigSchema().contains(s)) << s;
  }
}

}  // namespace
}  // namespace distildp
