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

// Experiment configuration files: INI sections with key = value pairs,
// checked against a fixed schema. Every error names "section.key".

#ifndef DISTILDP_CONFIG_H_
#define DISTILDP_CONFIG_H_

#include <map>
#include <set>
#include <string>

#include "distildp/pipeline.h"

namespace distildp {

struct LoadedConfig {
  ExperimentConfig experiment;
  std::string output_dir = "out";
  // SHA-256 of the file contents.
  std::string config_hash;
};

// Section -> accepted keys.
const std::map<std::string, std::set<std::string>>& ConfigSchema();

// Relative corpus paths are resolved against `base_dir`.
LoadedConfig ParseConfig(const std::string& text,
                         const std::string& base_dir = ".");
LoadedConfig LoadConfig(const std::string& path);

}  // namespace distildp

#endif  // DISTILDP_CONFIG_H_
