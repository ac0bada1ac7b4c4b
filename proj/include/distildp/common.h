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

#ifndef DISTILDP_COMMON_H_
#define DISTILDP_COMMON_H_

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace distildp {

// Process exit codes used by the command-line tool.
enum class ExitCode : int {
  kOk = 0,
  kConfig = 2,
  kBudget = 3,
  kNumeric = 4,
};

// Invalid configuration or malformed input files.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The privacy ledger would exceed its target before the schedule completed.
class BudgetExhaustedError : public std::runtime_error {
 public:
  BudgetExhaustedError(const std::string& what, int64_t step)
      : std::runtime_error(what), step_(step) {}
  int64_t step() const { return step_; }

 private:
  int64_t step_;
};

// A loss or gradient became non-finite.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, int64_t step = -1)
      : std::runtime_error(what), step_(step) {}
  int64_t step() const { return step_; }

 private:
  int64_t step_;
};

using Rng = std::mt19937_64;

// SplitMix64 finalizer.
constexpr uint64_t MixBits(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Derives an independent child seed from a parent seed and a phase label
// ("teacher", "generation", "student", "eval", ...).
inline uint64_t DeriveSeed(uint64_t seed, std::string_view label) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return MixBits(seed ^ MixBits(h));
}

// Index-keyed child stream, e.g. one per generated sequence.
inline uint64_t DeriveSeed(uint64_t seed, uint64_t index) {
  return MixBits(MixBits(seed) ^ (index * 0xd6e8feb86659fd93ULL + 1));
}

}  // namespace distildp

#endif  // DISTILDP_COMMON_H_
