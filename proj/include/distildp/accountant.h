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

// Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

#ifndef DISTILDP_ACCOUNTANT_H_
#define DISTILDP_ACCOUNTANT_H_

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "json.hpp"

namespace distildp {

// RDP value reported when the mechanism offers no privacy (zero noise).
inline constexpr double kNoPrivacy = std::numeric_limits<double>::infinity();

struct PrivacyBudget {
  double epsilon = 2.0;
  double delta = 1e-5;

  // Throws ConfigError unless epsilon > 0 and delta in (0, 1).
  void Validate() const;
  // delta = 1 / dataset_size.
  static double DefaultDelta(int64_t dataset_size);
  bool operator==(const PrivacyBudget&) const = default;
};

// The default order grid.
const std::vector<double>& DefaultOrders();

// Per-step RDP of the sampled Gaussian mechanism at each order. Evaluated in
// log space; exact for q = 1. Returns kNoPrivacy entries when sigma = 0.
std::vector<double> RdpStep(double q, double noise_multiplier,
                            std::span<const double> orders);
double RdpAtOrder(double q, double noise_multiplier, double order);

// Running privacy record for one budget-consuming phase.
class PrivacyLedger {
 public:
  PrivacyLedger(PrivacyBudget target,
                std::vector<double> orders = DefaultOrders());

  const PrivacyBudget& target() const { return target_; }
  const std::vector<double>& orders() const { return orders_; }
  const std::vector<double>& accumulated_rdp() const { return rdp_; }
  int64_t steps_recorded() const { return steps_; }

  // accumulated += n_steps * step_rdp. Throws std::invalid_argument when the
  // grid length differs.
  void Compose(std::span<const double> step_rdp, int64_t n_steps);

  nlohmann::json ToJson() const;
  bool operator==(const PrivacyLedger&) const = default;

 private:
  PrivacyBudget target_;
  std::vector<double> orders_;
  std::vector<double> rdp_;
  int64_t steps_ = 0;
};

struct EpsilonResult {
  double epsilon = 0;
  double order = 0;
};

// Tight RDP -> (eps, delta) conversion at a single order.
double EpsilonFromRdp(double rdp, double order, double delta);
// Classical eps = rdp + log(1/delta) / (order - 1); an upper bound on the
// tight conversion.
double ClassicalEpsilonFromRdp(double rdp, double order, double delta);

// Minimum over orders. Throws std::logic_error on an empty ledger.
EpsilonResult EpsilonAt(const PrivacyLedger& ledger, double delta);
EpsilonResult EpsilonFromRdpCurve(std::span<const double> orders,
                                  std::span<const double> rdp, double delta);

// Epsilon spent after n_steps of the sampled Gaussian mechanism.
double ComputeEpsilon(double q, double noise_multiplier, int64_t n_steps,
                      double delta,
                      std::span<const double> orders = DefaultOrders());

struct CalibrationOptions {
  double sigma_lo = 0.3;
  double sigma_hi = 50.0;
  double tolerance = 1e-3;
  // The result must spend at least this fraction of the target.
  double min_fraction = 0.99;
};

// Bisection for the noise multiplier whose epsilon after n_steps lies in
// [min_fraction * target, target]. Throws ConfigError when unreachable
// within the bracket.
double CalibrateSigma(const PrivacyBudget& target, double q, int64_t n_steps,
                      const CalibrationOptions& options = {});

}  // namespace distildp

#endif  // DISTILDP_ACCOUNTANT_H_
