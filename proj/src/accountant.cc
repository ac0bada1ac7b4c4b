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

#include "distildp/accountant.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "distildp/common.h"

namespace distildp {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double LogAdd(double x, double y) {
  if (x == kNegInf) return y;
  if (y == kNegInf) return x;
  const double hi = std::max(x, y);
  return hi + std::log1p(std::exp(std::min(x, y) - hi));
}

// log(exp(x) - exp(y)) for x >= y.
double LogSub(double x, double y) {
  if (y == kNegInf) return x;
  if (x <= y) return kNegInf;
  return x + std::log1p(-std::exp(y - x));
}

double LogErfc(double x) {
  if (x < 25.0) return std::log(std::erfc(x));
  // Asymptotic expansion; erfc underflows past x ~ 26.5.
  const double r = x * x;
  const double series = 1.0 - 1.0 / (2.0 * r) + 3.0 / (4.0 * r * r) -
                        15.0 / (8.0 * r * r * r) +
                        105.0 / (16.0 * r * r * r * r);
  return -r - std::log(x) - 0.5 * std::log(std::numbers::pi) +
         std::log(series);
}

// log A_alpha for integer alpha: a finite binomial sum.
double LogAInt(double q, double sigma, int alpha) {
  double log_a = kNegInf;
  const double log_q = std::log(q);
  const double log_1mq = std::log1p(-q);
  for (int i = 0; i <= alpha; ++i) {
    const double log_binom = std::lgamma(alpha + 1.0) - std::lgamma(i + 1.0) -
                             std::lgamma(alpha - i + 1.0);
    const double s = log_binom + i * log_q + (alpha - i) * log_1mq +
                     (static_cast<double>(i) * i - i) / (2.0 * sigma * sigma);
    log_a = LogAdd(log_a, s);
  }
  return log_a;
}

// log A_alpha for fractional alpha: the two-sided convergent series split at
// z0, the point where the mixture and base densities cross.
double LogAFrac(double q, double sigma, double alpha) {
  double log_a0 = kNegInf;
  double log_a1 = kNegInf;
  const double z0 = sigma * sigma * std::log(1.0 / q - 1.0) + 0.5;
  const double log_q = std::log(q);
  const double log_1mq = std::log1p(-q);
  double log_abs_coef = 0.0;  // log |binom(alpha, 0)|
  double sign = 1.0;
  for (int i = 0; i < 100000; ++i) {
    if (i > 0) {
      const double factor = (alpha - (i - 1)) / i;
      log_abs_coef += std::log(std::abs(factor));
      if (factor < 0) sign = -sign;
    }
    const double j = alpha - i;
    const double log_t0 = log_abs_coef + i * log_q + j * log_1mq;
    const double log_t1 = log_abs_coef + j * log_q + i * log_1mq;
    const double log_e0 =
        std::log(0.5) + LogErfc((i - z0) / (std::numbers::sqrt2 * sigma));
    const double log_e1 =
        std::log(0.5) + LogErfc((z0 - j) / (std::numbers::sqrt2 * sigma));
    const double log_s0 =
        log_t0 + (static_cast<double>(i) * i - i) / (2 * sigma * sigma) +
        log_e0;
    const double log_s1 = log_t1 + (j * j - j) / (2 * sigma * sigma) + log_e1;
    if (sign > 0) {
      log_a0 = LogAdd(log_a0, log_s0);
      log_a1 = LogAdd(log_a1, log_s1);
    } else {
      log_a0 = LogSub(log_a0, log_s0);
      log_a1 = LogSub(log_a1, log_s1);
    }
    if (std::max(log_s0, log_s1) < -30) break;
  }
  return LogAdd(log_a0, log_a1);
}

}  // namespace

void PrivacyBudget::Validate() const {
  if (!(epsilon > 0) || !std::isfinite(epsilon)) {
    throw ConfigError("privacy budget: epsilon must be > 0");
  }
  if (!(delta > 0 && delta < 1)) {
    throw ConfigError("privacy budget: delta must be in (0, 1)");
  }
}

double PrivacyBudget::DefaultDelta(int64_t dataset_size) {
  if (dataset_size < 2) throw ConfigError("dataset too small for delta = 1/N");
  return 1.0 / static_cast<double>(dataset_size);
}

const std::vector<double>& DefaultOrders() {
  static const std::vector<double> orders = {1.25, 1.5, 1.75, 2,  2.5,
                                             3,    4,   5,    6,  8,
                                             16,   32,  64,   128, 256};
  return orders;
}

double RdpAtOrder(double q, double noise_multiplier, double order) {
  if (!(q >= 0 && q <= 1)) throw std::invalid_argument("q must be in [0, 1]");
  if (noise_multiplier < 0) {
    throw std::invalid_argument("noise multiplier must be >= 0");
  }
  if (!(order > 1)) throw std::invalid_argument("RDP orders must be > 1");
  if (q == 0) return 0.0;
  if (noise_multiplier == 0) return kNoPrivacy;
  if (q == 1.0) return order / (2.0 * noise_multiplier * noise_multiplier);
  const double log_a = (order == std::floor(order))
                           ? LogAInt(q, noise_multiplier, static_cast<int>(order))
                           : LogAFrac(q, noise_multiplier, order);
  return std::max(0.0, log_a / (order - 1.0));
}

std::vector<double> RdpStep(double q, double noise_multiplier,
                            std::span<const double> orders) {
  std::vector<double> out;
  out.reserve(orders.size());
  for (double a : orders) out.push_back(RdpAtOrder(q, noise_multiplier, a));
  return out;
}

PrivacyLedger::PrivacyLedger(PrivacyBudget target, std::vector<double> orders)
    : target_(target), orders_(std::move(orders)), rdp_(orders_.size(), 0.0) {
  target_.Validate();
  if (orders_.empty()) throw std::invalid_argument("ledger needs orders");
  for (double a : orders_) {
    if (!(a > 1)) throw std::invalid_argument("RDP orders must be > 1");
  }
}

void PrivacyLedger::Compose(std::span<const double> step_rdp, int64_t n_steps) {
  if (step_rdp.size() != orders_.size()) {
    throw std::invalid_argument("Compose: order grid mismatch");
  }
  if (n_steps < 0) throw std::invalid_argument("Compose: negative step count");
  if (n_steps == 0) return;
  for (size_t i = 0; i < rdp_.size(); ++i) {
    if (step_rdp[i] < 0) throw std::invalid_argument("Compose: negative RDP");
    rdp_[i] += static_cast<double>(n_steps) * step_rdp[i];
  }
  steps_ += n_steps;
}

nlohmann::json PrivacyLedger::ToJson() const {
  nlohmann::json rdp = nlohmann::json::array();
  for (double r : rdp_) {
    rdp.push_back(std::isfinite(r) ? nlohmann::json(r) : nlohmann::json("inf"));
  }
  return {{"target_epsilon", target_.epsilon},
          {"target_delta", target_.delta},
          {"orders", orders_},
          {"accumulated_rdp", std::move(rdp)},
          {"steps_recorded", steps_}};
}

double EpsilonFromRdp(double rdp, double order, double delta) {
  if (rdp < 0) throw std::invalid_argument("negative RDP");
  if (!std::isfinite(rdp)) return kNoPrivacy;
  // The KL bound delta <= sqrt(1 - exp(-rdp)) already gives eps = 0.
  if (delta * delta + std::expm1(-rdp) >= 0) return 0.0;
  if (order <= 1.01) return kNoPrivacy;
  const double eps = rdp + std::log1p(-1.0 / order) -
                     std::log(delta * order) / (order - 1.0);
  return std::max(0.0, eps);
}

double ClassicalEpsilonFromRdp(double rdp, double order, double delta) {
  if (!std::isfinite(rdp)) return kNoPrivacy;
  return rdp + std::log(1.0 / delta) / (order - 1.0);
}

EpsilonResult EpsilonFromRdpCurve(std::span<const double> orders,
                                  std::span<const double> rdp, double delta) {
  if (orders.size() != rdp.size() || orders.empty()) {
    throw std::invalid_argument("EpsilonFromRdpCurve: bad grid");
  }
  EpsilonResult best{kNoPrivacy, orders[0]};
  for (size_t i = 0; i < orders.size(); ++i) {
    const double eps = EpsilonFromRdp(rdp[i], orders[i], delta);
    if (eps < best.epsilon) best = {eps, orders[i]};
  }
  return best;
}

EpsilonResult EpsilonAt(const PrivacyLedger& ledger, double delta) {
  if (ledger.steps_recorded() == 0) {
    throw std::logic_error("EpsilonAt: ledger has no recorded steps");
  }
  if (!(delta > 0 && delta < 1)) {
    throw std::invalid_argument("EpsilonAt: delta must be in (0, 1)");
  }
  return EpsilonFromRdpCurve(ledger.orders(), ledger.accumulated_rdp(), delta);
}

double ComputeEpsilon(double q, double noise_multiplier, int64_t n_steps,
                      double delta, std::span<const double> orders) {
  if (n_steps == 0) return 0.0;
  std::vector<double> rdp = RdpStep(q, noise_multiplier, orders);
  for (double& r : rdp) r *= static_cast<double>(n_steps);
  return EpsilonFromRdpCurve(orders, rdp, delta).epsilon;
}

double CalibrateSigma(const PrivacyBudget& target, double q, int64_t n_steps,
                      const CalibrationOptions& options) {
  target.Validate();
  if (!(q > 0 && q <= 1)) throw ConfigError("calibration: q must be in (0, 1]");
  if (n_steps <= 0) throw ConfigError("calibration: n_steps must be > 0");
  auto eps = [&](double sigma) {
    return ComputeEpsilon(q, sigma, n_steps, target.delta);
  };
  double lo = options.sigma_lo;
  double hi = options.sigma_hi;
  const double floor = options.min_fraction * target.epsilon;
  if (eps(hi) > target.epsilon) {
    throw ConfigError("calibration: epsilon " + std::to_string(target.epsilon) +
                      " unreachable even at sigma " + std::to_string(hi));
  }
  if (eps(lo) <= target.epsilon) {
    throw ConfigError("calibration: epsilon " + std::to_string(target.epsilon) +
                      " is already met at sigma " + std::to_string(lo) +
                      "; lower the bracket or the budget");
  }
  // Invariant: eps(lo) > target >= eps(hi).
  for (int iter = 0; iter < 200; ++iter) {
    if (hi - lo <= options.tolerance && eps(hi) >= floor) break;
    const double mid = 0.5 * (lo + hi);
    if (eps(mid) > target.epsilon) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  if (eps(hi) < floor) {
    throw ConfigError("calibration: could not land within the target window");
  }
  return hi;
}

}  // namespace distildp
