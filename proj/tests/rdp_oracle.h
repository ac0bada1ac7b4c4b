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

// Reference Renyi divergence of the Poisson-subsampled Gaussian mechanism
// by direct numerical integration. Shares no code with the accountant.
//
//   A(alpha) = E_{z ~ N(0, s^2)} [((1 - q) + q * exp((2z - 1) / (2 s^2)))^alpha]
//   RDP(alpha) = log A(alpha) / (alpha - 1)

#ifndef DISTILDP_TESTS_RDP_ORACLE_H_
#define DISTILDP_TESTS_RDP_ORACLE_H_

#include <algorithm>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>
#include <limits>
#include <vector>

namespace distildp::oracle {

inline double LogAddExp(double a, double b) {
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

inline double LogA(double q, double sigma, double alpha) {
  const double s2 = sigma * sigma;
  const double log_norm = -std::log(sigma * std::sqrt(2 * M_PI));
  auto log_integrand = [&](double z) {
    const double t = (2 * z - 1) / (2 * s2);
    return log_norm - z * z / (2 * s2) +
           alpha * LogAddExp(std::log1p(-q), std::log(q) + t);
  };
  const double lo = -30 * sigma;
  const double hi = alpha + 30 * sigma;
  double peak = -std::numeric_limits<double>::infinity();
  for (double z = lo; z <= hi; z += sigma / 8) {
    peak = std::max(peak, log_integrand(z));
  }
  double total = 0;
  const double width = sigma / 2;
  for (double a = lo; a < hi; a += width) {
    total += boost::math::quadrature::gauss_kronrod<double, 31>::integrate(
        [&](double z) { return std::exp(log_integrand(z) - peak); }, a,
        std::min(a + width, hi), 0, 0);
  }
  return peak + std::log(total);
}

inline double Rdp(double q, double sigma, double alpha) {
  return LogA(q, sigma, alpha) / (alpha - 1);
}

inline const std::vector<double>& Orders() {
  static const std::vector<double> orders = {1.25, 1.5, 1.75, 2,  2.5,
                                             3,    4,   5,    6,  8,
                                             16,   32,  64,   128, 256};
  return orders;
}

// Minimum over orders of the tight conversion
//   eps = T * RDP + log((alpha - 1) / alpha) - (log delta + log alpha) / (alpha - 1).
inline double Epsilon(double q, double sigma, long steps, double delta) {
  double best = std::numeric_limits<double>::infinity();
  for (double alpha : Orders()) {
    const double rdp = steps * Rdp(q, sigma, alpha);
    const double eps = rdp + std::log((alpha - 1) / alpha) -
                       (std::log(delta) + std::log(alpha)) / (alpha - 1);
    best = std::min(best, std::max(0.0, eps));
  }
  return best;
}

// Smallest sigma (to 1e-4) whose epsilon does not exceed the target.
inline double CalibrateSigma(double epsilon, double delta, double q,
                             long steps) {
  double lo = 0.3, hi = 50;
  while (hi - lo > 1e-4) {
    const double mid = 0.5 * (lo + hi);
    if (Epsilon(q, mid, steps, delta) > epsilon) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return hi;
}

}  // namespace distildp::oracle

#endif  // DISTILDP_TESTS_RDP_ORACLE_H_
