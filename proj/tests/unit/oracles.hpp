// SPDX-License-Identifier: Apache-2.0
//
// Independent reference implementations shared by unit and acceptance tests.
// None of these call into the library's loss or sampling code.

#pragma once

#include <array>
#include <cmath>
#include <vector>

namespace ntf3d::testing {

// Mean over rows i of -log(exp(s_ii) / sum_j exp(s_ij)) with s = a c^T / tau,
// computed with plain loops and long double accumulation.
inline double brute_force_nce(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& c,
                              double tau) {
  long double total = 0.0L;
  for (size_t i = 0; i < a.size(); ++i) {
    std::vector<long double> s(c.size());
    for (size_t j = 0; j < c.size(); ++j) {
      long double d = 0.0L;
      for (size_t k = 0; k < a[i].size(); ++k) d += static_cast<long double>(a[i][k]) * c[j][k];
      s[j] = d / tau;
    }
    long double denom = 0.0L;
    for (auto v : s) denom += std::exp(v);
    total += -(s[i] - std::log(denom));
  }
  return static_cast<double>(total / static_cast<long double>(a.size()));
}

// g(x) = -log(1 + e^x) evaluated with mpmath at 50 significant digits.
struct GReference {
  double x;
  double g;
};
inline const std::array<GReference, 11>& g_references() {
  static const std::array<GReference, 11> refs{{
      {-800.0, 0.0},
      {-40.0, -4.248354255291589e-18},
      {-10.0, -4.539889921686465e-05},
      {-1.0, -0.3132616875182228},
      {-1e-08, -0.6931471755599453},
      {0.0, -0.6931471805599453},
      {1e-08, -0.6931471855599454},
      {1.0, -1.3132616875182228},
      {10.0, -10.000045398899218},
      {40.0, -40.0},
      {800.0, -800.0},
  }};
  return refs;
}

// Upper tail of the chi-square distribution with one degree of freedom.
inline double chi_square_1dof_pvalue(double stat) { return std::erfc(std::sqrt(stat / 2.0)); }

}  // namespace ntf3d::testing
