#pragma once

// Test-side reference implementations and helpers. These stay independent of
// the library code paths they check: direct quadratic sums, naive loops, and
// central finite differences.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "otnpar/common.hpp"

namespace oracle {

using Mat = Eigen::MatrixXd;

/// Direct O(M^2) evaluation of the bidirectional attention with a shared
/// per-channel decay vector w:
///   out_t = (sum_{i!=t} e^{-(|t-i|-1)/M w + k_i} v_i + e^{u+k_t} v_t) / (...)
inline Mat wkv_shared_decay(const Mat& k, const Mat& v, const Mat& w, const Mat& u) {
  const Eigen::Index m = k.rows();
  Mat out(m, k.cols());
  for (Eigen::Index c = 0; c < k.cols(); ++c) {
    for (Eigen::Index t = 0; t < m; ++t) {
      double num = std::exp(u(0, c) + k(t, c)) * v(t, c);
      double den = std::exp(u(0, c) + k(t, c));
      for (Eigen::Index i = 0; i < m; ++i) {
        if (i == t) continue;
        const double dist = static_cast<double>(std::abs(t - i) - 1) / static_cast<double>(m);
        const double weight = std::exp(-dist * w(0, c) + k(i, c));
        num += weight * v(i, c);
        den += weight;
      }
      out(t, c) = num / den;
    }
  }
  return out;
}

/// Direct O(M^2) evaluation with a per-contribution decay stream:
///   out_t = (sum_{i!=t} e^{-(|t-i|-1)/M decay_i + expo_i} val_i
///            + e^{u+expo_t} val_t) / (...)
inline Mat wkv_token_decay(const Mat& expo, const Mat& val, const Mat& decay, const Mat& u) {
  const Eigen::Index m = expo.rows();
  Mat out(m, expo.cols());
  for (Eigen::Index c = 0; c < expo.cols(); ++c) {
    for (Eigen::Index t = 0; t < m; ++t) {
      double num = std::exp(u(0, c) + expo(t, c)) * val(t, c);
      double den = std::exp(u(0, c) + expo(t, c));
      for (Eigen::Index i = 0; i < m; ++i) {
        if (i == t) continue;
        const double dist = static_cast<double>(std::abs(t - i) - 1) / static_cast<double>(m);
        const double weight = std::exp(-dist * decay(i, c) + expo(i, c));
        num += weight * val(i, c);
        den += weight;
      }
      out(t, c) = num / den;
    }
  }
  return out;
}

inline Mat random_matrix(Eigen::Index rows, Eigen::Index cols, otnpar::Rng& rng,
                         double scale = 1.0) {
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = scale * rng.normal();
  return m;
}

inline double max_rel_error(const Mat& actual, const Mat& expected, double abs_floor = 1e-9) {
  double worst = 0.0;
  for (Eigen::Index r = 0; r < actual.rows(); ++r)
    for (Eigen::Index c = 0; c < actual.cols(); ++c) {
      const double denom = std::max(std::abs(expected(r, c)), abs_floor);
      worst = std::max(worst, std::abs(actual(r, c) - expected(r, c)) / denom);
    }
  return worst;
}

struct GradCheckStats {
  double max_err = 0.0;     // worst |fd - analytic| / max(|fd|, |analytic|, floor-scale)
  std::string worst_param;
  long checked = 0;
};

/// Central finite differences over every entry of `param`; `loss` recomputes
/// the scalar loss from current parameter values. Relative tolerance with an
/// absolute floor, per entry.
inline void check_grad_entries(const std::function<double()>& loss, Mat& param,
                               const Mat& analytic, double step, double rel_tol, double abs_floor,
                               const std::string& name, GradCheckStats& stats) {
  for (Eigen::Index r = 0; r < param.rows(); ++r) {
    for (Eigen::Index c = 0; c < param.cols(); ++c) {
      const double saved = param(r, c);
      param(r, c) = saved + step;
      const double up = loss();
      param(r, c) = saved - step;
      const double down = loss();
      param(r, c) = saved;
      const double fd = (up - down) / (2.0 * step);
      const double g = analytic(r, c);
      const double err = std::abs(fd - g);
      const double scale = std::max(std::max(std::abs(fd), std::abs(g)), abs_floor / rel_tol);
      const double rel = err / scale;
      ++stats.checked;
      if (rel > stats.max_err) {
        stats.max_err = rel;
        stats.worst_param = name + "(" + std::to_string(r) + "," + std::to_string(c) + ")";
      }
    }
  }
}

}  // namespace oracle
