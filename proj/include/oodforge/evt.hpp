#pragma once

// Two-parameter Weibull maximum likelihood on the upper tail of a sample.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "oodforge/error.hpp"
#include "oodforge/numerics.hpp"

namespace oodforge {

struct WeibullModel {
  double shape = 1.0;  // k
  double scale = 1.0;  // lambda
  double shift = 0.0;  // subtracted from inputs before evaluating

  friend bool operator==(const WeibullModel&, const WeibullModel&) = default;
};

inline double weibull_cdf(const WeibullModel& m, double d) {
  if (!(d > m.shift)) return 0.0;
  return -std::expm1(-std::pow((d - m.shift) / m.scale, m.shape));
}

struct WeibullFit {
  WeibullModel model;
  double residual = 0.0;  // |g(k)| at the returned root
  int iterations = 0;
};

namespace detail {

// Profile score equation of the Weibull MLE in the shape k:
//   g(k) = sum d^k ln d / sum d^k - 1/k - mean(ln d)
// evaluated with weights exp(k ln d - max) to stay finite for large k.
// g'(k) = Var_w(ln d) + 1/k^2 > 0, so the root is unique when it exists.
struct WeibullProfile {
  std::vector<double> log_d;
  double mean_log = 0.0;

  struct Eval {
    double g;
    double dg;
    double log_sum;  // ln sum d^k
  };

  Eval operator()(double k) const {
    double m = -INFINITY;
    for (double l : log_d) m = std::max(m, k * l);
    double s0 = 0.0, s1 = 0.0, s2 = 0.0;
    for (double l : log_d) {
      const double w = std::exp(k * l - m);
      s0 += w;
      s1 += w * l;
      s2 += w * l * l;
    }
    const double a = s1 / s0;
    const double var = std::max(0.0, s2 / s0 - a * a);
    return {a - 1.0 / k - mean_log, var + 1.0 / (k * k), m + std::log(s0)};
  }
};

}  // namespace detail

// MLE of (k, lambda) for strictly positive samples, without any shift.
// Safeguarded Newton on k in [1e-3, 1e3]: a Newton step leaving the current
// bracket is replaced by bisection.
inline WeibullFit fit_weibull_mle(std::span<const double> samples) {
  if (samples.size() < 2) throw ConfigError("fit_weibull_mle: need at least two samples");
  detail::WeibullProfile g;
  g.log_d.reserve(samples.size());
  for (double d : samples) {
    if (!(d > 0.0) || !std::isfinite(d)) {
      throw NumericalError("fit_weibull_mle: samples must be positive and finite");
    }
    g.log_d.push_back(std::log(d));
  }
  const auto [mn, mx] = std::minmax_element(g.log_d.begin(), g.log_d.end());
  if (*mn == *mx) throw NumericalError("fit_weibull_mle: degenerate tail (all values equal)");
  for (double l : g.log_d) g.mean_log += l;
  g.mean_log /= static_cast<double>(g.log_d.size());

  constexpr double kTol = 1e-10;
  double lo = 1e-3, hi = 1e3;
  const auto at_lo = g(lo), at_hi = g(hi);
  if (at_lo.g > 0.0 || at_hi.g < 0.0) {
    throw NumericalError("fit_weibull_mle: no root of the score equation in [1e-3, 1e3]");
  }

  double k = 1.0;
  auto cur = g(k);
  int it = 0;
  for (; it < 500 && std::abs(cur.g) >= kTol; ++it) {
    if (cur.g < 0.0) {
      lo = k;
    } else {
      hi = k;
    }
    double next = k - cur.g / cur.dg;
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (next == k) break;
    k = next;
    cur = g(k);
  }
  if (std::abs(cur.g) >= kTol) {
    throw NumericalError("fit_weibull_mle: shape did not converge (|g| = " +
                         std::to_string(std::abs(cur.g)) + ")");
  }
  const double n = static_cast<double>(samples.size());
  const double scale = std::exp((cur.log_sum - std::log(n)) / k);
  return {{k, scale, 0.0}, std::abs(cur.g), it};
}

// Fits a Weibull model to the `tail` largest values. The tail is shifted so
// its minimum sits at 1e-6 * range above zero:
//   shift = min(tail) - 1e-6 * (max(tail) - min(tail)).
inline WeibullFit fit_weibull_tail_detailed(std::span<const double> distances, std::size_t tail) {
  if (tail < 2) throw ConfigError("fit_weibull_tail: tail size must be >= 2");
  if (distances.size() < tail) {
    throw ConfigError("fit_weibull_tail: " + std::to_string(distances.size()) +
                      " values for tail size " + std::to_string(tail));
  }
  std::vector<double> top(distances.begin(), distances.end());
  std::nth_element(top.begin(), top.begin() + static_cast<std::ptrdiff_t>(tail - 1), top.end(),
                   std::greater<>());
  top.resize(tail);
  std::sort(top.begin(), top.end());
  const double range = top.back() - top.front();
  if (!(range > 0.0)) throw NumericalError("fit_weibull_tail: degenerate tail (all values equal)");
  const double shift = top.front() - 1e-6 * range;
  for (double& d : top) d -= shift;
  WeibullFit fit = fit_weibull_mle(top);
  fit.model.shift = shift;
  return fit;
}

inline WeibullModel fit_weibull_tail(std::span<const double> distances, std::size_t tail) {
  return fit_weibull_tail_detailed(distances, tail).model;
}

}  // namespace oodforge
