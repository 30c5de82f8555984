#pragma once

// Helpers shared by the test binaries: random inputs and finite differences.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "oodforge/numerics.hpp"
#include "oodforge/random.hpp"

namespace testing_support {

using oodforge::Matrix;
using oodforge::Rng;
using oodforge::Vector;

inline Vector random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  Vector v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

inline Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Matrix m(r, c);
  for (double& x : m.data()) x = scale * rng.normal();
  return m;
}

inline Vector random_unit(Rng& rng, std::size_t n) {
  return oodforge::l2_normalize(random_vector(rng, n));
}

// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
inline double rel_err(const Vector& a, const Vector& b) {
  double num = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double den = std::sqrt(std::max(na, nb));
  return den == 0.0 ? 0.0 : std::sqrt(num) / den;
}

// Central differences of f at every coordinate of `params` (step h).
inline Vector central_diff(const std::function<double()>& f, std::vector<double*> params,
                           double h = 1e-5) {
  Vector g;
  g.reserve(params.size());
  for (double* p : params) {
    const double orig = *p;
    *p = orig + h;
    const double up = f();
    *p = orig - h;
    const double down = f();
    *p = orig;
    g.push_back((up - down) / (2.0 * h));
  }
  return g;
}

inline std::vector<double*> pointers(Matrix& m) {
  std::vector<double*> out;
  for (double& x : m.data()) out.push_back(&x);
  return out;
}

inline std::vector<double*> pointers(Vector& v) {
  std::vector<double*> out;
  for (double& x : v) out.push_back(&x);
  return out;
}

inline Vector flatten(const Matrix& m) { return Vector(m.data().begin(), m.data().end()); }

}  // namespace testing_support
