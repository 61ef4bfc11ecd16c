#pragma once

// Test-only oracles: central finite differences and random fixtures. Nothing
// here calls into library backward rules.

#include <cmath>
#include <functional>
#include <vector>

#include "vf/numerics.hpp"
#include "vf/rng.hpp"

namespace vf::test {

// Central differences of a scalar function of a flat parameter vector.
inline std::vector<double> central_diff(std::vector<double> x,
                                        const std::function<double(const std::vector<double>&)>& f,
                                        double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

template <typename A, typename B>
double rel_err(const A& a, const B& b, double floor = 1e-10) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = static_cast<double>(a[i]), y = static_cast<double>(b[i]);
    diff += (x - y) * (x - y);
    na += x * x;
    nb += y * y;
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

template <typename T>
Tensor<T> random_tensor(Rng& rng, std::vector<std::size_t> shape, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.normal() * scale);
  return t;
}

template <typename T>
std::vector<double> to_doubles(const Tensor<T>& t) {
  return {t.values().begin(), t.values().end()};
}

template <typename T>
Tensor<T> from_doubles(const std::vector<std::size_t>& shape, const std::vector<double>& xs) {
  return Tensor<T>(shape, std::vector<T>(xs.begin(), xs.end()));
}

// Σ w ⊙ y as a double.
template <typename T>
double weighted_sum(const Tensor<T>& y, const Tensor<double>& w) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<double>(y[i]) * w[i];
  return s;
}

}  // namespace vf::test
