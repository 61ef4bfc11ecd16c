#pragma once

// Dense row-major tensors and the handful of primitives the transformer
// needs. Every forward primitive has a matching *_backward that returns the
// exact vector-Jacobian product; there is no autodiff graph.
//
// Tensor<float> is the production path; Tensor<double> is the verification
// mode used by gradient checks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "vf/error.hpp"

namespace vf {

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(element_count(shape_), T(0)) {}

  Tensor(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (element_count(shape_) != data_.size())
      throw Error(ErrorKind::Dimension,
                  "tensor data length " + std::to_string(data_.size()) +
                      " does not match shape product " +
                      std::to_string(element_count(shape_)));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Leading dimension for matrices, 1 for vectors.
  std::size_t rows() const noexcept { return shape_.size() >= 2 ? shape_[0] : 1; }
  // Trailing dimension.
  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  std::span<T> row(std::size_t i) noexcept { return {data_.data() + i * cols(), cols()}; }
  std::span<const T> row(std::size_t i) const noexcept {
    return {data_.data() + i * cols(), cols()};
  }

  T& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols() + j]; }
  const T& operator()(std::size_t i, std::size_t j) const noexcept {
    return data_[i * cols() + j];
  }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    if (shape_.empty()) return Tensor<U>();
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor&) const = default;

 private:
  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
  }

  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

template <typename T>
bool all_finite(std::span<const T> xs) {
  return std::all_of(xs.begin(), xs.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* what) {
  if (!all_finite(t.values()))
    throw Error(ErrorKind::Numeric, std::string("non-finite value in ") + what);
}

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw Error(ErrorKind::Dimension, msg);
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* what) {
  require(t.rank() == 2, std::string(what) + " must be a matrix");
}

}  // namespace detail

// C = A·B with A m×k and B k×n. Each output element accumulates over k in
// ascending order, starting from zero, so results are bitwise reproducible.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul lhs");
  detail::require_matrix(b, "matmul rhs");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  detail::require(b.rows() == k, "matmul inner dimensions disagree: " + std::to_string(k) +
                                     " vs " + std::to_string(b.rows()));
  Tensor<T> c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c.data() + i * n;
    const T* ai = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = ai[p];
      const T* bp = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_matrix(a, "transpose input");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor<T> t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
  return t;
}

// A·Bᵀ with A m×k and B n×k.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(b, "matmul_nt rhs");
  detail::require(a.cols() == b.cols(), "matmul_nt inner dimensions disagree");
  return matmul(a, transpose(b));
}

// Aᵀ·B with A m×k and B m×n; accumulation runs over m in ascending order.
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul_tn lhs");
  detail::require_matrix(b, "matmul_tn rhs");
  detail::require(a.rows() == b.rows(), "matmul_tn outer dimensions disagree");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor<T> c({k, n});
  for (std::size_t r = 0; r < m; ++r) {
    const T* ar = a.data() + r * k;
    const T* br = b.data() + r * n;
    for (std::size_t i = 0; i < k; ++i) {
      const T ari = ar[i];
      T* ci = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += ari * br[j];
    }
  }
  return c;
}

template <typename T>
struct MatmulGrads {
  Tensor<T> da;
  Tensor<T> db;
};

// dA = dC·Bᵀ, dB = Aᵀ·dC.
template <typename T>
MatmulGrads<T> matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dc) {
  detail::require(dc.rows() == a.rows() && dc.cols() == b.cols(),
                  "matmul_backward upstream shape mismatch");
  return {matmul_nt(dc, b), matmul_tn(a, dc)};
}

// In-place softmax of one row with max subtraction.
template <typename T>
void softmax_inplace(std::span<T> row) {
  if (row.empty()) return;
  const T mx = *std::max_element(row.begin(), row.end());
  T sum = 0;
  for (T& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  const T inv = T(1) / sum;
  for (T& v : row) v *= inv;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  detail::require_matrix(x, "softmax input");
  if (!all_finite(x.values())) throw Error(ErrorKind::Numeric, "softmax input is not finite");
  Tensor<T> y = x;
  for (std::size_t i = 0; i < y.rows(); ++i) softmax_inplace(y.row(i));
  return y;
}

// dx = y ⊙ (dy − ⟨dy, y⟩) per row.
template <typename T>
Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  detail::require(y.shape() == dy.shape(), "softmax_backward shape mismatch");
  Tensor<T> dx(y.shape());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto yr = y.row(i);
    auto gr = dy.row(i);
    T dot = 0;
    for (std::size_t j = 0; j < yr.size(); ++j) dot += gr[j] * yr[j];
    auto out = dx.row(i);
    for (std::size_t j = 0; j < yr.size(); ++j) out[j] = yr[j] * (gr[j] - dot);
  }
  return dx;
}

inline constexpr double kDefaultRmsEps = 1e-5;

// y = gain ⊙ x / sqrt(mean(x²) + eps), applied to every row of x.
template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& gain, T eps = T(kDefaultRmsEps)) {
  const std::size_t d = x.cols();
  detail::require(d > 0 && gain.size() == d, "rmsnorm gain length must equal feature dim");
  if (!(eps > 0)) throw Error(ErrorKind::Degenerate, "rmsnorm eps must be positive");
  Tensor<T> y(x.shape());
  const std::size_t rows = x.size() / d;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * d;
    T ss = 0;
    for (std::size_t c = 0; c < d; ++c) ss += xr[c] * xr[c];
    const T inv = T(1) / std::sqrt(ss / T(d) + eps);
    T* yr = y.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) yr[c] = gain[c] * xr[c] * inv;
  }
  return y;
}

template <typename T>
struct RmsnormGrads {
  Tensor<T> dx;
  Tensor<T> dgain;
};

template <typename T>
RmsnormGrads<T> rmsnorm_backward(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& dy,
                                 T eps = T(kDefaultRmsEps), bool want_dgain = true) {
  const std::size_t d = x.cols();
  detail::require(dy.shape() == x.shape() && gain.size() == d, "rmsnorm_backward shape mismatch");
  RmsnormGrads<T> g{Tensor<T>(x.shape()), want_dgain ? Tensor<T>({d}) : Tensor<T>()};
  const std::size_t rows = x.size() / d;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * d;
    const T* gr = dy.data() + r * d;
    T ss = 0;
    for (std::size_t c = 0; c < d; ++c) ss += xr[c] * xr[c];
    const T inv = T(1) / std::sqrt(ss / T(d) + eps);
    T dot = 0;  // Σ gain·dy·x
    for (std::size_t c = 0; c < d; ++c) dot += gain[c] * gr[c] * xr[c];
    const T coef = dot * inv * inv * inv / T(d);
    T* dxr = g.dx.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) dxr[c] = inv * gain[c] * gr[c] - coef * xr[c];
    if (want_dgain)
      for (std::size_t c = 0; c < d; ++c) g.dgain[c] += gr[c] * xr[c] * inv;
  }
  return g;
}

inline constexpr double kGeluSqrt2OverPi = 0.7978845608;
inline constexpr double kGeluCubic = 0.044715;

// GELU, tanh approximation.
template <typename T>
T gelu(T x) {
  const T k = T(kGeluSqrt2OverPi), c = T(kGeluCubic);
  return T(0.5) * x * (T(1) + std::tanh(k * (x + c * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
  const T k = T(kGeluSqrt2OverPi), c = T(kGeluCubic);
  const T t = std::tanh(k * (x + c * x * x * x));
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * k * (T(1) + T(3) * c * x * x);
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu(x[i]);
  return y;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  detail::require(x.shape() == dy.shape(), "gelu_backward shape mismatch");
  Tensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * gelu_grad(x[i]);
  return dx;
}

// Mean over active rows of −log softmax(logits)[target]. `active[i]` false
// drops row i from both the loss and the normalizer.
template <typename T>
T cross_entropy(const Tensor<T>& logits, std::span<const int> targets,
                const std::vector<bool>& active) {
  detail::require_matrix(logits, "cross_entropy logits");
  const std::size_t m = logits.rows(), v = logits.cols();
  detail::require(targets.size() == m && active.size() == m,
                  "cross_entropy targets/mask length must equal row count");
  T total = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (!active[i]) continue;
    const int t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= v)
      throw Error(ErrorKind::Id, "cross_entropy target out of range");
    auto row = logits.row(i);
    const T mx = *std::max_element(row.begin(), row.end());
    T sum = 0;
    for (T z : row) sum += std::exp(z - mx);
    total += std::log(sum) + mx - row[t];
    ++count;
  }
  if (count == 0) throw Error(ErrorKind::Degenerate, "cross_entropy has no active positions");
  return total / T(count);
}

// (softmax − onehot) / #active on active rows, zero elsewhere.
template <typename T>
Tensor<T> cross_entropy_backward(const Tensor<T>& logits, std::span<const int> targets,
                                 const std::vector<bool>& active) {
  const std::size_t m = logits.rows();
  detail::require(targets.size() == m && active.size() == m,
                  "cross_entropy targets/mask length must equal row count");
  const auto count = static_cast<std::size_t>(std::count(active.begin(), active.end(), true));
  if (count == 0) throw Error(ErrorKind::Degenerate, "cross_entropy has no active positions");
  Tensor<T> g(logits.shape());
  const T scale = T(1) / T(count);
  for (std::size_t i = 0; i < m; ++i) {
    if (!active[i]) continue;
    auto out = g.row(i);
    auto in = logits.row(i);
    std::copy(in.begin(), in.end(), out.begin());
    softmax_inplace(out);
    out[targets[i]] -= T(1);
    for (T& v : out) v *= scale;
  }
  return g;
}

template <typename T>
void add_inplace(Tensor<T>& acc, const Tensor<T>& x) {
  detail::require(acc.shape() == x.shape(), "add_inplace shape mismatch");
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += x[i];
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  T s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
T l2_norm(std::span<const T> a) {
  return std::sqrt(dot(a, a));
}

}  // namespace vf
