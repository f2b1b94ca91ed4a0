#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace epd {

// Error taxonomy. The CLI maps these onto exit codes: DataError -> 2,
// NumericError -> 3.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : NumericError {
  explicit ShapeError(const std::string& msg) : NumericError(msg) {}
};

// Dense row-major tensor of 64-bit floats. Most of the library works with
// rank-2 shapes; vectors are [1, n] rows and scalars are [1, 1].
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::initializer_list<std::size_t> s) : shape(s) {
    data.assign(numel_of(shape), 0.0);
  }
  explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), 0.0);
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::size_t r, std::size_t c) { return Tensor{{r, c}}; }

  static Tensor full(std::size_t r, std::size_t c, double v) {
    Tensor t{{r, c}};
    t.data.assign(r * c, v);
    return t;
  }

  static Tensor scalar(double v) { return full(1, 1, v); }

  static Tensor row(const std::vector<double>& v) {
    Tensor t{{1, v.size()}};
    t.data = v;
    return t;
  }

  static Tensor from_rows(std::size_t r, std::size_t c, std::vector<double> v) {
    if (v.size() != r * c)
      throw ShapeError("from_rows: " + std::to_string(v.size()) +
                       " values for " + std::to_string(r) + "x" + std::to_string(c));
    Tensor t;
    t.shape = {r, c};
    t.data = std::move(v);
    return t;
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? (shape.empty() ? 0 : 1) : shape[1]; }
  bool is_scalar() const { return numel() == 1; }

  double& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

  double item() const {
    if (!is_scalar()) throw ShapeError("item() on non-scalar tensor " + shape_str());
    return data[0];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
  }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() +
                     " vs " + b.shape_str());
}

// Plain (untaped) helpers used by data handling and tests.

inline Tensor tmatmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dims " + a.shape_str() + " vs " + b.shape_str());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Tensor c = Tensor::zeros(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a.data.data() + i * k;
    double* crow = c.data.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b.data.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

inline Tensor ttranspose(const Tensor& a) {
  Tensor t = Tensor::zeros(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

inline double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a.data[i] * b.data[i];
  return s;
}

inline double l2(const Tensor& a) { return std::sqrt(dot(a, a)); }

inline Tensor axpy(double alpha, const Tensor& x, const Tensor& y) {
  require_same_shape(x, y, "axpy");
  Tensor r = y;
  for (std::size_t i = 0; i < r.numel(); ++i) r.data[i] += alpha * x.data[i];
  return r;
}

}  // namespace epd
