#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "lcpr/errors.hpp"

namespace lcpr::nd {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major array. float for the production path, double for the
// gradient-check path.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)) {
    for (int d : shape)
      if (d < 0) throw DataError("tensor: negative dim in " + shape_str(shape));
    data.assign(static_cast<size_t>(numel(shape)), T(0));
  }
  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (static_cast<int64_t>(data.size()) != numel(shape))
      throw DataError("tensor: " + std::to_string(data.size()) + " values for shape " +
                      shape_str(shape));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, T v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(data.size()); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& at(int i) { return data[static_cast<size_t>(i)]; }
  T at(int i) const { return data[static_cast<size_t>(i)]; }
  T& at(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
  T at(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }
  T& at(int i, int j, int k) {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  T at(int i, int j, int k) const {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  T& at(int i, int j, int k, int l) {
    return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }
  T at(int i, int j, int k, int l) const {
    return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw DataError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
  return m;
}

// Circular shift along the last (width) axis: out[..., c] = in[..., (c + k) mod w].
template <typename T>
Tensor<T> shift_columns(const Tensor<T>& x, int k) {
  if (x.rank() < 1) throw DataError("shift_columns: rank-0 tensor");
  int w = x.shape.back();
  if (w == 0) return x;
  int kk = ((k % w) + w) % w;
  Tensor<T> out(x.shape);
  int64_t rows = x.size() / w;
  for (int64_t r = 0; r < rows; ++r) {
    const T* src = x.ptr() + r * w;
    T* dst = out.ptr() + r * w;
    for (int c = 0; c < w; ++c) dst[c] = src[(c + kk) % w];
  }
  return out;
}

}  // namespace lcpr::nd
