#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "lcpr/tape.hpp"

namespace lcpr::nd {

enum class PadMode {
  kCircularWidth,  // circular along width, zero along height
  kZeroBoth,
};

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Val add(Tape<T>& t, Val a, Val b) {
  const Tensor<T>&x = t.val(a), &y = t.val(b);
  if (!x.same_shape(y))
    throw DataError("add: " + shape_str(x.shape) + " vs " + shape_str(y.shape));
  Tensor<T> out = x;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += y.data[i];
  return t.push(std::move(out), {a.id, b.id}, [a, b](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(a.id, g);
    tp.accumulate(b.id, g);
  });
}

template <typename T>
Val sub(Tape<T>& t, Val a, Val b) {
  const Tensor<T>&x = t.val(a), &y = t.val(b);
  if (!x.same_shape(y))
    throw DataError("sub: " + shape_str(x.shape) + " vs " + shape_str(y.shape));
  Tensor<T> out = x;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= y.data[i];
  return t.push(std::move(out), {a.id, b.id}, [a, b](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(a.id, g);
    Tensor<T> gn = g;
    for (auto& v : gn.data) v = -v;
    tp.accumulate(b.id, gn);
  });
}

template <typename T>
Val mul(Tape<T>& t, Val a, Val b) {
  const Tensor<T>&x = t.val(a), &y = t.val(b);
  if (!x.same_shape(y))
    throw DataError("mul: " + shape_str(x.shape) + " vs " + shape_str(y.shape));
  Tensor<T> out = x;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= y.data[i];
  return t.push(std::move(out), {a.id, b.id}, [a, b](Tape<T>& tp, const Tensor<T>& g) {
    const Tensor<T>&xv = tp.val(a), &yv = tp.val(b);
    Tensor<T> ga = g, gb = g;
    for (size_t i = 0; i < g.data.size(); ++i) {
      ga.data[i] *= yv.data[i];
      gb.data[i] *= xv.data[i];
    }
    tp.accumulate(a.id, ga);
    tp.accumulate(b.id, gb);
  });
}

template <typename T>
Val scale(Tape<T>& t, Val a, double s) {
  Tensor<T> out = t.val(a);
  for (auto& v : out.data) v = static_cast<T>(v * s);
  return t.push(std::move(out), {a.id}, [a, s](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T> ga = g;
    for (auto& v : ga.data) v = static_cast<T>(v * s);
    tp.accumulate(a.id, ga);
  });
}

template <typename T>
Val add_scalar(Tape<T>& t, Val a, double c) {
  Tensor<T> out = t.val(a);
  for (auto& v : out.data) v = static_cast<T>(v + c);
  return t.push(std::move(out), {a.id},
                [a](Tape<T>& tp, const Tensor<T>& g) { tp.accumulate(a.id, g); });
}

template <typename T>
Val relu(Tape<T>& t, Val a) {
  Tensor<T> out = t.val(a);
  for (auto& v : out.data) v = v > T(0) ? v : T(0);
  return t.push(std::move(out), {a.id}, [a](Tape<T>& tp, const Tensor<T>& g) {
    const Tensor<T>& x = tp.val(a);
    Tensor<T> ga = g;
    for (size_t i = 0; i < g.data.size(); ++i)
      if (x.data[i] <= T(0)) ga.data[i] = T(0);
    tp.accumulate(a.id, ga);
  });
}

template <typename T>
Val sigmoid(Tape<T>& t, Val a) {
  Tensor<T> out = t.val(a);
  for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
  return t.push(std::move(out), {a.id}, [a](Tape<T>& tp, const Tensor<T>& g) {
    const Tensor<T>& x = tp.val(a);
    Tensor<T> ga = g;
    for (size_t i = 0; i < g.data.size(); ++i) {
      T y = T(1) / (T(1) + std::exp(-x.data[i]));
      ga.data[i] *= y * (T(1) - y);
    }
    tp.accumulate(a.id, ga);
  });
}

template <typename T>
Val sqrt_op(Tape<T>& t, Val a) {
  Tensor<T> out = t.val(a);
  for (auto& v : out.data) {
    if (v < T(0)) throw NumericError("sqrt: negative input");
    v = std::sqrt(v);
  }
  Tensor<T> saved = out;
  return t.push(std::move(out), {a.id}, [a, saved](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T> ga = g;
    for (size_t i = 0; i < g.data.size(); ++i)
      ga.data[i] = g.data[i] / (T(2) * std::max(saved.data[i], T(1e-20)));
    tp.accumulate(a.id, ga);
  });
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

template <typename T>
Val reshape(Tape<T>& t, Val a, Shape s) {
  const Tensor<T>& x = t.val(a);
  if (numel(s) != x.size())
    throw DataError("reshape: " + shape_str(x.shape) + " -> " + shape_str(s));
  Tensor<T> out(std::move(s), x.data);
  Shape orig = x.shape;
  return t.push(std::move(out), {a.id}, [a, orig](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(a.id, Tensor<T>(orig, g.data));
  });
}

namespace detail {
template <typename T>
Tensor<T> permute_data(const Tensor<T>& x, const std::vector<int>& axes) {
  int r = x.rank();
  Shape out_shape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = x.shape[static_cast<size_t>(axes[static_cast<size_t>(i)])];
  Tensor<T> out(out_shape);
  std::vector<int64_t> in_strides(static_cast<size_t>(r), 1), out_in_strides(static_cast<size_t>(r));
  for (int i = r - 2; i >= 0; --i)
    in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i) + 1] * x.shape[static_cast<size_t>(i) + 1];
  for (int i = 0; i < r; ++i) out_in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(axes[static_cast<size_t>(i)])];
  std::vector<int> idx(static_cast<size_t>(r), 0);
  int64_t n = x.size();
  for (int64_t o = 0; o < n; ++o) {
    int64_t src = 0;
    for (int i = 0; i < r; ++i) src += idx[static_cast<size_t>(i)] * out_in_strides[static_cast<size_t>(i)];
    out.data[static_cast<size_t>(o)] = x.data[static_cast<size_t>(src)];
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[static_cast<size_t>(i)] < out_shape[static_cast<size_t>(i)]) break;
      idx[static_cast<size_t>(i)] = 0;
    }
  }
  return out;
}
}  // namespace detail

template <typename T>
Val permute(Tape<T>& t, Val a, std::vector<int> axes) {
  const Tensor<T>& x = t.val(a);
  if (static_cast<int>(axes.size()) != x.rank()) throw DataError("permute: bad axes");
  Tensor<T> out = detail::permute_data(x, axes);
  std::vector<int> inv(axes.size());
  for (size_t i = 0; i < axes.size(); ++i) inv[static_cast<size_t>(axes[i])] = static_cast<int>(i);
  return t.push(std::move(out), {a.id}, [a, inv](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(a.id, detail::permute_data(g, inv));
  });
}

template <typename T>
Val concat_lastdim(Tape<T>& t, const std::vector<Val>& parts) {
  if (parts.empty()) throw DataError("concat: no inputs");
  Shape s = t.val(parts[0]).shape;
  int total = 0;
  std::vector<int> widths;
  for (Val p : parts) {
    const Tensor<T>& v = t.val(p);
    Shape lead = v.shape;
    lead.back() = 0;
    Shape lead0 = s;
    lead0.back() = 0;
    if (lead != lead0) throw DataError("concat: incompatible shapes");
    widths.push_back(v.shape.back());
    total += v.shape.back();
  }
  Shape os = s;
  os.back() = total;
  Tensor<T> out(os);
  int64_t rows = out.size() / total;
  int off = 0;
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    const Tensor<T>& v = t.val(parts[pi]);
    int w = widths[pi];
    for (int64_t r = 0; r < rows; ++r)
      std::memcpy(out.ptr() + r * total + off, v.ptr() + r * w, sizeof(T) * static_cast<size_t>(w));
    off += w;
  }
  std::vector<int> ids;
  for (Val p : parts) ids.push_back(p.id);
  return t.push(std::move(out), ids, [ids, widths, total](Tape<T>& tp, const Tensor<T>& g) {
    int64_t rows = g.size() / total;
    int off = 0;
    for (size_t pi = 0; pi < ids.size(); ++pi) {
      int w = widths[pi];
      Shape ps = g.shape;
      ps.back() = w;
      Tensor<T> gp(ps);
      for (int64_t r = 0; r < rows; ++r)
        std::memcpy(gp.ptr() + r * w, g.ptr() + r * total + off, sizeof(T) * static_cast<size_t>(w));
      tp.accumulate(ids[pi], gp);
      off += w;
    }
  });
}

template <typename T>
Val slice_lastdim(Tape<T>& t, Val a, int start, int len) {
  const Tensor<T>& x = t.val(a);
  int w = x.shape.back();
  if (start < 0 || len <= 0 || start + len > w) throw DataError("slice: out of range");
  Shape os = x.shape;
  os.back() = len;
  Tensor<T> out(os);
  int64_t rows = x.size() / w;
  for (int64_t r = 0; r < rows; ++r)
    std::memcpy(out.ptr() + r * len, x.ptr() + r * w + start, sizeof(T) * static_cast<size_t>(len));
  Shape orig = x.shape;
  return t.push(std::move(out), {a.id}, [a, start, len, orig](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T> gx(orig);
    int w = orig.back();
    int64_t rows = gx.size() / w;
    for (int64_t r = 0; r < rows; ++r)
      std::memcpy(gx.ptr() + r * w + start, g.ptr() + r * len, sizeof(T) * static_cast<size_t>(len));
    tp.accumulate(a.id, gx);
  });
}

template <typename T>
Val slice_rows(Tape<T>& t, Val a, int start, int len) {
  const Tensor<T>& x = t.val(a);
  if (x.rank() < 1 || start < 0 || len <= 0 || start + len > x.shape[0])
    throw DataError("slice_rows: out of range");
  int64_t stride = x.size() / x.shape[0];
  Shape os = x.shape;
  os[0] = len;
  Tensor<T> out(os);
  std::memcpy(out.ptr(), x.ptr() + start * stride, sizeof(T) * static_cast<size_t>(len * stride));
  Shape orig = x.shape;
  return t.push(std::move(out), {a.id}, [a, start, len, orig, stride](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T> gx(orig);
    std::memcpy(gx.ptr() + start * stride, g.ptr(), sizeof(T) * static_cast<size_t>(len * stride));
    tp.accumulate(a.id, gx);
  });
}

// [B,C,W] -> [B,C,H,W] by replication.
template <typename T>
Val broadcast_height(Tape<T>& t, Val a, int H) {
  const Tensor<T>& x = t.val(a);
  if (x.rank() != 3) throw DataError("broadcast_height: want rank 3, got " + shape_str(x.shape));
  int B = x.shape[0], C = x.shape[1], W = x.shape[2];
  Tensor<T> out({B, C, H, W});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const T* src = x.ptr() + (static_cast<int64_t>(b) * C + c) * W;
      for (int h = 0; h < H; ++h)
        std::memcpy(out.ptr() + ((static_cast<int64_t>(b) * C + c) * H + h) * W, src,
                    sizeof(T) * static_cast<size_t>(W));
    }
  return t.push(std::move(out), {a.id}, [a, B, C, H, W](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T> gx({B, C, W});
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        T* dst = gx.ptr() + (static_cast<int64_t>(b) * C + c) * W;
        for (int h = 0; h < H; ++h) {
          const T* src = g.ptr() + ((static_cast<int64_t>(b) * C + c) * H + h) * W;
          for (int w = 0; w < W; ++w) dst[w] += src[w];
        }
      }
    tp.accumulate(a.id, gx);
  });
}

// [...] -> [..., n] by replication.
template <typename T>
Val expand_last(Tape<T>& t, Val a, int n) {
  const Tensor<T>& x = t.val(a);
  Shape os = x.shape;
  os.push_back(n);
  Tensor<T> out(os);
  for (int64_t i = 0; i < x.size(); ++i)
    for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(i * n + j)] = x.data[static_cast<size_t>(i)];
  return t.push(std::move(out), {a.id}, [a, n](Tape<T>& tp, const Tensor<T>& g) {
    Shape os = g.shape;
    os.pop_back();
    Tensor<T> gx(os);
    for (int64_t i = 0; i < gx.size(); ++i) {
      T s = T(0);
      for (int j = 0; j < n; ++j) s += g.data[static_cast<size_t>(i * n + j)];
      gx.data[static_cast<size_t>(i)] = s;
    }
    tp.accumulate(a.id, gx);
  });
}

// [...] -> [n, ...] by replication.
template <typename T>
Val expand_front(Tape<T>& t, Val a, int n) {
  const Tensor<T>& x = t.val(a);
  Shape os;
  os.push_back(n);
  for (int d : x.shape) os.push_back(d);
  Tensor<T> out(os);
  for (int j = 0; j < n; ++j)
    std::memcpy(out.ptr() + j * x.size(), x.ptr(), sizeof(T) * static_cast<size_t>(x.size()));
  return t.push(std::move(out), {a.id}, [a, n](Tape<T>& tp, const Tensor<T>& g) {
    Shape os(g.shape.begin() + 1, g.shape.end());
    Tensor<T> gx(os);
    for (int j = 0; j < n; ++j) {
      const T* src = g.ptr() + j * gx.size();
      for (int64_t i = 0; i < gx.size(); ++i) gx.data[static_cast<size_t>(i)] += src[i];
    }
    tp.accumulate(a.id, gx);
  });
}

// ---------------------------------------------------------------------------
// Reductions, normalization
// ---------------------------------------------------------------------------

template <typename T>
Val sum_all(Tape<T>& t, Val a) {
  const Tensor<T>& x = t.val(a);
  T s = T(0);
  for (T v : x.data) s += v;
  Tensor<T> out({1});
  out.data[0] = s;
  Shape orig = x.shape;
  return t.push(std::move(out), {a.id}, [a, orig](Tape<T>& tp, const Tensor<T>& g) {
    tp.accumulate(a.id, Tensor<T>::full(orig, g.data[0]));
  });
}

template <typename T>
Val sum_lastdim(Tape<T>& t, Val a) {
  const Tensor<T>& x = t.val(a);
  if (x.rank() < 1) throw DataError("sum_lastdim: rank 0");
  int n = x.shape.back();
  Shape os(x.shape.begin(), x.shape.end() - 1);
  if (os.empty()) os.push_back(1);
  Tensor<T> out(os);
  int64_t rows = x.size() / n;
  for (int64_t r = 0; r < rows; ++r) {
    T s = T(0);
    const T* src = x.ptr() + r * n;
    for (int i = 0; i < n; ++i) s += src[i];
    out.data[static_cast<size_t>(r)] = s;
  }
  Shape orig = x.shape;
  return t.push(std::move(out), {a.id}, [a, n, orig](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T> gx(orig);
    int64_t rows = gx.size() / n;
    for (int64_t r = 0; r < rows; ++r)
      for (int i = 0; i < n; ++i) gx.data[static_cast<size_t>(r * n + i)] = g.data[static_cast<size_t>(r)];
    tp.accumulate(a.id, gx);
  });
}

// Softmax over the last dimension. Rows of length zero are rejected.
template <typename T>
Val softmax_lastdim(Tape<T>& t, Val a) {
  const Tensor<T>& x = t.val(a);
  if (x.rank() < 1 || x.shape.back() == 0) throw DataError("softmax: empty row");
  int n = x.shape.back();
  Tensor<T> out(x.shape);
  int64_t rows = x.size() / n;
  for (int64_t r = 0; r < rows; ++r) {
    const T* src = x.ptr() + r * n;
    T* dst = out.ptr() + r * n;
    T m = src[0];
    for (int i = 1; i < n; ++i) m = std::max(m, src[i]);
    T s = T(0);
    for (int i = 0; i < n; ++i) {
      dst[i] = std::exp(src[i] - m);
      s += dst[i];
    }
    for (int i = 0; i < n; ++i) dst[i] /= s;
  }
  Tensor<T> y = out;
  return t.push(std::move(out), {a.id}, [a, y, n](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T> gx(y.shape);
    int64_t rows = y.size() / n;
    for (int64_t r = 0; r < rows; ++r) {
      const T* yv = y.ptr() + r * n;
      const T* gv = g.ptr() + r * n;
      T dot = T(0);
      for (int i = 0; i < n; ++i) dot += yv[i] * gv[i];
      T* dst = gx.ptr() + r * n;
      for (int i = 0; i < n; ++i) dst[i] = yv[i] * (gv[i] - dot);
    }
    tp.accumulate(a.id, gx);
  });
}

// y = x / max(||x||_2, eps) over the last dimension.
template <typename T>
Val l2_normalize_lastdim(Tape<T>& t, Val a, double eps = 1e-12, bool reject_zero = false) {
  const Tensor<T>& x = t.val(a);
  int n = x.shape.back();
  Tensor<T> out(x.shape);
  int64_t rows = x.size() / n;
  std::vector<T> norms(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const T* src = x.ptr() + r * n;
    T s = T(0);
    for (int i = 0; i < n; ++i) s += src[i] * src[i];
    T nm = std::sqrt(s);
    if (reject_zero && !(nm > T(0)))
      throw NumericError("l2_normalize: zero vector cannot be normalized");
    nm = std::max(nm, static_cast<T>(eps));
    norms[static_cast<size_t>(r)] = nm;
    T* dst = out.ptr() + r * n;
    for (int i = 0; i < n; ++i) dst[i] = src[i] / nm;
  }
  Tensor<T> y = out;
  return t.push(std::move(out), {a.id}, [a, y, norms, n, eps](Tape<T>& tp, const Tensor<T>& g) {
    const Tensor<T>& x = tp.val(a);
    Tensor<T> gx(x.shape);
    int64_t rows = x.size() / n;
    for (int64_t r = 0; r < rows; ++r) {
      const T* yv = y.ptr() + r * n;
      const T* gv = g.ptr() + r * n;
      T* dst = gx.ptr() + r * n;
      T nm = norms[static_cast<size_t>(r)];
      const T* xv = x.ptr() + r * n;
      T xs = T(0);
      for (int i = 0; i < n; ++i) xs += xv[i] * xv[i];
      if (std::sqrt(xs) < static_cast<T>(eps)) {
        for (int i = 0; i < n; ++i) dst[i] = gv[i] / nm;  // clamped branch is linear
      } else {
        T dot = T(0);
        for (int i = 0; i < n; ++i) dot += yv[i] * gv[i];
        for (int i = 0; i < n; ++i) dst[i] = (gv[i] - yv[i] * dot) / nm;
      }
    }
    tp.accumulate(a.id, gx);
  });
}

// ---------------------------------------------------------------------------
// Dense linear algebra
// ---------------------------------------------------------------------------

// x: [..., Din], w: [Dout, Din], optional bias [Dout] -> [..., Dout]
template <typename T>
Val linear(Tape<T>& t, Val a, Val w, Val bias = Val{}) {
  const Tensor<T>&x = t.val(a), &wm = t.val(w);
  if (wm.rank() != 2 || x.shape.back() != wm.shape[1])
    throw DataError("linear: x " + shape_str(x.shape) + " w " + shape_str(wm.shape));
  int din = wm.shape[1], dout = wm.shape[0];
  int64_t rows = x.size() / din;
  Shape os = x.shape;
  os.back() = dout;
  Tensor<T> out(os);
  CMapRM<T> X(x.ptr(), rows, din), W(wm.ptr(), dout, din);
  MapRM<T> Y(out.ptr(), rows, dout);
  Y.noalias() = X * W.transpose();
  if (bias.valid()) {
    const Tensor<T>& bv = t.val(bias);
    if (bv.size() != dout) throw DataError("linear: bias size");
    for (int64_t r = 0; r < rows; ++r)
      for (int i = 0; i < dout; ++i) out.data[static_cast<size_t>(r * dout + i)] += bv.data[static_cast<size_t>(i)];
  }
  std::vector<int> parents = {a.id, w.id};
  if (bias.valid()) parents.push_back(bias.id);
  return t.push(std::move(out), parents,
                [a, w, bias, rows, din, dout](Tape<T>& tp, const Tensor<T>& g) {
                  const Tensor<T>&x = tp.val(a), &wm = tp.val(w);
                  CMapRM<T> X(x.ptr(), rows, din), W(wm.ptr(), dout, din), G(g.ptr(), rows, dout);
                  Tensor<T> gx(x.shape), gw(wm.shape);
                  MapRM<T> GX(gx.ptr(), rows, din), GW(gw.ptr(), dout, din);
                  GX.noalias() = G * W;
                  GW.noalias() = G.transpose() * X;
                  tp.accumulate(a.id, gx);
                  tp.accumulate(w.id, gw);
                  if (bias.valid()) {
                    Tensor<T> gb({dout});
                    for (int64_t r = 0; r < rows; ++r)
                      for (int i = 0; i < dout; ++i) gb.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(r * dout + i)];
                    tp.accumulate(bias.id, gb);
                  }
                });
}

// Batched matmul: A [B,m,k] x B [B,k,n] -> [B,m,n]; trans flags swap the
// stored layout of either operand.
template <typename T>
Val bmm(Tape<T>& t, Val a, Val b, bool trans_a = false, bool trans_b = false) {
  const Tensor<T>&av = t.val(a), &bv = t.val(b);
  if (av.rank() != 3 || bv.rank() != 3 || av.shape[0] != bv.shape[0])
    throw DataError("bmm: " + shape_str(av.shape) + " x " + shape_str(bv.shape));
  int B = av.shape[0];
  int m = trans_a ? av.shape[2] : av.shape[1];
  int ka = trans_a ? av.shape[1] : av.shape[2];
  int kb = trans_b ? bv.shape[2] : bv.shape[1];
  int n = trans_b ? bv.shape[1] : bv.shape[2];
  if (ka != kb) throw DataError("bmm: inner dims " + std::to_string(ka) + " vs " + std::to_string(kb));
  Tensor<T> out({B, m, n});
  for (int i = 0; i < B; ++i) {
    CMapRM<T> A(av.ptr() + static_cast<int64_t>(i) * av.shape[1] * av.shape[2], av.shape[1], av.shape[2]);
    CMapRM<T> Bm(bv.ptr() + static_cast<int64_t>(i) * bv.shape[1] * bv.shape[2], bv.shape[1], bv.shape[2]);
    MapRM<T> Y(out.ptr() + static_cast<int64_t>(i) * m * n, m, n);
    if (!trans_a && !trans_b)
      Y.noalias() = A * Bm;
    else if (!trans_a && trans_b)
      Y.noalias() = A * Bm.transpose();
    else if (trans_a && !trans_b)
      Y.noalias() = A.transpose() * Bm;
    else
      Y.noalias() = A.transpose() * Bm.transpose();
  }
  return t.push(std::move(out), {a.id, b.id},
                [a, b, trans_a, trans_b, B, m, n](Tape<T>& tp, const Tensor<T>& g) {
                  const Tensor<T>&av = tp.val(a), &bv = tp.val(b);
                  Tensor<T> ga(av.shape), gb(bv.shape);
                  for (int i = 0; i < B; ++i) {
                    CMapRM<T> A(av.ptr() + static_cast<int64_t>(i) * av.shape[1] * av.shape[2], av.shape[1], av.shape[2]);
                    CMapRM<T> Bm(bv.ptr() + static_cast<int64_t>(i) * bv.shape[1] * bv.shape[2], bv.shape[1], bv.shape[2]);
                    CMapRM<T> G(g.ptr() + static_cast<int64_t>(i) * m * n, m, n);
                    MapRM<T> GA(ga.ptr() + static_cast<int64_t>(i) * av.shape[1] * av.shape[2], av.shape[1], av.shape[2]);
                    MapRM<T> GB(gb.ptr() + static_cast<int64_t>(i) * bv.shape[1] * bv.shape[2], bv.shape[1], bv.shape[2]);
                    if (!trans_a && !trans_b) {
                      GA.noalias() = G * Bm.transpose();
                      GB.noalias() = A.transpose() * G;
                    } else if (!trans_a && trans_b) {
                      GA.noalias() = G * Bm;
                      GB.noalias() = G.transpose() * A;
                    } else if (trans_a && !trans_b) {
                      GA.noalias() = Bm * G.transpose();
                      GB.noalias() = A * G;
                    } else {
                      GA.noalias() = (G * Bm).transpose();
                      GB.noalias() = (A * G).transpose();
                    }
                  }
                  tp.accumulate(a.id, ga);
                  tp.accumulate(b.id, gb);
                });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvGeom {
  int B, Cin, H, W, Cout, kh, kw, sh, sw, Ho, Wo;
  PadMode pad;
};

namespace detail {

inline ConvGeom conv_geometry(const Shape& xs, const Shape& ws, int sh, int sw, PadMode pad) {
  if (xs.size() != 4 || ws.size() != 4)
    throw DataError("conv2d: want x[B,C,H,W] w[Co,Ci,kh,kw], got x " + shape_str(xs) + " w " +
                    shape_str(ws));
  ConvGeom g;
  g.B = xs[0];
  g.Cin = xs[1];
  g.H = xs[2];
  g.W = xs[3];
  g.Cout = ws[0];
  g.kh = ws[2];
  g.kw = ws[3];
  g.sh = sh;
  g.sw = sw;
  g.pad = pad;
  if (ws[1] != g.Cin)
    throw DataError("conv2d: input channels " + std::to_string(g.Cin) + " vs kernel " +
                    std::to_string(ws[1]));
  if (g.kh % 2 == 0 || g.kw % 2 == 0) throw DataError("conv2d: kernels must be odd-sized");
  if (sh < 1 || sw < 1) throw DataError("conv2d: bad stride");
  if (g.H < 1 || g.W < 1) throw DataError("conv2d: empty spatial extent");
  g.Ho = (g.H - 1) / sh + 1;
  if (pad == PadMode::kCircularWidth) {
    if (g.W % sw != 0)
      throw DataError("conv2d: circular width " + std::to_string(g.W) +
                      " not divisible by stride " + std::to_string(sw));
    g.Wo = g.W / sw;
  } else {
    g.Wo = (g.W - 1) / sw + 1;
  }
  return g;
}

// cols is [Cin*kh*kw, Ho*Wo] row-major for one sample.
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  int ph = (g.kh - 1) / 2, pw = (g.kw - 1) / 2;
  int64_t P = static_cast<int64_t>(g.Ho) * g.Wo;
  for (int c = 0; c < g.Cin; ++c) {
    const T* xc = x + static_cast<int64_t>(c) * g.H * g.W;
    for (int dy = 0; dy < g.kh; ++dy) {
      for (int dx = 0; dx < g.kw; ++dx) {
        T* row = cols + ((static_cast<int64_t>(c) * g.kh + dy) * g.kw + dx) * P;
        for (int oy = 0; oy < g.Ho; ++oy) {
          int iy = oy * g.sh + dy - ph;
          T* dst = row + static_cast<int64_t>(oy) * g.Wo;
          if (iy < 0 || iy >= g.H) {
            std::fill(dst, dst + g.Wo, T(0));
            continue;
          }
          const T* src = xc + static_cast<int64_t>(iy) * g.W;
          for (int ox = 0; ox < g.Wo; ++ox) {
            int ix = ox * g.sw + dx - pw;
            if (g.pad == PadMode::kCircularWidth) {
              ix = (ix % g.W + g.W) % g.W;
              dst[ox] = src[ix];
            } else {
              dst[ox] = (ix >= 0 && ix < g.W) ? src[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* x) {
  int ph = (g.kh - 1) / 2, pw = (g.kw - 1) / 2;
  int64_t P = static_cast<int64_t>(g.Ho) * g.Wo;
  for (int c = 0; c < g.Cin; ++c) {
    T* xc = x + static_cast<int64_t>(c) * g.H * g.W;
    for (int dy = 0; dy < g.kh; ++dy) {
      for (int dx = 0; dx < g.kw; ++dx) {
        const T* row = cols + ((static_cast<int64_t>(c) * g.kh + dy) * g.kw + dx) * P;
        for (int oy = 0; oy < g.Ho; ++oy) {
          int iy = oy * g.sh + dy - ph;
          if (iy < 0 || iy >= g.H) continue;
          const T* src = row + static_cast<int64_t>(oy) * g.Wo;
          T* dstrow = xc + static_cast<int64_t>(iy) * g.W;
          for (int ox = 0; ox < g.Wo; ++ox) {
            int ix = ox * g.sw + dx - pw;
            if (g.pad == PadMode::kCircularWidth) {
              ix = (ix % g.W + g.W) % g.W;
              dstrow[ix] += src[ox];
            } else if (ix >= 0 && ix < g.W) {
              dstrow[ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2-D convolution; width padding either circular (panoramic) or zero.
template <typename T>
Val conv2d(Tape<T>& t, Val x, Val w, Val bias, int sh, int sw, PadMode pad) {
  const Tensor<T>&xv = t.val(x), &wv = t.val(w);
  ConvGeom g = detail::conv_geometry(xv.shape, wv.shape, sh, sw, pad);
  int K = g.Cin * g.kh * g.kw;
  int64_t P = static_cast<int64_t>(g.Ho) * g.Wo;
  Tensor<T> out({g.B, g.Cout, g.Ho, g.Wo});
  {
    std::vector<T> cols(static_cast<size_t>(K) * P);
    CMapRM<T> W(wv.ptr(), g.Cout, K);
    for (int b = 0; b < g.B; ++b) {
      detail::im2col(xv.ptr() + static_cast<int64_t>(b) * g.Cin * g.H * g.W, g, cols.data());
      CMapRM<T> C(cols.data(), K, P);
      MapRM<T> Y(out.ptr() + static_cast<int64_t>(b) * g.Cout * P, g.Cout, P);
      Y.noalias() = W * C;
    }
  }
  if (bias.valid()) {
    const Tensor<T>& bv = t.val(bias);
    if (bv.size() != g.Cout) throw DataError("conv2d: bias size");
    for (int b = 0; b < g.B; ++b)
      for (int c = 0; c < g.Cout; ++c) {
        T* dst = out.ptr() + (static_cast<int64_t>(b) * g.Cout + c) * P;
        for (int64_t i = 0; i < P; ++i) dst[i] += bv.data[static_cast<size_t>(c)];
      }
  }
  std::vector<int> parents = {x.id, w.id};
  if (bias.valid()) parents.push_back(bias.id);
  return t.push(std::move(out), parents, [x, w, bias, g, K, P](Tape<T>& tp, const Tensor<T>& gout) {
    const Tensor<T>&xv = tp.val(x), &wv = tp.val(w);
    Tensor<T> gx(xv.shape), gw(wv.shape);
    std::vector<T> cols(static_cast<size_t>(K) * P), dcols(static_cast<size_t>(K) * P);
    CMapRM<T> W(wv.ptr(), g.Cout, K);
    MapRM<T> GW(gw.ptr(), g.Cout, K);
    for (int b = 0; b < g.B; ++b) {
      detail::im2col(xv.ptr() + static_cast<int64_t>(b) * g.Cin * g.H * g.W, g, cols.data());
      CMapRM<T> C(cols.data(), K, P);
      CMapRM<T> G(gout.ptr() + static_cast<int64_t>(b) * g.Cout * P, g.Cout, P);
      GW.noalias() += G * C.transpose();
      MapRM<T> DC(dcols.data(), K, P);
      DC.noalias() = W.transpose() * G;
      detail::col2im_add(dcols.data(), g, gx.ptr() + static_cast<int64_t>(b) * g.Cin * g.H * g.W);
    }
    tp.accumulate(x.id, gx);
    tp.accumulate(w.id, gw);
    if (bias.valid()) {
      Tensor<T> gb({g.Cout});
      for (int b = 0; b < g.B; ++b)
        for (int c = 0; c < g.Cout; ++c) {
          const T* src = gout.ptr() + (static_cast<int64_t>(b) * g.Cout + c) * P;
          T s = T(0);
          for (int64_t i = 0; i < P; ++i) s += src[i];
          gb.data[static_cast<size_t>(c)] += s;
        }
      tp.accumulate(bias.id, gb);
    }
  });
}

// 1-D convolution over [B,C,W] with circular padding; kernel [Co,Ci,k].
template <typename T>
Val conv1d(Tape<T>& t, Val x, Val w, Val bias, int stride = 1) {
  Shape xs = t.val(x).shape, ws = t.val(w).shape;
  if (xs.size() != 3 || ws.size() != 3)
    throw DataError("conv1d: want x[B,C,W] w[Co,Ci,k], got x " + shape_str(xs) + " w " +
                    shape_str(ws));
  Val x4 = reshape(t, x, {xs[0], xs[1], 1, xs[2]});
  Val w4 = reshape(t, w, {ws[0], ws[1], 1, ws[2]});
  Val y4 = conv2d(t, x4, w4, bias, 1, stride, PadMode::kCircularWidth);
  const Shape& ys = t.val(y4).shape;
  return reshape(t, y4, {ys[0], ys[1], ys[3]});
}

// Max pooling with the stem geometry (square window, circular width).
// Out-of-range cells never win: padding behaves as -inf.
template <typename T>
Val maxpool2d(Tape<T>& t, Val x, int k, int sh, int sw, PadMode pad) {
  const Tensor<T>& xv = t.val(x);
  if (xv.rank() != 4) throw DataError("maxpool2d: want rank 4, got " + shape_str(xv.shape));
  Shape ws = {xv.shape[1], xv.shape[1], k, k};
  ConvGeom g = detail::conv_geometry(xv.shape, ws, sh, sw, pad);
  int ph = (k - 1) / 2, pw = (k - 1) / 2;
  int64_t P = static_cast<int64_t>(g.Ho) * g.Wo;
  Tensor<T> out({g.B, g.Cin, g.Ho, g.Wo});
  std::vector<int64_t> arg(static_cast<size_t>(g.B * g.Cin * P));
  for (int b = 0; b < g.B; ++b)
    for (int c = 0; c < g.Cin; ++c) {
      const T* xc = xv.ptr() + (static_cast<int64_t>(b) * g.Cin + c) * g.H * g.W;
      for (int oy = 0; oy < g.Ho; ++oy)
        for (int ox = 0; ox < g.Wo; ++ox) {
          T best = T(0);
          int64_t besti = -1;
          for (int dy = 0; dy < k; ++dy) {
            int iy = oy * sh + dy - ph;
            if (iy < 0 || iy >= g.H) continue;
            for (int dx = 0; dx < k; ++dx) {
              int ix = ox * sw + dx - pw;
              if (pad == PadMode::kCircularWidth)
                ix = (ix % g.W + g.W) % g.W;
              else if (ix < 0 || ix >= g.W)
                continue;
              T v = xc[static_cast<int64_t>(iy) * g.W + ix];
              if (besti < 0 || v > best) {
                best = v;
                besti = static_cast<int64_t>(iy) * g.W + ix;
              }
            }
          }
          if (besti < 0) throw DataError("maxpool2d: empty window");
          int64_t o = (static_cast<int64_t>(b) * g.Cin + c) * P + oy * g.Wo + ox;
          out.data[static_cast<size_t>(o)] = best;
          arg[static_cast<size_t>(o)] = besti;
        }
    }
  return t.push(std::move(out), {x.id}, [x, g, P, arg](Tape<T>& tp, const Tensor<T>& gv) {
    const Tensor<T>& xv = tp.val(x);
    Tensor<T> gx(xv.shape);
    for (int b = 0; b < g.B; ++b)
      for (int c = 0; c < g.Cin; ++c) {
        T* dst = gx.ptr() + (static_cast<int64_t>(b) * g.Cin + c) * g.H * g.W;
        int64_t base = (static_cast<int64_t>(b) * g.Cin + c) * P;
        for (int64_t i = 0; i < P; ++i)
          dst[arg[static_cast<size_t>(base + i)]] += gv.data[static_cast<size_t>(base + i)];
      }
    tp.accumulate(x.id, gx);
  });
}

// [B,C,H,W] -> [B,C,W], max over the full height; gradient routes to the
// first argmax in scan order.
template <typename T>
Val vertical_maxpool(Tape<T>& t, Val x) {
  const Tensor<T>& xv = t.val(x);
  if (xv.rank() != 4) throw DataError("vertical_maxpool: want rank 4, got " + shape_str(xv.shape));
  int B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
  if (H < 1) throw DataError("vertical_maxpool: empty height");
  Tensor<T> out({B, C, W});
  std::vector<int> arg(static_cast<size_t>(out.size()));
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const T* xc = xv.ptr() + (static_cast<int64_t>(b) * C + c) * H * W;
      T* dst = out.ptr() + (static_cast<int64_t>(b) * C + c) * W;
      int* am = arg.data() + (static_cast<int64_t>(b) * C + c) * W;
      for (int w = 0; w < W; ++w) {
        T best = xc[w];
        int bi = 0;
        for (int h = 1; h < H; ++h) {
          T v = xc[static_cast<int64_t>(h) * W + w];
          if (v > best) {
            best = v;
            bi = h;
          }
        }
        dst[w] = best;
        am[w] = bi;
      }
    }
  return t.push(std::move(out), {x.id}, [x, B, C, H, W, arg](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T> gx({B, C, H, W});
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        T* dst = gx.ptr() + (static_cast<int64_t>(b) * C + c) * H * W;
        const T* src = g.ptr() + (static_cast<int64_t>(b) * C + c) * W;
        const int* am = arg.data() + (static_cast<int64_t>(b) * C + c) * W;
        for (int w = 0; w < W; ++w) dst[static_cast<int64_t>(am[w]) * W + w] += src[w];
      }
    tp.accumulate(x.id, gx);
  });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

// Per-channel statistics over batch x spatial positions. x is [B,C,H,W] or
// [B,C,L]. In training mode the running stats (plain tensors owned by the
// caller, not tape nodes) are updated in place.
template <typename T>
Val batchnorm(Tape<T>& t, Val x, Val gamma, Val beta, Tensor<T>* running_mean,
              Tensor<T>* running_var, bool training, double momentum = 0.1, double eps = 1e-5) {
  const Tensor<T>& xv = t.val(x);
  if (xv.rank() != 3 && xv.rank() != 4)
    throw DataError("batchnorm: want rank 3 or 4, got " + shape_str(xv.shape));
  int B = xv.shape[0], C = xv.shape[1];
  int64_t S = xv.size() / (static_cast<int64_t>(B) * C);  // spatial positions
  const Tensor<T>&gm = t.val(gamma), &bt = t.val(beta);
  if (gm.size() != C || bt.size() != C) throw DataError("batchnorm: affine param size");
  if (static_cast<int>(running_mean->size()) != C || static_cast<int>(running_var->size()) != C)
    throw DataError("batchnorm: running stat size");

  std::vector<T> mean(static_cast<size_t>(C)), inv(static_cast<size_t>(C));
  int64_t N = static_cast<int64_t>(B) * S;
  if (training) {
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int b = 0; b < B; ++b) {
        const T* src = xv.ptr() + (static_cast<int64_t>(b) * C + c) * S;
        for (int64_t i = 0; i < S; ++i) s += static_cast<double>(src[i]);
      }
      double mu = s / static_cast<double>(N);
      double v = 0.0;
      for (int b = 0; b < B; ++b) {
        const T* src = xv.ptr() + (static_cast<int64_t>(b) * C + c) * S;
        for (int64_t i = 0; i < S; ++i) {
          double d = static_cast<double>(src[i]) - mu;
          v += d * d;
        }
      }
      double var = v / static_cast<double>(N);
      mean[static_cast<size_t>(c)] = static_cast<T>(mu);
      inv[static_cast<size_t>(c)] = static_cast<T>(1.0 / std::sqrt(var + eps));
      double var_unbiased = N > 1 ? v / static_cast<double>(N - 1) : var;
      running_mean->data[static_cast<size_t>(c)] =
          static_cast<T>((1.0 - momentum) * running_mean->data[static_cast<size_t>(c)] + momentum * mu);
      running_var->data[static_cast<size_t>(c)] =
          static_cast<T>((1.0 - momentum) * running_var->data[static_cast<size_t>(c)] + momentum * var_unbiased);
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[static_cast<size_t>(c)] = running_mean->data[static_cast<size_t>(c)];
      inv[static_cast<size_t>(c)] =
          static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var->data[static_cast<size_t>(c)]) + eps));
    }
  }

  Tensor<T> out(xv.shape);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const T* src = xv.ptr() + (static_cast<int64_t>(b) * C + c) * S;
      T* dst = out.ptr() + (static_cast<int64_t>(b) * C + c) * S;
      T mu = mean[static_cast<size_t>(c)], iv = inv[static_cast<size_t>(c)];
      T gmc = gm.data[static_cast<size_t>(c)], btc = bt.data[static_cast<size_t>(c)];
      for (int64_t i = 0; i < S; ++i) dst[i] = (src[i] - mu) * iv * gmc + btc;
    }

  return t.push(std::move(out), {x.id, gamma.id, beta.id},
                [x, gamma, beta, mean, inv, training, B, C, S, N](Tape<T>& tp, const Tensor<T>& g) {
                  const Tensor<T>& xv = tp.val(x);
                  const Tensor<T>& gm = tp.val(gamma);
                  Tensor<T> gx(xv.shape), gg({C}), gb({C});
                  for (int c = 0; c < C; ++c) {
                    T mu = mean[static_cast<size_t>(c)], iv = inv[static_cast<size_t>(c)];
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (int b = 0; b < B; ++b) {
                      const T* gs = g.ptr() + (static_cast<int64_t>(b) * C + c) * S;
                      const T* xs = xv.ptr() + (static_cast<int64_t>(b) * C + c) * S;
                      for (int64_t i = 0; i < S; ++i) {
                        sum_g += static_cast<double>(gs[i]);
                        sum_gx += static_cast<double>(gs[i]) * (static_cast<double>(xs[i]) - mu) * iv;
                      }
                    }
                    gb.data[static_cast<size_t>(c)] = static_cast<T>(sum_g);
                    gg.data[static_cast<size_t>(c)] = static_cast<T>(sum_gx);
                    T gmc = gm.data[static_cast<size_t>(c)];
                    if (training) {
                      // d/dx of ((x-mu)*inv) with batch statistics.
                      for (int b = 0; b < B; ++b) {
                        const T* gs = g.ptr() + (static_cast<int64_t>(b) * C + c) * S;
                        const T* xs = xv.ptr() + (static_cast<int64_t>(b) * C + c) * S;
                        T* dst = gx.ptr() + (static_cast<int64_t>(b) * C + c) * S;
                        for (int64_t i = 0; i < S; ++i) {
                          double xhat = (static_cast<double>(xs[i]) - mu) * iv;
                          double dxhat = static_cast<double>(gs[i]) * gmc;
                          dst[i] = static_cast<T>(
                              iv * (dxhat - (sum_g * gmc + xhat * sum_gx * gmc) / static_cast<double>(N)));
                        }
                      }
                    } else {
                      for (int b = 0; b < B; ++b) {
                        const T* gs = g.ptr() + (static_cast<int64_t>(b) * C + c) * S;
                        T* dst = gx.ptr() + (static_cast<int64_t>(b) * C + c) * S;
                        for (int64_t i = 0; i < S; ++i) dst[i] = gs[i] * gmc * iv;
                      }
                    }
                  }
                  tp.accumulate(x.id, gx);
                  tp.accumulate(gamma.id, gg);
                  tp.accumulate(beta.id, gb);
                });
}

}  // namespace lcpr::nd
