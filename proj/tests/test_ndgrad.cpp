#include "doctest.h"

#include <cmath>

#include "lcpr/gradcheck.hpp"
#include "lcpr/ops.hpp"
#include "lcpr/rng.hpp"

using namespace lcpr;
using namespace lcpr::nd;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape s, uint64_t seed) {
  Rng rng(seed);
  Tensor<T> t(std::move(s));
  for (auto& v : t.data) v = static_cast<T>(rng.gaussian());
  return t;
}

// Direct nested-loop convolution oracle, independent of the im2col path.
template <typename T>
Tensor<T> conv2d_oracle(const Tensor<T>& x, const Tensor<T>& w, int sh, int sw, PadMode pad) {
  int B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3];
  int Cout = w.shape[0], kh = w.shape[2], kw = w.shape[3];
  int ph = (kh - 1) / 2, pw = (kw - 1) / 2;
  int Ho = (H - 1) / sh + 1;
  int Wo = pad == PadMode::kCircularWidth ? W / sw : (W - 1) / sw + 1;
  Tensor<T> y({B, Cout, Ho, Wo});
  for (int b = 0; b < B; ++b)
    for (int co = 0; co < Cout; ++co)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          T acc = T(0);
          for (int ci = 0; ci < Cin; ++ci)
            for (int dy = 0; dy < kh; ++dy)
              for (int dx = 0; dx < kw; ++dx) {
                int iy = oy * sh + dy - ph;
                int ix = ox * sw + dx - pw;
                if (iy < 0 || iy >= H) continue;
                if (pad == PadMode::kCircularWidth)
                  ix = (ix % W + W) % W;
                else if (ix < 0 || ix >= W)
                  continue;
                acc += x.at(b, ci, iy, ix) * w.at(co, ci, dy, dx);
              }
          y.at(b, co, oy, ox) = acc;
        }
  return y;
}

}  // namespace

TEST_CASE("conv2d: 1x1 identity kernel reproduces the input") {
  Tape<float> t;
  auto x = t.constant(random_tensor<float>({2, 3, 4, 6}, 1));
  Tensor<float> w({3, 3, 1, 1});
  for (int i = 0; i < 3; ++i) w.at(i, i, 0, 0) = 1.0f;
  auto y = conv2d(t, x, t.constant(w), Val{}, 1, 1, PadMode::kCircularWidth);
  CHECK(max_abs_diff(t.val(y), t.val(x)) == doctest::Approx(0.0));
}

TEST_CASE("conv2d: rotating input columns by stride_w rotates output columns by 1") {
  for (int sw : {1, 2}) {
    Tape<float> t;
    Tensor<float> xv = random_tensor<float>({1, 2, 5, 8}, 2);
    Tensor<float> wv = random_tensor<float>({3, 2, 3, 3}, 3);
    auto y = conv2d(t, t.constant(xv), t.constant(wv), Val{}, 1, sw, PadMode::kCircularWidth);
    auto ys = conv2d(t, t.constant(shift_columns(xv, sw)), t.constant(wv), Val{}, 1, sw,
                     PadMode::kCircularWidth);
    CHECK(max_abs_diff(t.val(ys), shift_columns(t.val(y), 1)) <= 1e-6);
  }
}

TEST_CASE("conv2d: 3x3 all-ones kernel on a 4x4 ramp matches the nested-loop oracle") {
  Tensor<float> x({1, 1, 4, 4});
  for (int i = 0; i < 16; ++i) x.data[static_cast<size_t>(i)] = static_cast<float>(i);
  Tensor<float> w = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
  Tensor<float> expect = conv2d_oracle(x, w, 1, 1, PadMode::kCircularWidth);
  // Spot-check the oracle itself: cell (1,1) sums the full 3x3 block around it.
  CHECK(expect.at(0, 0, 1, 1) == doctest::Approx(0 + 1 + 2 + 4 + 5 + 6 + 8 + 9 + 10));
  Tape<float> t;
  auto y = conv2d(t, t.constant(x), t.constant(w), Val{}, 1, 1, PadMode::kCircularWidth);
  CHECK(max_abs_diff(t.val(y), expect) <= 1e-5);

  Tensor<float> xr = random_tensor<float>({2, 3, 5, 6}, 4);
  Tensor<float> wr = random_tensor<float>({4, 3, 3, 3}, 5);
  for (PadMode pad : {PadMode::kCircularWidth, PadMode::kZeroBoth}) {
    Tape<float> t2;
    auto y2 = conv2d(t2, t2.constant(xr), t2.constant(wr), Val{}, 1, 1, pad);
    CHECK(max_abs_diff(t2.val(y2), conv2d_oracle(xr, wr, 1, 1, pad)) <= 1e-5);
  }
}

TEST_CASE("conv2d: shape mismatch is rejected with a dimension report") {
  Tape<float> t;
  auto x = t.constant(random_tensor<float>({1, 2, 4, 4}, 6));
  auto w = t.constant(random_tensor<float>({1, 3, 3, 3}, 7));
  CHECK_THROWS_AS(conv2d(t, x, w, Val{}, 1, 1, PadMode::kCircularWidth), DataError);
  auto weven = t.constant(random_tensor<float>({1, 2, 2, 2}, 8));
  CHECK_THROWS_AS(conv2d(t, x, weven, Val{}, 1, 1, PadMode::kCircularWidth), DataError);
  auto w2 = t.constant(random_tensor<float>({1, 2, 3, 3}, 9));
  CHECK_THROWS_AS(conv2d(t, x, w2, Val{}, 1, 3, PadMode::kCircularWidth), DataError);
}

TEST_CASE("conv1d: [0,1,0] kernel is the identity") {
  Tape<float> t;
  Tensor<float> xv = random_tensor<float>({2, 1, 7}, 10);
  Tensor<float> w({1, 1, 3});
  w.data = {0, 1, 0};
  auto y = conv1d(t, t.constant(xv), t.constant(w), Val{});
  CHECK(max_abs_diff(t.val(y), xv) == doctest::Approx(0.0));
}

TEST_CASE("conv1d: circular [1,1,1] on [1,2,3,4] gives [7,6,9,8]") {
  Tape<float> t;
  Tensor<float> xv({1, 1, 4});
  xv.data = {1, 2, 3, 4};
  auto y = conv1d(t, t.constant(xv), t.constant(Tensor<float>::full({1, 1, 3}, 1.0f)), Val{});
  const Tensor<float>& out = t.val(y);
  CHECK(out.data[0] == doctest::Approx(4 + 1 + 2));
  CHECK(out.data[1] == doctest::Approx(1 + 2 + 3));
  CHECK(out.data[2] == doctest::Approx(2 + 3 + 4));
  CHECK(out.data[3] == doctest::Approx(3 + 4 + 1));
}

TEST_CASE("conv1d: stride-1 output rotates with the input") {
  Tape<float> t;
  Tensor<float> xv = random_tensor<float>({1, 3, 12}, 11);
  Tensor<float> wv = random_tensor<float>({2, 3, 3}, 12);
  auto y = conv1d(t, t.constant(xv), t.constant(wv), Val{});
  for (int k : {1, 5, 11}) {
    auto ys = conv1d(t, t.constant(shift_columns(xv, k)), t.constant(wv), Val{});
    CHECK(max_abs_diff(t.val(ys), shift_columns(t.val(y), k)) <= 1e-6);
  }
}

TEST_CASE("vertical_maxpool: squeeze, column max, oracle") {
  Tape<float> t;
  Tensor<float> x1 = random_tensor<float>({2, 3, 1, 5}, 13);
  auto y1 = vertical_maxpool(t, t.constant(x1));
  CHECK(t.val(y1).shape == Shape{2, 3, 5});
  CHECK(max_abs_diff(t.val(y1), Tensor<float>({2, 3, 5}, x1.data)) == doctest::Approx(0.0));

  Tensor<float> col({1, 1, 3, 1});
  col.data = {-1, 3, 0};
  auto y2 = vertical_maxpool(t, t.constant(col));
  CHECK(t.val(y2).data[0] == doctest::Approx(3.0));

  Tensor<float> slab = random_tensor<float>({1, 1, 8, 16}, 14);
  auto y3 = vertical_maxpool(t, t.constant(slab));
  for (int w = 0; w < 16; ++w) {
    float best = slab.at(0, 0, 0, w);
    for (int h = 1; h < 8; ++h) best = std::max(best, slab.at(0, 0, h, w));
    CHECK(t.val(y3).at(0, 0, w) == doctest::Approx(best));
  }
}

TEST_CASE("vertical_maxpool: gradient routes to the first argmax") {
  Tape<float> t;
  Tensor<float> x({1, 1, 3, 2});
  x.data = {2, 1, 2, 5, 0, 5};  // col 0 ties rows 0/1, col 1 ties rows 1/2
  auto xv = t.leaf(x);
  auto loss = sum_all(t, vertical_maxpool(t, xv));
  auto grads = t.backward(loss);
  const Tensor<float>& g = *grads[static_cast<size_t>(xv.id)];
  CHECK(g.at(0, 0, 0, 0) == 1.0f);
  CHECK(g.at(0, 0, 1, 0) == 0.0f);
  CHECK(g.at(0, 0, 1, 1) == 1.0f);
  CHECK(g.at(0, 0, 2, 1) == 0.0f);
}

TEST_CASE("softmax: symmetric pair, rows sum to one, empty row rejected") {
  Tape<float> t;
  Tensor<float> x({1, 2});
  x.data = {1, 1};
  auto y = softmax_lastdim(t, t.constant(x));
  CHECK(t.val(y).data[0] == doctest::Approx(0.5));
  CHECK(t.val(y).data[1] == doctest::Approx(0.5));

  Tensor<float> xr = random_tensor<float>({5, 9}, 15);
  auto yr = softmax_lastdim(t, t.constant(xr));
  for (int r = 0; r < 5; ++r) {
    double s = 0;
    for (int c = 0; c < 9; ++c) s += t.val(yr).at(r, c);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }

  CHECK_THROWS_AS(softmax_lastdim(t, t.constant(Tensor<float>({3, 0}))), DataError);
}

TEST_CASE("relu and sigmoid basics") {
  Tape<float> t;
  Tensor<float> x({2});
  x.data = {-2, 2};
  auto yr = relu(t, t.constant(x));
  CHECK(t.val(yr).data[0] == 0.0f);
  CHECK(t.val(yr).data[1] == 2.0f);
  auto ys = sigmoid(t, t.constant(x));
  CHECK(t.val(ys).data[0] == doctest::Approx(1.0 / (1.0 + std::exp(2.0))));
  CHECK(t.val(ys).data[1] > 0.0f);
  CHECK(t.val(ys).data[1] < 1.0f);
}

TEST_CASE("batchnorm: constant channel normalizes to zero before scale/shift") {
  Tape<float> t;
  Tensor<float> x = Tensor<float>::full({2, 1, 3, 4}, 7.5f);
  Tensor<float> rm({1}), rv = Tensor<float>::full({1}, 1.0f);
  auto y = batchnorm(t, t.constant(x), t.constant(Tensor<float>::full({1}, 1.0f)),
                     t.constant(Tensor<float>({1})), &rm, &rv, true);
  for (float v : t.val(y).data) CHECK(v == doctest::Approx(0.0));
  CHECK(rm.data[0] == doctest::Approx(0.75));  // momentum 0.1 toward mean 7.5
}

TEST_CASE("batchnorm: per-channel statistics are invariant under column shifts") {
  Tensor<float> x = random_tensor<float>({2, 3, 4, 8}, 16);
  Tensor<float> gm = Tensor<float>::full({3}, 1.0f), bt({3});
  for (int k : {1, 3, 7}) {
    Tape<float> t;
    Tensor<float> rm1({3}), rv1 = Tensor<float>::full({3}, 1.0f);
    Tensor<float> rm2({3}), rv2 = Tensor<float>::full({3}, 1.0f);
    auto y1 = batchnorm(t, t.constant(x), t.constant(gm), t.constant(bt), &rm1, &rv1, true);
    auto y2 = batchnorm(t, t.constant(shift_columns(x, k)), t.constant(gm), t.constant(bt), &rm2,
                        &rv2, true);
    CHECK(max_abs_diff(rm1, rm2) <= 1e-6);
    CHECK(max_abs_diff(rv1, rv2) <= 1e-6);
    CHECK(max_abs_diff(t.val(y2), shift_columns(t.val(y1), k)) <= 1e-5);
  }
}

TEST_CASE("batchnorm: eval mode uses running statistics") {
  Tape<float> t;
  Tensor<float> x = Tensor<float>::full({1, 1, 1, 2}, 3.0f);
  Tensor<float> rm = Tensor<float>::full({1}, 1.0f), rv = Tensor<float>::full({1}, 4.0f);
  auto y = batchnorm(t, t.constant(x), t.constant(Tensor<float>::full({1}, 2.0f)),
                     t.constant(Tensor<float>::full({1}, 0.5f)), &rm, &rv, false);
  // (3-1)/sqrt(4+1e-5)*2 + 0.5
  CHECK(t.val(y).data[0] == doctest::Approx(2.0 * 2.0 / std::sqrt(4.00001) + 0.5));
}

TEST_CASE("backward: sum gives ones, sum of squares gives 2x") {
  Tape<float> t;
  Tensor<float> xv = random_tensor<float>({3, 4}, 17);
  auto x = t.leaf(xv);
  auto l1 = sum_all(t, x);
  auto g1 = t.backward(l1);
  CHECK(max_abs_diff(*g1[static_cast<size_t>(x.id)], Tensor<float>::full({3, 4}, 1.0f)) == 0.0);

  Tape<float> t2;
  auto x2 = t2.leaf(xv);
  auto l2 = sum_all(t2, mul(t2, x2, x2));
  auto g2 = t2.backward(l2);
  Tensor<float> expect = xv;
  for (auto& v : expect.data) v *= 2.0f;
  CHECK(max_abs_diff(*g2[static_cast<size_t>(x2.id)], expect) <= 1e-6);
}

TEST_CASE("backward: detached constants receive no gradient") {
  Tape<float> t;
  auto x = t.leaf(random_tensor<float>({2, 2}, 18));
  auto c = t.constant(random_tensor<float>({2, 2}, 19));
  auto loss = sum_all(t, mul(t, x, c));
  auto grads = t.backward(loss);
  CHECK(grads[static_cast<size_t>(x.id)].has_value());
  CHECK_FALSE(grads[static_cast<size_t>(c.id)].has_value());
}

TEST_CASE("backward: unreachable parameters have absent gradient") {
  Tape<float> t;
  auto x = t.leaf(random_tensor<float>({2}, 20));
  auto orphan = t.leaf(random_tensor<float>({2}, 21));
  auto loss = sum_all(t, x);
  auto grads = t.backward(loss);
  CHECK_FALSE(grads[static_cast<size_t>(orphan.id)].has_value());
  CHECK_THROWS_AS(t.backward(Val{x.id}), DataError);  // non-scalar loss
}

TEST_CASE("tape: consuming a node that does not precede the op is rejected") {
  Tape<float> t;
  auto x = t.leaf(random_tensor<float>({2}, 22));
  CHECK_THROWS_AS(t.push(Tensor<float>({2}), {x.id, 99}, nullptr), DataError);
}

TEST_CASE("equivariance: circular stride-1 primitives are bitwise shift-equivariant at 64-bit") {
  Tensor<double> x = random_tensor<double>({2, 3, 4, 12}, 23);
  Tensor<double> w = random_tensor<double>({5, 3, 3, 3}, 24);
  for (int k : {1, 4, 9}) {
    Tape<double> t;
    auto y = conv2d(t, t.constant(x), t.constant(w), Val{}, 1, 1, PadMode::kCircularWidth);
    auto ys = conv2d(t, t.constant(shift_columns(x, k)), t.constant(w), Val{}, 1, 1,
                     PadMode::kCircularWidth);
    CHECK(max_abs_diff(t.val(ys), shift_columns(t.val(y), k)) == 0.0);

    auto p = maxpool2d(t, t.constant(x), 3, 1, 1, PadMode::kCircularWidth);
    auto ps = maxpool2d(t, t.constant(shift_columns(x, k)), 3, 1, 1, PadMode::kCircularWidth);
    CHECK(max_abs_diff(t.val(ps), shift_columns(t.val(p), k)) == 0.0);

    auto v = vertical_maxpool(t, t.constant(x));
    auto vs = vertical_maxpool(t, t.constant(shift_columns(x, k)));
    CHECK(max_abs_diff(t.val(vs), shift_columns(t.val(v), k)) == 0.0);
  }
}

TEST_CASE("equivariance: 32-bit circular primitives stay within 1e-6") {
  Tensor<float> x = random_tensor<float>({1, 2, 5, 10}, 25);
  Tensor<float> w = random_tensor<float>({4, 2, 3, 3}, 26);
  // He-scale the kernel so activations sit at unit scale like real layers.
  for (auto& v : w.data) v *= std::sqrt(2.0f / (2 * 3 * 3));
  for (int k : {2, 7}) {
    Tape<float> t;
    auto y = conv2d(t, t.constant(x), t.constant(w), Val{}, 1, 1, PadMode::kCircularWidth);
    auto ys = conv2d(t, t.constant(shift_columns(x, k)), t.constant(w), Val{}, 1, 1,
                     PadMode::kCircularWidth);
    CHECK(max_abs_diff(t.val(ys), shift_columns(t.val(y), k)) <= 1e-6);
  }
}

TEST_CASE("equivariance: stride s maps input shifts of s*k to output shifts of k") {
  Tensor<double> x = random_tensor<double>({1, 2, 6, 12}, 27);
  Tensor<double> w = random_tensor<double>({3, 2, 3, 3}, 28);
  int s = 2;
  for (int k : {1, 2, 5}) {
    Tape<double> t;
    auto y = conv2d(t, t.constant(x), t.constant(w), Val{}, 1, s, PadMode::kCircularWidth);
    auto ys = conv2d(t, t.constant(shift_columns(x, s * k)), t.constant(w), Val{}, 1, s,
                     PadMode::kCircularWidth);
    CHECK(max_abs_diff(t.val(ys), shift_columns(t.val(y), k)) == 0.0);
  }
}

TEST_CASE("finite_diff_check: linear map error is near machine epsilon") {
  auto rep = finite_diff_check(
      "linear_map", [](Tape<double>& t, Val x) { return sum_all(t, scale(t, x, 3.0)); },
      random_tensor<double>({4, 3}, 29), 1e-9);
  CHECK(rep.pass);
  CHECK(rep.max_rel_err <= 1e-9);
}

TEST_CASE("finite_diff_check: relu probed away from the kink passes") {
  Tensor<double> x = random_tensor<double>({5, 5}, 30);
  for (auto& v : x.data)
    if (std::abs(v) < 1e-2) v = v < 0 ? v - 1e-2 : v + 1e-2;
  auto rep = finite_diff_check(
      "relu", [](Tape<double>& t, Val v) { return sum_all(t, relu(t, v)); }, x, 1e-6);
  CHECK(rep.pass);
}

TEST_CASE("finite_diff_check: every registered primitive passes at 1e-4") {
  for (const auto& rep : check_all_primitives(31)) {
    INFO(rep.name, " rel_err=", rep.max_rel_err, " analytic=", rep.analytic,
         " numeric=", rep.numeric);
    CHECK(rep.pass);
  }
}

TEST_CASE("primitives keep values finite") {
  Tensor<float> x = random_tensor<float>({2, 3, 4, 8}, 32);
  Tensor<float> w = random_tensor<float>({4, 3, 3, 3}, 33);
  Tape<float> t;
  auto y = conv2d(t, t.constant(x), t.constant(w), Val{}, 2, 2, PadMode::kCircularWidth);
  auto z = softmax_lastdim(t, reshape(t, y, {2 * 4 * 2, 4}));
  CHECK(t.val(y).all_finite());
  CHECK(t.val(z).all_finite());
}
