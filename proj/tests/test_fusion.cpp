#include "doctest.h"

#include "lcpr/fusion.hpp"
#include "lcpr/model.hpp"

using namespace lcpr;
using namespace lcpr::nd;
using namespace lcpr::net;

namespace {

Tensor<float> random_tensor(Shape s, uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor<float> t(std::move(s));
  for (auto& v : t.data) v = static_cast<float>(scale * rng.gaussian());
  return t;
}

// Identity-configured VC layer: gates saturated to 1, first two 1-D convs
// delta kernels, third conv zeroed so the skip carries the signal.
ParamStore<float> identity_vc_params(int c) {
  ParamStore<float> ps;
  Rng rng(0);
  register_vc_params(ps, "vc", c, rng);
  auto zero = [&](const std::string& n) {
    Tensor<float>& w = ps.get(n);
    std::fill(w.data.begin(), w.data.end(), 0.0f);
  };
  zero("vc.gate1.w");
  zero("vc.gate2.w");
  ps.get("vc.gate1.b") = Tensor<float>::full({c}, 40.0f);
  ps.get("vc.gate2.b") = Tensor<float>::full({c}, 40.0f);
  auto delta = [&](const std::string& n) {
    Tensor<float>& w = ps.get(n);
    std::fill(w.data.begin(), w.data.end(), 0.0f);
    for (int i = 0; i < c; ++i) w.at(i, i, 1) = 1.0f;
  };
  delta("vc.c1.w");
  delta("vc.c2.w");
  zero("vc.c3.w");
  return ps;
}

}  // namespace

TEST_CASE("vc: identity configuration reproduces the input row") {
  int c = 3, w = 7;
  ParamStore<float> ps = identity_vc_params(c);
  Tape<float> t;
  GraphCtx<float> ctx{t, ps, false};
  Tensor<float> x({1, c, 1, w});
  Rng rng(60);
  for (auto& v : x.data) v = static_cast<float>(rng.uniform(0.05, 2.0));  // nonnegative
  Val y = vc_forward(ctx, t.constant(x), "vc");
  CHECK(t.val(y).shape == Shape{1, c, w});
  CHECK(max_abs_diff(t.val(y), Tensor<float>({1, c, w}, x.data)) <= 1e-4);
}

TEST_CASE("vc: constant-in-height input reduces to the per-column constant") {
  int c = 2, h = 5, w = 6;
  ParamStore<float> ps = identity_vc_params(c);
  Tape<float> t;
  GraphCtx<float> ctx{t, ps, false};
  Tensor<float> x({1, c, h, w});
  Rng rng(61);
  for (int ci = 0; ci < c; ++ci)
    for (int wi = 0; wi < w; ++wi) {
      float val = static_cast<float>(rng.uniform(0.05, 1.5));
      for (int hi = 0; hi < h; ++hi) x.at(0, ci, hi, wi) = val;
    }
  Val y = vc_forward(ctx, t.constant(x), "vc");
  for (int ci = 0; ci < c; ++ci)
    for (int wi = 0; wi < w; ++wi)
      CHECK(t.val(y).at(0, ci, wi) == doctest::Approx(x.at(0, ci, 0, wi)).epsilon(1e-4));
}

TEST_CASE("vc: column-shift equivariance at stride 1") {
  int c = 8;
  ParamStore<float> ps;
  Rng rng(62);
  register_vc_params(ps, "vc", c, rng);
  Tensor<float> x = random_tensor({2, c, 4, 12}, 63, 0.5);
  auto forward = [&](const Tensor<float>& in) {
    Tape<float> t;
    GraphCtx<float> ctx{t, ps, false};
    return t.val(vc_forward(ctx, t.constant(in), "vc"));
  };
  Tensor<float> base = forward(x);
  for (int k : {1, 5, 11})
    CHECK(max_abs_diff(forward(shift_columns(x, k)), shift_columns(base, k)) <= 1e-5);
}

TEST_CASE("mhsa: single position passes through value and output projections") {
  int c = 4;
  ParamStore<float> ps;
  Rng rng(64);
  register_mhsa_params(ps, "m", c, rng);
  Tape<float> t;
  GraphCtx<float> ctx{t, ps, false};
  Tensor<float> x = random_tensor({1, c, 1}, 65);
  Val y = mhsa(ctx, t.constant(x), "m", 2);
  // softmax over one key is 1, so out = wo . (wv . x)
  const Tensor<float>& wv = ps.get("m.wv");
  const Tensor<float>& wo = ps.get("m.wo");
  std::vector<float> v(static_cast<size_t>(c));
  for (int i = 0; i < c; ++i) {
    float s = 0;
    for (int j = 0; j < c; ++j) s += wv.at(i, j) * x.at(0, j, 0);
    v[static_cast<size_t>(i)] = s;
  }
  for (int i = 0; i < c; ++i) {
    float s = 0;
    for (int j = 0; j < c; ++j) s += wo.at(i, j) * v[static_cast<size_t>(j)];
    CHECK(t.val(y).at(0, i, 0) == doctest::Approx(s).epsilon(1e-5));
  }
}

TEST_CASE("mhsa: zero query weights give uniform attention, outputs equal the mean value") {
  int c = 6, L = 9;
  ParamStore<float> ps;
  Rng rng(66);
  register_mhsa_params(ps, "m", c, rng);
  Tensor<float>& wq = ps.get("m.wq");
  std::fill(wq.data.begin(), wq.data.end(), 0.0f);
  Tape<float> t;
  GraphCtx<float> ctx{t, ps, false};
  Tensor<float> x = random_tensor({1, c, L}, 67);
  Val y = mhsa(ctx, t.constant(x), "m", 3);
  for (int i = 0; i < c; ++i) {
    double ref = t.val(y).at(0, i, 0);
    for (int l = 1; l < L; ++l) CHECK(t.val(y).at(0, i, l) == doctest::Approx(ref).epsilon(1e-5));
  }
}

TEST_CASE("mhsa: L=2 d=1 single head matches the hand computation") {
  ParamStore<float> ps;
  ps.create("m.wq", Tensor<float>({1, 1}, {0.5f}));
  ps.create("m.wk", Tensor<float>({1, 1}, {-1.0f}));
  ps.create("m.wv", Tensor<float>({1, 1}, {2.0f}));
  ps.create("m.wo", Tensor<float>({1, 1}, {0.25f}));
  Tape<float> t;
  GraphCtx<float> ctx{t, ps, false};
  Tensor<float> x({1, 1, 2});
  x.data = {1.0f, 3.0f};
  Val y = mhsa(ctx, t.constant(x), "m", 1);
  // q = [0.5, 1.5], k = [-1, -3], v = [2, 6]; scores_ij = q_i*k_j
  // row 0: softmax([-0.5, -1.5]) -> a = e^1/(e^1+1) on key 0
  double a0 = std::exp(1.0) / (std::exp(1.0) + 1.0);
  double out0 = 0.25 * (a0 * 2.0 + (1 - a0) * 6.0);
  // row 1: softmax([-1.5, -4.5])
  double a1 = std::exp(3.0) / (std::exp(3.0) + 1.0);
  double out1 = 0.25 * (a1 * 2.0 + (1 - a1) * 6.0);
  CHECK(t.val(y).at(0, 0, 0) == doctest::Approx(out0).epsilon(1e-5));
  CHECK(t.val(y).at(0, 0, 1) == doctest::Approx(out1).epsilon(1e-5));
}

TEST_CASE("mhsa: attention rows sum to one; empty sequence and bad heads rejected") {
  int c = 8, L = 11;
  ParamStore<float> ps;
  Rng rng(68);
  register_mhsa_params(ps, "m", c, rng);
  Tape<float> t;
  GraphCtx<float> ctx{t, ps, false};
  Tensor<float> x = random_tensor({2, c, L}, 69);
  Tensor<float> probs = mhsa_attention_rows(ctx, t.constant(x), "m", 4);
  for (int r = 0; r < probs.shape[0] * probs.shape[1]; ++r) {
    double s = 0;
    for (int k = 0; k < L; ++k) s += probs.data[static_cast<size_t>(r) * L + k];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
  CHECK_THROWS_AS(mhsa(ctx, t.constant(Tensor<float>({1, 8, 0})), "m", 4), DataError);
  CHECK_THROWS_AS(mhsa(ctx, t.constant(x), "m", 3), DataError);
}

TEST_CASE("mhsa: independent block shifts of both segments are preserved") {
  // The executable form of the block-column-shift derivation: shift the image
  // segment and the lidar segment independently; outputs shift identically.
  int c = 8, wi = 10, wl = 6;
  ParamStore<float> ps;
  Rng rng(70);
  register_mhsa_params(ps, "m", c, rng);
  Tensor<float> xi = random_tensor({1, c, wi}, 71, 0.7);
  Tensor<float> xl = random_tensor({1, c, wl}, 72, 0.7);

  auto forward = [&](const Tensor<float>& a, const Tensor<float>& b) {
    Tape<float> t;
    GraphCtx<float> ctx{t, ps, false};
    Val fs = concat_lastdim(t, {t.constant(a), t.constant(b)});
    Val y = mhsa(ctx, fs, "m", 4);
    Tensor<float> out = t.val(y);
    Tensor<float> si({1, c, wi}), sl({1, c, wl});
    for (int ci = 0; ci < c; ++ci) {
      for (int i = 0; i < wi; ++i) si.at(0, ci, i) = out.at(0, ci, i);
      for (int i = 0; i < wl; ++i) sl.at(0, ci, i) = out.at(0, ci, wi + i);
    }
    return std::pair{si, sl};
  };

  auto [yi, yl] = forward(xi, xl);
  for (auto [ki, kl] : {std::pair{1, 0}, std::pair{0, 3}, std::pair{4, 2}}) {
    auto [si, sl] = forward(shift_columns(xi, ki), shift_columns(xl, kl));
    CHECK(max_abs_diff(si, shift_columns(yi, ki)) <= 1e-5);
    CHECK(max_abs_diff(sl, shift_columns(yl, kl)) <= 1e-5);
  }
}

TEST_CASE("vctf: zeroed output projection makes fusion a no-op") {
  ModelConfig cfg = desk_config();
  ParamStore<float> ps = init_params(cfg, 73);
  Tensor<float>& wo = ps.get("f3.mhsa.wo");
  std::fill(wo.data.begin(), wo.data.end(), 0.0f);
  Tape<float> t;
  GraphCtx<float> ctx{t, ps, false};
  // Stage-3 geometry: image 8x16 per view at 64 channels, lidar 2x32.
  Tensor<float> fi = random_tensor({6, 64, 8, 16}, 74, 0.5);
  Tensor<float> fl = random_tensor({1, 64, 2, 32}, 75, 0.5);
  auto [di, dl] = vctf_forward(ctx, t.constant(fi), t.constant(fl), 6, "f3", cfg.heads);
  CHECK(t.val(di).shape == fi.shape);
  CHECK(t.val(dl).shape == fl.shape);
  for (float v : t.val(di).data) CHECK(v == 0.0f);
  for (float v : t.val(dl).data) CHECK(v == 0.0f);
}

TEST_CASE("vctf: sentence width splits at N*Wi (default scale: 165 = 132 + 33)") {
  int n = 6, wi = 22, wl = 33;
  CHECK(n * wi + wl == 165);
  ModelConfig cfg = desk_config();
  ParamStore<float> ps = init_params(cfg, 76);
  Tape<float> t;
  GraphCtx<float> ctx{t, ps, false};
  Tensor<float> fi = random_tensor({6, 128, 2, 4}, 77, 0.5);
  Tensor<float> fl = random_tensor({1, 128, 1, 8}, 78, 0.5);
  auto [di, dl] = vctf_forward(ctx, t.constant(fi), t.constant(fl), 6, "f4", cfg.heads);
  CHECK(t.val(di).shape == Shape{6, 128, 2, 4});
  CHECK(t.val(dl).shape == Shape{1, 128, 1, 8});
  // Mismatched widths are a config error.
  CHECK_THROWS_AS(vctf_forward(ctx, t.constant(fi), t.constant(random_tensor({2, 128, 1, 8}, 79)),
                               6, "f4", cfg.heads),
                  DataError);
}

TEST_CASE("vctf: joint block shifts carry through to the deltas") {
  ModelConfig cfg = desk_config();
  ParamStore<float> ps = init_params(cfg, 80);
  int cams = 6;
  Tensor<float> fi = random_tensor({cams, 64, 4, 8}, 81, 0.5);  // stage-3 like, B=1
  Tensor<float> fl = random_tensor({1, 64, 2, 32}, 82, 0.5);

  // Work on the panoramic arrangement so arbitrary column shifts are exact.
  auto forward = [&](const Tensor<float>& pano_i, const Tensor<float>& lid) {
    Tape<float> t;
    GraphCtx<float> ctx{t, ps, false};
    Val pano = t.constant(pano_i);
    Val views = unpanoramize_views(ctx, pano, cams);
    auto [di, dl] = vctf_forward(ctx, views, t.constant(lid), cams, "f3", cfg.heads);
    Val dpi = panoramize_views(ctx, di, cams);
    return std::pair{t.val(dpi), t.val(dl)};
  };

  Tape<float> t0;
  GraphCtx<float> c0{t0, ps, false};
  Tensor<float> pano0 = t0.val(panoramize_views(c0, t0.constant(fi), cams));

  auto [d0, l0] = forward(pano0, fl);
  for (auto [ki, kl] : {std::pair{3, 8}, std::pair{17, 1}}) {
    auto [d1, l1] = forward(shift_columns(pano0, ki), shift_columns(fl, kl));
    CHECK(max_abs_diff(d1, shift_columns(d0, ki)) <= 1e-5);
    CHECK(max_abs_diff(l1, shift_columns(l0, kl)) <= 1e-5);
  }
}
