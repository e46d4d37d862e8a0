#pragma once

#include <string>
#include <utility>

#include "lcpr/backbone.hpp"

namespace lcpr::net {

// --------------------------------------------------------------------------
// Vertical Compression layer: two multiplicative sigmoid gates (each a 1x1
// convolution feeding a sigmoid that scales the features), full-height max
// pool, then three circular 1-D convolutions (BN+ReLU) with a skip from the
// first conv block into the third conv's pre-norm sum. Channels and width
// are preserved throughout (stride 1).
// --------------------------------------------------------------------------

inline void register_vc_params(nd::ParamStore<float>& ps, const std::string& prefix, int c,
                               Rng& rng) {
  ps.create(prefix + ".gate1.w", detail::he_conv(rng, c, c, 1, 1));
  ps.create(prefix + ".gate1.b", nd::Tensor<float>({c}));
  ps.create(prefix + ".gate2.w", detail::he_conv(rng, c, c, 1, 1));
  ps.create(prefix + ".gate2.b", nd::Tensor<float>({c}));
  for (const char* name : {".c1", ".c2", ".c3"}) {
    nd::Tensor<float> w({c, c, 3});
    double std = std::sqrt(2.0 / (static_cast<double>(c) * 3));
    for (auto& v : w.data) v = static_cast<float>(rng.gaussian(0.0, std));
    ps.create(prefix + name + ".w", std::move(w));
    detail::register_bn(ps, prefix + name + ".bn", c);
  }
}

template <typename T>
nd::Val vc_forward(GraphCtx<T>& ctx, nd::Val x, const std::string& prefix) {
  nd::Tape<T>& t = ctx.tape;
  const nd::Shape& s = t.val(x).shape;
  if (s.size() != 4) throw DataError("vc: want [B,C,H,W], got " + nd::shape_str(s));
  nd::Val g1 = nd::sigmoid(t, nd::conv2d(t, x, ctx.p(prefix + ".gate1.w"),
                                         ctx.p(prefix + ".gate1.b"), 1, 1,
                                         nd::PadMode::kCircularWidth));
  nd::Val h = nd::mul(t, x, g1);
  nd::Val g2 = nd::sigmoid(t, nd::conv2d(t, h, ctx.p(prefix + ".gate2.w"),
                                         ctx.p(prefix + ".gate2.b"), 1, 1,
                                         nd::PadMode::kCircularWidth));
  h = nd::mul(t, h, g2);
  nd::Val p = nd::vertical_maxpool(t, h);  // [B,C,W]
  nd::Val a = nd::conv1d(t, p, ctx.p(prefix + ".c1.w"), nd::Val{});
  a = nd::relu(t, apply_bn(ctx, a, prefix + ".c1.bn"));
  nd::Val b = nd::conv1d(t, a, ctx.p(prefix + ".c2.w"), nd::Val{});
  b = nd::relu(t, apply_bn(ctx, b, prefix + ".c2.bn"));
  nd::Val c3 = nd::conv1d(t, b, ctx.p(prefix + ".c3.w"), nd::Val{});
  c3 = nd::add(t, c3, a);  // skip: first 1-D conv block into the third
  return nd::relu(t, apply_bn(ctx, c3, prefix + ".c3.bn"));
}

// --------------------------------------------------------------------------
// Multi-head self-attention over width positions of [B,C,L]; d_model = C,
// per-head dimension C/heads, no positional encoding (any absolute encoding
// would break column-shift equivariance).
// --------------------------------------------------------------------------

inline void register_mhsa_params(nd::ParamStore<float>& ps, const std::string& prefix, int c,
                                 Rng& rng) {
  for (const char* name : {".wq", ".wk", ".wv", ".wo"}) {
    nd::Tensor<float> w({c, c});
    double std = std::sqrt(1.0 / static_cast<double>(c));
    for (auto& v : w.data) v = static_cast<float>(rng.gaussian(0.0, std));
    ps.create(prefix + name, std::move(w));
  }
}

template <typename T>
nd::Val mhsa(GraphCtx<T>& ctx, nd::Val x, const std::string& prefix, int heads) {
  nd::Tape<T>& t = ctx.tape;
  nd::Shape s = t.val(x).shape;
  if (s.size() != 3) throw DataError("mhsa: want [B,C,L], got " + nd::shape_str(s));
  int B = s[0], C = s[1], L = s[2];
  if (L < 1) throw DataError("mhsa: empty sequence");
  if (heads < 1 || C % heads != 0)
    throw DataError("mhsa: d_model " + std::to_string(C) + " not divisible by heads " +
                    std::to_string(heads));
  int dh = C / heads;

  nd::Val xt = nd::permute(t, x, {0, 2, 1});  // [B,L,C]
  auto split_heads = [&](nd::Val v) {
    v = nd::reshape(t, v, {B, L, heads, dh});
    v = nd::permute(t, v, {0, 2, 1, 3});  // [B,h,L,dh]
    return nd::reshape(t, v, {B * heads, L, dh});
  };
  nd::Val q = split_heads(nd::linear(t, xt, ctx.p(prefix + ".wq")));
  nd::Val k = split_heads(nd::linear(t, xt, ctx.p(prefix + ".wk")));
  nd::Val v = split_heads(nd::linear(t, xt, ctx.p(prefix + ".wv")));

  nd::Val scores = nd::scale(t, nd::bmm(t, q, k, false, true), 1.0 / std::sqrt(double(dh)));
  nd::Val probs = nd::softmax_lastdim(t, scores);  // [B*h,L,L]
  nd::Val av = nd::bmm(t, probs, v);               // [B*h,L,dh]
  av = nd::reshape(t, av, {B, heads, L, dh});
  av = nd::permute(t, av, {0, 2, 1, 3});
  av = nd::reshape(t, av, {B, L, C});
  nd::Val out = nd::linear(t, av, ctx.p(prefix + ".wo"));
  return nd::permute(t, out, {0, 2, 1});  // [B,C,L]
}

// Attention probabilities for one input, for tests that assert row sums.
template <typename T>
nd::Tensor<T> mhsa_attention_rows(GraphCtx<T>& ctx, nd::Val x, const std::string& prefix,
                                  int heads) {
  nd::Tape<T>& t = ctx.tape;
  nd::Shape s = t.val(x).shape;
  int B = s[0], C = s[1], L = s[2];
  int dh = C / heads;
  nd::Val xt = nd::permute(t, x, {0, 2, 1});
  auto split_heads = [&](nd::Val v) {
    v = nd::reshape(t, v, {B, L, heads, dh});
    v = nd::permute(t, v, {0, 2, 1, 3});
    return nd::reshape(t, v, {B * heads, L, dh});
  };
  nd::Val q = split_heads(nd::linear(t, xt, ctx.p(prefix + ".wq")));
  nd::Val k = split_heads(nd::linear(t, xt, ctx.p(prefix + ".wk")));
  nd::Val scores = nd::scale(t, nd::bmm(t, q, k, false, true), 1.0 / std::sqrt(double(dh)));
  return t.val(nd::softmax_lastdim(t, scores));
}

// --------------------------------------------------------------------------
// VCTF: panoramic concat of per-view image features, vertical compression of
// both modalities, width-wise concat into the sentence feature, self
// attention, split, height expansion. Returns per-branch additive deltas
// with the branches' original shapes.
// --------------------------------------------------------------------------

inline void register_vctf_params(nd::ParamStore<float>& ps, const std::string& prefix, int c,
                                 Rng& rng) {
  register_vc_params(ps, prefix + ".vc_i", c, rng);
  register_vc_params(ps, prefix + ".vc_l", c, rng);
  register_mhsa_params(ps, prefix + ".mhsa", c, rng);
}

// [B*N,C,H,W] -> [B,C,H,N*W]
template <typename T>
nd::Val panoramize_views(GraphCtx<T>& ctx, nd::Val f_img, int cameras) {
  nd::Tape<T>& t = ctx.tape;
  nd::Shape s = t.val(f_img).shape;
  if (s.size() != 4 || s[0] % cameras != 0)
    throw DataError("panoramize: batch " + nd::shape_str(s) + " not divisible by " +
                    std::to_string(cameras) + " cameras");
  int B = s[0] / cameras, C = s[1], H = s[2], W = s[3];
  nd::Val v = nd::reshape(t, f_img, {B, cameras, C, H, W});
  v = nd::permute(t, v, {0, 2, 3, 1, 4});
  return nd::reshape(t, v, {B, C, H, cameras * W});
}

// [B,C,H,N*W] -> [B*N,C,H,W]
template <typename T>
nd::Val unpanoramize_views(GraphCtx<T>& ctx, nd::Val pano, int cameras) {
  nd::Tape<T>& t = ctx.tape;
  nd::Shape s = t.val(pano).shape;
  int B = s[0], C = s[1], H = s[2], W = s[3] / cameras;
  nd::Val v = nd::reshape(t, pano, {B, C, H, cameras, W});
  v = nd::permute(t, v, {0, 3, 1, 2, 4});
  return nd::reshape(t, v, {B * cameras, C, H, W});
}

template <typename T>
std::pair<nd::Val, nd::Val> vctf_forward(GraphCtx<T>& ctx, nd::Val f_img, nd::Val f_lid,
                                         int cameras, const std::string& prefix, int heads) {
  nd::Tape<T>& t = ctx.tape;
  nd::Shape si = t.val(f_img).shape, sl = t.val(f_lid).shape;
  if (si.size() != 4 || sl.size() != 4 || si[1] != sl[1])
    throw DataError("vctf: incompatible features " + nd::shape_str(si) + " / " +
                    nd::shape_str(sl));
  if (si[0] != sl[0] * cameras)
    throw DataError("vctf: image batch " + std::to_string(si[0]) + " vs lidar batch " +
                    std::to_string(sl[0]) + " with " + std::to_string(cameras) + " cameras");
  int Hi = si[2], Wi = si[3], Hl = sl[2], Wl = sl[3];
  int wi_total = cameras * Wi;

  nd::Val pano = panoramize_views(ctx, f_img, cameras);
  nd::Val vi = vc_forward(ctx, pano, prefix + ".vc_i");   // [B,C,N*Wi]
  nd::Val vl = vc_forward(ctx, f_lid, prefix + ".vc_l");  // [B,C,Wl]
  nd::Val fs = nd::concat_lastdim(t, {vi, vl});           // [B,C,N*Wi+Wl]
  nd::Val fused = mhsa(ctx, fs, prefix + ".mhsa", heads);

  nd::Val seg_i = nd::slice_lastdim(t, fused, 0, wi_total);
  nd::Val seg_l = nd::slice_lastdim(t, fused, wi_total, Wl);
  nd::Val delta_i = unpanoramize_views(ctx, nd::broadcast_height(t, seg_i, Hi), cameras);
  nd::Val delta_l = nd::broadcast_height(t, seg_l, Hl);
  return {delta_i, delta_l};
}

}  // namespace lcpr::net
