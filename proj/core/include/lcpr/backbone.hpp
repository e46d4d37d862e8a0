#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "lcpr/ops.hpp"
#include "lcpr/params.hpp"
#include "lcpr/rng.hpp"

namespace lcpr::net {

// Shared context for one forward/backward pass: binds store entries to tape
// leaves on first use and hands out mutable running statistics.
template <typename T>
struct GraphCtx {
  nd::Tape<T>& tape;
  nd::ParamStore<T>& params;
  bool training = false;

  GraphCtx(nd::Tape<T>& t, nd::ParamStore<T>& ps, bool train) : tape(t), params(ps), training(train) {}

  nd::Val p(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    nd::Val v = params.trainable(name) ? tape.leaf(params.get(name))
                                       : tape.constant(params.get(name));
    bound_.emplace(name, v);
    return v;
  }

  nd::Tensor<T>& state(const std::string& name) { return params.get(name); }

  const std::unordered_map<std::string, nd::Val>& bound() const { return bound_; }

 private:
  std::unordered_map<std::string, nd::Val> bound_;
};

// ResNet-18 style layout: 7x7/2 stem with 3x3/2 max pool, then four stages
// of residual units; stages past the first halve both extents. Width uses
// circular padding throughout, height zero padding.
struct BranchConfig {
  int in_channels = 3;
  int stem_channels = 64;
  std::vector<int> stage_channels = {64, 128, 256, 512};
  int units_per_stage = 2;

  int stages() const { return static_cast<int>(stage_channels.size()); }

  // Cumulative width downsampling from the input through stage s (1-based).
  int width_stride(int stage) const {
    int s = 4;  // stem conv + pool
    for (int i = 2; i <= stage; ++i) s *= 2;
    return s;
  }
  int width_stride() const { return width_stride(stages()); }

  void validate() const {
    if (in_channels < 1 || stem_channels < 1 || stage_channels.empty() || units_per_stage < 1)
      throw DataError("branch config: bad layout");
    int s = width_stride();
    if ((s & (s - 1)) != 0) throw DataError("branch config: width stride must be a power of 2");
  }
};

namespace detail {

inline nd::Tensor<float> he_conv(Rng& rng, int cout, int cin, int kh, int kw) {
  nd::Tensor<float> w({cout, cin, kh, kw});
  double std = std::sqrt(2.0 / (static_cast<double>(cin) * kh * kw));
  for (auto& v : w.data) v = static_cast<float>(rng.gaussian(0.0, std));
  return w;
}

inline void register_bn(nd::ParamStore<float>& ps, const std::string& prefix, int c) {
  ps.create(prefix + ".gamma", nd::Tensor<float>::full({c}, 1.0f));
  ps.create(prefix + ".beta", nd::Tensor<float>({c}));
  ps.create(prefix + ".mean", nd::Tensor<float>({c}), /*trainable=*/false);
  ps.create(prefix + ".var", nd::Tensor<float>::full({c}, 1.0f), /*trainable=*/false);
}

}  // namespace detail

template <typename T>
nd::Val apply_bn(GraphCtx<T>& ctx, nd::Val x, const std::string& prefix) {
  return nd::batchnorm(ctx.tape, x, ctx.p(prefix + ".gamma"), ctx.p(prefix + ".beta"),
                       &ctx.state(prefix + ".mean"), &ctx.state(prefix + ".var"), ctx.training);
}

// y = relu(shortcut(x) + bn2(conv2(relu(bn1(conv1(x)))))). The projection
// shortcut exists iff channels or stride change; use_bn=false gives the bare
// algebraic unit.
template <typename T>
nd::Val residual_unit(GraphCtx<T>& ctx, nd::Val x, const std::string& prefix, int stride_h,
                      int stride_w, bool use_bn = true) {
  nd::Tape<T>& t = ctx.tape;
  nd::Val h = nd::conv2d(t, x, ctx.p(prefix + ".conv1.w"), nd::Val{}, stride_h, stride_w,
                         nd::PadMode::kCircularWidth);
  if (use_bn) h = apply_bn(ctx, h, prefix + ".bn1");
  h = nd::relu(t, h);
  h = nd::conv2d(t, h, ctx.p(prefix + ".conv2.w"), nd::Val{}, 1, 1, nd::PadMode::kCircularWidth);
  if (use_bn) h = apply_bn(ctx, h, prefix + ".bn2");
  nd::Val sc = x;
  if (ctx.params.contains(prefix + ".short.w")) {
    sc = nd::conv2d(t, x, ctx.p(prefix + ".short.w"), nd::Val{}, stride_h, stride_w,
                    nd::PadMode::kCircularWidth);
    if (use_bn) sc = apply_bn(ctx, sc, prefix + ".shortbn");
  }
  return nd::relu(t, nd::add(t, sc, h));
}

inline void register_branch_params(nd::ParamStore<float>& ps, const std::string& prefix,
                                   const BranchConfig& cfg, Rng& rng) {
  cfg.validate();
  ps.create(prefix + ".stem.conv.w", detail::he_conv(rng, cfg.stem_channels, cfg.in_channels, 7, 7));
  detail::register_bn(ps, prefix + ".stem.bn", cfg.stem_channels);
  int in_c = cfg.stem_channels;
  for (int s = 1; s <= cfg.stages(); ++s) {
    int out_c = cfg.stage_channels[static_cast<size_t>(s - 1)];
    for (int u = 0; u < cfg.units_per_stage; ++u) {
      std::string up = prefix + ".s" + std::to_string(s) + ".u" + std::to_string(u);
      int uin = u == 0 ? in_c : out_c;
      bool strided = s > 1 && u == 0;
      ps.create(up + ".conv1.w", detail::he_conv(rng, out_c, uin, 3, 3));
      detail::register_bn(ps, up + ".bn1", out_c);
      ps.create(up + ".conv2.w", detail::he_conv(rng, out_c, out_c, 3, 3));
      detail::register_bn(ps, up + ".bn2", out_c);
      if (uin != out_c || strided) {
        ps.create(up + ".short.w", detail::he_conv(rng, out_c, uin, 1, 1));
        detail::register_bn(ps, up + ".shortbn", out_c);
      }
    }
    in_c = out_c;
  }
}

template <typename T>
nd::Val branch_stem(GraphCtx<T>& ctx, nd::Val x, const std::string& prefix) {
  nd::Tape<T>& t = ctx.tape;
  nd::Val h = nd::conv2d(t, x, ctx.p(prefix + ".stem.conv.w"), nd::Val{}, 2, 2,
                         nd::PadMode::kCircularWidth);
  h = apply_bn(ctx, h, prefix + ".stem.bn");
  h = nd::relu(t, h);
  return nd::maxpool2d(t, h, 3, 2, 2, nd::PadMode::kCircularWidth);
}

template <typename T>
nd::Val branch_stage(GraphCtx<T>& ctx, nd::Val x, const std::string& prefix,
                     const BranchConfig& cfg, int stage) {
  nd::Val h = x;
  for (int u = 0; u < cfg.units_per_stage; ++u) {
    std::string up = prefix + ".s" + std::to_string(stage) + ".u" + std::to_string(u);
    int sh = (stage > 1 && u == 0) ? 2 : 1;
    h = residual_unit(ctx, h, up, sh, sh);
  }
  return h;
}

// Full branch without fusion; returns one feature volume per stage.
template <typename T>
std::vector<nd::Val> branch_forward(GraphCtx<T>& ctx, nd::Val x, const std::string& prefix,
                                    const BranchConfig& cfg) {
  const nd::Shape& s = ctx.tape.val(x).shape;
  if (s.size() != 4 || s[1] != cfg.in_channels)
    throw DataError("branch: want [B," + std::to_string(cfg.in_channels) + ",H,W], got " +
                    nd::shape_str(s));
  std::vector<nd::Val> stages;
  nd::Val h = branch_stem(ctx, x, prefix);
  for (int st = 1; st <= cfg.stages(); ++st) {
    h = branch_stage(ctx, h, prefix, cfg, st);
    stages.push_back(h);
  }
  return stages;
}

}  // namespace lcpr::net
