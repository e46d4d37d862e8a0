#pragma once

#include <string>
#include <vector>

#include "lcpr/fusion.hpp"

namespace lcpr::net {

enum class Variant { kFused, kImageOnly, kLidarOnly };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kFused: return "fused";
    case Variant::kImageOnly: return "image";
    case Variant::kLidarOnly: return "lidar";
  }
  return "?";
}

struct ModelConfig {
  int cameras = 6;
  int image_h = 256, image_w = 704;  // per view
  int range_h = 32, range_w = 1056;
  BranchConfig image_branch{3, 64, {64, 128, 256, 512}, 2};
  BranchConfig lidar_branch{1, 64, {64, 128, 256, 512}, 2};
  std::vector<int> fusion_stages = {2, 3, 4};
  int heads = 4;
  int clusters = 32;
  int d_sub = 128;
  Variant variant = Variant::kFused;

  bool uses_image() const { return variant != Variant::kLidarOnly; }
  bool uses_lidar() const { return variant != Variant::kImageOnly; }
  // Unimodal variants raise the head output to the full descriptor size.
  int head_dim() const { return variant == Variant::kFused ? d_sub : 2 * d_sub; }
  int descriptor_dim() const { return 2 * d_sub; }

  void validate() const {
    image_branch.validate();
    lidar_branch.validate();
    if (cameras < 1 || image_h < 1 || image_w < 1 || range_h < 1 || range_w < 1)
      throw DataError("model config: bad input geometry");
    if (clusters < 1) throw DataError("model config: clusters must be >= 1");
    if (d_sub < 1) throw DataError("model config: d_sub must be >= 1");
    if (image_branch.stage_channels != lidar_branch.stage_channels)
      throw DataError("model config: branch channel plans must agree for fusion");
    for (int s : fusion_stages)
      if (s < 1 || s > image_branch.stages())
        throw DataError("model config: fusion stage " + std::to_string(s) + " out of range");
    if (image_w % image_branch.width_stride() != 0 || range_w % lidar_branch.width_stride() != 0)
      throw DataError("model config: widths must be divisible by the cumulative stride");
  }
};

// Paper-scale layout (nuScenes geometry).
inline ModelConfig default_config() { return ModelConfig{}; }

// Desk-scale layout: quarter channel widths, 64x128 views, 16x256 range.
inline ModelConfig desk_config() {
  ModelConfig c;
  c.image_h = 64;
  c.image_w = 128;
  c.range_h = 16;
  c.range_w = 256;
  c.image_branch = BranchConfig{3, 16, {16, 32, 64, 128}, 2};
  c.lidar_branch = BranchConfig{1, 16, {16, 32, 64, 128}, 2};
  return c;
}

// --------------------------------------------------------------------------
// NetVLAD + MLP head
// --------------------------------------------------------------------------

inline void register_netvlad_params(nd::ParamStore<float>& ps, const std::string& prefix, int c,
                                    int clusters, int out_dim, Rng& rng) {
  nd::Tensor<float> centers({clusters, c});
  for (auto& v : centers.data) v = static_cast<float>(rng.gaussian(0.0, 1.0 / std::sqrt(double(c))));
  ps.create(prefix + ".centers", std::move(centers));
  nd::Tensor<float> aw({clusters, c, 1});
  for (auto& v : aw.data) v = static_cast<float>(rng.gaussian(0.0, std::sqrt(2.0 / c)));
  ps.create(prefix + ".assign.w", std::move(aw));
  ps.create(prefix + ".assign.b", nd::Tensor<float>({clusters}));
  nd::Tensor<float> mw({out_dim, clusters * c});
  for (auto& v : mw.data)
    v = static_cast<float>(rng.gaussian(0.0, std::sqrt(1.0 / (double(clusters) * c))));
  ps.create(prefix + ".mlp.w", std::move(mw));
  ps.create(prefix + ".mlp.b", nd::Tensor<float>({out_dim}));
}

// Soft-assignment VLAD over width positions: a_k(x_i) = softmax_k(w_k.x_i+b_k),
// V_k = sum_i a_k(x_i)(x_i - c_k), intra-normalized per cluster, flattened,
// L2-normalized. Permutation of input columns leaves the output unchanged.
template <typename T>
nd::Val netvlad_forward(GraphCtx<T>& ctx, nd::Val f, const std::string& prefix) {
  nd::Tape<T>& t = ctx.tape;
  nd::Shape s = t.val(f).shape;
  if (s.size() != 3) throw DataError("netvlad: want [B,C,W], got " + nd::shape_str(s));
  int B = s[0], C = s[1], W = s[2];
  if (W < 1) throw DataError("netvlad: empty width");
  nd::Val centers = ctx.p(prefix + ".centers");
  int K = t.val(centers).shape[0];
  if (K < 1) throw DataError("netvlad: no clusters");

  nd::Val logits = nd::conv1d(t, f, ctx.p(prefix + ".assign.w"), ctx.p(prefix + ".assign.b"));
  nd::Val at = nd::softmax_lastdim(t, nd::permute(t, logits, {0, 2, 1}));  // [B,W,K]
  nd::Val a = nd::permute(t, at, {0, 2, 1});                               // [B,K,W]
  nd::Val fp = nd::permute(t, f, {0, 2, 1});                               // [B,W,C]
  nd::Val weighted = nd::bmm(t, a, fp);                                    // [B,K,C]
  nd::Val mass = nd::sum_lastdim(t, a);                                    // [B,K]
  nd::Val centered = nd::mul(t, nd::expand_last(t, mass, C), nd::expand_front(t, centers, B));
  nd::Val v = nd::sub(t, weighted, centered);
  v = nd::l2_normalize_lastdim(t, v);  // intra-normalization
  nd::Val flat = nd::reshape(t, v, {B, K * C});
  return nd::l2_normalize_lastdim(t, flat);
}

// Affine map + L2 normalization; a zero vector cannot be normalized and is
// rejected.
template <typename T>
nd::Val descriptor_head(GraphCtx<T>& ctx, nd::Val vlad, const std::string& prefix) {
  nd::Val y = nd::linear(ctx.tape, vlad, ctx.p(prefix + ".mlp.w"), ctx.p(prefix + ".mlp.b"));
  return nd::l2_normalize_lastdim(ctx.tape, y, 1e-12, /*reject_zero=*/true);
}

// --------------------------------------------------------------------------
// Whole model
// --------------------------------------------------------------------------

inline nd::ParamStore<float> init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  nd::ParamStore<float> ps;
  Rng rng(seed);
  int final_c = cfg.image_branch.stage_channels.back();
  if (cfg.uses_image()) {
    register_branch_params(ps, "ie", cfg.image_branch, rng);
    register_vc_params(ps, "out.vc_i", final_c, rng);
    register_netvlad_params(ps, "head_i", final_c, cfg.clusters, cfg.head_dim(), rng);
  }
  if (cfg.uses_lidar()) {
    register_branch_params(ps, "le", cfg.lidar_branch, rng);
    register_vc_params(ps, "out.vc_l", final_c, rng);
    register_netvlad_params(ps, "head_l", final_c, cfg.clusters, cfg.head_dim(), rng);
  }
  if (cfg.variant == Variant::kFused) {
    for (int s : cfg.fusion_stages) {
      int c = cfg.image_branch.stage_channels[static_cast<size_t>(s - 1)];
      register_vctf_params(ps, "f" + std::to_string(s), c, rng);
    }
  }
  return ps;
}

// images: [B*N,3,H,W] (ignored for the lidar-only variant); range: [B,1,h,w]
// (ignored for image-only). Returns [B, descriptor_dim] unit rows.
template <typename T>
nd::Val model_forward(GraphCtx<T>& ctx, nd::Val images, nd::Val range, const ModelConfig& cfg) {
  nd::Tape<T>& t = ctx.tape;
  int B = -1;
  if (cfg.uses_image()) {
    nd::Shape si = t.val(images).shape;
    if (si.size() != 4 || si[1] != 3 || si[2] != cfg.image_h || si[3] != cfg.image_w)
      throw DataError("model: image batch " + nd::shape_str(si) + " does not match config " +
                      std::to_string(cfg.image_h) + "x" + std::to_string(cfg.image_w));
    if (si[0] % cfg.cameras != 0)
      throw DataError("model: image batch " + std::to_string(si[0]) + " not divisible by rig of " +
                      std::to_string(cfg.cameras));
    B = si[0] / cfg.cameras;
  }
  if (cfg.uses_lidar()) {
    nd::Shape sl = t.val(range).shape;
    if (sl.size() != 4 || sl[1] != 1 || sl[2] != cfg.range_h || sl[3] != cfg.range_w)
      throw DataError("model: range batch " + nd::shape_str(sl) + " does not match config " +
                      std::to_string(cfg.range_h) + "x" + std::to_string(cfg.range_w));
    if (B >= 0 && sl[0] != B)
      throw DataError("model: image batch " + std::to_string(B) + " vs range batch " +
                      std::to_string(sl[0]));
    B = sl[0];
  }

  nd::Val xi, xl;
  if (cfg.uses_image()) xi = branch_stem(ctx, images, "ie");
  if (cfg.uses_lidar()) xl = branch_stem(ctx, range, "le");
  int stages = cfg.image_branch.stages();
  for (int s = 1; s <= stages; ++s) {
    if (cfg.uses_image()) xi = branch_stage(ctx, xi, "ie", cfg.image_branch, s);
    if (cfg.uses_lidar()) xl = branch_stage(ctx, xl, "le", cfg.lidar_branch, s);
    if (cfg.variant == Variant::kFused &&
        std::find(cfg.fusion_stages.begin(), cfg.fusion_stages.end(), s) !=
            cfg.fusion_stages.end()) {
      auto [di, dl] = vctf_forward(ctx, xi, xl, cfg.cameras, "f" + std::to_string(s), cfg.heads);
      xi = nd::add(t, xi, di);
      xl = nd::add(t, xl, dl);
    }
  }

  std::vector<nd::Val> subs;
  if (cfg.uses_image()) {
    nd::Val pano = panoramize_views(ctx, xi, cfg.cameras);
    nd::Val vi = vc_forward(ctx, pano, "out.vc_i");
    subs.push_back(descriptor_head(ctx, netvlad_forward(ctx, vi, "head_i"), "head_i"));
  }
  if (cfg.uses_lidar()) {
    nd::Val vl = vc_forward(ctx, xl, "out.vc_l");
    subs.push_back(descriptor_head(ctx, netvlad_forward(ctx, vl, "head_l"), "head_l"));
  }
  nd::Val d = subs.size() == 2 ? nd::concat_lastdim(t, subs) : subs[0];
  return nd::l2_normalize_lastdim(t, d, 1e-12, /*reject_zero=*/true);
}

// No-grad convenience: descriptors for a batch of samples.
inline nd::Tensor<float> compute_descriptors(nd::ParamStore<float>& params,
                                             const ModelConfig& cfg,
                                             const nd::Tensor<float>& images,
                                             const nd::Tensor<float>& range,
                                             bool training = false) {
  nd::Tape<float> tape;
  tape.grad_enabled = false;
  GraphCtx<float> ctx{tape, params, training};
  nd::Val img = cfg.uses_image() ? tape.constant(images) : nd::Val{};
  nd::Val rng = cfg.uses_lidar() ? tape.constant(range) : nd::Val{};
  return tape.val(model_forward(ctx, img, rng, cfg));
}

// Rebuilds a typed store from a checkpoint against the layout of cfg, so
// trainability flags and shape checks come from the model, not the file.
inline nd::ParamStore<float> params_from_checkpoint(const ModelConfig& cfg,
                                                    const std::string& path) {
  nd::ParamStore<float> ps = init_params(cfg, /*seed=*/0);
  auto entries = nd::load_checkpoint(path);
  size_t used = 0;
  for (const auto& [name, e] : ps.entries()) {
    auto it = entries.find(name);
    if (it == entries.end()) throw DataError("checkpoint: missing entry " + name);
    ps.assign(name, it->second);
    ++used;
  }
  if (used != entries.size())
    throw DataError("checkpoint: file has " + std::to_string(entries.size()) +
                    " entries, model expects " + std::to_string(used));
  return ps;
}

}  // namespace lcpr::net
