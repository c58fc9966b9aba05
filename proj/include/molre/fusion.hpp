#pragma once

#include <utility>
#include <vector>

#include "molre/errors.hpp"
#include "molre/tensor.hpp"

namespace molre {

struct AttentionProj {
  Tensor wq, bq;  // d x d, d
  Tensor wk, bk;
  Tensor wv, bv;
};

struct FfnParams {
  Tensor w1, b1;  // d x d_ff, d_ff
  Tensor w2, b2;  // d_ff x d, d
};

/// One fusion layer: bidirectional cross-attention, per-modality
/// self-attention, per-modality pointwise FFN. Every attention instance has
/// its own projections.
struct FusionLayerParams {
  AttentionProj cross_text;   // text queries audio
  AttentionProj cross_audio;  // audio queries text
  AttentionProj self_text;
  AttentionProj self_audio;
  FfnParams ffn_text;
  FfnParams ffn_audio;
};

struct FusionParams {
  std::vector<FusionLayerParams> layers;
  Tensor cls_text;   // 1 x d
  Tensor cls_audio;  // 1 x d
  bool prenorm = false;

  std::size_t d() const { return cls_text.defined() ? cls_text.shape()[1] : 0; }
};

namespace detail {

inline AttentionProj make_attention_proj(std::size_t d, Rng& rng) {
  AttentionProj p;
  p.wq = Tensor::fan_in_uniform({d, d}, d, rng);
  p.bq = Tensor::zeros({d});
  p.wk = Tensor::fan_in_uniform({d, d}, d, rng);
  p.bk = Tensor::zeros({d});
  p.wv = Tensor::fan_in_uniform({d, d}, d, rng);
  p.bv = Tensor::zeros({d});
  return p;
}

inline FfnParams make_ffn_params(std::size_t d, std::size_t d_ff, Rng& rng) {
  FfnParams p;
  p.w1 = Tensor::fan_in_uniform({d, d_ff}, d, rng);
  p.b1 = Tensor::zeros({d_ff});
  p.w2 = Tensor::fan_in_uniform({d_ff, d}, d_ff, rng);
  p.b2 = Tensor::zeros({d});
  return p;
}

inline Tensor project(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_bias(matmul(x, w), b);
}

inline Tensor ffn_forward(const Tensor& x, const FfnParams& p) {
  return project(relu(project(x, p.w1, p.b1)), p.w2, p.b2);
}

inline const Tensor& maybe_norm(const Tensor& x, Tensor& scratch, bool prenorm) {
  if (!prenorm) return x;
  scratch = layer_norm(x);
  return scratch;
}

}  // namespace detail

inline FusionParams make_fusion_params(std::size_t d, std::size_t d_ff, std::size_t layers,
                                       bool prenorm, Rng& rng) {
  FusionParams p;
  p.prenorm = prenorm;
  for (std::size_t l = 0; l < layers; ++l) {
    FusionLayerParams lp;
    lp.cross_text = detail::make_attention_proj(d, rng);
    lp.cross_audio = detail::make_attention_proj(d, rng);
    lp.self_text = detail::make_attention_proj(d, rng);
    lp.self_audio = detail::make_attention_proj(d, rng);
    lp.ffn_text = detail::make_ffn_params(d, d_ff, rng);
    lp.ffn_audio = detail::make_ffn_params(d, d_ff, rng);
    p.layers.push_back(std::move(lp));
  }
  p.cls_text = Tensor::fan_in_uniform({1, d}, d, rng);
  p.cls_audio = Tensor::fan_in_uniform({1, d}, d, rng);
  return p;
}

/// Puts the cls embedding at row 0; the sequence follows unchanged.
inline Tensor prepend_cls(const Tensor& h, const Tensor& cls) {
  detail::check_defined("prepend_cls", cls);
  if (cls.rank() != 2 || cls.shape()[0] != 1) {
    throw ShapeError("prepend_cls: cls must be 1 x d, got " + detail::shape_str(cls.shape()));
  }
  if (h.rank() != 2 || h.shape()[1] != cls.shape()[1]) {
    throw ShapeError("prepend_cls: sequence width " + detail::shape_str(h.shape()) +
                     " does not match cls width " + detail::shape_str(cls.shape()));
  }
  if (h.shape()[0] == 0) return reshape(cls, cls.shape());
  return concat({cls, h}, 0);
}

/// Each modality attends to the other; both outputs carry a residual
/// connection from their own input.
inline std::pair<Tensor, Tensor> cross_attention_pair(const Tensor& h_t, const Tensor& h_a,
                                                      const FusionLayerParams& p,
                                                      bool prenorm = false) {
  Tensor nt_scratch, na_scratch;
  const Tensor& nt = detail::maybe_norm(h_t, nt_scratch, prenorm);
  const Tensor& na = detail::maybe_norm(h_a, na_scratch, prenorm);
  Tensor z_t = add(h_t, attention(detail::project(nt, p.cross_text.wq, p.cross_text.bq),
                                  detail::project(na, p.cross_text.wk, p.cross_text.bk),
                                  detail::project(na, p.cross_text.wv, p.cross_text.bv)));
  Tensor z_a = add(h_a, attention(detail::project(na, p.cross_audio.wq, p.cross_audio.bq),
                                  detail::project(nt, p.cross_audio.wk, p.cross_audio.bk),
                                  detail::project(nt, p.cross_audio.wv, p.cross_audio.bv)));
  return {std::move(z_t), std::move(z_a)};
}

/// Cross-attention pair, per-modality self-attention, per-modality FFN;
/// each sub-step is wrapped in a residual connection.
inline std::pair<Tensor, Tensor> fusion_layer(const Tensor& h_t, const Tensor& h_a,
                                              const FusionLayerParams& p, bool prenorm = false) {
  auto [u_t, u_a] = cross_attention_pair(h_t, h_a, p, prenorm);

  Tensor nt_scratch, na_scratch;
  {
    const Tensor& nt = detail::maybe_norm(u_t, nt_scratch, prenorm);
    u_t = add(u_t, attention(detail::project(nt, p.self_text.wq, p.self_text.bq),
                             detail::project(nt, p.self_text.wk, p.self_text.bk),
                             detail::project(nt, p.self_text.wv, p.self_text.bv)));
    const Tensor& na = detail::maybe_norm(u_a, na_scratch, prenorm);
    u_a = add(u_a, attention(detail::project(na, p.self_audio.wq, p.self_audio.bq),
                             detail::project(na, p.self_audio.wk, p.self_audio.bk),
                             detail::project(na, p.self_audio.wv, p.self_audio.bv)));
  }
  {
    const Tensor& nt = detail::maybe_norm(u_t, nt_scratch, prenorm);
    u_t = add(u_t, detail::ffn_forward(nt, p.ffn_text));
    const Tensor& na = detail::maybe_norm(u_a, na_scratch, prenorm);
    u_a = add(u_a, detail::ffn_forward(na, p.ffn_audio));
  }
  return {std::move(u_t), std::move(u_a)};
}

/// Prepends a cls row to each modality, runs the layer stack, and returns
/// the two final cls vectors concatenated into a length-2d vector.
inline Tensor fuse(const Tensor& h_t, const Tensor& h_a, const FusionParams& p) {
  const std::size_t d = p.d();
  Tensor t = prepend_cls(h_t, p.cls_text);
  Tensor a = prepend_cls(h_a, p.cls_audio);
  for (const FusionLayerParams& layer : p.layers) {
    auto [nt, na] = fusion_layer(t, a, layer, p.prenorm);
    t = std::move(nt);
    a = std::move(na);
  }
  Tensor cls_t = reshape(slice(t, 0, 0, 1), {d});
  Tensor cls_a = reshape(slice(a, 0, 0, 1), {d});
  return concat({cls_t, cls_a}, 0);
}

}  // namespace molre
