#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "molre/errors.hpp"
#include "molre/fusion.hpp"
#include "molre/tensor.hpp"
#include "molre/unitse.hpp"

namespace molre {

/// One utterance: a feature sequence per modality, a sentiment intensity,
/// and a multi-hot emotion vector.
struct Sample {
  Tensor x_t;  // T_t x d
  Tensor x_a;  // T_a x d
  double y_r = 0.0;
  std::vector<std::uint8_t> y_c;
};

struct Prediction {
  double y_r_hat = 0.0;
  std::vector<double> y_c_hat;  // per-class probabilities in [0, 1]
};

enum class VariantId { SingleTaskSA, SingleTaskER, PreFusion, PostFusion, Mmolre };

inline const char* to_string(VariantId v) {
  switch (v) {
    case VariantId::SingleTaskSA: return "single_task_sa";
    case VariantId::SingleTaskER: return "single_task_er";
    case VariantId::PreFusion: return "pre_fusion";
    case VariantId::PostFusion: return "post_fusion";
    case VariantId::Mmolre: return "mmolre";
  }
  return "?";
}

inline VariantId parse_variant(const std::string& s) {
  if (s == "single_task_sa") return VariantId::SingleTaskSA;
  if (s == "single_task_er") return VariantId::SingleTaskER;
  if (s == "pre_fusion") return VariantId::PreFusion;
  if (s == "post_fusion") return VariantId::PostFusion;
  if (s == "mmolre") return VariantId::Mmolre;
  throw ConfigError("variant: unknown variant '" + s +
                    "' (expected single_task_sa, single_task_er, pre_fusion, post_fusion, "
                    "mmolre)");
}

enum class EmotionLossMode {
  Bce,         // per-class binary cross-entropy (default)
  CePositiveOnly,  // positive-class term only
};

inline const char* to_string(EmotionLossMode m) {
  return m == EmotionLossMode::Bce ? "bce" : "ce_positive_only";
}

inline EmotionLossMode parse_emotion_loss_mode(const std::string& s) {
  if (s == "bce") return EmotionLossMode::Bce;
  if (s == "ce_positive_only") return EmotionLossMode::CePositiveOnly;
  throw ConfigError("model.loss: unknown mode '" + s + "' (expected bce or ce_positive_only)");
}

struct ModelConfig {
  MoLREConfig molre;
  std::size_t fusion_layers = 5;
  std::size_t ffn_dim = 0;      // 0 -> 4*d
  std::size_t head_hidden = 0;  // 0 -> d/2
  std::size_t classes = 6;
  bool prenorm = false;
  EmotionLossMode emotion_loss = EmotionLossMode::Bce;

  std::size_t resolved_ffn_dim() const { return ffn_dim != 0 ? ffn_dim : 4 * molre.d; }
  std::size_t resolved_head_hidden() const {
    if (head_hidden != 0) return head_hidden;
    return molre.d / 2 > 0 ? molre.d / 2 : 1;
  }

  void validate() const {
    molre.validate();
    if (classes == 0) throw ConfigError("model.classes: must be positive");
  }
};

/// Two-layer head: affine(in -> hidden), relu, affine(hidden -> out).
struct HeadParams {
  Tensor w1, b1;
  Tensor w2, b2;
};

inline HeadParams make_head_params(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
  HeadParams p;
  p.w1 = Tensor::fan_in_uniform({in, hidden}, in, rng);
  p.b1 = Tensor::zeros({hidden});
  p.w2 = Tensor::fan_in_uniform({hidden, out}, hidden, rng);
  p.b2 = Tensor::zeros({out});
  return p;
}

inline Tensor head_forward(const Tensor& fused, const HeadParams& p) {
  Tensor x = reshape(fused, {1, fused.size()});
  Tensor h = relu(add_bias(matmul(x, p.w1), p.b1));
  Tensor o = add_bias(matmul(h, p.w2), p.b2);
  return reshape(o, {o.size()});
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

constexpr double kProbEps = 1e-7;  // probability clamp keeping logs finite

/// Mean absolute error over a batch.
inline double mae_loss(const std::vector<double>& y, const std::vector<double>& y_hat) {
  if (y.empty()) throw ValueError("mae_loss: empty batch");
  if (y.size() != y_hat.size()) {
    throw ShapeError("mae_loss: batch sizes differ, " + std::to_string(y.size()) + " vs " +
                     std::to_string(y_hat.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) acc += std::fabs(y[i] - y_hat[i]);
  return acc / static_cast<double>(y.size());
}

/// Per-class binary cross-entropy averaged over the batch (summed over
/// classes); probabilities are clamped to [eps, 1-eps] first. In
/// CePositiveOnly mode only the positive-class term is kept.
inline double emotion_loss(const std::vector<std::vector<std::uint8_t>>& y,
                           const std::vector<std::vector<double>>& p,
                           EmotionLossMode mode = EmotionLossMode::Bce) {
  if (y.empty()) throw ValueError("emotion_loss: empty batch");
  if (y.size() != p.size()) {
    throw ShapeError("emotion_loss: batch sizes differ, " + std::to_string(y.size()) + " vs " +
                     std::to_string(p.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i].size() != p[i].size()) {
      throw ShapeError("emotion_loss: sample " + std::to_string(i) + " has " +
                       std::to_string(y[i].size()) + " labels vs " + std::to_string(p[i].size()) +
                       " probabilities");
    }
    for (std::size_t j = 0; j < y[i].size(); ++j) {
      const double pj = std::min(std::max(p[i][j], kProbEps), 1.0 - kProbEps);
      if (y[i][j]) {
        acc -= std::log(pj);
      } else if (mode == EmotionLossMode::Bce) {
        acc -= std::log(1.0 - pj);
      }
    }
  }
  return acc / static_cast<double>(y.size());
}

/// Unweighted sum of the two task losses.
inline double joint_loss(double l_mae, double l_ce) {
  if (!std::isfinite(l_mae) || !std::isfinite(l_ce)) {
    throw ValueError("joint_loss: non-finite input (" + std::to_string(l_mae) + ", " +
                     std::to_string(l_ce) + ")");
  }
  return l_mae + l_ce;
}

/// Graph version of mae_loss from per-sample scalar predictions.
inline Tensor mae_loss_graph(const std::vector<Tensor>& preds, const std::vector<double>& targets) {
  if (preds.empty()) throw ValueError("mae_loss: empty batch");
  if (preds.size() != targets.size()) {
    throw ShapeError("mae_loss: batch sizes differ, " + std::to_string(preds.size()) + " vs " +
                     std::to_string(targets.size()));
  }
  Tensor stacked = preds.size() == 1 ? preds[0] : concat(preds, 0);
  Tensor y = Tensor::from({targets.size()}, targets);
  return scale(sum(abs(sub(stacked, y))), 1.0 / static_cast<double>(targets.size()));
}

/// Graph version of emotion_loss from per-sample probability vectors.
inline Tensor emotion_loss_graph(const std::vector<Tensor>& probs,
                                 const std::vector<std::vector<std::uint8_t>>& targets,
                                 EmotionLossMode mode = EmotionLossMode::Bce) {
  if (probs.empty()) throw ValueError("emotion_loss: empty batch");
  if (probs.size() != targets.size()) {
    throw ShapeError("emotion_loss: batch sizes differ, " + std::to_string(probs.size()) + " vs " +
                     std::to_string(targets.size()));
  }
  const std::size_t batch = probs.size();
  const std::size_t classes = probs[0].size();
  std::vector<Tensor> rows;
  rows.reserve(batch);
  std::vector<double> y_flat, ym_flat;
  y_flat.reserve(batch * classes);
  for (std::size_t i = 0; i < batch; ++i) {
    if (targets[i].size() != classes || probs[i].size() != classes) {
      throw ShapeError("emotion_loss: sample " + std::to_string(i) +
                       " has inconsistent class count");
    }
    rows.push_back(reshape(probs[i], {1, classes}));
    for (std::uint8_t v : targets[i]) {
      y_flat.push_back(v ? 1.0 : 0.0);
      ym_flat.push_back(v ? 0.0 : 1.0);
    }
  }
  Tensor p = batch == 1 ? rows[0] : concat(rows, 0);
  Tensor y = Tensor::from({batch, classes}, y_flat);
  Tensor log_p = log(clamp(p, kProbEps, 1.0 - kProbEps));
  Tensor acc = sum(mul(y, log_p));
  if (mode == EmotionLossMode::Bce) {
    Tensor ym = Tensor::from({batch, classes}, ym_flat);
    Tensor one_minus_p = sub(Tensor::full({batch, classes}, 1.0), p);
    acc = add(acc, sum(mul(ym, log(clamp(one_minus_p, kProbEps, 1.0 - kProbEps)))));
  }
  return scale(acc, -1.0 / static_cast<double>(batch));
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Assembled model for one ablation variant. Parameters are registered in
/// construction order, which is also the seeded-initialization draw order,
/// so (variant, config, seed) fully determines every weight.
class Model {
 public:
  struct Outputs {
    Tensor y_r_hat;   // {1}; undefined when the SA task is absent
    Tensor y_c_probs;  // {C}; undefined when the ER task is absent
  };

  static Model build(VariantId variant, const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.variant_ = variant;
    m.cfg_ = cfg;
    Rng rng(seed);
    const std::size_t d = cfg.molre.d;
    if (variant == VariantId::Mmolre) {
      for (Modality mod : cfg.molre.modalities) {
        m.unitse_.emplace(mod, make_unitse_stack(cfg.molre, rng));
      }
    }
    const std::size_t n_fusion =
        (variant == VariantId::Mmolre || variant == VariantId::PreFusion)
            ? cfg.molre.tasks.size()
            : 1;
    for (std::size_t i = 0; i < n_fusion; ++i) {
      m.fusion_.push_back(
          make_fusion_params(d, cfg.resolved_ffn_dim(), cfg.fusion_layers, cfg.prenorm, rng));
    }
    for (Task t : m.active_tasks()) {
      const std::size_t out = t == Task::SA ? 1 : cfg.classes;
      m.heads_.emplace(t, make_head_params(2 * d, cfg.resolved_head_hidden(), out, rng));
    }
    m.register_parameters();
    return m;
  }

  VariantId variant() const { return variant_; }
  const ModelConfig& config() const { return cfg_; }

  std::vector<Task> active_tasks() const {
    switch (variant_) {
      case VariantId::SingleTaskSA: return {Task::SA};
      case VariantId::SingleTaskER: return {Task::ER};
      default: return cfg_.molre.tasks;
    }
  }

  bool has_task(Task t) const {
    for (Task a : active_tasks()) {
      if (a == t) return true;
    }
    return false;
  }

  std::size_t fusion_instances() const { return fusion_.size(); }

  const std::vector<Tensor>& parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return param_names_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Tensor& p : params_) n += p.size();
    return n;
  }

  void zero_grads() const {
    for (const Tensor& p : params_) const_cast<Tensor&>(p).zero_grad();
  }

  /// Graph-building forward pass for one sample.
  Outputs forward(const Sample& s) const {
    check_features(s);
    // Per-task feature streams for each modality.
    std::map<Task, Tensor> feat_t, feat_a;
    if (variant_ == VariantId::Mmolre) {
      feat_t = unitse_forward(s.x_t, unitse_.at(Modality::Text), cfg_.molre);
      feat_a = unitse_forward(s.x_a, unitse_.at(Modality::Audio), cfg_.molre);
    } else {
      for (Task t : active_tasks()) {
        feat_t.emplace(t, s.x_t);
        feat_a.emplace(t, s.x_a);
      }
    }
    // Fused representation per task.
    std::map<Task, Tensor> fused;
    if (fusion_.size() == 1) {
      Tensor f = fuse(feat_t.begin()->second, feat_a.begin()->second, fusion_[0]);
      for (Task t : active_tasks()) fused.emplace(t, f);
    } else {
      for (Task t : active_tasks()) {
        fused.emplace(t, fuse(feat_t.at(t), feat_a.at(t), fusion_[fusion_index(t)]));
      }
    }
    Outputs out;
    if (has_task(Task::SA)) out.y_r_hat = head_forward(fused.at(Task::SA), heads_.at(Task::SA));
    if (has_task(Task::ER)) {
      out.y_c_probs = sigmoid(head_forward(fused.at(Task::ER), heads_.at(Task::ER)));
    }
    return out;
  }

  /// Numeric prediction (no graph).
  Prediction predict(const Sample& s) const {
    NoGradGuard no_grad;
    Outputs out = forward(s);
    Prediction pred;
    if (out.y_r_hat.defined()) pred.y_r_hat = out.y_r_hat.item();
    if (out.y_c_probs.defined()) pred.y_c_hat = out.y_c_probs.values();
    return pred;
  }

  // Component access (tests, weight IO).
  std::map<Modality, std::vector<UniTSEBlock>>& unitse() { return unitse_; }
  const std::map<Modality, std::vector<UniTSEBlock>>& unitse() const { return unitse_; }
  std::vector<FusionParams>& fusion() { return fusion_; }
  const std::vector<FusionParams>& fusion() const { return fusion_; }
  std::map<Task, HeadParams>& heads() { return heads_; }
  const std::map<Task, HeadParams>& heads() const { return heads_; }

 private:
  std::size_t fusion_index(Task t) const {
    if (fusion_.size() == 1) return 0;
    for (std::size_t i = 0; i < cfg_.molre.tasks.size(); ++i) {
      if (cfg_.molre.tasks[i] == t) return i;
    }
    throw ValueError(std::string("fusion_index: task '") + to_string(t) + "' not configured");
  }

  void check_features(const Sample& s) const {
    const std::size_t d = cfg_.molre.d;
    if (s.x_t.rank() != 2 || s.x_t.shape()[1] != d) {
      throw ShapeError("model.forward: text features " + detail::shape_str(s.x_t.shape()) +
                       " do not match width d=" + std::to_string(d));
    }
    if (s.x_a.rank() != 2 || s.x_a.shape()[1] != d) {
      throw ShapeError("model.forward: audio features " + detail::shape_str(s.x_a.shape()) +
                       " do not match width d=" + std::to_string(d));
    }
  }

  void add_param(const std::string& name, const Tensor& t) {
    param_names_.push_back(name);
    params_.push_back(t);
  }

  void register_expert(const std::string& prefix, const ExpertParams& e) {
    add_param(prefix + ".w1", e.w1);
    add_param(prefix + ".b1", e.b1);
    add_param(prefix + ".w2", e.w2);
    add_param(prefix + ".b2", e.b2);
  }

  void register_router(const std::string& prefix, const RouterParams& r) {
    add_param(prefix + ".conv1_w", r.conv1_w);
    add_param(prefix + ".conv1_b", r.conv1_b);
    add_param(prefix + ".conv2_w", r.conv2_w);
    add_param(prefix + ".conv2_b", r.conv2_b);
    add_param(prefix + ".proj_w", r.proj_w);
    add_param(prefix + ".proj_b", r.proj_b);
  }

  void register_attention(const std::string& prefix, const AttentionProj& a) {
    add_param(prefix + ".wq", a.wq);
    add_param(prefix + ".bq", a.bq);
    add_param(prefix + ".wk", a.wk);
    add_param(prefix + ".bk", a.bk);
    add_param(prefix + ".wv", a.wv);
    add_param(prefix + ".bv", a.bv);
  }

  void register_ffn(const std::string& prefix, const FfnParams& f) {
    add_param(prefix + ".w1", f.w1);
    add_param(prefix + ".b1", f.b1);
    add_param(prefix + ".w2", f.w2);
    add_param(prefix + ".b2", f.b2);
  }

  void register_parameters() {
    for (auto& [mod, blocks] : unitse_) {
      const std::string mprefix = std::string("unitse.") + to_string(mod);
      for (std::size_t b = 0; b < blocks.size(); ++b) {
        const std::string bprefix = mprefix + ".block" + std::to_string(b);
        for (std::size_t n = 0; n < blocks[b].shared.size(); ++n) {
          register_expert(bprefix + ".shared" + std::to_string(n), blocks[b].shared[n]);
        }
        for (auto& [task, expert] : blocks[b].task_experts) {
          register_expert(bprefix + ".task_" + to_string(task), expert);
        }
        for (auto& [task, router] : blocks[b].routers) {
          register_router(bprefix + ".router_" + to_string(task), router);
        }
      }
    }
    for (std::size_t f = 0; f < fusion_.size(); ++f) {
      const std::string fprefix = "fusion" + std::to_string(f);
      for (std::size_t l = 0; l < fusion_[f].layers.size(); ++l) {
        const std::string lprefix = fprefix + ".layer" + std::to_string(l);
        register_attention(lprefix + ".cross_text", fusion_[f].layers[l].cross_text);
        register_attention(lprefix + ".cross_audio", fusion_[f].layers[l].cross_audio);
        register_attention(lprefix + ".self_text", fusion_[f].layers[l].self_text);
        register_attention(lprefix + ".self_audio", fusion_[f].layers[l].self_audio);
        register_ffn(lprefix + ".ffn_text", fusion_[f].layers[l].ffn_text);
        register_ffn(lprefix + ".ffn_audio", fusion_[f].layers[l].ffn_audio);
      }
      add_param(fprefix + ".cls_text", fusion_[f].cls_text);
      add_param(fprefix + ".cls_audio", fusion_[f].cls_audio);
    }
    for (auto& [task, head] : heads_) {
      const std::string hprefix = std::string("head_") + to_string(task);
      add_param(hprefix + ".w1", head.w1);
      add_param(hprefix + ".b1", head.b1);
      add_param(hprefix + ".w2", head.w2);
      add_param(hprefix + ".b2", head.b2);
    }
  }

  VariantId variant_ = VariantId::Mmolre;
  ModelConfig cfg_;
  std::map<Modality, std::vector<UniTSEBlock>> unitse_;
  std::vector<FusionParams> fusion_;
  std::map<Task, HeadParams> heads_;
  std::vector<Tensor> params_;
  std::vector<std::string> param_names_;
};

/// Convenience: build_variant per the ablation naming.
inline Model build_variant(VariantId v, const ModelConfig& cfg, std::uint64_t seed) {
  return Model::build(v, cfg, seed);
}

}  // namespace molre
