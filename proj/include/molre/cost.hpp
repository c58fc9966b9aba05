#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "molre/flops.hpp"
#include "molre/model.hpp"
#include "molre/unitse.hpp"

namespace molre {

// Closed-form parameter and forward-FLOP accounting. All formulas mirror the
// exact op sequence the runtime executes, using the conventions in
// flops.hpp, so analytical totals equal instrumented totals.

inline std::uint64_t count_expert_params(std::size_t d, std::size_t r, KernelSizes k) {
  return static_cast<std::uint64_t>(k.k1) * d * r + r + static_cast<std::uint64_t>(k.k2) * r * d +
         d;
}

inline std::uint64_t count_router_params(std::size_t d, std::size_t n_experts) {
  const std::uint64_t d4 = d / 4;
  return static_cast<std::uint64_t>(d) * d4 + d4  // conv1
         + d4 * d4 + d4                           // conv2
         + d4 * n_experts + n_experts;            // projection
}

inline std::uint64_t count_attention_proj_params(std::size_t d) {
  return 3 * (static_cast<std::uint64_t>(d) * d + d);
}

inline std::uint64_t count_ffn_params(std::size_t d, std::size_t d_ff) {
  return static_cast<std::uint64_t>(d) * d_ff + d_ff + static_cast<std::uint64_t>(d_ff) * d + d;
}

/// One task's fusion stack: L layers of four attention instances and two
/// FFNs, plus the two cls embeddings.
inline std::uint64_t count_fusion_params(std::size_t d, std::size_t d_ff, std::size_t layers) {
  const std::uint64_t per_layer = 4 * count_attention_proj_params(d) + 2 * count_ffn_params(d, d_ff);
  return layers * per_layer + 2 * d;
}

inline std::uint64_t count_head_params(std::size_t in, std::size_t hidden, std::size_t out) {
  return static_cast<std::uint64_t>(in) * hidden + hidden +
         static_cast<std::uint64_t>(hidden) * out + out;
}

/// Every expert and router across modalities, blocks, and tasks.
inline std::uint64_t count_unitse_params(const MoLREConfig& cfg) {
  std::uint64_t per_block = 0;
  for (std::size_t r : cfg.ranks()) per_block += count_expert_params(cfg.d, r, cfg.kernels);
  per_block += cfg.tasks.size() * count_expert_params(cfg.d, cfg.task_rank, cfg.kernels);
  per_block += cfg.tasks.size() * count_router_params(cfg.d, cfg.n_experts);
  return cfg.modalities.size() * cfg.num_blocks * per_block;
}

inline std::uint64_t count_variant_params(VariantId v, const ModelConfig& cfg) {
  const std::size_t d = cfg.molre.d;
  const std::uint64_t fusion = count_fusion_params(d, cfg.resolved_ffn_dim(), cfg.fusion_layers);
  const std::uint64_t head_sa = count_head_params(2 * d, cfg.resolved_head_hidden(), 1);
  const std::uint64_t head_er = count_head_params(2 * d, cfg.resolved_head_hidden(), cfg.classes);
  switch (v) {
    case VariantId::SingleTaskSA: return fusion + head_sa;
    case VariantId::SingleTaskER: return fusion + head_er;
    case VariantId::PostFusion: return fusion + head_sa + head_er;
    case VariantId::PreFusion: return cfg.molre.tasks.size() * fusion + head_sa + head_er;
    case VariantId::Mmolre:
      return count_unitse_params(cfg.molre) + cfg.molre.tasks.size() * fusion + head_sa + head_er;
  }
  return 0;
}

// Forward FLOPs for a length-T sequence, mirroring the op sequence of the
// corresponding *_forward functions.

inline std::uint64_t expert_flops(std::size_t t, std::size_t d, std::size_t r, KernelSizes k) {
  return flops::conv1d(t, k.k1, d, r)      // conv1 (same padding keeps T)
         + flops::elementwise(t * r)       // relu
         + flops::conv1d(t, k.k2, r, d);   // conv2
}

inline std::uint64_t router_flops(std::size_t t, std::size_t d, std::size_t n_experts) {
  const std::uint64_t d4 = d / 4;
  return flops::conv1d(t, 1, d, d4) + flops::elementwise(t * d4)     // conv1 + relu
         + flops::conv1d(t, 1, d4, d4) + flops::elementwise(t * d4)  // conv2 + relu
         + flops::mean(t * d4, d4)                                   // global average pooling
         + flops::matmul(1, d4, n_experts)                           // projection
         + flops::elementwise(n_experts)                             // bias
         + flops::softmax(n_experts);
}

struct MoeInclusion {
  bool shared_experts = true;
  bool task_experts = true;
  bool routers = true;
};

struct CostComponent {
  std::string name;
  std::uint64_t params_lowrank = 0;
  std::uint64_t params_standard = 0;
  std::uint64_t flops_lowrank = 0;
  std::uint64_t flops_standard = 0;
};

struct CostReport {
  std::size_t d = 0;
  std::size_t n_experts = 0;
  std::size_t n_tasks = 0;
  std::vector<std::size_t> ranks;
  std::size_t task_rank = 0;
  KernelSizes kernels;
  std::size_t seq_len = 0;
  MoeInclusion inclusion;
  std::uint64_t params_lowrank = 0;
  std::uint64_t params_standard = 0;
  std::uint64_t flops_lowrank = 0;
  std::uint64_t flops_standard = 0;
  double param_ratio = 0.0;  // standard / lowrank
  double flop_ratio = 0.0;
  double savings_pct = 0.0;  // 100 * (1 - 1/param_ratio)
  std::vector<CostComponent> breakdown;
  std::string baseline;
};

/// Tallies one expert complement (the N shared + per-task experts + routers
/// of a single block / modality) against a baseline in which every expert is
/// full-rank (r = d) with identical topology. Routers are identical on both
/// sides.
inline CostReport compare_moe(const MoLREConfig& cfg, std::size_t seq_len,
                              MoeInclusion inc = MoeInclusion{}) {
  cfg.validate();
  if (seq_len == 0) throw ValueError("compare_moe: seq_len must be >= 1");
  CostReport rep;
  rep.d = cfg.d;
  rep.n_experts = cfg.n_experts;
  rep.n_tasks = cfg.tasks.size();
  rep.ranks = cfg.ranks();
  rep.task_rank = cfg.task_rank;
  rep.kernels = cfg.kernels;
  rep.seq_len = seq_len;
  rep.inclusion = inc;
  rep.baseline =
      "standard MoE baseline: identical topology with every expert full-rank (r = d); "
      "routers identical in both configurations";

  CostComponent shared{"shared_experts", 0, 0, 0, 0};
  for (std::size_t r : rep.ranks) {
    shared.params_lowrank += count_expert_params(cfg.d, r, cfg.kernels);
    shared.params_standard += count_expert_params(cfg.d, cfg.d, cfg.kernels);
    shared.flops_lowrank += expert_flops(seq_len, cfg.d, r, cfg.kernels);
    shared.flops_standard += expert_flops(seq_len, cfg.d, cfg.d, cfg.kernels);
  }
  CostComponent task{"task_experts", 0, 0, 0, 0};
  for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
    task.params_lowrank += count_expert_params(cfg.d, cfg.task_rank, cfg.kernels);
    task.params_standard += count_expert_params(cfg.d, cfg.d, cfg.kernels);
    task.flops_lowrank += expert_flops(seq_len, cfg.d, cfg.task_rank, cfg.kernels);
    task.flops_standard += expert_flops(seq_len, cfg.d, cfg.d, cfg.kernels);
  }
  CostComponent routers{"routers", 0, 0, 0, 0};
  for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
    const std::uint64_t p = count_router_params(cfg.d, cfg.n_experts);
    const std::uint64_t f = router_flops(seq_len, cfg.d, cfg.n_experts);
    routers.params_lowrank += p;
    routers.params_standard += p;
    routers.flops_lowrank += f;
    routers.flops_standard += f;
  }

  if (inc.shared_experts) rep.breakdown.push_back(shared);
  if (inc.task_experts) rep.breakdown.push_back(task);
  if (inc.routers) rep.breakdown.push_back(routers);
  for (const CostComponent& c : rep.breakdown) {
    rep.params_lowrank += c.params_lowrank;
    rep.params_standard += c.params_standard;
    rep.flops_lowrank += c.flops_lowrank;
    rep.flops_standard += c.flops_standard;
  }
  if (rep.params_lowrank == 0 || rep.flops_lowrank == 0) {
    throw ValueError("compare_moe: inclusion flags select no components");
  }
  rep.param_ratio = static_cast<double>(rep.params_standard) /
                    static_cast<double>(rep.params_lowrank);
  rep.flop_ratio = static_cast<double>(rep.flops_standard) /
                   static_cast<double>(rep.flops_lowrank);
  rep.savings_pct = 100.0 * (1.0 - 1.0 / rep.param_ratio);
  return rep;
}

inline nlohmann::ordered_json cost_report_json(const CostReport& r) {
  nlohmann::ordered_json j;
  j["config"] = {{"d", r.d},
                 {"n_experts", r.n_experts},
                 {"n_tasks", r.n_tasks},
                 {"shared_ranks", r.ranks},
                 {"task_rank", r.task_rank},
                 {"kernel_sizes", {r.kernels.k1, r.kernels.k2}},
                 {"seq_len", r.seq_len}};
  j["inclusion"] = {{"shared_experts", r.inclusion.shared_experts},
                    {"task_experts", r.inclusion.task_experts},
                    {"routers", r.inclusion.routers}};
  j["params_lowrank"] = r.params_lowrank;
  j["params_standard"] = r.params_standard;
  j["flops_lowrank"] = r.flops_lowrank;
  j["flops_standard"] = r.flops_standard;
  j["param_ratio"] = r.param_ratio;
  j["flop_ratio"] = r.flop_ratio;
  j["savings_pct"] = r.savings_pct;
  nlohmann::ordered_json breakdown = nlohmann::ordered_json::array();
  for (const CostComponent& c : r.breakdown) {
    breakdown.push_back({{"name", c.name},
                         {"params_lowrank", c.params_lowrank},
                         {"params_standard", c.params_standard},
                         {"flops_lowrank", c.flops_lowrank},
                         {"flops_standard", c.flops_standard}});
  }
  j["breakdown"] = breakdown;
  j["baseline"] = r.baseline;
  return j;
}

}  // namespace molre
