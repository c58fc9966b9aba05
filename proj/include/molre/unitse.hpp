#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "molre/errors.hpp"
#include "molre/tensor.hpp"

namespace molre {

enum class Task { SA, ER };
enum class Modality { Text, Audio };

constexpr std::array<Task, 2> kAllTasks{Task::SA, Task::ER};
constexpr std::array<Modality, 2> kAllModalities{Modality::Text, Modality::Audio};

inline const char* to_string(Task t) { return t == Task::SA ? "sa" : "er"; }
inline const char* to_string(Modality m) { return m == Modality::Text ? "text" : "audio"; }

struct KernelSizes {
  std::size_t k1 = 3;
  std::size_t k2 = 1;
};

/// Configuration of one mixture-of-low-rank-experts stack.
struct MoLREConfig {
  std::size_t d = 768;                    // feature width
  std::size_t n_experts = 15;             // shared expert count N
  std::size_t top_k = 8;                  // routed experts per forward pass
  std::vector<std::size_t> shared_ranks;  // one rank per shared expert; empty -> all 128
  std::size_t task_rank = 128;
  KernelSizes kernels;                    // expert conv kernel sizes
  std::size_t num_blocks = 2;
  std::vector<Task> tasks{Task::SA, Task::ER};
  std::vector<Modality> modalities{Modality::Text, Modality::Audio};
  // Adds the block input to the aggregated expert output. Off by default:
  // the plain aggregation sums routed shared experts plus the task expert
  // and nothing else. With it on, a block whose experts are all zero is the
  // identity map, which the ablation equivalence tests rely on.
  bool residual = false;

  std::vector<std::size_t> ranks() const {
    if (shared_ranks.empty()) return std::vector<std::size_t>(n_experts, 128);
    return shared_ranks;
  }

  void validate() const {
    if (d == 0) throw ConfigError("model.d: must be positive");
    if (d % 4 != 0) {
      throw ConfigError("model.d: must be divisible by 4 (router bottleneck is d/4), got " +
                        std::to_string(d));
    }
    if (n_experts == 0) throw ConfigError("model.n_experts: must be positive");
    if (top_k < 1 || top_k > n_experts) {
      throw ConfigError("model.top_k: must be in [1, n_experts], got " + std::to_string(top_k) +
                        " with n_experts=" + std::to_string(n_experts));
    }
    const auto rs = ranks();
    if (rs.size() != n_experts) {
      throw ConfigError("model.shared_ranks: expected " + std::to_string(n_experts) +
                        " entries, got " + std::to_string(rs.size()));
    }
    for (std::size_t r : rs) {
      if (r < 1 || r > d) {
        throw ConfigError("model.shared_ranks: rank " + std::to_string(r) +
                          " outside [1, d=" + std::to_string(d) + "]");
      }
    }
    if (task_rank < 1 || task_rank > d) {
      throw ConfigError("model.task_rank: rank " + std::to_string(task_rank) +
                        " outside [1, d=" + std::to_string(d) + "]");
    }
    if (kernels.k1 % 2 == 0 || kernels.k2 % 2 == 0) {
      throw ConfigError("model.kernel_sizes: kernels must be odd for length-preserving padding");
    }
    if (num_blocks == 0) throw ConfigError("model.num_blocks: must be positive");
    if (tasks.empty()) throw ConfigError("model.tasks: must not be empty");
  }
};

/// Two-conv expert: conv(k1, d -> r), relu, conv(k2, r -> d), same padding.
struct ExpertParams {
  Tensor w1;  // k1 x d x r
  Tensor b1;  // r
  Tensor w2;  // k2 x r x d
  Tensor b2;  // d
  std::size_t rank = 0;
};

inline ExpertParams make_expert_params(std::size_t d, std::size_t rank, KernelSizes k, Rng& rng) {
  ExpertParams p;
  p.rank = rank;
  p.w1 = Tensor::fan_in_uniform({k.k1, d, rank}, k.k1 * d, rng);
  p.b1 = Tensor::zeros({rank});
  p.w2 = Tensor::fan_in_uniform({k.k2, rank, d}, k.k2 * rank, rng);
  p.b2 = Tensor::zeros({d});
  return p;
}

/// Router: two pointwise convs squeezing d -> d/4 -> d/4, global average
/// pooling over time, affine projection to one logit per shared expert,
/// softmax.
struct RouterParams {
  Tensor conv1_w;  // 1 x d x d/4
  Tensor conv1_b;  // d/4
  Tensor conv2_w;  // 1 x d/4 x d/4
  Tensor conv2_b;  // d/4
  Tensor proj_w;   // d/4 x N (column n is expert n's routing key)
  Tensor proj_b;   // N
};

inline RouterParams make_router_params(std::size_t d, std::size_t n_experts, Rng& rng) {
  if (d % 4 != 0) throw ConfigError("router: d must be divisible by 4, got " + std::to_string(d));
  const std::size_t d4 = d / 4;
  RouterParams p;
  p.conv1_w = Tensor::fan_in_uniform({1, d, d4}, d, rng);
  p.conv1_b = Tensor::zeros({d4});
  p.conv2_w = Tensor::fan_in_uniform({1, d4, d4}, d4, rng);
  p.conv2_b = Tensor::zeros({d4});
  p.proj_w = Tensor::fan_in_uniform({d4, n_experts}, d4, rng);
  p.proj_b = Tensor::zeros({n_experts});
  return p;
}

/// One mixture block: N shared experts (used by every task), plus one
/// private expert and one router per task.
struct UniTSEBlock {
  std::vector<ExpertParams> shared;
  std::map<Task, ExpertParams> task_experts;
  std::map<Task, RouterParams> routers;
};

inline UniTSEBlock make_unitse_block(const MoLREConfig& cfg, Rng& rng) {
  UniTSEBlock block;
  for (std::size_t r : cfg.ranks()) {
    block.shared.push_back(make_expert_params(cfg.d, r, cfg.kernels, rng));
  }
  for (Task t : cfg.tasks) {
    block.task_experts.emplace(t, make_expert_params(cfg.d, cfg.task_rank, cfg.kernels, rng));
    block.routers.emplace(t, make_router_params(cfg.d, cfg.n_experts, rng));
  }
  return block;
}

inline std::vector<UniTSEBlock> make_unitse_stack(const MoLREConfig& cfg, Rng& rng) {
  std::vector<UniTSEBlock> blocks;
  blocks.reserve(cfg.num_blocks);
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) blocks.push_back(make_unitse_block(cfg, rng));
  return blocks;
}

/// conv(k1) -> relu -> conv(k2), both length-preserving.
inline Tensor low_rank_expert_forward(const Tensor& x, const ExpertParams& p) {
  const std::size_t k1 = p.w1.shape()[0];
  const std::size_t k2 = p.w2.shape()[0];
  Tensor h = conv1d(x, p.w1, p.b1, (k1 - 1) / 2);
  h = relu(h);
  return conv1d(h, p.w2, p.b2, (k2 - 1) / 2);
}

/// Gate vector over the N shared experts; entries are nonnegative and sum
/// to 1 (softmax output).
inline Tensor router_gates(const Tensor& x, const RouterParams& p) {
  Tensor h = relu(conv1d(x, p.conv1_w, p.conv1_b, 0));
  h = relu(conv1d(h, p.conv2_w, p.conv2_b, 0));
  Tensor pooled = mean(h, 0);  // throws if the sequence is empty
  Tensor logits = add_bias(matmul(reshape(pooled, {1, pooled.size()}), p.proj_w), p.proj_b);
  return reshape(softmax(logits), {logits.size()});
}

/// The k largest gates as (expert index, gate) pairs, descending by gate,
/// ties broken toward the lower index. Gates are not renormalized.
inline std::vector<std::pair<std::size_t, double>> top_k_select(const Tensor& gates,
                                                                std::size_t k) {
  if (gates.rank() != 1) {
    throw ShapeError("top_k_select: expects a rank-1 gate vector, got " +
                     detail::shape_str(gates.shape()));
  }
  const std::size_t n = gates.size();
  if (k < 1 || k > n) {
    throw ValueError("top_k_select: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) +
                     "]");
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return gates.values()[a] > gates.values()[b];
  });
  std::vector<std::pair<std::size_t, double>> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.emplace_back(idx[i], gates.values()[idx[i]]);
  return out;
}

/// Routed aggregation for one task: the top-k shared experts, weighted by
/// their raw gates, plus the task expert. Only selected experts are
/// evaluated, so non-selected experts receive exactly zero gradient.
inline Tensor molre_layer_forward(const Tensor& x, const UniTSEBlock& block, Task task,
                                  const MoLREConfig& cfg) {
  auto router_it = block.routers.find(task);
  auto expert_it = block.task_experts.find(task);
  if (router_it == block.routers.end() || expert_it == block.task_experts.end()) {
    throw ValueError(std::string("molre_layer_forward: task '") + to_string(task) +
                     "' not present in block");
  }
  Tensor gates = router_gates(x, router_it->second);
  const auto selected = top_k_select(gates, cfg.top_k);

  Tensor acc = low_rank_expert_forward(x, expert_it->second);
  for (const auto& [n, gate_value] : selected) {
    (void)gate_value;  // the graph path below carries the gate
    Tensor g = slice(gates, 0, n, n + 1);
    acc = add(acc, scalar_mul(low_rank_expert_forward(x, block.shared[n]), g));
  }
  if (cfg.residual) acc = add(acc, x);
  return acc;
}

/// Full per-modality stack: block 1 sees the encoder features for every
/// task, each later block sees the previous block's per-task outputs.
inline std::map<Task, Tensor> unitse_forward(const Tensor& x,
                                             const std::vector<UniTSEBlock>& blocks,
                                             const MoLREConfig& cfg) {
  if (blocks.empty()) throw ValueError("unitse_forward: empty block list");
  std::map<Task, Tensor> features;
  for (Task t : cfg.tasks) features.emplace(t, x);
  for (const UniTSEBlock& block : blocks) {
    std::map<Task, Tensor> next;
    for (Task t : cfg.tasks) next.emplace(t, molre_layer_forward(features.at(t), block, t, cfg));
    features = std::move(next);
  }
  return features;
}

}  // namespace molre
