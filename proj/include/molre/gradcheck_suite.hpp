#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "molre/grad_check.hpp"
#include "molre/model.hpp"
#include "molre/train.hpp"

namespace molre {

struct GradCheckCase {
  std::string name;
  GradCheckResult result;
};

namespace detail {

inline Tensor randn(std::vector<std::size_t> shape, Rng& rng) {
  return Tensor::normal(std::move(shape), 1.0, rng);
}

// Random-weighted sum makes the output gradient non-constant.
inline Tensor weighted_sum(const Tensor& t, const Tensor& c) { return sum(mul(t, c)); }

inline Sample random_sample(std::size_t t_t, std::size_t t_a, std::size_t d, std::size_t classes,
                            Rng& rng) {
  Sample s;
  s.x_t = randn({t_t, d}, rng);
  s.x_a = randn({t_a, d}, rng);
  s.y_r = rng.uniform(-3.0, 3.0);
  s.y_c.resize(classes);
  for (auto& v : s.y_c) v = rng.uniform() < 0.5 ? 0 : 1;
  return s;
}

}  // namespace detail

/// Per-primitive finite-difference checks. Binary-op cases slice both
/// operands out of the checked point so every parent's backward rule is
/// exercised.
inline std::vector<GradCheckCase> run_primitive_gradchecks(std::size_t d = 8,
                                                           std::uint64_t seed = 123,
                                                           double eps = 1e-5) {
  Rng rng(seed);
  std::vector<GradCheckCase> cases;
  const std::size_t n = d;

  auto run = [&](const std::string& name, const std::function<Tensor(const Tensor&)>& f,
                 const Tensor& point) {
    cases.push_back({name, grad_check(f, point, eps)});
  };

  {
    Tensor p = detail::randn({2 * n}, rng);
    run("add",
        [n](const Tensor& x) { return sum(add(slice(x, 0, 0, n), slice(x, 0, n, 2 * n))); }, p);
  }
  {
    Tensor p = detail::randn({2 * n}, rng);
    run("sub",
        [n](const Tensor& x) { return sum(sub(slice(x, 0, 0, n), slice(x, 0, n, 2 * n))); }, p);
  }
  {
    Tensor p = detail::randn({2 * n}, rng);
    run("mul",
        [n](const Tensor& x) { return sum(mul(slice(x, 0, 0, n), slice(x, 0, n, 2 * n))); }, p);
  }
  {
    Tensor p = detail::randn({n}, rng);
    run("scale", [](const Tensor& x) { return sum(scale(x, 1.7)); }, p);
  }
  {
    Tensor p = detail::randn({n + 1}, rng);
    run("scalar_mul",
        [n](const Tensor& x) {
          return sum(scalar_mul(slice(x, 0, 1, n + 1), slice(x, 0, 0, 1)));
        },
        p);
  }
  {
    const std::size_t m = 3, k = 4, q = 2;
    Tensor p = detail::randn({m * k + k * q}, rng);
    Tensor c = detail::randn({m, q}, rng);
    run("matmul",
        [=](const Tensor& x) {
          Tensor a = reshape(slice(x, 0, 0, m * k), {m, k});
          Tensor b = reshape(slice(x, 0, m * k, m * k + k * q), {k, q});
          return detail::weighted_sum(matmul(a, b), c);
        },
        p);
  }
  {
    Tensor p = detail::randn({3, 4}, rng);
    Tensor c = detail::randn({4, 3}, rng);
    run("transpose",
        [=](const Tensor& x) { return detail::weighted_sum(transpose(x), c); }, p);
  }
  {
    const std::size_t t = 4, cin = 3, cout = 2, kk = 3;
    Tensor p = detail::randn({t * cin + kk * cin * cout + cout}, rng);
    Tensor c = detail::randn({t, cout}, rng);
    run("conv1d",
        [=](const Tensor& x) {
          Tensor xin = reshape(slice(x, 0, 0, t * cin), {t, cin});
          Tensor w = reshape(slice(x, 0, t * cin, t * cin + kk * cin * cout), {kk, cin, cout});
          Tensor b = slice(x, 0, t * cin + kk * cin * cout, t * cin + kk * cin * cout + cout);
          return detail::weighted_sum(conv1d(xin, w, b, 1), c);
        },
        p);
  }
  {
    Tensor p = detail::randn({n}, rng);
    run("relu", [](const Tensor& x) { return sum(relu(x)); }, p);
  }
  {
    Tensor p = detail::randn({2, n}, rng);
    Tensor c = detail::randn({2, n}, rng);
    run("softmax", [=](const Tensor& x) { return detail::weighted_sum(softmax(x), c); }, p);
  }
  {
    Tensor p = detail::randn({3, 4}, rng);
    Tensor c = detail::randn({4}, rng);
    run("mean", [=](const Tensor& x) { return detail::weighted_sum(mean(x, 0), c); }, p);
  }
  {
    Tensor p = detail::randn({n}, rng);
    run("sum", [](const Tensor& x) { return scale(sum(x), 1.3); }, p);
  }
  {
    Tensor p = detail::randn({n}, rng);
    run("abs", [](const Tensor& x) { return sum(abs(x)); }, p);
  }
  {
    Tensor p = detail::randn({n}, rng);
    Tensor c = detail::randn({n}, rng);
    run("sigmoid", [=](const Tensor& x) { return detail::weighted_sum(sigmoid(x), c); }, p);
  }
  {
    Tensor p = Tensor::zeros({n});
    for (double& v : p.values()) v = 0.5 + std::fabs(rng.normal());
    Tensor c = detail::randn({n}, rng);
    run("log", [=](const Tensor& x) { return detail::weighted_sum(log(x), c); }, p);
  }
  {
    Tensor p = detail::randn({n}, rng);
    Tensor c = detail::randn({n}, rng);
    run("clamp",
        [=](const Tensor& x) { return detail::weighted_sum(clamp(x, -0.5, 0.5), c); }, p);
  }
  {
    Tensor p = detail::randn({2 * n}, rng);
    Tensor c = detail::randn({2, n}, rng);
    run("concat",
        [=](const Tensor& x) {
          Tensor a = reshape(slice(x, 0, 0, n), {1, n});
          Tensor b = reshape(slice(x, 0, n, 2 * n), {1, n});
          return detail::weighted_sum(concat({a, b}, 0), c);
        },
        p);
  }
  {
    Tensor p = detail::randn({n}, rng);
    Tensor c = detail::randn({n - 2}, rng);
    run("slice", [=](const Tensor& x) { return detail::weighted_sum(slice(x, 0, 1, n - 1), c); },
        p);
  }
  {
    Tensor p = detail::randn({n}, rng);
    Tensor c = detail::randn({2, n / 2}, rng);
    run("reshape",
        [=](const Tensor& x) { return detail::weighted_sum(reshape(x, {2, n / 2}), c); }, p);
  }
  {
    const std::size_t rows = 3, cols = 4;
    Tensor p = detail::randn({rows * cols + cols}, rng);
    Tensor c = detail::randn({rows, cols}, rng);
    run("add_bias",
        [=](const Tensor& x) {
          Tensor m = reshape(slice(x, 0, 0, rows * cols), {rows, cols});
          Tensor v = slice(x, 0, rows * cols, rows * cols + cols);
          return detail::weighted_sum(add_bias(m, v), c);
        },
        p);
  }
  {
    Tensor p = detail::randn({2, n}, rng);
    Tensor c = detail::randn({2, n}, rng);
    run("layer_norm", [=](const Tensor& x) { return detail::weighted_sum(layer_norm(x), c); }, p);
  }
  {
    const std::size_t tq = 3, tk = 5;
    Tensor p = detail::randn({tq * d + 2 * tk * d}, rng);
    Tensor c = detail::randn({tq, d}, rng);
    run("attention",
        [=](const Tensor& x) {
          Tensor q = reshape(slice(x, 0, 0, tq * d), {tq, d});
          Tensor k = reshape(slice(x, 0, tq * d, tq * d + tk * d), {tk, d});
          Tensor v = reshape(slice(x, 0, tq * d + tk * d, tq * d + 2 * tk * d), {tk, d});
          return detail::weighted_sum(attention(q, k, v), c);
        },
        p);
  }
  return cases;
}

/// Component-level checks (expert, router, routed layer, fusion) plus the
/// end-to-end joint loss against every model parameter.
inline std::vector<GradCheckCase> run_component_gradchecks(std::size_t d = 8,
                                                           std::uint64_t seed = 123,
                                                           double eps = 1e-5) {
  std::vector<GradCheckCase> cases;
  Rng rng(seed);
  const std::size_t t = 3;
  KernelSizes kernels;

  {
    ExpertParams p = make_expert_params(d, 2, kernels, rng);
    Tensor c = detail::randn({t, d}, rng);
    Tensor point = detail::randn({t, d}, rng);
    cases.push_back({"low_rank_expert",
                     grad_check(
                         [&](const Tensor& x) {
                           return detail::weighted_sum(low_rank_expert_forward(x, p), c);
                         },
                         point, eps)});
  }
  {
    RouterParams p = make_router_params(d, 4, rng);
    Tensor c = detail::randn({4}, rng);
    Tensor point = detail::randn({t, d}, rng);
    cases.push_back({"router_gates",
                     grad_check(
                         [&](const Tensor& x) {
                           return detail::weighted_sum(router_gates(x, p), c);
                         },
                         point, eps)});
  }
  {
    MoLREConfig cfg;
    cfg.d = d;
    cfg.n_experts = 4;
    cfg.top_k = 2;
    cfg.shared_ranks = {2, 2, 2, 2};
    cfg.task_rank = 2;
    UniTSEBlock block = make_unitse_block(cfg, rng);
    Tensor c = detail::randn({t, d}, rng);
    Tensor point = detail::randn({t, d}, rng);
    // Keep the top-k selection stable under the +-eps probes: regenerate the
    // probe point until the k-th gate margin is comfortable.
    for (int attempt = 0; attempt < 32; ++attempt) {
      NoGradGuard no_grad;
      Tensor gates = router_gates(point, block.routers.at(Task::SA));
      auto sel = top_k_select(gates, cfg.n_experts);
      if (sel[cfg.top_k - 1].second - sel[cfg.top_k].second > 1e-3) break;
      point = detail::randn({t, d}, rng);
    }
    cases.push_back({"molre_layer",
                     grad_check(
                         [&](const Tensor& x) {
                           return detail::weighted_sum(
                               molre_layer_forward(x, block, Task::SA, cfg), c);
                         },
                         point, eps)});
  }
  {
    const std::size_t t_t = 3, t_a = 2, layers = 2;
    FusionParams p = make_fusion_params(d, 2 * d, layers, false, rng);
    Tensor c = detail::randn({2 * d}, rng);
    Tensor point = detail::randn({(t_t + t_a) * d}, rng);
    cases.push_back({"fuse",
                     grad_check(
                         [&](const Tensor& x) {
                           Tensor ht = reshape(slice(x, 0, 0, t_t * d), {t_t, d});
                           Tensor ha = reshape(slice(x, 0, t_t * d, (t_t + t_a) * d), {t_a, d});
                           return detail::weighted_sum(fuse(ht, ha, p), c);
                         },
                         point, eps)});
  }
  return cases;
}

/// Joint loss of the full model (d, N=3, k=2, L=1) checked against central
/// finite differences over every parameter.
inline GradCheckCase run_end_to_end_gradcheck(std::size_t d = 8, std::uint64_t seed = 123,
                                              double eps = 1e-5) {
  ModelConfig cfg;
  cfg.molre.d = d;
  cfg.molre.n_experts = 3;
  cfg.molre.top_k = 2;
  cfg.molre.shared_ranks = {2, 2, 2};
  cfg.molre.task_rank = 2;
  cfg.fusion_layers = 1;
  cfg.ffn_dim = 2 * d;
  cfg.classes = 6;
  Model model = Model::build(VariantId::Mmolre, cfg, seed);

  Rng rng(seed + 1);
  std::vector<Sample> batch;
  batch.push_back(detail::random_sample(3, 2, d, cfg.classes, rng));
  batch.push_back(detail::random_sample(2, 3, d, cfg.classes, rng));

  GradCheckResult result = params_grad_check(
      [&] { return batch_loss_graph(model, batch).joint; }, model.parameters(), eps);
  return {"end_to_end_joint_loss", result};
}

/// The full suite the gradcheck command runs: every primitive, the
/// architecture components, and the end-to-end joint loss.
inline std::vector<GradCheckCase> run_gradcheck_suite(std::size_t d = 8, std::uint64_t seed = 123,
                                                      double eps = 1e-5) {
  std::vector<GradCheckCase> cases = run_primitive_gradchecks(d, seed, eps);
  std::vector<GradCheckCase> components = run_component_gradchecks(d, seed, eps);
  cases.insert(cases.end(), components.begin(), components.end());
  cases.push_back(run_end_to_end_gradcheck(d, seed, eps));
  return cases;
}

}  // namespace molre
