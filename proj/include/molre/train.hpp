#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "molre/errors.hpp"
#include "molre/model.hpp"

namespace molre {

struct TrainConfig {
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;  // desk-scale default; reference presets use 1e-5
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t max_steps = 300;
  std::size_t early_stop_patience = 8;
  double val_fraction = 0.2;
  std::size_t eval_every = 0;  // 0 -> once per epoch
  std::uint64_t seed = 7;
  bool shuffle = true;

  void validate() const {
    if (batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
    if (!(learning_rate > 0.0)) {
      throw ConfigError("train.learning_rate: must be > 0, got " +
                        std::to_string(learning_rate));
    }
    if (max_steps < 1) throw ConfigError("train.max_steps: must be >= 1");
    if (val_fraction < 0.0 || val_fraction >= 1.0) {
      throw ConfigError("train.val_fraction: must be in [0, 1), got " +
                        std::to_string(val_fraction));
    }
  }
};

/// Decoupled weight decay Adam. Moment buffers are laid out per parameter
/// tensor and sized on the first step.
class AdamW {
 public:
  AdamW(double lr, double beta1, double beta2, double eps, double weight_decay)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

  explicit AdamW(const TrainConfig& cfg)
      : AdamW(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay) {}

  void step(const std::vector<Tensor>& params) {
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(params[i].size(), 0.0);
        v_[i].assign(params[i].size(), 0.0);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor p = params[i];
      const std::vector<double>& g = p.grad();
      std::vector<double>& w = p.values();
      for (std::size_t j = 0; j < w.size(); ++j) {
        m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
        v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
        const double m_hat = m_[i][j] / bc1;
        const double v_hat = v_[i][j] / bc2;
        w[j] -= lr_ * (m_hat / (std::sqrt(v_hat) + eps_) + wd_ * w[j]);
      }
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_, wd_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Stops when the observed loss fails to improve (strictly) for `patience`
/// consecutive observations.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

  bool observe(double loss) {
    if (loss < best_) {
      best_ = loss;
      misses_ = 0;
      return false;
    }
    ++misses_;
    return patience_ > 0 && misses_ >= patience_;
  }

  double best() const { return best_; }
  std::size_t misses() const { return misses_; }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t misses_ = 0;
};

struct StepMetrics {
  std::size_t step = 0;
  double l_mae = 0.0;
  double l_ce = 0.0;
  double l_joint = 0.0;
  double wall_ms = 0.0;
};

inline std::string to_jsonl(const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["l_mae"] = m.l_mae;
  j["l_ce"] = m.l_ce;
  j["l_joint"] = m.l_joint;
  j["wall_ms"] = m.wall_ms;
  return j.dump();
}

struct BatchLoss {
  Tensor joint;
  double l_mae = 0.0;
  double l_ce = 0.0;
};

/// Builds the joint loss graph over a batch. Tasks the variant does not
/// train contribute zero.
inline BatchLoss batch_loss_graph(const Model& model, const std::vector<Sample>& batch) {
  if (batch.empty()) throw ValueError("train_step: empty batch");
  std::vector<Tensor> sa_preds;
  std::vector<double> sa_targets;
  std::vector<Tensor> er_probs;
  std::vector<std::vector<std::uint8_t>> er_targets;
  for (const Sample& s : batch) {
    Model::Outputs out = model.forward(s);
    if (out.y_r_hat.defined()) {
      sa_preds.push_back(out.y_r_hat);
      sa_targets.push_back(s.y_r);
    }
    if (out.y_c_probs.defined()) {
      er_probs.push_back(out.y_c_probs);
      er_targets.push_back(s.y_c);
    }
  }
  BatchLoss result;
  Tensor l_mae, l_ce;
  if (!sa_preds.empty()) {
    l_mae = mae_loss_graph(sa_preds, sa_targets);
    result.l_mae = l_mae.item();
  }
  if (!er_probs.empty()) {
    l_ce = emotion_loss_graph(er_probs, er_targets, model.config().emotion_loss);
    result.l_ce = l_ce.item();
  }
  if (l_mae.defined() && l_ce.defined()) {
    result.joint = add(l_mae, l_ce);
  } else if (l_mae.defined()) {
    result.joint = l_mae;
  } else if (l_ce.defined()) {
    result.joint = l_ce;
  } else {
    throw ValueError("train_step: model produced no task outputs");
  }
  return result;
}

/// One optimization step: forward, joint loss, backward, AdamW update.
inline StepMetrics train_step(const Model& model, const std::vector<Sample>& batch, AdamW& opt,
                              std::size_t step_index, bool timing = false) {
  const auto t0 = std::chrono::steady_clock::now();
  model.zero_grads();
  BatchLoss loss = batch_loss_graph(model, batch);
  const double joint = loss.joint.item();
  if (!std::isfinite(joint)) {
    throw DivergenceError(step_index, "training diverged at step " + std::to_string(step_index) +
                                          ": joint loss is " + std::to_string(joint));
  }
  loss.joint.backward();
  opt.step(model.parameters());

  StepMetrics m;
  m.step = step_index;
  m.l_mae = loss.l_mae;
  m.l_ce = loss.l_ce;
  m.l_joint = joint;
  if (timing) {
    const auto t1 = std::chrono::steady_clock::now();
    m.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  return m;
}

/// Numeric joint loss over a sample set (no graph, no update).
inline double dataset_joint_loss(const Model& model, const std::vector<Sample>& samples) {
  if (samples.empty()) throw ValueError("dataset_joint_loss: empty sample set");
  std::vector<double> sa_y, sa_p;
  std::vector<std::vector<std::uint8_t>> er_y;
  std::vector<std::vector<double>> er_p;
  for (const Sample& s : samples) {
    Prediction pred = model.predict(s);
    if (model.has_task(Task::SA)) {
      sa_y.push_back(s.y_r);
      sa_p.push_back(pred.y_r_hat);
    }
    if (model.has_task(Task::ER)) {
      er_y.push_back(s.y_c);
      er_p.push_back(pred.y_c_hat);
    }
  }
  const double l_mae = sa_y.empty() ? 0.0 : mae_loss(sa_y, sa_p);
  const double l_ce = er_y.empty() ? 0.0 : emotion_loss(er_y, er_p, model.config().emotion_loss);
  return joint_loss(l_mae, l_ce);
}

struct TrainResult {
  std::vector<StepMetrics> steps;
  std::size_t steps_run = 0;
  bool early_stopped = false;
  double best_val_loss = std::numeric_limits<double>::infinity();
};

/// Full training loop with deterministic shuffling and early stopping on a
/// validation split. Metrics lines are streamed to `metrics_out` if given.
inline TrainResult train(const Model& model, const std::vector<Sample>& samples,
                         const TrainConfig& cfg, std::ostream* metrics_out = nullptr,
                         bool timing = false) {
  cfg.validate();
  if (samples.empty()) throw ValueError("train: empty dataset");
  const std::size_t n_val = static_cast<std::size_t>(static_cast<double>(samples.size()) *
                                                     cfg.val_fraction);
  const std::size_t n_train = samples.size() - n_val;
  if (n_train == 0) throw ConfigError("train.val_fraction: leaves no training samples");

  AdamW opt(cfg);
  EarlyStopper stopper(cfg.early_stop_patience);
  const std::size_t epoch_len = (n_train + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t eval_every = cfg.eval_every != 0 ? cfg.eval_every : epoch_len;

  Rng shuffle_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  std::size_t pos = 0;
  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    if (pos == 0 && cfg.shuffle) {
      for (std::size_t i = n_train - 1; i > 0; --i) {
        std::swap(order[i], order[shuffle_rng.index(i + 1)]);
      }
    }
    std::vector<Sample> batch;
    batch.reserve(cfg.batch_size);
    for (std::size_t b = 0; b < cfg.batch_size && pos + b < n_train; ++b) {
      batch.push_back(samples[order[pos + b]]);
    }
    pos += batch.size();
    if (pos >= n_train) pos = 0;

    StepMetrics m = train_step(model, batch, opt, step, timing);
    if (metrics_out != nullptr) (*metrics_out) << to_jsonl(m) << "\n";
    result.steps.push_back(m);
    result.steps_run = step;

    if (n_val > 0 && step % eval_every == 0) {
      std::vector<Sample> val(samples.begin() + static_cast<std::ptrdiff_t>(n_train),
                              samples.end());
      const double val_loss = dataset_joint_loss(model, val);
      result.best_val_loss = std::min(result.best_val_loss, val_loss);
      if (stopper.observe(val_loss)) {
        result.early_stopped = true;
        break;
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation metrics
// ---------------------------------------------------------------------------

struct SaMetrics {
  double mae = 0.0;
  double corr = 0.0;
  double acc2_has0 = 0.0;
  double f1_has0 = 0.0;
  double acc2_non0 = 0.0;
  double f1_non0 = 0.0;
  double acc5 = 0.0;
  double acc7 = 0.0;
};

struct ErClassMetrics {
  double acc = 0.0;
  double wf1 = 0.0;
};

struct EvalReport {
  bool has_sa = false;
  bool has_er = false;
  SaMetrics sa;
  std::vector<ErClassMetrics> er;
  double er_acc_avg = 0.0;
  double er_wf1_avg = 0.0;
};

namespace detail {

inline double binary_f1(std::size_t tp, std::size_t fp, std::size_t fn) {
  const double denom = static_cast<double>(2 * tp + fp + fn);
  if (denom == 0.0) return 0.0;
  return 2.0 * static_cast<double>(tp) / denom;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t n = a.size();
  if (n < 2) return 0.0;
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  if (va <= 0.0 || vb <= 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

inline int round_clip(double v, double lo, double hi) {
  return static_cast<int>(std::lround(std::min(std::max(v, lo), hi)));
}

}  // namespace detail

inline SaMetrics compute_sa_metrics(const std::vector<double>& y, const std::vector<double>& y_hat) {
  SaMetrics m;
  const std::size_t n = y.size();
  if (n == 0) return m;
  m.mae = mae_loss(y, y_hat);
  m.corr = detail::pearson(y, y_hat);

  std::size_t acc5 = 0, acc7 = 0;
  std::size_t has0_correct = 0, has0_tp = 0, has0_fp = 0, has0_fn = 0;
  std::size_t non0_n = 0, non0_correct = 0, non0_tp = 0, non0_fp = 0, non0_fn = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (detail::round_clip(y[i], -2, 2) == detail::round_clip(y_hat[i], -2, 2)) ++acc5;
    if (detail::round_clip(y[i], -3, 3) == detail::round_clip(y_hat[i], -3, 3)) ++acc7;

    const bool t_pos = y[i] >= 0.0;
    const bool p_pos = y_hat[i] >= 0.0;
    if (t_pos == p_pos) ++has0_correct;
    if (t_pos && p_pos) ++has0_tp;
    if (!t_pos && p_pos) ++has0_fp;
    if (t_pos && !p_pos) ++has0_fn;

    if (y[i] != 0.0) {
      ++non0_n;
      const bool tp2 = y[i] > 0.0;
      const bool pp2 = y_hat[i] > 0.0;
      if (tp2 == pp2) ++non0_correct;
      if (tp2 && pp2) ++non0_tp;
      if (!tp2 && pp2) ++non0_fp;
      if (tp2 && !pp2) ++non0_fn;
    }
  }
  m.acc5 = static_cast<double>(acc5) / static_cast<double>(n);
  m.acc7 = static_cast<double>(acc7) / static_cast<double>(n);
  m.acc2_has0 = static_cast<double>(has0_correct) / static_cast<double>(n);
  m.f1_has0 = detail::binary_f1(has0_tp, has0_fp, has0_fn);
  m.acc2_non0 = non0_n ? static_cast<double>(non0_correct) / static_cast<double>(non0_n) : 0.0;
  m.f1_non0 = detail::binary_f1(non0_tp, non0_fp, non0_fn);
  return m;
}

inline ErClassMetrics compute_er_class_metrics(const std::vector<std::uint8_t>& y,
                                               const std::vector<double>& p) {
  ErClassMetrics m;
  const std::size_t n = y.size();
  if (n == 0) return m;
  std::size_t correct = 0, tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool truth = y[i] != 0;
    const bool pred = p[i] >= 0.5;
    if (truth == pred) ++correct;
    if (truth && pred) ++tp;
    if (!truth && pred) ++fp;
    if (truth && !pred) ++fn;
    if (!truth && !pred) ++tn;
  }
  m.acc = static_cast<double>(correct) / static_cast<double>(n);
  const double f1_pos = detail::binary_f1(tp, fp, fn);
  const double f1_neg = detail::binary_f1(tn, fn, fp);
  const std::size_t support_pos = tp + fn;
  const std::size_t support_neg = tn + fp;
  m.wf1 = (static_cast<double>(support_pos) * f1_pos + static_cast<double>(support_neg) * f1_neg) /
          static_cast<double>(n);
  return m;
}

/// Predicts every sample (optionally sharded over `threads` workers, each
/// writing disjoint index ranges) and reduces to task metrics; the
/// reduction itself is single-threaded and order-independent.
inline EvalReport evaluate(const Model& model, const std::vector<Sample>& samples,
                           std::size_t threads = 1) {
  EvalReport report;
  if (samples.empty()) return report;
  std::vector<Prediction> preds(samples.size());
  threads = std::max<std::size_t>(1, std::min(threads, samples.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < samples.size(); ++i) preds[i] = model.predict(samples[i]);
  } else {
    std::vector<std::thread> workers;
    const std::size_t chunk = (samples.size() + threads - 1) / threads;
    for (std::size_t w = 0; w < threads; ++w) {
      const std::size_t lo = w * chunk;
      const std::size_t hi = std::min(samples.size(), lo + chunk);
      if (lo >= hi) break;
      workers.emplace_back([&, lo, hi] {
        for (std::size_t i = lo; i < hi; ++i) preds[i] = model.predict(samples[i]);
      });
    }
    for (auto& t : workers) t.join();
  }

  report.has_sa = model.has_task(Task::SA);
  report.has_er = model.has_task(Task::ER);
  if (report.has_sa) {
    std::vector<double> y, y_hat;
    y.reserve(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
      y.push_back(samples[i].y_r);
      y_hat.push_back(preds[i].y_r_hat);
    }
    report.sa = compute_sa_metrics(y, y_hat);
  }
  if (report.has_er) {
    const std::size_t classes = model.config().classes;
    for (std::size_t c = 0; c < classes; ++c) {
      std::vector<std::uint8_t> y;
      std::vector<double> p;
      y.reserve(samples.size());
      for (std::size_t i = 0; i < samples.size(); ++i) {
        y.push_back(c < samples[i].y_c.size() ? samples[i].y_c[c] : 0);
        p.push_back(c < preds[i].y_c_hat.size() ? preds[i].y_c_hat[c] : 0.0);
      }
      report.er.push_back(compute_er_class_metrics(y, p));
    }
    for (const ErClassMetrics& m : report.er) {
      report.er_acc_avg += m.acc;
      report.er_wf1_avg += m.wf1;
    }
    if (!report.er.empty()) {
      report.er_acc_avg /= static_cast<double>(report.er.size());
      report.er_wf1_avg /= static_cast<double>(report.er.size());
    }
  }
  return report;
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  if (r.has_sa) {
    j["sa"] = {{"mae", r.sa.mae},           {"corr", r.sa.corr},
               {"acc2_has0", r.sa.acc2_has0}, {"f1_has0", r.sa.f1_has0},
               {"acc2_non0", r.sa.acc2_non0}, {"f1_non0", r.sa.f1_non0},
               {"acc5", r.sa.acc5},          {"acc7", r.sa.acc7}};
  }
  if (r.has_er) {
    nlohmann::ordered_json per_class = nlohmann::ordered_json::array();
    for (const ErClassMetrics& m : r.er) {
      per_class.push_back({{"acc", m.acc}, {"wf1", m.wf1}});
    }
    j["er"] = {{"per_class", per_class},
               {"acc_avg", r.er_acc_avg},
               {"wf1_avg", r.er_wf1_avg}};
  }
  return j;
}

}  // namespace molre
