#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "molre/cost.hpp"
#include "molre/model.hpp"
#include "molre/train.hpp"

namespace {

using molre::Model;
using molre::ModelConfig;
using molre::Sample;
using molre::Task;
using molre::Tensor;
using molre::VariantId;

ModelConfig small_model_config() {
  ModelConfig cfg;
  cfg.molre.d = 8;
  cfg.molre.n_experts = 3;
  cfg.molre.top_k = 2;
  cfg.molre.shared_ranks = {2, 2, 2};
  cfg.molre.task_rank = 2;
  cfg.molre.num_blocks = 2;
  cfg.fusion_layers = 1;
  cfg.ffn_dim = 16;
  cfg.classes = 6;
  return cfg;
}

Sample random_sample(std::size_t d, std::size_t classes, molre::Rng& rng) {
  Sample s;
  s.x_t = Tensor::normal({3, d}, 1.0, rng);
  s.x_a = Tensor::normal({2, d}, 1.0, rng);
  s.y_r = rng.uniform(-3.0, 3.0);
  s.y_c.resize(classes);
  for (auto& v : s.y_c) v = rng.uniform() < 0.5 ? 0 : 1;
  return s;
}

TEST(MaeLoss, Trivials) {
  EXPECT_DOUBLE_EQ(molre::mae_loss({1.0, -2.0}, {1.0, -2.0}), 0.0);
  EXPECT_DOUBLE_EQ(molre::mae_loss({1.0, -1.0}, {0.0, 0.0}), 1.0);
}

TEST(MaeLoss, MatchesReferenceOracle) {
  molre::Rng rng(1);
  std::vector<double> y(16), p(16);
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = rng.uniform(-3, 3);
    p[i] = rng.uniform(-3, 3);
  }
  double want = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) want += std::fabs(y[i] - p[i]);
  want /= static_cast<double>(y.size());
  EXPECT_NEAR(molre::mae_loss(y, p), want, 1e-12);
}

TEST(MaeLoss, Errors) {
  EXPECT_THROW(molre::mae_loss({}, {}), molre::ValueError);
  EXPECT_THROW(molre::mae_loss({1.0}, {1.0, 2.0}), molre::ShapeError);
}

TEST(EmotionLoss, PerfectPredictionNearZero) {
  const double eps = molre::kProbEps;
  std::vector<std::uint8_t> y = {1, 0, 1, 0, 0, 1};
  std::vector<double> p(6);
  for (std::size_t j = 0; j < 6; ++j) p[j] = y[j] ? 1.0 - eps : eps;
  EXPECT_LT(molre::emotion_loss({y}, {p}), 1e-5);
}

TEST(EmotionLoss, UniformUncertaintyIsClassCountTimesLn2) {
  std::vector<std::uint8_t> y = {1, 0, 0, 1, 1, 0};
  std::vector<double> p(6, 0.5);
  EXPECT_NEAR(molre::emotion_loss({y}, {p}), 6.0 * std::log(2.0), 1e-12);
  EXPECT_NEAR(molre::emotion_loss({y}, {p}), 4.158883, 1e-5);
}

TEST(EmotionLoss, MatchesReferenceOracle) {
  molre::Rng rng(2);
  std::vector<std::vector<std::uint8_t>> y(4, std::vector<std::uint8_t>(6));
  std::vector<std::vector<double>> p(4, std::vector<double>(6));
  for (auto& row : y) {
    for (auto& v : row) v = rng.uniform() < 0.5 ? 0 : 1;
  }
  for (auto& row : p) {
    for (auto& v : row) v = rng.uniform(0.01, 0.99);
  }
  double want = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 6; ++j) {
      want -= y[i][j] ? std::log(p[i][j]) : std::log(1.0 - p[i][j]);
    }
  }
  want /= 4.0;
  EXPECT_NEAR(molre::emotion_loss(y, p), want, 1e-12);
}

TEST(EmotionLoss, CePositiveOnlyKeepsOnlyPositiveTerm) {
  std::vector<std::uint8_t> y = {1, 0};
  std::vector<double> p = {0.8, 0.3};
  const double bce = molre::emotion_loss({y}, {p});
  const double lit = molre::emotion_loss({y}, {p}, molre::EmotionLossMode::CePositiveOnly);
  EXPECT_NEAR(lit, -std::log(0.8), 1e-12);
  EXPECT_NEAR(bce, -std::log(0.8) - std::log(0.7), 1e-12);
}

TEST(EmotionLoss, ShapeMismatchRejected) {
  EXPECT_THROW(molre::emotion_loss({{1, 0}}, {{0.5}}), molre::ShapeError);
  EXPECT_THROW(molre::emotion_loss({}, {}), molre::ValueError);
}

TEST(Losses, NonNegativeOnRandomBatches) {
  molre::Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> y(4), p(4);
    std::vector<std::vector<std::uint8_t>> yc(4, std::vector<std::uint8_t>(6));
    std::vector<std::vector<double>> pc(4, std::vector<double>(6));
    for (std::size_t i = 0; i < 4; ++i) {
      y[i] = rng.uniform(-3, 3);
      p[i] = rng.uniform(-5, 5);
      for (std::size_t j = 0; j < 6; ++j) {
        yc[i][j] = rng.uniform() < 0.5 ? 0 : 1;
        pc[i][j] = rng.uniform(-0.5, 1.5);  // clamp handles out-of-range probabilities
      }
    }
    EXPECT_GE(molre::mae_loss(y, p), 0.0);
    EXPECT_GE(molre::emotion_loss(yc, pc), 0.0);
    EXPECT_GE(molre::emotion_loss(yc, pc, molre::EmotionLossMode::CePositiveOnly), 0.0);
  }
}

TEST(JointLoss, SumAndNanRejection) {
  EXPECT_DOUBLE_EQ(molre::joint_loss(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(molre::joint_loss(0.5, 1.5), 2.0);
  EXPECT_THROW(molre::joint_loss(std::nan(""), 0.0), molre::ValueError);
}

TEST(LossGraphs, AgreeWithNumericLosses) {
  molre::Rng rng(3);
  std::vector<Tensor> preds;
  std::vector<double> targets;
  std::vector<Tensor> probs;
  std::vector<std::vector<std::uint8_t>> labels;
  std::vector<std::vector<double>> probs_numeric;
  std::vector<double> preds_numeric;
  for (int i = 0; i < 5; ++i) {
    const double v = rng.uniform(-2, 2);
    preds.push_back(Tensor::scalar(v));
    preds_numeric.push_back(v);
    targets.push_back(rng.uniform(-2, 2));
    std::vector<double> row(6);
    std::vector<std::uint8_t> lab(6);
    for (std::size_t j = 0; j < 6; ++j) {
      row[j] = rng.uniform(0.05, 0.95);
      lab[j] = rng.uniform() < 0.5 ? 0 : 1;
    }
    probs.push_back(Tensor::from({6}, row));
    probs_numeric.push_back(row);
    labels.push_back(lab);
  }
  EXPECT_NEAR(molre::mae_loss_graph(preds, targets).item(),
              molre::mae_loss(targets, preds_numeric), 1e-12);
  EXPECT_NEAR(molre::emotion_loss_graph(probs, labels).item(),
              molre::emotion_loss(labels, probs_numeric), 1e-12);
  EXPECT_NEAR(
      molre::emotion_loss_graph(probs, labels, molre::EmotionLossMode::CePositiveOnly).item(),
      molre::emotion_loss(labels, probs_numeric, molre::EmotionLossMode::CePositiveOnly), 1e-12);
}

TEST(Predict, SixClassProbabilitiesInRange) {
  Model m = Model::build(VariantId::Mmolre, small_model_config(), 11);
  molre::Rng rng(4);
  Sample s = random_sample(8, 6, rng);
  molre::Prediction p = m.predict(s);
  ASSERT_EQ(p.y_c_hat.size(), 6u);
  for (double v : p.y_c_hat) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Predict, ZeroHeadsGiveZeroAndHalf) {
  Model m = Model::build(VariantId::Mmolre, small_model_config(), 12);
  for (auto& [task, head] : m.heads()) {
    for (Tensor* t : {&head.w1, &head.b1, &head.w2, &head.b2}) {
      for (double& v : t->values()) v = 0.0;
    }
  }
  molre::Rng rng(5);
  Sample s = random_sample(8, 6, rng);
  molre::Prediction p = m.predict(s);
  EXPECT_DOUBLE_EQ(p.y_r_hat, 0.0);
  for (double v : p.y_c_hat) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Predict, MatchesManualModuleComposition) {
  ModelConfig cfg = small_model_config();
  Model m = Model::build(VariantId::Mmolre, cfg, 13);
  molre::Rng rng(6);
  Sample s = random_sample(8, 6, rng);
  molre::Prediction got = m.predict(s);

  molre::NoGradGuard no_grad;
  auto text = molre::unitse_forward(s.x_t, m.unitse().at(molre::Modality::Text), cfg.molre);
  auto audio = molre::unitse_forward(s.x_a, m.unitse().at(molre::Modality::Audio), cfg.molre);
  Tensor fused_sa = molre::fuse(text.at(Task::SA), audio.at(Task::SA), m.fusion()[0]);
  Tensor fused_er = molre::fuse(text.at(Task::ER), audio.at(Task::ER), m.fusion()[1]);
  Tensor y_r = molre::head_forward(fused_sa, m.heads().at(Task::SA));
  Tensor y_c = molre::sigmoid(molre::head_forward(fused_er, m.heads().at(Task::ER)));
  EXPECT_NEAR(got.y_r_hat, y_r.item(), 1e-12);
  for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(got.y_c_hat[j], y_c.values()[j], 1e-12);
}

TEST(Predict, ShapeErrorsCarryModuleContext) {
  Model m = Model::build(VariantId::Mmolre, small_model_config(), 14);
  Sample s;
  s.x_t = Tensor::zeros({3, 5});  // wrong width
  s.x_a = Tensor::zeros({2, 8});
  s.y_c.assign(6, 0);
  try {
    m.predict(s);
    FAIL() << "expected ShapeError";
  } catch (const molre::ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("model.forward"), std::string::npos);
  }
}

TEST(Variants, StructuralCounts) {
  ModelConfig cfg = small_model_config();
  EXPECT_EQ(Model::build(VariantId::PostFusion, cfg, 1).fusion_instances(), 1u);
  EXPECT_EQ(Model::build(VariantId::PreFusion, cfg, 1).fusion_instances(), 2u);
  EXPECT_EQ(Model::build(VariantId::Mmolre, cfg, 1).fusion_instances(), 2u);
  EXPECT_EQ(Model::build(VariantId::SingleTaskSA, cfg, 1).fusion_instances(), 1u);
  EXPECT_TRUE(Model::build(VariantId::Mmolre, cfg, 1).unitse().size() == 2);
  EXPECT_TRUE(Model::build(VariantId::PreFusion, cfg, 1).unitse().empty());
}

TEST(Variants, UnknownNameRejected) {
  try {
    molre::parse_variant("bogus");
    FAIL() << "expected ConfigError";
  } catch (const molre::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("variant"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("bogus"), std::string::npos);
  }
}

TEST(Variants, ParameterCountOrdering) {
  ModelConfig cfg = small_model_config();
  const std::size_t single = Model::build(VariantId::SingleTaskSA, cfg, 1).parameter_count();
  const std::size_t post = Model::build(VariantId::PostFusion, cfg, 1).parameter_count();
  const std::size_t pre = Model::build(VariantId::PreFusion, cfg, 1).parameter_count();
  const std::size_t full = Model::build(VariantId::Mmolre, cfg, 1).parameter_count();
  EXPECT_LT(single, post);
  EXPECT_LT(post, pre);
  EXPECT_LT(pre, full);
  // Analytic counts match the literal parameter totals.
  EXPECT_EQ(single, molre::count_variant_params(VariantId::SingleTaskSA, cfg));
  EXPECT_EQ(post, molre::count_variant_params(VariantId::PostFusion, cfg));
  EXPECT_EQ(pre, molre::count_variant_params(VariantId::PreFusion, cfg));
  EXPECT_EQ(full, molre::count_variant_params(VariantId::Mmolre, cfg));
}

TEST(Variants, PreFusionEqualsMmolreWithIdentityUnitse) {
  ModelConfig cfg = small_model_config();
  Model pre = Model::build(VariantId::PreFusion, cfg, 21);

  ModelConfig id_cfg = cfg;
  id_cfg.molre.residual = true;
  Model full = Model::build(VariantId::Mmolre, id_cfg, 22);
  // Zero every expert so each block is input + 0 = input.
  for (auto& [mod, blocks] : full.unitse()) {
    for (auto& block : blocks) {
      for (auto& e : block.shared) {
        for (Tensor* t : {&e.w1, &e.b1, &e.w2, &e.b2}) {
          for (double& v : t->values()) v = 0.0;
        }
      }
      for (auto& [task, e] : block.task_experts) {
        for (Tensor* t : {&e.w1, &e.b1, &e.w2, &e.b2}) {
          for (double& v : t->values()) v = 0.0;
        }
      }
    }
  }
  // Copy the pre-fusion fusion/head weights into the full model.
  full.fusion() = pre.fusion();
  full.heads() = pre.heads();

  molre::Rng rng(7);
  for (int trial = 0; trial < 3; ++trial) {
    Sample s = random_sample(8, 6, rng);
    molre::Prediction a = pre.predict(s);
    molre::Prediction b = full.predict(s);
    EXPECT_EQ(a.y_r_hat, b.y_r_hat);  // bitwise: identity blocks add exact zeros
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(a.y_c_hat[j], b.y_c_hat[j]);
  }
}

TEST(Gradients, TaskHeadsAreSeparated) {
  Model m = Model::build(VariantId::Mmolre, small_model_config(), 23);
  molre::Rng rng(8);
  Sample s = random_sample(8, 6, rng);

  // Emotion loss alone: SA head must receive exactly zero gradient.
  m.zero_grads();
  Model::Outputs out = m.forward(s);
  molre::emotion_loss_graph({out.y_c_probs}, {s.y_c}).backward();
  double sa_grad = 0.0, er_grad = 0.0;
  for (double g : m.heads().at(Task::SA).w1.grad()) sa_grad += std::fabs(g);
  for (double g : m.heads().at(Task::ER).w1.grad()) er_grad += std::fabs(g);
  EXPECT_EQ(sa_grad, 0.0);
  EXPECT_GT(er_grad, 0.0);

  // And the reverse for the regression loss.
  m.zero_grads();
  out = m.forward(s);
  molre::mae_loss_graph({out.y_r_hat}, {s.y_r}).backward();
  sa_grad = er_grad = 0.0;
  for (double g : m.heads().at(Task::SA).w1.grad()) sa_grad += std::fabs(g);
  for (double g : m.heads().at(Task::ER).w1.grad()) er_grad += std::fabs(g);
  EXPECT_GT(sa_grad, 0.0);
  EXPECT_EQ(er_grad, 0.0);
}

TEST(Gradients, SingleTaskVariantsProduceOnlyTheirOutput) {
  ModelConfig cfg = small_model_config();
  molre::Rng rng(9);
  Sample s = random_sample(8, 6, rng);
  Model sa = Model::build(VariantId::SingleTaskSA, cfg, 1);
  Model::Outputs out = sa.forward(s);
  EXPECT_TRUE(out.y_r_hat.defined());
  EXPECT_FALSE(out.y_c_probs.defined());
  Model er = Model::build(VariantId::SingleTaskER, cfg, 1);
  out = er.forward(s);
  EXPECT_FALSE(out.y_r_hat.defined());
  EXPECT_TRUE(out.y_c_probs.defined());
}

}  // namespace
