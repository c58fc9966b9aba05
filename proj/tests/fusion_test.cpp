#include <vector>

#include <gtest/gtest.h>

#include "molre/fusion.hpp"

namespace {

using molre::AttentionProj;
using molre::FusionLayerParams;
using molre::FusionParams;
using molre::Tensor;

Tensor randn(std::vector<std::size_t> shape, molre::Rng& rng) {
  return Tensor::normal(std::move(shape), 1.0, rng);
}

void zero_tensor(Tensor& t) {
  for (double& v : t.values()) v = 0.0;
}

void zero_layer(FusionLayerParams& p) {
  for (AttentionProj* a : {&p.cross_text, &p.cross_audio, &p.self_text, &p.self_audio}) {
    zero_tensor(a->wq);
    zero_tensor(a->bq);
    zero_tensor(a->wk);
    zero_tensor(a->bk);
    zero_tensor(a->wv);
    zero_tensor(a->bv);
  }
  zero_tensor(p.ffn_text.w1);
  zero_tensor(p.ffn_text.b1);
  zero_tensor(p.ffn_text.w2);
  zero_tensor(p.ffn_text.b2);
  zero_tensor(p.ffn_audio.w1);
  zero_tensor(p.ffn_audio.b1);
  zero_tensor(p.ffn_audio.w2);
  zero_tensor(p.ffn_audio.b2);
}

TEST(PrependCls, EmptySequenceYieldsClsRow) {
  molre::Rng rng(1);
  Tensor cls = randn({1, 4}, rng);
  Tensor out = molre::prepend_cls(Tensor::zeros({0, 4}), cls);
  ASSERT_EQ(out.shape(), (std::vector<std::size_t>{1, 4}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(out.values()[i], cls.values()[i]);
}

TEST(PrependCls, ZeroEmbeddingKeepsSequence) {
  molre::Rng rng(2);
  Tensor h = randn({3, 4}, rng);
  Tensor out = molre::prepend_cls(h, Tensor::zeros({1, 4}));
  ASSERT_EQ(out.shape(), (std::vector<std::size_t>{4, 4}));
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out.at({0, c}), 0.0);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out.at({r + 1, c}), h.at({r, c}));
  }
}

TEST(PrependCls, PaperScaleShape) {
  molre::Rng rng(3);
  Tensor h = randn({9, 768}, rng);
  Tensor cls = randn({1, 768}, rng);
  EXPECT_EQ(molre::prepend_cls(h, cls).shape(), (std::vector<std::size_t>{10, 768}));
}

TEST(PrependCls, WidthMismatchRejected) {
  EXPECT_THROW(molre::prepend_cls(Tensor::zeros({2, 4}), Tensor::zeros({1, 5})),
               molre::ShapeError);
}

TEST(CrossAttention, SymmetricInputsSharedProjections) {
  molre::Rng rng(4);
  FusionParams p = molre::make_fusion_params(8, 16, 1, false, rng);
  p.layers[0].cross_audio = p.layers[0].cross_text;  // same projection tensors
  Tensor h = randn({3, 8}, rng);
  auto [z_t, z_a] = molre::cross_attention_pair(h, h, p.layers[0]);
  ASSERT_EQ(z_t.size(), z_a.size());
  for (std::size_t i = 0; i < z_t.size(); ++i) EXPECT_EQ(z_t.values()[i], z_a.values()[i]);
}

TEST(CrossAttention, OneKeyAttentionIsProjectedValueRow) {
  molre::Rng rng(5);
  FusionParams p = molre::make_fusion_params(8, 16, 1, false, rng);
  Tensor h_t = randn({3, 8}, rng);
  Tensor h_a = randn({1, 8}, rng);
  auto [z_t, z_a] = molre::cross_attention_pair(h_t, h_a, p.layers[0]);
  (void)z_a;
  // Pre-residual output row = W_v h_a + b_v for every query.
  const AttentionProj& a = p.layers[0].cross_text;
  Tensor want = molre::add_bias(molre::matmul(h_a, a.wv), a.bv);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 8; ++c) {
      EXPECT_NEAR(z_t.at({r, c}) - h_t.at({r, c}), want.at({0, c}), 1e-12);
    }
  }
}

TEST(CrossAttention, MatchesFormulaOracle) {
  molre::Rng rng(6);
  FusionParams p = molre::make_fusion_params(8, 16, 1, false, rng);
  Tensor h_t = randn({3, 8}, rng);
  Tensor h_a = randn({4, 8}, rng);
  auto [z_t, z_a] = molre::cross_attention_pair(h_t, h_a, p.layers[0]);

  auto project = [](const Tensor& x, const Tensor& w, const Tensor& b) {
    return molre::add_bias(molre::matmul(x, w), b);
  };
  const AttentionProj& at = p.layers[0].cross_text;
  Tensor want_t = molre::add(
      h_t, molre::attention(project(h_t, at.wq, at.bq), project(h_a, at.wk, at.bk),
                            project(h_a, at.wv, at.bv)));
  const AttentionProj& aa = p.layers[0].cross_audio;
  Tensor want_a = molre::add(
      h_a, molre::attention(project(h_a, aa.wq, aa.bq), project(h_t, aa.wk, aa.bk),
                            project(h_t, aa.wv, aa.bv)));
  for (std::size_t i = 0; i < z_t.size(); ++i) {
    EXPECT_NEAR(z_t.values()[i], want_t.values()[i], 1e-10);
  }
  for (std::size_t i = 0; i < z_a.size(); ++i) {
    EXPECT_NEAR(z_a.values()[i], want_a.values()[i], 1e-10);
  }
}

TEST(FusionLayer, ShapesPreserved) {
  molre::Rng rng(7);
  FusionParams p = molre::make_fusion_params(8, 16, 1, false, rng);
  Tensor h_t = randn({10, 8}, rng);
  Tensor h_a = randn({8, 8}, rng);
  auto [o_t, o_a] = molre::fusion_layer(h_t, h_a, p.layers[0]);
  EXPECT_EQ(o_t.shape(), h_t.shape());
  EXPECT_EQ(o_a.shape(), h_a.shape());
}

TEST(FusionLayer, ZeroWeightsActAsIdentity) {
  molre::Rng rng(8);
  FusionParams p = molre::make_fusion_params(8, 16, 1, false, rng);
  zero_layer(p.layers[0]);
  Tensor h_t = randn({4, 8}, rng);
  Tensor h_a = randn({3, 8}, rng);
  auto [o_t, o_a] = molre::fusion_layer(h_t, h_a, p.layers[0]);
  for (std::size_t i = 0; i < h_t.size(); ++i) EXPECT_EQ(o_t.values()[i], h_t.values()[i]);
  for (std::size_t i = 0; i < h_a.size(); ++i) EXPECT_EQ(o_a.values()[i], h_a.values()[i]);
}

TEST(FusionLayer, MatchesManualComposition) {
  molre::Rng rng(9);
  FusionParams p = molre::make_fusion_params(8, 16, 1, false, rng);
  Tensor h_t = randn({3, 8}, rng);
  Tensor h_a = randn({4, 8}, rng);
  auto [got_t, got_a] = molre::fusion_layer(h_t, h_a, p.layers[0]);

  auto project = [](const Tensor& x, const Tensor& w, const Tensor& b) {
    return molre::add_bias(molre::matmul(x, w), b);
  };
  auto self_attend = [&](const Tensor& x, const AttentionProj& a) {
    return molre::add(x, molre::attention(project(x, a.wq, a.bq), project(x, a.wk, a.bk),
                                          project(x, a.wv, a.bv)));
  };
  auto ffn = [&](const Tensor& x, const molre::FfnParams& f) {
    return molre::add(x, project(molre::relu(project(x, f.w1, f.b1)), f.w2, f.b2));
  };
  auto [u_t, u_a] = molre::cross_attention_pair(h_t, h_a, p.layers[0]);
  Tensor want_t = ffn(self_attend(u_t, p.layers[0].self_text), p.layers[0].ffn_text);
  Tensor want_a = ffn(self_attend(u_a, p.layers[0].self_audio), p.layers[0].ffn_audio);
  for (std::size_t i = 0; i < got_t.size(); ++i) {
    EXPECT_NEAR(got_t.values()[i], want_t.values()[i], 1e-12);
  }
  for (std::size_t i = 0; i < got_a.size(); ++i) {
    EXPECT_NEAR(got_a.values()[i], want_a.values()[i], 1e-12);
  }
}

TEST(Fuse, PaperScaleOutputLength) {
  molre::Rng rng(10);
  FusionParams p = molre::make_fusion_params(768, 4 * 768, 5, false, rng);
  Tensor h_t = randn({9, 768}, rng);
  Tensor h_a = randn({7, 768}, rng);
  Tensor fused = molre::fuse(h_t, h_a, p);
  EXPECT_EQ(fused.shape(), (std::vector<std::size_t>{1536}));
}

TEST(Fuse, EmptyStackConcatenatesRawClsEmbeddings) {
  molre::Rng rng(11);
  FusionParams p = molre::make_fusion_params(8, 16, 0, false, rng);
  Tensor fused = molre::fuse(randn({3, 8}, rng), randn({2, 8}, rng), p);
  ASSERT_EQ(fused.size(), 16u);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(fused.values()[i], p.cls_text.values()[i]);
    EXPECT_EQ(fused.values()[8 + i], p.cls_audio.values()[i]);
  }
}

TEST(Fuse, MatchesUnrolledComposition) {
  molre::Rng rng(12);
  FusionParams p = molre::make_fusion_params(8, 16, 2, false, rng);
  Tensor h_t = randn({3, 8}, rng);
  Tensor h_a = randn({4, 8}, rng);
  Tensor got = molre::fuse(h_t, h_a, p);

  Tensor t = molre::prepend_cls(h_t, p.cls_text);
  Tensor a = molre::prepend_cls(h_a, p.cls_audio);
  for (std::size_t l = 0; l < 2; ++l) {
    auto [nt, na] = molre::fusion_layer(t, a, p.layers[l]);
    t = nt;
    a = na;
  }
  Tensor want = molre::concat({molre::reshape(molre::slice(t, 0, 0, 1), {8}),
                               molre::reshape(molre::slice(a, 0, 0, 1), {8})},
                              0);
  for (std::size_t i = 0; i < got.size(); ++i) {
    EXPECT_NEAR(got.values()[i], want.values()[i], 1e-10);
  }
}

TEST(Fuse, NonClsRowPermutationKeepsShapeAndClsPosition) {
  molre::Rng rng(13);
  FusionParams p = molre::make_fusion_params(8, 16, 2, false, rng);
  Tensor h_t = randn({4, 8}, rng);
  Tensor h_a = randn({3, 8}, rng);
  Tensor base = molre::fuse(h_t, h_a, p);

  // Swap two non-cls rows of the audio stream.
  Tensor h_a_perm = Tensor::from(h_a.shape(), h_a.values());
  for (std::size_t c = 0; c < 8; ++c) {
    std::swap(h_a_perm.values()[0 * 8 + c], h_a_perm.values()[2 * 8 + c]);
  }
  Tensor permuted = molre::fuse(h_t, h_a_perm, p);
  EXPECT_EQ(permuted.shape(), base.shape());

  // With zero weights the layers are identities, so the cls rows (and the
  // fused vector) are untouched by any permutation.
  FusionParams zero = molre::make_fusion_params(8, 16, 2, false, rng);
  for (auto& layer : zero.layers) zero_layer(layer);
  Tensor z1 = molre::fuse(h_t, h_a, zero);
  Tensor z2 = molre::fuse(h_t, h_a_perm, zero);
  for (std::size_t i = 0; i < z1.size(); ++i) EXPECT_EQ(z1.values()[i], z2.values()[i]);
}

TEST(Fuse, TaskSeparation) {
  molre::Rng rng(14);
  FusionParams sa = molre::make_fusion_params(8, 16, 2, false, rng);
  FusionParams er = molre::make_fusion_params(8, 16, 2, false, rng);
  Tensor h_t = randn({3, 8}, rng);
  Tensor h_a = randn({2, 8}, rng);
  Tensor before = molre::fuse(h_t, h_a, er);
  for (double& v : sa.layers[0].cross_text.wq.values()) v += 100.0;
  for (double& v : sa.cls_text.values()) v -= 5.0;
  Tensor after = molre::fuse(h_t, h_a, er);
  for (std::size_t i = 0; i < before.size(); ++i) {
    EXPECT_EQ(before.values()[i], after.values()[i]);  // bitwise
  }
}

TEST(Fuse, PrenormChangesOutputsButKeepsShape) {
  molre::Rng rng(15);
  FusionParams plain = molre::make_fusion_params(8, 16, 2, false, rng);
  FusionParams normed = plain;
  normed.prenorm = true;
  Tensor h_t = randn({3, 8}, rng);
  Tensor h_a = randn({2, 8}, rng);
  Tensor a = molre::fuse(h_t, h_a, plain);
  Tensor b = molre::fuse(h_t, h_a, normed);
  EXPECT_EQ(a.shape(), b.shape());
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += std::fabs(a.values()[i] - b.values()[i]);
  EXPECT_GT(diff, 0.0);
}

}  // namespace
