// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include <gtest/gtest.h>

#include "grad_cases.hpp"
#include "tppt/encoders/pretrain.hpp"

namespace ad = tppt::ad;
namespace enc = tppt::enc;
using ad::Tensor;

namespace {

enc::EncoderConfig small_config() {
  enc::EncoderConfig c;
  c.depth = 2;
  c.model_dim = 8;
  c.heads = 2;
  c.mlp_dim = 16;
  c.embed_dim = 6;
  c.image_tokens = 3;
  c.patch_dim = 2;
  c.text_length = 3;
  c.vocab_size = 7;
  return c;
}

Tensor random_images(tppt::Rng& rng, std::size_t n, const enc::EncoderConfig& c) {
  return Tensor::constant({n, c.image_tokens, c.patch_dim}, rng.normal_vector(n * c.image_tokens * c.patch_dim, 1.0));
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(DualEncoder, OutputsUnitRowsOfEmbedWidth) {
  const auto cfg = small_config();
  const enc::DualEncoder e(cfg, 1);
  tppt::Rng rng(2);
  const Tensor zi = e.encode_images(random_images(rng, 4, cfg));
  const Tensor zt = e.encode_texts({{0, 1, 2}, {0, 1, 6}});
  EXPECT_EQ(zi.shape(), (ad::Shape{4, 6}));
  EXPECT_EQ(zt.shape(), (ad::Shape{2, 6}));
  for (const Tensor* z : {&zi, &zt})
    for (std::size_t r = 0; r < z->dim(0); ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < 6; ++k) s += z->data()[r * 6 + k] * z->data()[r * 6 + k];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(DualEncoder, SeedDeterminesWeights) {
  const auto cfg = small_config();
  const auto a = enc::DualEncoder(cfg, 5).parameters();
  const auto b = enc::DualEncoder(cfg, 5).parameters();
  const auto c = enc::DualEncoder(cfg, 6).parameters();
  ASSERT_EQ(a.size(), b.size());
  bool any_diff = false;
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].to_vector(), b[k].to_vector());
    any_diff = any_diff || a[k].to_vector() != c[k].to_vector();
  }
  EXPECT_TRUE(any_diff);
}

TEST(DualEncoder, SingleAndBatchedEncodingAgree) {
  const auto cfg = small_config();
  const enc::DualEncoder e(cfg, 3);
  tppt::Rng rng(4);
  const Tensor imgs = random_images(rng, 3, cfg);
  const auto batched = e.encode_images(imgs).to_vector();
  const std::size_t w = cfg.image_tokens * cfg.patch_dim;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto one = e.encode_image(imgs.data().subspan(i * w, w));
    EXPECT_LT(max_abs_diff(one, std::span<const double>(batched).subspan(i * 6, 6)), 1e-14);
  }
  const auto t = e.encode_text({0, 2, 5});
  EXPECT_LT(max_abs_diff(t, e.encode_texts({{0, 2, 5}}).data()), 1e-14);
}

TEST(DualEncoder, FreezeDisablesGradients) {
  enc::DualEncoder e(small_config(), 1);
  EXPECT_FALSE(e.frozen());
  e.freeze();
  EXPECT_TRUE(e.frozen());
  for (const auto& p : e.parameters()) EXPECT_FALSE(p.requires_grad());
}

TEST(DualEncoder, ParameterSlotsFollowParameterOrder) {
  enc::DualEncoder e(small_config(), 1);
  const auto params = e.parameters();
  const auto slots = e.parameter_slots();
  ASSERT_EQ(params.size(), slots.size());
  for (std::size_t k = 0; k < params.size(); ++k) EXPECT_EQ(params[k].node(), slots[k]->node());
}

TEST(DualEncoder, PromptsChangeTheEmbedding) {
  const auto cfg = small_config();
  const enc::DualEncoder e(cfg, 1);
  tppt::Rng rng(9);
  const Tensor imgs = random_images(rng, 2, cfg);
  const auto plain = e.encode_images(imgs).to_vector();
  const Tensor p0 = Tensor::constant({2, cfg.model_dim}, rng.normal_vector(2 * cfg.model_dim, 1.0));
  const Tensor p1 = Tensor::constant({2, cfg.model_dim}, rng.normal_vector(2 * cfg.model_dim, 1.0));
  const std::vector<Tensor> shallow{p0}, deep{p0, p1};
  const auto a = e.encode_images(imgs, shallow).to_vector();
  const auto b = e.encode_images(imgs, deep).to_vector();
  EXPECT_GT(max_abs_diff(plain, a), 1e-6);
  EXPECT_GT(max_abs_diff(a, b), 1e-6);

  const auto text_plain = e.encode_text({0, 1, 4});
  const auto text_prompted = e.encode_text({0, 1, 4}, Tensor::constant({2, 2, cfg.model_dim}, rng.normal_vector(4 * cfg.model_dim, 1.0)));
  EXPECT_GT(max_abs_diff(text_plain, text_prompted), 1e-6);
}

TEST(DualEncoder, SharedAndPerExamplePromptsAgree) {
  const auto cfg = small_config();
  const enc::DualEncoder e(cfg, 1);
  tppt::Rng rng(10);
  const Tensor imgs = random_images(rng, 3, cfg);
  const auto pv = rng.normal_vector(2 * cfg.model_dim, 1.0);
  std::vector<double> tiled;
  for (int i = 0; i < 3; ++i) tiled.insert(tiled.end(), pv.begin(), pv.end());
  const std::vector<Tensor> shared{Tensor::constant({2, cfg.model_dim}, pv)};
  const std::vector<Tensor> per{Tensor::constant({3, 2, cfg.model_dim}, tiled)};
  EXPECT_LT(max_abs_diff(e.encode_images(imgs, shared).data(), e.encode_images(imgs, per).data()), 1e-14);
}

TEST(DualEncoder, PromptDeeperThanEncoderIsRejected) {
  auto cfg = small_config();
  cfg.depth = 1;
  const enc::DualEncoder e(cfg, 1);
  tppt::Rng rng(11);
  const Tensor p = Tensor::constant({1, cfg.model_dim}, rng.normal_vector(cfg.model_dim, 1.0));
  const std::vector<Tensor> too_deep{p, p};
  EXPECT_THROW(e.encode_images(random_images(rng, 1, cfg), too_deep), tppt::ContractError);
}

TEST(DualEncoder, ShapeErrors) {
  const auto cfg = small_config();
  const enc::DualEncoder e(cfg, 1);
  EXPECT_THROW(e.encode_images(Tensor::constant({1, 2, 2}, {1, 2, 3, 4})), tppt::ShapeError);
  EXPECT_THROW(e.encode_texts({{0, 1}}), tppt::ShapeError);
  EXPECT_THROW(e.encode_texts({{0, 1, 7}}), tppt::ContractError);
  tppt::Rng rng(1);
  const std::vector<Tensor> bad{Tensor::constant({2, cfg.model_dim + 1}, std::vector<double>(2 * cfg.model_dim + 2, 0.0))};
  EXPECT_THROW(e.encode_images(random_images(rng, 1, cfg), bad), tppt::ShapeError);
}

TEST(EncoderConfig, Validation) {
  auto c = small_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), tppt::ConfigError);
  c = small_config();
  c.tau = 0.0;
  EXPECT_THROW(c.validate(), tppt::ConfigError);
  c = small_config();
  c.depth = 0;
  EXPECT_THROW(c.validate(), tppt::ConfigError);
}

class PromptPathwayGradient : public ::testing::TestWithParam<std::string> {};

TEST_P(PromptPathwayGradient, RandomConfigurationsPassCentralDifferences) {
  tppt::Rng rng(std::hash<std::string>{}(GetParam()) ^ 0xabcULL);
  for (int k = 0; k < 15; ++k) {
    auto c = gradcase::make(GetParam(), rng);
    const auto report = ad::grad_check(c.graph, c.inputs, 1e-4, 1e-4);
    for (const auto& e : report.entries) ASSERT_TRUE(e.passed) << "config " << k << " " << e.parameter << " " << e.max_relative_error;
  }
}

INSTANTIATE_TEST_SUITE_P(Pathways, PromptPathwayGradient,
                         ::testing::Values("visual-prompt pathway", "textual-prompt pathway"),
                         [](const auto& info) { return info.param.substr(0, info.param.find('-')); });

// Backbone weights include elements whose gradient is tiny next to the loss's
// third derivative, where a 1e-4 central difference carries a truncation error
// of the same order. Here each element must agree either relatively or within
// an absolute band scaled to that truncation, and a 1e-6 step must agree tightly.
TEST(BackboneGradient, AgreesWithCentralDifferences) {
  tppt::Rng rng(99);
  for (int k = 0; k < 10; ++k) {
    auto c = gradcase::backbone_case(rng);
    const auto ev = ad::evaluate_with_gradients(c.graph, c.inputs);
    ad::Bindings probe = ad::detail::clone_inputs(c.inputs);
    const auto loss_at = [&] { return ad::detail::loss_of(c.graph, c.graph.forward(probe)).item(); };
    for (const auto& [name, analytic] : ev.grads) {
      auto values = probe.at(name).data_mut();
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double orig = values[i];
        double fd[2];
        const double steps[2] = {1e-4, 1e-6};
        for (int s = 0; s < 2; ++s) {
          values[i] = orig + steps[s];
          const double up = loss_at();
          values[i] = orig - steps[s];
          const double down = loss_at();
          fd[s] = (up - down) / (2.0 * steps[s]);
        }
        values[i] = orig;
        const double a = analytic[i];
        EXPECT_LE(std::abs(a - fd[0]), 1e-4 * std::max(std::abs(a), std::abs(fd[0])) + 1e-8) << name << "[" << i << "]";
        EXPECT_LE(std::abs(a - fd[1]), 1e-6 * std::max(std::abs(a), std::abs(fd[1])) + 1e-8) << name << "[" << i << "]";
      }
    }
  }
}

TEST(Pretraining, BeatsChanceAndFreezes) {
  tppt::synth::SynthConfig sc;
  sc.n_classes = 5;
  sc.train_per_class = 5;
  sc.test_per_class = 10;
  sc.pretrain_per_class = 20;
  const auto ds = tppt::synth::generate(sc);
  enc::EncoderConfig ec = small_config();
  enc::PretrainConfig pc;
  pc.epochs = 5;
  enc::PretrainReport report;
  const auto e = enc::pretrain_dual_encoder(ds, ec, pc, 0, &report);
  EXPECT_TRUE(e.frozen());
  EXPECT_GT(report.zero_shot_accuracy, report.chance);
  EXPECT_EQ(report.steps, 5u * 20u);
  ASSERT_EQ(report.loss_curve.size(), 5u);
  EXPECT_LT(report.loss_curve.back(), report.loss_curve.front());
  EXPECT_EQ(e.config().vocab_size, ds.vocab_size());
  EXPECT_EQ(e.config().text_length, ds.text_length());
}

TEST(Pretraining, IsDeterministic) {
  tppt::synth::SynthConfig sc;
  sc.n_classes = 4;
  sc.train_per_class = 3;
  sc.test_per_class = 10;
  sc.pretrain_per_class = 10;
  const auto ds = tppt::synth::generate(sc);
  enc::PretrainConfig pc;
  pc.epochs = 2;
  const auto a = enc::pretrain_dual_encoder(ds, small_config(), pc, 3).parameters();
  const auto b = enc::pretrain_dual_encoder(ds, small_config(), pc, 3).parameters();
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a[k].to_vector(), b[k].to_vector());
}

TEST(Pretraining, FailsLoudlyWhenItCannotBeatChance) {
  tppt::synth::SynthConfig sc;
  sc.n_classes = 10;
  sc.train_per_class = 2;
  sc.test_per_class = 20;
  sc.pretrain_per_class = 1;
  sc.sigma_between = 0.01;
  sc.sigma_within = 0.009;
  const auto ds = tppt::synth::generate(sc);
  enc::PretrainConfig pc;
  pc.epochs = 1;
  pc.lr = 1e-9;
  EXPECT_THROW(enc::pretrain_dual_encoder(ds, small_config(), pc, 0), tppt::PretrainingError);
}
