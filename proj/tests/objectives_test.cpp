// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include <gtest/gtest.h>

#include "grad_cases.hpp"
#include "oracles.hpp"
#include "tppt/objectives/losses.hpp"

namespace ad = tppt::ad;
namespace obj = tppt::obj;
using ad::Tensor;

namespace {

Tensor to_tensor(const oracle::Mat& m) {
  std::vector<double> flat;
  for (const auto& r : m) flat.insert(flat.end(), r.begin(), r.end());
  return Tensor::constant({m.size(), m[0].size()}, std::move(flat));
}

oracle::Mat random_units(tppt::Rng& rng, std::size_t n, std::size_t d) {
  oracle::Mat m(n);
  for (auto& r : m) r = oracle::unit(rng.normal_vector(d, 1.0));
  return m;
}

obj::PrototypeSet protos_of(const Tensor& w, bool prompted) {
  obj::PrototypeSet p{{}, w, prompted};
  for (std::size_t k = 0; k < w.dim(0); ++k) p.class_ids.push_back(static_cast<int>(k) * 3 + 1);
  return p;
}

}  // namespace

TEST(Div, IdenticalPrototypesGiveLogTwo) {
  const Tensor w = Tensor::constant({2, 3}, {0.6, 0.8, 0.0, 0.6, 0.8, 0.0});
  EXPECT_NEAR(obj::div_loss(w).item(), std::log(2.0), 1e-12);
}

TEST(Div, OrthogonalUnitPrototypes) {
  const Tensor w = Tensor::constant({2, 3}, {1.0, 0.0, 0.0, 0.0, 1.0, 0.0});
  EXPECT_NEAR(obj::div_loss(w).item(), std::log(2.0) - 2.0, 1e-12);
}

TEST(Div, NeedsTwoPrototypes) {
  EXPECT_THROW(obj::div_loss(Tensor::constant({1, 2}, {1.0, 0.0})), tppt::ContractError);
}

TEST(Ce, UniformProbabilitiesGiveLogC) {
  for (std::size_t c : {2u, 5u, 17u}) {
    const std::size_t n = 4;
    const Tensor probs = Tensor::constant({n, c}, std::vector<double>(n * c, 1.0 / static_cast<double>(c)));
    const std::vector<std::size_t> y{0, c - 1, 1, 0};
    EXPECT_NEAR(obj::ce_loss(probs, y).item(), std::log(static_cast<double>(c)), 1e-12);
  }
}

TEST(Ce, IdenticalPrototypesGiveUniformProbabilities) {
  const Tensor z = Tensor::constant({1, 2}, {0.6, 0.8});
  const Tensor w = Tensor::constant({3, 2}, {1.0, 0.0, 1.0, 0.0, 1.0, 0.0});
  const auto p = obj::class_probabilities(z, w, 0.07).to_vector();
  for (double v : p) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Ce, RejectsOutOfRangeLabels) {
  const Tensor probs = Tensor::constant({1, 2}, {0.5, 0.5});
  const std::vector<std::size_t> y{2};
  EXPECT_THROW(obj::ce_loss(probs, y), tppt::ContractError);
}

TEST(Tpcl, SingleSampleSingleClassIsZero) {
  const Tensor z = Tensor::constant({1, 2}, {1.0, 0.0});
  const Tensor w = Tensor::constant({1, 2}, {0.0, 1.0});
  const std::vector<std::size_t> y{0};
  EXPECT_NEAR(obj::tpcl_loss(z, w, y, 0.07).item(), 0.0, 1e-15);
}

TEST(Tpcl, HandWorkedTwoByTwo) {
  // cos = [[1, 0], [0, 1]], tau = 1: each class term is log(e + 1) - 1.
  const Tensor z = Tensor::constant({2, 2}, {1.0, 0.0, 0.0, 1.0});
  const std::vector<std::size_t> y{0, 1};
  EXPECT_NEAR(obj::tpcl_loss(z, z, y, 1.0).item(), std::log(std::exp(1.0) + 1.0) - 1.0, 1e-14);
}

TEST(Tpcl, ClassWithoutSamplesContributesNothingButCountsInC) {
  const Tensor z = Tensor::constant({2, 2}, {1.0, 0.0, 0.6, 0.8});
  const Tensor w2 = Tensor::constant({2, 2}, {1.0, 0.0, 0.0, 1.0});
  const Tensor w3 = Tensor::constant({3, 2}, {1.0, 0.0, 0.0, 1.0, -1.0, 0.0});
  const std::vector<std::size_t> y{0, 1};
  EXPECT_NEAR(obj::tpcl_loss(z, w3, y, 0.5).item() * 3.0, obj::tpcl_loss(z, w2, y, 0.5).item() * 2.0, 1e-13);
}

TEST(OracleEquivalence, ProbabilitiesCeTpclDiv) {
  tppt::Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = rng.integer(1, 9), c = rng.integer(2, 7), d = rng.integer(2, 8);
    const double tau = rng.uniform(0.05, 1.0);
    const auto z = random_units(rng, n, d), w = random_units(rng, c, d);
    std::vector<std::size_t> y(n);
    for (auto& v : y) v = rng.integer(0, c - 1);
    const Tensor zt = to_tensor(z), wt = to_tensor(w);

    const auto p = obj::class_probabilities(zt, wt, tau).to_vector();
    const auto po = oracle::class_probabilities(z, w, tau);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < c; ++k) ASSERT_NEAR(p[i * c + k], po[i][k], 1e-10);
    ASSERT_NEAR(obj::ce_loss(obj::class_probabilities(zt, wt, tau), y).item(), oracle::ce(po, y), 1e-10);
    ASSERT_NEAR(obj::tpcl_loss(zt, wt, y, tau).item(), oracle::tpcl(z, w, y, tau), 1e-10);
    ASSERT_NEAR(obj::div_loss(wt).item(), oracle::div(w), 1e-10);

    oracle::Mat cos(n, oracle::Vec(c));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < c; ++k) cos[i][k] = oracle::dot(z[i], w[k]);
    ASSERT_NEAR(oracle::tpcl_from_cosines(cos, y, c, tau), oracle::tpcl(z, w, y, tau), 1e-10);
  }
}

TEST(CompositeLoss, TermsByMode) {
  tppt::Rng rng(3);
  const auto z = random_units(rng, 5, 4), w = random_units(rng, 3, 4);
  const std::vector<std::size_t> y{0, 2, 1, 1, 0};
  const Tensor zt = to_tensor(z), wt = to_tensor(w);
  const double tau = 0.2, alpha = 0.7;
  const double ce = oracle::ce(oracle::class_probabilities(z, w, tau), y);
  const double tp = oracle::tpcl(z, w, y, tau);
  const double dv = oracle::div(w);

  const auto ce_only = obj::composite_loss(obj::Mode::ce_only, zt, y, protos_of(wt, false), alpha, tau);
  EXPECT_NEAR(ce_only.total_value(), ce, 1e-12);
  EXPECT_FALSE(ce_only.tpcl.defined());

  const auto v = obj::composite_loss(obj::Mode::tppt_v, zt, y, protos_of(wt, false), alpha, tau);
  EXPECT_NEAR(v.total_value(), ce + tp, 1e-12);
  EXPECT_FALSE(v.div.defined());

  const auto vt = obj::composite_loss(obj::Mode::tppt_vt, zt, y, protos_of(wt, true), alpha, tau);
  EXPECT_NEAR(vt.total_value(), ce + tp + alpha * dv, 1e-12);
  EXPECT_NEAR(vt.div_value(), dv, 1e-12);
}

TEST(CompositeLoss, DivSkippedWithOneClass) {
  const Tensor z = Tensor::constant({2, 2}, {1.0, 0.0, 0.6, 0.8});
  const Tensor w = Tensor::constant({1, 2}, {0.0, 1.0});
  const std::vector<std::size_t> y{0, 0};
  const auto out = obj::composite_loss(obj::Mode::tppt_vt, z, y, protos_of(w, true), 1.0, 0.07);
  EXPECT_FALSE(out.div.defined());
  EXPECT_EQ(out.div_value(), 0.0);
}

TEST(CompositeLoss, ContractViolations) {
  const Tensor z = Tensor::constant({1, 2}, {1.0, 0.0});
  const Tensor w = Tensor::constant({2, 2}, {1.0, 0.0, 0.0, 1.0});
  const std::vector<std::size_t> y{0};
  EXPECT_THROW(obj::composite_loss(obj::Mode::tppt_vt, z, y, protos_of(w, false), 1.0, 0.07), tppt::ContractError);
  EXPECT_THROW(obj::composite_loss(obj::Mode::tppt_v, z, y, protos_of(w, false), -1.0, 0.07), tppt::ContractError);
  const Tensor bad = Tensor::constant({1, 3}, {1.0, 0.0, 0.0});
  EXPECT_THROW(obj::composite_loss(obj::Mode::tppt_v, bad, y, protos_of(w, false), 1.0, 0.07), tppt::ShapeError);
}

TEST(PrototypeSet, MapsClassIdsToRows) {
  const auto p = protos_of(Tensor::constant({3, 1}, {1.0, 1.0, 1.0}), false);  // ids 1, 4, 7
  const std::vector<int> labels{7, 1, 4};
  EXPECT_EQ(p.rows_for(labels), (std::vector<std::size_t>{2, 0, 1}));
  EXPECT_THROW(p.index_of(2), tppt::ContractError);
}

TEST(InfoNce, PerfectAlignmentBeatsShuffled) {
  const Tensor a = Tensor::constant({2, 2}, {1.0, 0.0, 0.0, 1.0});
  const Tensor b = Tensor::constant({2, 2}, {0.0, 1.0, 1.0, 0.0});
  EXPECT_LT(obj::symmetric_info_nce(a, a, 0.1).item(), obj::symmetric_info_nce(a, b, 0.1).item());
  EXPECT_NEAR(obj::symmetric_info_nce(a, a, 1.0).item(), std::log(1.0 + std::exp(-1.0)), 1e-14);
}

// The random configurations shared with the acceptance run; a few per family keep
// the unit suite quick.
class LossGradient : public ::testing::TestWithParam<std::string> {};

TEST_P(LossGradient, RandomConfigurationsPassCentralDifferences) {
  tppt::Rng rng(std::hash<std::string>{}(GetParam()) ^ 0x5eedULL);
  for (int k = 0; k < 25; ++k) {
    auto c = gradcase::make(GetParam(), rng);
    const auto report = ad::grad_check(c.graph, c.inputs, 1e-4, 1e-4);
    for (const auto& e : report.entries) ASSERT_TRUE(e.passed) << "config " << k << " " << e.parameter << " " << e.max_relative_error;
  }
}

INSTANTIATE_TEST_SUITE_P(Families, LossGradient,
                         ::testing::Values("ce", "tpcl", "div", "ce+tpcl", "ce+tpcl+div"),
                         [](const auto& info) {
                           std::string s = info.param;
                           for (char& ch : s)
                             if (ch == '+') ch = '_';
                           return s;
                         });
