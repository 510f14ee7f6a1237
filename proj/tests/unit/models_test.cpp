#include <gtest/gtest.h>

#include <cmath>

#include "../common/gradcheck.hpp"
#include "dubd/models.hpp"

using namespace dubd;
using dubd::testing::random_tensor;

namespace {

DenoiserConfig tiny_denoiser() {
  DenoiserConfig c;
  c.width = 8;
  c.cat_blocks = 2;
  c.res_blocks = 2;
  c.encoder_hidden = 6;
  return c;
}

template <typename T>
void zero_all(ParameterSet<T>& ps) {
  for (auto& [name, t] : ps)
    for (auto& v : t.data()) v = T(0);
}

bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace

TEST(ParamCount, DefaultsReconcileThePublishedTotals) {
  EXPECT_EQ(count_params(CenetConfig{}), 151235u);
  EXPECT_EQ(count_params(DenoiserConfig{}), 2088515u);
  EXPECT_EQ(count_params(CenetConfig{}) + count_params(DenoiserConfig{}), 2239750u);
  EXPECT_EQ(count_encoder_params(DenoiserConfig{}), 512u + 2u * 8256u);
  EXPECT_EQ(count_resblock_params(64), 2u * (64u * 64u * 9u + 64u));
  EXPECT_EQ(count_resblock_params(64), 73856u);
  EXPECT_EQ(count_catblock_params(DenoiserConfig{}), 5u * 73856u + 36928u);
  EXPECT_EQ(count_catblock_params(DenoiserConfig{}), 406208u);
  EXPECT_EQ(count_params(DenoiserConfig{}), 1792u + 5u * 406208u + 36928u + 1731u + 17024u);
}

TEST(ParamCount, MatchesLiveParameterSets) {
  Rng rng(1);
  for (int width : {4, 16, 64}) {
    CenetConfig cc;
    cc.width = width;
    DenoiserConfig dc;
    dc.width = width;
    dc.cat_blocks = 2;
    dc.res_blocks = 3;
    dc.encoder_hidden = 2 * width;
    EXPECT_EQ(init_cenet_params<float>(cc, rng).numel(), count_params(cc));
    EXPECT_EQ(init_denoiser_params<float>(dc, rng).numel(), count_params(dc));
  }
  DenoiserConfig gray;
  gray.in_channels = 1;
  EXPECT_EQ(init_denoiser_params<float>(gray, rng).numel(), count_params(gray));
}

TEST(Cenet, ShapeAndNonNegativity) {
  Rng rng(2);
  CenetConfig cfg;
  cfg.width = 8;
  const auto ps = init_cenet_params<float>(cfg, rng);
  for (Shape s : {Shape{1, 3, 16, 16}, Shape{2, 3, 13, 10}, Shape{1, 3, 5, 7}}) {
    std::mt19937_64 g(3);
    const auto y = random_tensor(s, g, 0.0, 1.0).cast<float>();
    const auto m = cenet_forward(y, ps, cfg);
    ASSERT_EQ(m.shape(), s);
    for (float v : m.values().data()) {
      EXPECT_TRUE(std::isfinite(v));
      EXPECT_GE(v, 0.0f);
    }
    EXPECT_EQ(m.provenance(), SigmaProvenance::Estimated);
  }
  EXPECT_THROW(cenet_raw(Tensor<float>::zeros({1, 3, 6, 8}), ps, cfg), ShapeError);
  EXPECT_THROW(cenet_forward(Tensor<float>::zeros({1, 1, 8, 8}), ps, cfg), ShapeError);
}

TEST(Cenet, PaddedInputMatchesCropOfPaddedRun) {
  Rng rng(4);
  CenetConfig cfg;
  cfg.width = 8;
  const auto ps = init_cenet_params<float>(cfg, rng);
  std::mt19937_64 g(5);
  const auto y = random_tensor({1, 3, 10, 9}, g, 0.0, 1.0).cast<float>();
  const auto m = cenet_forward(y, ps, cfg);
  const auto raw = ops::crop(cenet_raw(ops::pad_reflect(y, 0, 2, 0, 3), ps, cfg), 0, 0, 10, 9);
  for (std::size_t i = 0; i < raw.numel(); ++i) EXPECT_EQ(m.values().data()[i], std::clamp(raw.data()[i], 0.0f, 1.0f));
}

TEST(ConditionEncoder, IdentityHeadsAndPointwiseness) {
  Rng rng(6);
  const auto cfg = tiny_denoiser();
  auto ps = init_denoiser_params<float>(cfg, rng);
  for (auto& v : ps.get("enc.gamma.weight").data()) v = 0.0f;
  for (auto& v : ps.get("enc.beta.weight").data()) v = 0.0f;
  std::mt19937_64 g(7);
  const auto c = random_tensor({1, 3, 5, 5}, g, 0.0, 0.3).cast<float>();
  const auto a = condition_encode(c, ps);
  ASSERT_EQ(a.gamma.shape(), (Shape{1, 8, 5, 5}));
  for (float v : a.gamma.data()) EXPECT_EQ(v, 1.0f);
  for (float v : a.beta.data()) EXPECT_EQ(v, 0.0f);

  const auto fresh = init_denoiser_params<float>(cfg, rng);
  const auto k = condition_encode(Tensor<float>::full({1, 3, 6, 4}, 0.2f), fresh);
  for (int ch = 0; ch < 8; ++ch)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 4; ++x) {
        EXPECT_EQ(k.gamma.at(0, ch, y, x), k.gamma.at(0, ch, 0, 0));
        EXPECT_EQ(k.beta.at(0, ch, y, x), k.beta.at(0, ch, 0, 0));
      }
}

TEST(ResBlock, ZeroConvsAreIdentityAndCompositionMatches) {
  Rng rng(8);
  const auto cfg = tiny_denoiser();
  auto ps = init_denoiser_params<float>(cfg, rng);
  std::mt19937_64 g(9);
  const auto f = random_tensor({2, 8, 6, 6}, g).cast<float>();
  const auto out = resblock_forward(f, ps, "cat0.res0");
  const auto& w1 = ps.get("cat0.res0.conv1.weight");
  const auto& w2 = ps.get("cat0.res0.conv2.weight");
  const auto ref = ops::add(
      f, ops::conv2d(ops::relu(ops::conv2d(f, w1, ps.get("cat0.res0.conv1.bias"), 1, 1)), w2,
                     ps.get("cat0.res0.conv2.bias"), 1, 1));
  EXPECT_TRUE(bit_equal(out, ref));

  for (const char* n : {"cat0.res0.conv1.weight", "cat0.res0.conv1.bias", "cat0.res0.conv2.weight", "cat0.res0.conv2.bias"})
    for (auto& v : ps.get(n).data()) v = 0.0f;
  EXPECT_TRUE(bit_equal(resblock_forward(f, ps, "cat0.res0"), f));
}

TEST(CatBlock, DegenerateModulations) {
  Rng rng(10);
  const auto cfg = tiny_denoiser();
  const auto ps = init_denoiser_params<float>(cfg, rng);
  std::mt19937_64 g(11);
  const auto f = random_tensor({1, 8, 5, 5}, g).cast<float>();

  // gamma = 1, beta = 0: the unconditioned residual body.
  AffineParams<float> id{Tensor<float>::full({1, 8, 5, 5}, 1.0f), Tensor<float>::zeros({1, 8, 5, 5})};
  Tensor<float> t = f;
  for (int r = 0; r < cfg.res_blocks; ++r) t = resblock_forward(t, ps, "cat0.res" + std::to_string(r));
  t = ops::conv2d(t, ps.get("cat0.conv.weight"), ps.get("cat0.conv.bias"), 1, 1);
  const auto body = ops::add(f, t);
  const auto out = catblock_forward(f, id, ps, cfg, 0);
  for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_NEAR(out.data()[i], body.data()[i], 1e-6);

  // gamma = 0: F + beta.
  const auto beta = random_tensor({1, 8, 5, 5}, g).cast<float>();
  AffineParams<float> zero{Tensor<float>::zeros({1, 8, 5, 5}), beta};
  const auto z = catblock_forward(f, zero, ps, cfg, 0);
  for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_FLOAT_EQ(z.data()[i], f.data()[i] + beta.data()[i]);

  AffineParams<float> wrong{Tensor<float>::zeros({1, 8, 4, 5}), Tensor<float>::zeros({1, 8, 4, 5})};
  EXPECT_THROW(catblock_forward(f, wrong, ps, cfg, 0), ShapeError);
}

TEST(Denoiser, ZeroBodyPredictsZeroNoise) {
  Rng rng(12);
  const auto cfg = tiny_denoiser();
  auto ps = init_denoiser_params<float>(cfg, rng);
  zero_all(ps);
  for (auto& v : ps.get("enc.gamma.bias").data()) v = 1.0f;
  std::mt19937_64 g(13);
  const auto y = random_tensor({2, 3, 7, 9}, g, 0.0, 1.0).cast<float>();
  const auto out = denoiser_forward(y, Tensor<float>::full({1, 3, 7, 9}, 0.1f), ps, cfg);
  EXPECT_TRUE(bit_equal(out, y));
}

TEST(Denoiser, AffineParamsAreSharedByEveryBlock) {
  Rng rng(14);
  const auto cfg = tiny_denoiser();
  const auto ps = init_denoiser_params<float>(cfg, rng);
  std::mt19937_64 g(15);
  const auto y = random_tensor({1, 3, 6, 6}, g, 0.0, 1.0).cast<float>();
  const auto c = Tensor<float>::full({1, 3, 6, 6}, 0.1f);
  const auto direct = denoiser_forward(y, c, ps, cfg);
  auto affine = condition_encode(c, ps);
  EXPECT_TRUE(bit_equal(denoiser_with_affine(y, affine, ps, cfg), direct));

  // Zeroing the single shared object turns every CATBlock into an identity.
  for (auto& v : affine.gamma.data()) v = 0.0f;
  for (auto& v : affine.beta.data()) v = 0.0f;
  const auto out = denoiser_with_affine(y, affine, ps, cfg);
  auto conv = [&](const Tensor<float>& x, const std::string& n) {
    return ops::conv2d(x, ps.get(n + ".weight"), ps.get(n + ".bias"), 1, 1);
  };
  const auto h0 = conv(y, "head");
  const auto ref = ops::sub(y, conv(ops::add(conv(h0, "body"), h0), "tail"));
  EXPECT_TRUE(bit_equal(out, ref));
}

TEST(Denoiser, ShapesConditionsAndSensitivity) {
  Rng rng(16);
  const auto cfg = tiny_denoiser();
  const auto ps = init_denoiser_params<float>(cfg, rng);
  std::mt19937_64 g(17);
  const auto y = random_tensor({2, 3, 9, 7}, g, 0.0, 1.0).cast<float>();
  const auto lo = denoiser_forward(y, Tensor<float>::full({1, 3, 9, 7}, 10.0f / 255), ps, cfg);
  const auto hi = denoiser_forward(y, Tensor<float>::full({2, 3, 9, 7}, 50.0f / 255), ps, cfg);
  EXPECT_EQ(lo.shape(), y.shape());
  double diff = 0.0;
  for (std::size_t i = 0; i < lo.numel(); ++i) diff += std::abs(lo.data()[i] - hi.data()[i]);
  EXPECT_GT(diff / static_cast<double>(lo.numel()), 0.0);

  EXPECT_THROW(denoiser_forward(y, Tensor<float>::full({1, 3, 9, 7}, -5.0f / 255), ps, cfg), ConfigError);
  EXPECT_NO_THROW(denoiser_forward(y, Tensor<float>::full({1, 3, 9, 7}, -0.1f), ps, cfg, ConditionKind::Image));
  EXPECT_THROW(denoiser_forward(y, Tensor<float>::zeros({1, 3, 8, 7}), ps, cfg), ShapeError);
  EXPECT_THROW(denoiser_forward(y, Tensor<float>::zeros({3, 3, 9, 7}), ps, cfg), ShapeError);
  EXPECT_THROW(denoiser_forward(Tensor<float>::zeros({1, 1, 9, 7}), Tensor<float>::zeros({1, 1, 9, 7}), ps, cfg),
               ShapeError);
}

TEST(Denoiser, ComposedGradientCheck) {
  EXPECT_LE(dubd::testing::tiny_denoiser_gradcheck().max_rel_error, 1e-4);
  EXPECT_LE(dubd::testing::tiny_cenet_gradcheck().max_rel_error, 1e-4);
}

TEST(Denoiser, CheckParamsRejectsMismatch) {
  Rng rng(18);
  const auto cfg = tiny_denoiser();
  const auto ps = init_denoiser_params<float>(cfg, rng);
  EXPECT_NO_THROW(check_denoiser_params(cfg, ps));
  auto other = cfg;
  other.width = 4;
  EXPECT_THROW(check_denoiser_params(other, ps), ConfigError);
  other = cfg;
  other.cat_blocks = 3;
  EXPECT_THROW(check_denoiser_params(other, ps), ConfigError);
  CenetConfig cc;
  cc.width = 4;
  const auto cps = init_cenet_params<float>(cc, rng);
  EXPECT_NO_THROW(check_cenet_params(cc, cps));
  cc.strides = {1, 2, 1};
  EXPECT_THROW(check_cenet_params(cc, cps), ConfigError);
}

TEST(AvgPoolCondition, BlockConstantsAndOracle) {
  const auto k = Tensor<float>::full({1, 3, 9, 6}, 0.4f);
  const auto pooled = avgpool_condition(k);
  for (float v : pooled.data()) EXPECT_FLOAT_EQ(v, 0.4f);

  std::vector<float> v(64);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) v[y * 8 + x] = static_cast<float>((y / 4) * 2 + (x / 4)) / 10.0f;
  const auto blocks = Tensor<float>::from_data({1, 1, 8, 8}, v);
  EXPECT_TRUE(bit_equal(avgpool_condition(blocks), blocks));

  std::mt19937_64 g(19);
  const auto y = random_tensor({2, 3, 8, 12}, g, 0.0, 1.0);
  const auto c = avgpool_condition(y);
  for (int n = 0; n < 2; ++n)
    for (int ch = 0; ch < 3; ++ch)
      for (int py = 0; py < 8; ++py)
        for (int px = 0; px < 12; ++px) {
          double s = 0.0;
          for (int dy = 0; dy < 4; ++dy)
            for (int dx = 0; dx < 4; ++dx) s += y.at(n, ch, (py / 4) * 4 + dy, (px / 4) * 4 + dx);
          EXPECT_NEAR(c.at(n, ch, py, px), s / 16.0, 1e-12);
        }
  EXPECT_EQ(avgpool_condition(Tensor<float>::zeros({1, 3, 7, 5})).shape(), (Shape{1, 3, 7, 5}));
}
