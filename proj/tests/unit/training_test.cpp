#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "../common/gradcheck.hpp"
#include "dubd/checkpoint.hpp"
#include "dubd/corpus.hpp"
#include "dubd/training.hpp"

using namespace dubd;
using dubd::testing::random_tensor;

namespace {

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.patch_size = 16;
  cfg.batch_size = 4;
  cfg.steps = 50;
  cfg.base_lr = 1e-3;
  cfg.seed = 3;
  cfg.corpus = "synthetic:1:32:0";
  cfg.cenet.width = 8;
  cfg.denoiser.width = 8;
  cfg.denoiser.cat_blocks = 1;
  cfg.denoiser.res_blocks = 1;
  cfg.denoiser.encoder_hidden = 8;
  return cfg;
}

double mean_of(const std::vector<LossPoint>& c, std::size_t from, std::size_t to) {
  double s = 0.0;
  for (std::size_t i = from; i < to; ++i) s += c[i].loss;
  return s / static_cast<double>(to - from);
}

}  // namespace

TEST(Losses, ClosedForms) {
  const auto t = SigmaMap<float>::constant(30.0, 3, 4, 4);
  const auto p = SigmaMap<float>::constant(40.0, 3, 4, 4);
  EXPECT_EQ(loss_cenet(t, t).item(), 0.0f);
  EXPECT_NEAR(loss_cenet(t, p).item(), 1.5379e-3, 1e-7);
  const auto x = Tensor<double>::full({1, 3, 4, 4}, 30.0 / 255), xh = Tensor<double>::full({1, 3, 4, 4}, 40.0 / 255);
  EXPECT_EQ(loss_denoiser(x, x).item(), 0.0);
  EXPECT_NEAR(loss_denoiser(x, xh).item(), std::pow(10.0 / 255, 2), 1e-15);
  EXPECT_THROW(loss_denoiser(x, Tensor<double>::zeros({1, 3, 4, 5})), ShapeError);
}

TEST(Losses, GradientsMatchClosedFormAndFiniteDifferences) {
  std::mt19937_64 rng(1);
  auto truth = random_tensor({2, 3, 4, 4}, rng, 0.0, 0.3);
  auto pred = random_tensor({2, 3, 4, 4}, rng, 0.0, 0.3).set_requires_grad();
  Tape<double> tape;
  Tensor<double> l;
  {
    auto rec = tape.record();
    l = loss_cenet(truth, pred);
  }
  tape.backward(l);
  const double count = static_cast<double>(pred.numel());
  for (std::size_t i = 0; i < pred.numel(); ++i)
    EXPECT_NEAR(pred.grad()[i], 2.0 * (pred.data()[i] - truth.data()[i]) / count, 1e-15);

  EXPECT_LE(dubd::testing::gradcheck({pred}, [=] { return loss_cenet(truth, pred); }).max_rel_error, 1e-4);
  auto x = random_tensor({1, 3, 5, 5}, rng), xh = random_tensor({1, 3, 5, 5}, rng);
  EXPECT_LE(dubd::testing::gradcheck({xh}, [=] { return loss_denoiser(x, xh); }).max_rel_error, 1e-4);
}

TEST(Adam, OneStepHandValue) {
  ParameterSet<double> ps;
  auto& w = ps.add("w", Tensor<double>::scalar(0.0));
  w.zero_grad();
  w.grad()[0] = 1.0;
  AdamState<double> st;
  adam_step(ps, st, 1e-3);
  const double expected = -1e-3 * (1.0 / (1 - 0.9)) * (1 - 0.9) / (std::sqrt(1.0 * (1 - 0.999) / (1 - 0.999)) + 1e-8);
  EXPECT_NEAR(w.item(), expected, 1e-15);
  EXPECT_NEAR(w.item(), -9.99999e-4, 1e-9);
  EXPECT_EQ(st.t, 1);
}

TEST(Adam, ThreeStepsMatchScalarOracle) {
  ParameterSet<double> ps;
  auto& w = ps.add("w", Tensor<double>::scalar(0.5));
  AdamState<double> st;
  const double grads[3] = {0.3, -1.2, 0.05};
  // Independent scalar re-derivation of the bias-corrected update.
  double ow = 0.5, m = 0, v = 0;
  for (int t = 1; t <= 3; ++t) {
    const double g = grads[t - 1];
    w.zero_grad();
    w.grad()[0] = g;
    adam_step(ps, st, 2e-4);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    ow -= 2e-4 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(w.item(), ow, 1e-10) << "step " << t;
  }
}

TEST(Adam, ZeroGradientAndMissingGradient) {
  ParameterSet<double> ps;
  auto& w = ps.add("w", Tensor<double>::from_data({1, 1, 1, 2}, {0.7, -0.2}));
  AdamState<double> st;
  w.zero_grad();
  w.grad()[0] = 1.0;
  adam_step(ps, st, 1e-2);
  const double m_before = st.m[0][0];
  const double w_before = w.data()[1];
  w.zero_grad();
  adam_step(ps, st, 1e-2);
  EXPECT_DOUBLE_EQ(st.m[0][0], 0.9 * m_before);
  EXPECT_EQ(w.data()[1], w_before);  // never had a gradient: stays put

  ParameterSet<double> fresh;
  fresh.add("u", Tensor<double>::scalar(1.0));
  AdamState<double> st2;
  EXPECT_THROW(adam_step(fresh, st2, 1e-3), ConfigError);
}

TEST(LrSchedule, HalvedOnce) {
  TrainConfig cfg;
  cfg.steps = 1000;
  EXPECT_DOUBLE_EQ(lr_schedule(0, cfg), 2e-4);
  EXPECT_DOUBLE_EQ(lr_schedule(499, cfg), 2e-4);
  EXPECT_DOUBLE_EQ(lr_schedule(500, cfg), 1e-4);
  EXPECT_DOUBLE_EQ(lr_schedule(999, cfg), 1e-4);
  cfg.halve_at = 100;
  EXPECT_DOUBLE_EQ(lr_schedule(100, cfg), 1e-4);
  cfg.halve_at = 1000;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(SamplePatches, WholeImageAndErrors) {
  Rng rng(1);
  std::mt19937_64 g(2);
  const auto img = random_tensor({1, 3, 12, 12}, g).cast<float>();
  const auto p = sample_patches(img, 12, rng);
  EXPECT_TRUE(std::equal(p.data().begin(), p.data().end(), img.data().begin()));
  EXPECT_THROW(sample_patches(img, 13, rng), ShapeError);
}

TEST(SamplePatches, CornersAreUniform) {
  // Encode each pixel's coordinates so the patch corner can be read back.
  const int side = 200, patch = 190;  // 11 x 11 possible corners
  std::vector<float> v(static_cast<std::size_t>(side) * side);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) v[y * side + x] = static_cast<float>(y * side + x);
  const auto img = Tensor<float>::from_data({1, 1, side, side}, v);
  Rng rng(3);
  std::map<int, int> counts;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) counts[static_cast<int>(sample_patches(img, patch, rng).data()[0])]++;
  ASSERT_EQ(counts.size(), 121u);
  const double expected = draws / 121.0;
  double chi2 = 0.0;
  for (const auto& [k, c] : counts) chi2 += (c - expected) * (c - expected) / expected;
  // 120 degrees of freedom: the 99.9th percentile is about 173.6.
  EXPECT_LT(chi2, 173.6);
}

TEST(SamplePatches, Deterministic) {
  std::mt19937_64 g(4);
  const auto img = random_tensor({1, 3, 40, 40}, g).cast<float>();
  Rng a(9), b(9);
  for (int i = 0; i < 20; ++i) {
    const auto p = sample_patches(img, 8, a, true), q = sample_patches(img, 8, b, true);
    EXPECT_TRUE(std::equal(p.data().begin(), p.data().end(), q.data().begin()));
  }
}

TEST(TrainConfigTest, KeyValueRoundTripAndUnknownKeys) {
  TrainConfig cfg = tiny_config();
  cfg.variant_fraction = 0.25;
  cfg.mode = ConditionMode::Real;
  cfg.augment = true;
  const TrainConfig back = TrainConfig::from_key_value(KeyValue::parse(cfg.to_key_value().to_string()));
  EXPECT_EQ(back.to_key_value().to_string(), cfg.to_key_value().to_string());
  EXPECT_EQ(back.denoiser, cfg.denoiser);
  EXPECT_EQ(back.mode, ConditionMode::Real);
  KeyValue bad = cfg.to_key_value();
  bad.set("learning_rate", 0.1);
  EXPECT_THROW(TrainConfig::from_key_value(bad), ConfigError);
  KeyValue range = cfg.to_key_value();
  range.set("noise.hi", 90.0);
  EXPECT_THROW(TrainConfig::from_key_value(range), ConfigError);
}

TEST(Training, SmokeRunsReduceLoss) {
  const TrainConfig cfg = tiny_config();
  const auto corpus = load_corpus(cfg.corpus);
  const TrainResult c = train_cenet(corpus, cfg);
  ASSERT_EQ(c.curve.size(), 50u);
  EXPECT_LT(mean_of(c.curve, 40, 50), mean_of(c.curve, 0, 10));
  EXPECT_EQ(c.checkpoint.kind, "cenet");

  const TrainResult d = train_denoiser(corpus, cfg);
  EXPECT_LT(mean_of(d.curve, 40, 50), mean_of(d.curve, 0, 10));
  EXPECT_LT(d.curve.back().loss, d.curve.front().loss);
  EXPECT_EQ(d.checkpoint.kind, "denoiser");
  EXPECT_EQ(d.curve[0].lr, 1e-3);
  EXPECT_EQ(d.curve[49].lr, 5e-4);

  const std::string csv = loss_curve_csv(d.curve);
  EXPECT_EQ(csv.substr(0, 13), "step,lr,loss\n");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 51);
}

TEST(Training, BlindAndRealModes) {
  TrainConfig cfg = tiny_config();
  cfg.steps = 4;
  const auto corpus = load_corpus(cfg.corpus);
  cfg.mode = ConditionMode::Blind;
  EXPECT_THROW(train_denoiser(corpus, cfg), ConfigError);
  const auto cenet = cenet_from_checkpoint(train_cenet(corpus, cfg).checkpoint);
  EXPECT_NO_THROW(train_denoiser(corpus, cfg, &cenet));
  cfg.mode = ConditionMode::Real;
  const auto r = train_denoiser(corpus, cfg);
  EXPECT_EQ(r.checkpoint.meta.str("mode"), "real-c");
}

TEST(Training, FixedSeedIsReproducible) {
  TrainConfig cfg = tiny_config();
  cfg.steps = 6;
  cfg.variant_fraction = 0.5;
  cfg.augment = true;
  const auto corpus = load_corpus(cfg.corpus);
  EXPECT_EQ(encode_checkpoint(train_denoiser(corpus, cfg).checkpoint),
            encode_checkpoint(train_denoiser(corpus, cfg).checkpoint));
  EXPECT_EQ(encode_checkpoint(train_cenet(corpus, cfg).checkpoint), encode_checkpoint(train_cenet(corpus, cfg).checkpoint));
  TrainConfig other = cfg;
  other.seed = cfg.seed + 1;
  EXPECT_NE(encode_checkpoint(train_denoiser(corpus, cfg).checkpoint),
            encode_checkpoint(train_denoiser(corpus, other).checkpoint));
}

TEST(Training, RejectsBadCorpora) {
  TrainConfig cfg = tiny_config();
  cfg.steps = 2;
  EXPECT_THROW(train_denoiser({}, cfg), ConfigError);
  EXPECT_THROW(train_denoiser({Tensor<float>::zeros({1, 3, 8, 8})}, cfg), ConfigError);
  EXPECT_THROW(train_denoiser({Tensor<float>::zeros({1, 1, 32, 32})}, cfg), ConfigError);
}

TEST(Training, VariantMixingDrawsEveryKind) {
  TrainConfig cfg = tiny_config();
  cfg.variant_fraction = 1.0;
  Rng rng(5);
  std::map<NoiseKind, int> seen;
  for (int i = 0; i < 300; ++i) seen[detail::draw_training_spec(cfg, rng).kind]++;
  EXPECT_EQ(seen.count(NoiseKind::Uniform), 0u);
  EXPECT_GT(seen[NoiseKind::Spectral], 0);
  EXPECT_GT(seen[NoiseKind::SpatialGradient], 0);
  EXPECT_GT(seen[NoiseKind::SpatialRegions], 0);
  cfg.variant_fraction = 0.0;
  for (int i = 0; i < 50; ++i) EXPECT_EQ(detail::draw_training_spec(cfg, rng).kind, NoiseKind::Uniform);
}
