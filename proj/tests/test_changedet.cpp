#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "mcd/changedet.hpp"

using namespace mcd;
using namespace mcd::testing;

namespace {

UNetSpec small_unet() {
  BackboneSpec enc = BackboneSpec::tiny_residual();
  enc.stage_channels = {8, 16};
  enc.depth_per_stage = {1, 1};
  return UNetSpec::for_encoder(enc);
}

// A pair: textured base scene; image_b adds a bright rectangle; the mask is
// exactly the painted pixels.
ChangePair synthetic_pair(int size, uint64_t seed, bool with_change = true) {
  SeededRng rng(seed);
  ChangePair p;
  p.image_a = ImagePlane(size, size, 3);
  for (auto& v : p.image_a.data) v = 0.2f + 0.6f * float(rng.uniform());
  p.image_b = p.image_a;
  p.mask = ImagePlane(size, size, 1);
  if (with_change) {
    const int h = 2 + int(rng.randint(uint64_t(size / 2)));
    const int w = 2 + int(rng.randint(uint64_t(size / 2)));
    const int y0 = int(rng.randint(uint64_t(size - h)));
    const int x0 = int(rng.randint(uint64_t(size - w)));
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x) {
        for (int c = 0; c < 3; ++c) p.image_b.at(c, y, x) = c == 0 ? 1.0f : 0.0f;
        p.mask.at(0, y, x) = 1.0f;
      }
  }
  return p;
}

Tensor<double> random_binary(std::vector<int64_t> shape, SeededRng& rng,
                             double p = 0.4) {
  Tensor<double> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.bernoulli(p) ? 1.0 : 0.0;
  return t;
}

}  // namespace

TEST_CASE("change loss: limits, closed forms, summation oracle") {
  // Strong logits exactly on the mask: both terms vanish.
  SeededRng rng(90);
  Tensor<double> mask = random_binary({1, 1, 6, 6}, rng);
  Tensor<double> logits(mask.shape());
  for (int64_t i = 0; i < mask.numel(); ++i)
    logits[i] = mask[i] == 1.0 ? 40.0 : -40.0;
  CHECK(change_loss(logits, mask) < 1e-8);

  // p identically ~0, mask all ones: the Dice term is 1 - 1/(n+1).
  Tensor<double> ones({1, 1, 4, 4});
  ones.fill(1.0);
  Tensor<double> verylow(ones.shape());
  verylow.fill(-500.0);
  const int64_t n = ones.numel();
  auto grad = change_loss_grad(verylow, ones);
  CHECK(grad.dice ==
        doctest::Approx(1.0 - 1.0 / double(n + 1)).epsilon(1e-12));

  // Random 8x8 case against a direct-summation oracle.
  Tensor<double> m8 = random_binary({1, 1, 8, 8}, rng);
  Tensor<double> l8({1, 1, 8, 8});
  for (int64_t i = 0; i < 64; ++i) l8[i] = rng.uniform(-2.0, 2.0);
  double bce = 0, inter = 0, ps = 0, ts = 0;
  for (int64_t i = 0; i < 64; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-l8[i]));
    bce += -(m8[i] * std::log(p) + (1.0 - m8[i]) * std::log(1.0 - p));
    inter += p * m8[i];
    ps += p;
    ts += m8[i];
  }
  const double expected = bce / 64.0 + 1.0 - (2.0 * inter + 1.0) / (ps + ts + 1.0);
  CHECK(change_loss(l8, m8) == doctest::Approx(expected).epsilon(1e-9));

  Tensor<double> bad = m8;
  bad[0] = 0.3;
  CHECK_THROWS_AS((void)change_loss(l8, bad), InvalidArgument);
  Tensor<double> wrong({1, 1, 4, 4});
  CHECK_THROWS_AS((void)change_loss(l8, wrong), InvalidArgument);
}

TEST_CASE("change loss is nonnegative and the Dice term shrinks toward the mask") {
  SeededRng rng(91);
  Tensor<double> mask = random_binary({1, 1, 5, 5}, rng);
  // Interpolate logits from uninformative toward the correct answer; the
  // Dice term must decrease monotonically and the loss stays >= 0.
  double prev_dice = 2.0;
  for (int s = 0; s <= 10; ++s) {
    const double scale = double(s);
    Tensor<double> logits(mask.shape());
    for (int64_t i = 0; i < mask.numel(); ++i)
      logits[i] = scale * (mask[i] == 1.0 ? 1.0 : -1.0);
    auto g = change_loss_grad(logits, mask);
    CHECK(g.loss >= 0.0);
    CHECK(g.dice <= prev_dice + 1e-12);
    prev_dice = g.dice;
  }
}

TEST_CASE("change loss gradient matches finite differences") {
  SeededRng rng(92);
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const int64_t h = 2 + rng.randint(3), w = 2 + rng.randint(3);
    Tensor<double> mask = random_binary({1, 1, h, w}, rng);
    Tensor<double> logits({1, 1, h, w});
    for (int64_t i = 0; i < logits.numel(); ++i) logits[i] = rng.uniform(-2.0, 2.0);
    auto g = change_loss_grad(logits, mask);
    CHECK(g.loss == doctest::Approx(change_loss(logits, mask)).epsilon(1e-12));
    worst = std::max(worst, fd_check_tensor(logits, g.dlogits, [&]() {
      return change_loss(logits, mask);
    }));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("pixel metrics: hand counts and confusion-matrix oracle") {
  Tensor<double> t({1, 8});
  Tensor<double> p({1, 8});
  // TP=2, FP=1, FN=1 -> all three metrics 2/3.
  t[0] = 1;
  t[1] = 1;
  t[2] = 1;
  p[0] = 1;
  p[1] = 1;
  p[3] = 1;
  PixelMetrics m = pixel_metrics(p, t);
  CHECK(m.precision == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(m.recall == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(m.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  PixelMetrics perfect = pixel_metrics(t, t);
  CHECK(perfect.precision == 1.0);
  CHECK(perfect.recall == 1.0);
  CHECK(perfect.f1 == 1.0);

  // All-negative prediction with positives present.
  Tensor<double> none({1, 8});
  PixelMetrics zero = pixel_metrics(none, t);
  CHECK(zero.recall == 0.0);
  CHECK(zero.f1 == 0.0);
  // No positives anywhere: every denominator empty, all defined as 0.
  PixelMetrics empty = pixel_metrics(none, none);
  CHECK(empty.precision == 0.0);
  CHECK(empty.recall == 0.0);
  CHECK(empty.f1 == 0.0);

  SeededRng rng(93);
  for (int trial = 0; trial < 30; ++trial) {
    Tensor<double> tm = random_binary({1, 16}, rng, 0.5);
    Tensor<double> pm = random_binary({1, 16}, rng, 0.5);
    int64_t tp = 0, fp = 0, fn = 0;
    for (int64_t i = 0; i < 16; ++i) {
      tp += pm[i] == 1.0 && tm[i] == 1.0;
      fp += pm[i] == 1.0 && tm[i] == 0.0;
      fn += pm[i] == 0.0 && tm[i] == 1.0;
    }
    PixelMetrics got = pixel_metrics(pm, tm);
    const double prec = tp + fp > 0 ? double(tp) / double(tp + fp) : 0.0;
    const double rec = tp + fn > 0 ? double(tp) / double(tp + fn) : 0.0;
    CHECK(got.precision == prec);
    CHECK(got.recall == rec);
    const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
    CHECK(got.f1 == doctest::Approx(f1).epsilon(1e-12));
  }
}

TEST_CASE("predict_mask thresholds at logit zero") {
  Tensor<double> logits({1, 4});
  logits[0] = -0.1;
  logits[1] = 0.0;
  logits[2] = 1e-9;
  logits[3] = 3.0;
  Tensor<double> pred = predict_mask(logits);
  CHECK(pred[0] == 0.0);
  CHECK(pred[1] == 0.0);
  CHECK(pred[2] == 1.0);
  CHECK(pred[3] == 1.0);
}

TEST_CASE("unet forward: output size, zero fusion, spec validation") {
  UNetSpec spec = small_unet();
  ChangeDetector<double> model(spec);
  SeededRng rng(94);
  model.encoder().init(rng);
  model.init_decoder(rng);

  Tensor<double> a = uniform_tensor({2, 3, 16, 16}, rng, 0.0, 1.0);
  Tensor<double> b = uniform_tensor({2, 3, 16, 16}, rng, 0.0, 1.0);
  Tensor<double> out = model.forward(a, b, false);
  REQUIRE(out.ndim() == 4);
  CHECK(out.dim(0) == 2);
  CHECK(out.dim(1) == 1);
  CHECK(out.dim(2) == 16);
  CHECK(out.dim(3) == 16);

  // Non-multiple-of-stride input still comes back at input resolution.
  Tensor<double> odd = uniform_tensor({1, 3, 18, 14}, rng, 0.0, 1.0);
  Tensor<double> out_odd = model.forward(odd, odd, false);
  CHECK(out_odd.dim(2) == 18);
  CHECK(out_odd.dim(3) == 14);

  // Identical inputs: every fused skip is zero, so the logit map equals the
  // decoder's response to all-zero features, which is spatially constant.
  Tensor<double> same = model.forward(a, a, false);
  for (int64_t i = 1; i < same.numel() / 2; ++i) {
    CHECK(same[i] == doctest::Approx(same[0]).epsilon(1e-9));
  }

  Tensor<double> small_b = uniform_tensor({2, 3, 8, 8}, rng, 0.0, 1.0);
  CHECK_THROWS_AS((void)model.forward(a, small_b, false), InvalidArgument);

  UNetSpec bad = spec;
  bad.decoder_channels.pop_back();
  CHECK_THROWS_AS(ChangeDetector<double>{bad}, InvalidArgument);
  UNetSpec vit;
  vit.encoder = BackboneSpec::tiny_transformer();
  vit.decoder_channels = {8};
  CHECK_THROWS_AS(ChangeDetector<double>{vit}, InvalidArgument);
}

TEST_CASE("decoder gradients match finite differences through the full unet") {
  UNetSpec spec = small_unet();
  ChangeDetector<double> model(spec);
  SeededRng rng(95);
  model.encoder().init(rng);
  model.init_decoder(rng);

  Tensor<double> a = uniform_tensor({1, 3, 8, 8}, rng, 0.0, 1.0);
  Tensor<double> b = uniform_tensor({1, 3, 8, 8}, rng, 0.0, 1.0);
  Tensor<double> mask({1, 1, 8, 8});
  for (int64_t i = 0; i < mask.numel(); ++i) mask[i] = rng.bernoulli(0.3) ? 1.0 : 0.0;

  auto params = model.decoder_params();
  zero_grads(params);
  Tensor<double> logits = model.forward(a, b, true);
  auto grad = change_loss_grad(logits, mask);
  model.backward(grad.dlogits);

  std::vector<Tensor<double>> saved;
  for (auto& p : params) saved.push_back(p.param->grad);

  const auto eval = [&]() {
    return change_loss(model.forward(a, b, true), mask);
  };
  double worst = 0;
  for (size_t pi = 0; pi < params.size(); ++pi)
    worst = std::max(worst, fd_check_tensor(params[pi].param->value, saved[pi], eval));
  CHECK(worst < 1e-4);
}

TEST_CASE("training fits synthetic pairs and never touches the encoder") {
  UNetSpec spec = small_unet();
  ChangeDetector<double> model(spec);
  SeededRng rng(96);
  model.encoder().init(rng);
  model.init_decoder(rng);

  std::vector<Tensor<double>> enc_before;
  for (const auto& p : model.encoder_params()) enc_before.push_back(p.param->value);

  std::vector<ChangePair> train, val;
  for (int i = 0; i < 24; ++i) train.push_back(synthetic_pair(16, 700 + uint64_t(i)));
  for (int i = 0; i < 8; ++i) val.push_back(synthetic_pair(16, 800 + uint64_t(i)));

  ChangeDetConfig cfg;
  cfg.epochs = 100;
  cfg.batch_size = 8;
  cfg.seed = 2;
  ChangeDetResult res = train_changedet(model, train, val, cfg);

  // Frozen encoder: parameters bitwise unchanged.
  auto enc_after = model.encoder_params();
  for (size_t i = 0; i < enc_after.size(); ++i)
    for (int64_t j = 0; j < enc_before[i].numel(); ++j)
      CHECK(enc_after[i].param->value[j] == enc_before[i][j]);

  CHECK(res.report.metrics.at("f1") >= 0.8);
  CHECK(res.per_pair_f1.size() == 8);
  CHECK(res.report.metrics.count("f1_per_pair_mean") == 1);
  for (double f : res.per_pair_f1) {
    CHECK(f >= 0.0);
    CHECK(f <= 1.0);
  }
  // The loss curve must actually descend.
  CHECK(res.step_losses.front() > res.step_losses.back());

  // Determinism: a rerun from identical state reproduces the losses.
  ChangeDetector<double> model2(spec);
  SeededRng rng2(96);
  model2.encoder().init(rng2);
  model2.init_decoder(rng2);
  ChangeDetResult res2 = train_changedet(model2, train, val, cfg);
  REQUIRE(res2.step_losses.size() == res.step_losses.size());
  for (size_t i = 0; i < res.step_losses.size(); ++i)
    CHECK(res.step_losses[i] == res2.step_losses[i]);
}
