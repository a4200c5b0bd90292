#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "mcd/eval.hpp"

using namespace mcd;
using namespace mcd::testing;

namespace {

// Independent KNN oracle: no sorting. A train point is in the top-k if fewer
// than k points rank ahead of it (higher similarity, or equal similarity at
// a lower index).
double knn_oracle(const FeatureBank<double>& train, const FeatureBank<double>& test,
                  int k, double tau) {
  const int64_t ntr = train.size(), nte = test.size(), d = train.vectors.dim(1);
  auto cosine = [&](const Tensor<double>& m, int64_t row, std::vector<double>& out) {
    double sq = 0;
    for (int64_t j = 0; j < d; ++j) sq += m.at2(row, j) * m.at2(row, j);
    const double inv = 1.0 / std::max(std::sqrt(sq), 1e-12);
    out.resize(size_t(d));
    for (int64_t j = 0; j < d; ++j) out[size_t(j)] = m.at2(row, j) * inv;
  };
  int64_t correct = 0;
  std::vector<double> q, r;
  for (int64_t i = 0; i < nte; ++i) {
    cosine(test.vectors, i, q);
    std::vector<double> sims(static_cast<size_t>(ntr));
    for (int64_t j = 0; j < ntr; ++j) {
      cosine(train.vectors, j, r);
      double dot = 0;
      for (int64_t c = 0; c < d; ++c) dot += q[size_t(c)] * r[size_t(c)];
      sims[size_t(j)] = dot;
    }
    const int num_classes =
        1 + *std::max_element(train.labels.begin(), train.labels.end());
    std::vector<double> votes(size_t(num_classes), 0.0);
    for (int64_t j = 0; j < ntr; ++j) {
      int64_t ahead = 0;
      for (int64_t o = 0; o < ntr; ++o)
        if (sims[size_t(o)] > sims[size_t(j)] ||
            (sims[size_t(o)] == sims[size_t(j)] && o < j))
          ++ahead;
      if (ahead < k)
        votes[size_t(train.labels[size_t(j)])] += std::exp(sims[size_t(j)] / tau);
    }
    int pred = 0;
    for (int c = 1; c < num_classes; ++c)
      if (votes[size_t(c)] > votes[size_t(pred)]) pred = c;
    correct += pred == test.labels[size_t(i)];
  }
  return double(correct) / double(nte);
}

// Independent AP oracle: rank of each positive computed by counting, no sort.
double map_oracle(const Tensor<double>& scores, const Tensor<double>& targets) {
  const int64_t n = scores.dim(0), l = scores.dim(1);
  double ap_sum = 0;
  int64_t used = 0;
  for (int64_t c = 0; c < l; ++c) {
    int64_t npos = 0;
    for (int64_t i = 0; i < n; ++i) npos += targets.at2(i, c) == 1.0;
    if (npos == 0) continue;
    ++used;
    double ap = 0;
    for (int64_t i = 0; i < n; ++i) {
      if (targets.at2(i, c) != 1.0) continue;
      int64_t rank = 1, hits = 1;
      for (int64_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const bool before = scores.at2(j, c) > scores.at2(i, c) ||
                            (scores.at2(j, c) == scores.at2(i, c) && j < i);
        if (before) {
          ++rank;
          if (targets.at2(j, c) == 1.0) ++hits;
        }
      }
      ap += double(hits) / double(rank);
    }
    ap_sum += ap / double(npos);
  }
  REQUIRE(used > 0);
  return ap_sum / double(used);
}

FeatureBank<double> bank_from(const std::vector<std::vector<double>>& rows,
                              const std::vector<int>& labels) {
  FeatureBank<double> b;
  b.vectors = Tensor<double>({int64_t(rows.size()), int64_t(rows[0].size())});
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < rows[i].size(); ++j)
      b.vectors.at2(int64_t(i), int64_t(j)) = rows[i][j];
  b.labels = labels;
  return b;
}

// Two well-separated clusters in D dims around +mu / -mu.
void gaussian_clusters(int per_class, int d, double spread, SeededRng& rng,
                       FeatureBank<double>& out) {
  out.vectors = Tensor<double>({int64_t(2 * per_class), int64_t(d)});
  out.labels.clear();
  for (int i = 0; i < 2 * per_class; ++i) {
    const int cls = i < per_class ? 0 : 1;
    out.labels.push_back(cls);
    for (int j = 0; j < d; ++j)
      out.vectors.at2(i, j) = (cls == 0 ? 4.0 : -4.0) + spread * rng.normal();
  }
}

ImagePlane class_image(int cls, int size, uint64_t seed) {
  SeededRng rng(seed);
  ImagePlane img(size, size, 3);
  // Distinct mean color per class plus mild noise.
  const float base[4][3] = {{0.9f, 0.1f, 0.1f},
                            {0.1f, 0.9f, 0.1f},
                            {0.1f, 0.1f, 0.9f},
                            {0.8f, 0.8f, 0.1f}};
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        img.at(c, y, x) = std::clamp(
            base[cls][c] + 0.08f * float(rng.normal()), 0.0f, 1.0f);
  return img;
}

// Multi-label scenes: label l set iff motif l (bright square in a fixed
// corner) is present.
ImagePlane motif_image(const std::vector<int>& present, int size, uint64_t seed) {
  SeededRng rng(seed);
  ImagePlane img(size, size, 3);
  for (auto& v : img.data) v = 0.15f + 0.05f * float(rng.uniform());
  const int half = size / 2;
  const int corner[3][2] = {{0, 0}, {0, half}, {half, 0}};
  for (size_t l = 0; l < present.size(); ++l) {
    if (!present[l]) continue;
    for (int y = corner[l][0]; y < corner[l][0] + half; ++y)
      for (int x = corner[l][1]; x < corner[l][1] + half; ++x)
        img.at(int(l % 3), y, x) = 0.95f;
  }
  return img;
}

BackboneSpec small_spec() {
  BackboneSpec s = BackboneSpec::tiny_residual();
  s.stage_channels = {16, 32};
  s.depth_per_stage = {1, 1};
  return s;
}

}  // namespace

TEST_CASE("multilabel loss: closed forms and summation oracle") {
  Tensor<double> z({2, 3});
  Tensor<double> t({2, 3});
  t.at2(0, 1) = 1;
  t.at2(1, 2) = 1;
  CHECK(multilabel_loss(z, t) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Tensor<double> big({2, 3});
  for (int64_t i = 0; i < 6; ++i) big[i] = t[i] == 1.0 ? 30.0 : -30.0;
  CHECK(multilabel_loss(big, t) < 1e-12);

  // Direct-summation oracle on a random moderate instance.
  SeededRng rng(70);
  Tensor<double> x = uniform_tensor({3, 4}, rng, -3.0, 3.0);
  Tensor<double> y({3, 4});
  for (int64_t i = 0; i < 12; ++i) y[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
  double direct = 0;
  for (int64_t i = 0; i < 12; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-x[i]));
    direct += -(y[i] * std::log(s) + (1.0 - y[i]) * std::log(1.0 - s));
  }
  direct /= 12.0;
  CHECK(multilabel_loss(x, y) == doctest::Approx(direct).epsilon(1e-9));

  Tensor<double> bad = y;
  bad[0] = 0.5;
  CHECK_THROWS_AS((void)multilabel_loss(x, bad), InvalidArgument);
  Tensor<double> wrong({2, 4});
  CHECK_THROWS_AS((void)multilabel_loss(x, wrong), InvalidArgument);
}

TEST_CASE("multilabel loss gradient matches finite differences") {
  SeededRng rng(71);
  double worst = 0;
  for (int trial = 0; trial < 25; ++trial) {
    const int64_t b = 1 + rng.randint(3), l = 1 + rng.randint(4);
    Tensor<double> x = uniform_tensor({b, l}, rng, -2.0, 2.0);
    Tensor<double> y({b, l});
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    auto g = multilabel_loss_grad(x, y);
    CHECK(g.loss == doctest::Approx(multilabel_loss(x, y)).epsilon(1e-12));
    worst = std::max(worst, fd_check_tensor(
                                x, g.dlogits,
                                [&]() { return multilabel_loss(x, y); }));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("mean average precision: hand counts, ties, exclusions") {
  // Perfect ranking -> 1.
  Tensor<double> s({3, 2});
  Tensor<double> t({3, 2});
  s.at2(0, 0) = 0.9;
  s.at2(1, 0) = 0.5;
  s.at2(2, 0) = 0.1;
  t.at2(0, 0) = 1;
  s.at2(0, 1) = 0.2;
  s.at2(1, 1) = 0.8;
  s.at2(2, 1) = 0.4;
  t.at2(1, 1) = 1;
  CHECK(mean_average_precision(s, t) == doctest::Approx(1.0).epsilon(1e-12));

  // Single class (0.9, 0.8, 0.7) / (1, 0, 1) -> (1 + 2/3) / 2.
  Tensor<double> s1({3, 1});
  Tensor<double> t1({3, 1});
  s1[0] = 0.9;
  s1[1] = 0.8;
  s1[2] = 0.7;
  t1[0] = 1;
  t1[2] = 1;
  CHECK(mean_average_precision(s1, t1) ==
        doctest::Approx(5.0 / 6.0).epsilon(1e-9));

  // All-tied scores fall back to input order: same value as above.
  Tensor<double> tied({3, 1});
  tied.fill(0.42);
  CHECK(mean_average_precision(tied, t1) ==
        doctest::Approx(5.0 / 6.0).epsilon(1e-12));

  // A zero-positive class is excluded from the macro mean.
  Tensor<double> s2({3, 2});
  Tensor<double> t2({3, 2});
  for (int64_t i = 0; i < 3; ++i) s2.at2(i, 0) = s1[i];
  t2.at2(0, 0) = 1;
  t2.at2(2, 0) = 1;
  s2.at2(0, 1) = 0.3;
  s2.at2(1, 1) = 0.2;
  s2.at2(2, 1) = 0.1;
  CHECK(mean_average_precision(s2, t2) ==
        doctest::Approx(5.0 / 6.0).epsilon(1e-9));

  // No positives anywhere: the metric is undefined.
  Tensor<double> none({3, 2});
  CHECK_THROWS_AS((void)mean_average_precision(s2, none), UndefinedMetric);
}

TEST_CASE("mean average precision matches rank-walk oracle and is rank-only") {
  SeededRng rng(72);
  for (int trial = 0; trial < 30; ++trial) {
    const int64_t n = 2 + rng.randint(8), l = 1 + rng.randint(3);
    Tensor<double> s({n, l});
    Tensor<double> t({n, l});
    bool any = false;
    for (int64_t i = 0; i < s.numel(); ++i) {
      // Coarse grid of score values so ties actually occur.
      s[i] = 0.1 * double(rng.randint(8));
      t[i] = rng.bernoulli(0.4) ? 1.0 : 0.0;
      any |= t[i] == 1.0;
    }
    if (!any) t[rng.randint(t.numel())] = 1.0;
    const double got = mean_average_precision(s, t);
    CHECK(got == doctest::Approx(map_oracle(s, t)).epsilon(1e-9));

    // Strictly monotone transform of scores leaves MAP unchanged.
    Tensor<double> warped = s;
    for (int64_t i = 0; i < s.numel(); ++i)
      warped[i] = std::exp(2.0 * std::atan(s[i])) + 5.0;
    CHECK(mean_average_precision(warped, t) ==
          doctest::Approx(got).epsilon(1e-12));
  }
}

TEST_CASE("knn probe: identity match, separated clusters, validation") {
  auto train = bank_from({{1, 0}, {0, 1}, {-1, 0}}, {0, 1, 2});
  auto test = bank_from({{0, 1}}, {1});
  CHECK(knn_probe(train, test, 1, 0.07) == doctest::Approx(1.0));

  SeededRng rng(73);
  FeatureBank<double> tr, te;
  gaussian_clusters(30, 8, 0.3, rng, tr);
  gaussian_clusters(10, 8, 0.3, rng, te);
  CHECK(knn_probe(tr, te, 20, 0.07) == doctest::Approx(1.0));

  CHECK_THROWS_AS((void)knn_probe(train, test, 4, 0.07), InvalidArgument);
  CHECK_THROWS_AS((void)knn_probe(train, test, 0, 0.07), InvalidArgument);
  CHECK_THROWS_AS((void)knn_probe(train, test, 1, 0.0), InvalidArgument);
  FeatureBank<double> unlabeled = train;
  unlabeled.labels.clear();
  CHECK_THROWS_AS((void)knn_probe(unlabeled, test, 1, 0.07), InvalidArgument);
}

TEST_CASE("knn probe equals the rank-count oracle on small instances") {
  SeededRng rng(74);
  for (int trial = 0; trial < 20; ++trial) {
    const int ntr = 5 + int(rng.randint(46));  // up to 50
    const int nte = 3 + int(rng.randint(8));
    const int d = 2 + int(rng.randint(6));
    const int classes = 2 + int(rng.randint(3));
    FeatureBank<double> tr, te;
    tr.vectors = uniform_tensor({ntr, d}, rng, -1.0, 1.0);
    te.vectors = uniform_tensor({nte, d}, rng, -1.0, 1.0);
    for (int i = 0; i < ntr; ++i) tr.labels.push_back(int(rng.randint(classes)));
    for (int i = 0; i < nte; ++i) te.labels.push_back(int(rng.randint(classes)));
    // Duplicate some train rows so similarity ties exist.
    if (ntr > 6)
      for (int64_t j = 0; j < d; ++j) {
        tr.vectors.at2(3, j) = tr.vectors.at2(1, j);
        tr.vectors.at2(5, j) = tr.vectors.at2(1, j);
      }
    const int k = 1 + int(rng.randint(uint64_t(ntr)));
    const double got = knn_probe(tr, te, k, 0.07);
    const double want = knn_oracle(tr, te, k, 0.07);
    CHECK(std::abs(got - want) < 1e-12);
  }
}

TEST_CASE("linear probe: separable data, zero epochs, permutation invariance") {
  SeededRng rng(75);
  FeatureBank<double> tr, te;
  gaussian_clusters(40, 6, 0.4, rng, tr);
  gaussian_clusters(12, 6, 0.4, rng, te);
  const double acc = linear_probe(tr, te, 40, 1e-2, 32, 7);
  CHECK(acc == doctest::Approx(1.0));

  // Zero epochs: zero-initialized classifier predicts class 0 everywhere,
  // which on a balanced two-class bank is exactly chance.
  CHECK(linear_probe(tr, te, 0, 1e-2, 32, 7) == doctest::Approx(0.5));

  // Swapping class ids in both banks leaves accuracy identical.
  FeatureBank<double> tr_p = tr, te_p = te;
  for (auto& l : tr_p.labels) l = 1 - l;
  for (auto& l : te_p.labels) l = 1 - l;
  CHECK(linear_probe(tr_p, te_p, 40, 1e-2, 32, 7) ==
        doctest::Approx(acc).epsilon(1e-12));
}

TEST_CASE("feature extraction: shape, determinism, resolution check") {
  BackboneSpec spec = small_spec();
  Backbone<double> bb(spec);
  SeededRng rng(76);
  bb.init(rng);

  std::vector<ImagePlane> images;
  for (int i = 0; i < 5; ++i) images.push_back(class_image(i % 4, 12, 900 + uint64_t(i)));

  FeatureBank<double> a = extract_features(bb, images, "ck-a", 2);
  FeatureBank<double> b = extract_features(bb, images, "ck-a", 3);
  REQUIRE(a.size() == 5);
  REQUIRE(a.vectors.dim(1) == spec.feature_dim());
  for (int64_t i = 0; i < a.vectors.numel(); ++i)
    CHECK(a.vectors[i] == b.vectors[i]);

  images.push_back(class_image(0, 16, 999));
  CHECK_THROWS_AS((void)extract_features(bb, images, "ck-a", 8), InvalidArgument);
}

TEST_CASE("finetune_single overfits a tiny four-class set") {
  BackboneSpec spec = small_spec();
  Backbone<double> bb(spec);
  SeededRng rng(77);
  bb.init(rng);

  SingleLabelDataset train;
  train.num_classes = 4;
  for (int i = 0; i < 32; ++i) {
    train.images.push_back(class_image(i % 4, 12, 1000 + uint64_t(i)));
    train.labels.push_back(i % 4);
  }
  FinetuneConfig cfg;
  cfg.epochs = 200;
  cfg.max_steps = 200;
  cfg.batch_size = 32;
  cfg.lr = 3e-3;
  cfg.seed = 5;
  EvalReport rep = finetune_single(bb, train, train, cfg);
  CHECK(rep.metrics.at("train_top1") == doctest::Approx(1.0));
  CHECK(rep.protocol == "finetune-single");
  CHECK(rep.train_size == 32);

  // Report serialization carries the metric map and provenance.
  const std::string js = rep.to_json();
  auto parsed = nlohmann::json::parse(js);
  CHECK(parsed["metrics"]["train_top1"].get<double>() == 1.0);
  CHECK(parsed["seed"].get<uint64_t>() == 5);
}

TEST_CASE("frozen-encoder finetune leaves encoder parameters untouched") {
  BackboneSpec spec = small_spec();
  Backbone<double> bb(spec);
  SeededRng rng(78);
  bb.init(rng);
  std::vector<Tensor<double>> before;
  for (const auto& p : bb.params()) before.push_back(p.param->value);

  SingleLabelDataset train;
  train.num_classes = 2;
  for (int i = 0; i < 8; ++i) {
    train.images.push_back(class_image(i % 2, 12, 1100 + uint64_t(i)));
    train.labels.push_back(i % 2);
  }
  FinetuneConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.freeze_encoder = true;
  (void)finetune_single(bb, train, train, cfg);

  auto params = bb.params();
  for (size_t i = 0; i < params.size(); ++i)
    for (int64_t j = 0; j < before[i].numel(); ++j)
      CHECK(params[i].param->value[j] == before[i][j]);
}

TEST_CASE("multi-stage learning rate: exact literals at the 60/80 boundaries") {
  const std::array<double, 3> stages{1e-5, 1e-6, 1e-7};
  // total = 10: epochs 0-5 first stage, 6-7 second, 8-9 third.
  for (int e = 0; e < 6; ++e) CHECK(multi_stage_lr(e, 10, stages) == 1e-5);
  for (int e = 6; e < 8; ++e) CHECK(multi_stage_lr(e, 10, stages) == 1e-6);
  for (int e = 8; e < 10; ++e) CHECK(multi_stage_lr(e, 10, stages) == 1e-7);
  // Odd total: boundary epochs are ceil(0.6 * 7) = 5 and ceil(0.8 * 7) = 6.
  CHECK(multi_stage_lr(4, 7, stages) == 1e-5);
  CHECK(multi_stage_lr(5, 7, stages) == 1e-6);
  CHECK(multi_stage_lr(6, 7, stages) == 1e-7);
  CHECK_THROWS_AS((void)multi_stage_lr(10, 10, stages), InvalidArgument);
}

TEST_CASE("finetune_multi: lr trace, MAP on motif scenes, fractional subsets") {
  BackboneSpec spec = small_spec();
  Backbone<double> bb(spec);
  SeededRng rng(79);
  bb.init(rng);

  MultiLabelDataset ds;
  ds.num_labels = 3;
  SeededRng pick(80);
  for (int i = 0; i < 24; ++i) {
    std::vector<int> present(3);
    for (auto& v : present) v = pick.bernoulli(0.5) ? 1 : 0;
    if (present == std::vector<int>{0, 0, 0}) present[i % 3] = 1;
    ds.images.push_back(motif_image(present, 12, 1200 + uint64_t(i)));
    ds.targets.push_back(present);
  }

  FinetuneConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 8;
  cfg.seed = 3;
  std::vector<double> trace;
  EvalReport rep = finetune_multi(bb, ds, ds, cfg, &trace);
  CHECK(rep.protocol == "finetune-multi");
  CHECK(rep.metrics.at("map") >= 0.0);
  CHECK(rep.metrics.at("map") <= 1.0);
  REQUIRE(trace.size() == 30);  // 3 steps/epoch * 10 epochs
  for (size_t s = 0; s < trace.size(); ++s) {
    const int epoch = int(s / 3);
    const double want = epoch < 6 ? 1e-5 : epoch < 8 ? 1e-6 : 1e-7;
    CHECK(trace[s] == want);
  }

  MultiLabelDataset tenth = take_fraction(ds, 0.25, 11);
  CHECK(tenth.images.size() == 6);
  CHECK(tenth.targets.size() == 6);
  MultiLabelDataset again = take_fraction(ds, 0.25, 11);
  for (size_t i = 0; i < 6; ++i) CHECK(tenth.targets[i] == again.targets[i]);

  SingleLabelDataset single;
  single.num_classes = 2;
  for (int i = 0; i < 10; ++i) {
    single.images.push_back(class_image(i % 2, 12, 1300 + uint64_t(i)));
    single.labels.push_back(i % 2);
  }
  SingleLabelDataset part = take_fraction(single, 0.5, 12);
  CHECK(part.images.size() == 5);
  CHECK(part.labels.size() == 5);
  CHECK_THROWS_AS((void)take_fraction(single, 0.0, 1), InvalidArgument);
}

TEST_CASE("eval report bounds are enforced") {
  EvalReport rep;
  rep.protocol = "knn";
  rep.metrics["top1"] = 1.2;
  CHECK_THROWS_AS(rep.validate(), InvalidArgument);
  rep.metrics["top1"] = 0.7;
  rep.validate();
}
