#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "oodforge/cider.hpp"
#include "support.hpp"

using namespace oodforge;
using namespace testing_support;

namespace {

PrototypeBank random_bank(Rng& rng, std::size_t classes, std::size_t dim, double temperature) {
  PrototypeBank b;
  b.temperature = temperature;
  for (std::size_t c = 0; c < classes; ++c) b.prototypes.push_back(random_unit(rng, dim));
  return b;
}

Matrix unit_rows(Rng& rng, std::size_t n, std::size_t dim) {
  Matrix z(n, dim);
  for (std::size_t i = 0; i < n; ++i) {
    const Vector u = random_unit(rng, dim);
    std::copy(u.begin(), u.end(), z.row(i).begin());
  }
  return z;
}

Labels random_labels(Rng& rng, std::size_t n, std::size_t classes) {
  Labels y(n);
  for (auto& v : y) v = static_cast<int>(rng.below(classes));
  return y;
}

CiderConfig small_config() {
  CiderConfig c;
  c.projection_dim = 8;
  c.epochs = 5;
  c.batch_size = 16;
  c.seed = 3;
  return c;
}

SyntheticData small_synthetic(std::uint64_t seed) {
  SyntheticSpec s;
  s.per_class = 40;
  s.seed = seed;
  return generate_synthetic(s);
}

}  // namespace

TEST(Compactness, OrthonormalClosedForm) {
  PrototypeBank b;
  b.temperature = 1.0;
  b.prototypes = {Vector{1, 0}, Vector{0, 1}};
  const Matrix z = Matrix::from_rows({{1, 0}, {0, 1}});
  const Labels y{0, 1};
  EXPECT_NEAR(loss_compactness(z, y, b).loss, std::log1p(std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(std::log1p(std::exp(-1.0)), 0.31326, 1e-5);
}

TEST(Compactness, HighTemperatureLimitIsLogC) {
  Rng rng(81);
  for (std::size_t c = 2; c < 8; ++c) {
    const PrototypeBank b = random_bank(rng, c, 5, 1e6);
    const Matrix z = unit_rows(rng, 10, 5);
    EXPECT_NEAR(loss_compactness(z, random_labels(rng, 10, c), b).loss, std::log(double(c)), 1e-4);
  }
}

TEST(Compactness, GradientMatchesFiniteDifferences) {
  Rng rng(82);
  for (int t = 0; t < 120; ++t) {
    const std::size_t c = 2 + rng.below(5), d = 2 + rng.below(6), n = 1 + rng.below(8);
    const PrototypeBank b = random_bank(rng, c, d, rng.uniform(0.1, 2.0));
    Matrix z = unit_rows(rng, n, d);
    const Labels y = random_labels(rng, n, c);
    const CompactnessLoss an = loss_compactness(z, y, b);
    // The loss is a smooth function of z; evaluate it off the sphere by
    // inlining the definition (the unit-norm guard would reject the probes).
    const auto f = [&] {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) {
        Vector l(c);
        for (std::size_t j = 0; j < c; ++j) l[j] = dot(z.row(i), b.prototypes[j]) / b.temperature;
        s += (logsumexp(l) - l[static_cast<std::size_t>(y[i])]) / double(n);
      }
      return s;
    };
    EXPECT_NEAR(f(), an.loss, 1e-12);
    EXPECT_LT(rel_err(central_diff(f, pointers(z)), flatten(an.grad_z)), 1e-6);
  }
}

TEST(Compactness, AlwaysPositiveAndRejectsBadInput) {
  Rng rng(83);
  for (int t = 0; t < 200; ++t) {
    const std::size_t c = 2 + rng.below(5);
    const PrototypeBank b = random_bank(rng, c, 4, rng.uniform(0.05, 3.0));
    EXPECT_GT(loss_compactness(unit_rows(rng, 3, 4), random_labels(rng, 3, c), b).loss, 0.0);
  }
  const PrototypeBank b = random_bank(rng, 2, 3, 0.1);
  EXPECT_THROW(loss_compactness(unit_rows(rng, 1, 3), Labels{2}, b), ConfigError);
  EXPECT_THROW(loss_compactness(Matrix(1, 3, 0.5), Labels{0}, b), ConfigError);
}

TEST(Dispersion, TwoClassClosedForms) {
  PrototypeBank b;
  b.temperature = 0.1;
  b.prototypes = {Vector{1, 0}, Vector{-1, 0}};
  EXPECT_NEAR(loss_dispersion(b).loss, -10.0, 1e-12);
  b.prototypes = {Vector{1, 0}, Vector{0, 1}};
  EXPECT_NEAR(loss_dispersion(b).loss, 0.0, 1e-15);
  Rng rng(84);
  for (int t = 0; t < 50; ++t) {
    b = random_bank(rng, 2, 5, rng.uniform(0.05, 2));
    const double m = dot(b.prototypes[0], b.prototypes[1]);
    EXPECT_NEAR(loss_dispersion(b).loss, m / b.temperature, 1e-10);
  }
  b.prototypes.pop_back();
  EXPECT_THROW(loss_dispersion(b), ConfigError);
}

TEST(Dispersion, GradientMatchesFiniteDifferencesAndLowerBound) {
  Rng rng(85);
  for (int t = 0; t < 120; ++t) {
    const std::size_t c = 2 + rng.below(6), d = 2 + rng.below(6);
    PrototypeBank b = random_bank(rng, c, d, rng.uniform(0.1, 2.0));
    const DispersionLoss an = loss_dispersion(b);
    EXPECT_GE(an.loss, -1.0 / b.temperature - 1e-12);
    std::vector<double*> ptrs;
    Vector flat;
    for (std::size_t k = 0; k < c; ++k) {
      for (double& v : b.prototypes[k]) ptrs.push_back(&v);
      flat.insert(flat.end(), an.grad_prototypes[k].begin(), an.grad_prototypes[k].end());
    }
    const Vector fd = central_diff([&] { return loss_dispersion(b).loss; }, ptrs);
    EXPECT_LT(rel_err(fd, flat), 1e-6);
  }
}

TEST(Prototypes, MomentumOneIsIdentity) {
  Rng rng(86);
  PrototypeBank b = random_bank(rng, 3, 4, 0.1);
  b.momentum = 1.0;
  const PrototypeBank after = update_prototypes(b, unit_rows(rng, 10, 4), random_labels(rng, 10, 3));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(after.prototypes[c][k], b.prototypes[c][k], 1e-15);
}

TEST(Prototypes, MomentumZeroTakesLastSample) {
  Rng rng(87);
  PrototypeBank b = random_bank(rng, 3, 4, 0.1);
  b.momentum = 0.0;
  const Matrix z = unit_rows(rng, 6, 4);
  const Labels y{0, 1, 0, 2, 1, 0};
  const PrototypeBank after = update_prototypes(b, z, y);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_NEAR(after.prototypes[0][k], z(5, k), 1e-15);
    EXPECT_NEAR(after.prototypes[1][k], z(4, k), 1e-15);
    EXPECT_NEAR(after.prototypes[2][k], z(3, k), 1e-15);
  }
}

TEST(Prototypes, SequentialOrderIsPinned) {
  Rng rng(88);
  for (int t = 0; t < 50; ++t) {
    PrototypeBank b = random_bank(rng, 3, 5, 0.1);
    b.momentum = rng.uniform(0.1, 0.99);
    const Matrix z = unit_rows(rng, 12, 5);
    const Labels y = random_labels(rng, 12, 3);
    PrototypeBank manual = b;
    for (std::size_t i = 0; i < 12; ++i) {
      auto& mu = manual.prototypes[static_cast<std::size_t>(y[i])];
      Vector mixed(5);
      for (std::size_t k = 0; k < 5; ++k) mixed[k] = b.momentum * mu[k] + (1 - b.momentum) * z(i, k);
      const double n = norm2(mixed);
      for (std::size_t k = 0; k < 5; ++k) mu[k] = mixed[k] / n;
    }
    const PrototypeBank got = update_prototypes(b, z, y);
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_LT(rel_err(got.prototypes[c], manual.prototypes[c]), 1e-15);
      EXPECT_NEAR(norm2(got.prototypes[c]), 1.0, 1e-12);
    }
  }
}

TEST(Project, UnitNormAndIdentityReduction) {
  Rng rng(89);
  const Mlp head = make_mlp(std::vector<std::size_t>{6, 6, 4}, 1);
  for (int t = 0; t < 200; ++t)
    EXPECT_NEAR(norm2(project(head, std::nullopt, random_vector(rng, 6))), 1.0, 1e-9);
  const Vector x = random_vector(rng, 5);
  EXPECT_LT(rel_err(project(identity_mlp(5), identity_mlp(5), x), l2_normalize(x)), 1e-15);
  EXPECT_THROW(project(head, std::nullopt, Vector(6, 0.0)), NumericalError);
}

TEST(CiderTrain, UnitNormEverywhereAndDispersionBound) {
  const SyntheticData d = small_synthetic(90);
  CiderConfig cfg = small_config();
  cfg.adapter_enabled = true;
  std::size_t steps = 0;
  cider_train(d.id_train, cfg, [&](const CiderStep& s) {
    ++steps;
    for (std::size_t i = 0; i < s.projected->rows(); ++i)
      ASSERT_NEAR(norm2(s.projected->row(i)), 1.0, 1e-9);
    for (const auto& p : s.bank->prototypes) ASSERT_NEAR(norm2(p), 1.0, 1e-9);
    ASSERT_GE(s.dispersion, -1.0 / cfg.temperature);
    ASSERT_GT(s.compactness, 0.0);
  });
  EXPECT_EQ(steps, cfg.epochs * ((d.id_train.size() + cfg.batch_size - 1) / cfg.batch_size));
}

TEST(CiderTrain, DeterministicForSeed) {
  const SyntheticData d = small_synthetic(91);
  CiderConfig cfg = small_config();
  cfg.adapter_enabled = true;
  const CiderTrainResult a = cider_train(d.id_train, cfg), b = cider_train(d.id_train, cfg);
  EXPECT_EQ(a.model.head, b.model.head);
  EXPECT_EQ(a.model.adapter, b.model.adapter);
  EXPECT_EQ(a.model.bank.prototypes, b.model.bank.prototypes);
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
  EXPECT_EQ(encode_archive(cider_to_archive(a.model), Dtype::f32),
            encode_archive(cider_to_archive(b.model), Dtype::f32));
  cfg.seed = 4;
  EXPECT_NE(cider_train(d.id_train, cfg).model.head, a.model.head);
}

TEST(CiderTrain, DispersionOnlyWhenHeadFrozen) {
  const SyntheticData d = small_synthetic(92);
  CiderConfig cfg = small_config();
  cfg.lambda_comp = 0.0;
  cfg.freeze_head = true;
  const CiderTrainResult r = cider_train(d.id_train, cfg);
  EXPECT_LE(r.final_dispersion, r.initial_dispersion);
  EXPECT_EQ(r.model.head, make_mlp(cfg.head_dims(d.id_train.dim()), Rng(cfg.seed).next()));
}

// A random rectifier head maps every input into a narrow cone, so at epoch 0
// each sample already has cosine ~0.99 to every prototype. Training is judged
// by the own-prototype margin over the nearest other prototype instead.
double own_prototype_margin(const CiderModel& m, const LabeledEmbeddings& ds) {
  double s = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Vector z = project(m, ds.features.row(i));
    const auto y = static_cast<std::size_t>((*ds.labels)[i]);
    double other = -1.0;
    for (std::size_t j = 0; j < m.bank.classes(); ++j)
      if (j != y) other = std::max(other, dot(z, m.bank.prototypes[j]));
    s += dot(z, m.bank.prototypes[y]) - other;
  }
  return s / static_cast<double>(ds.size());
}

TEST(CiderTrain, OwnPrototypeMarginGrowsOnOverlappingData) {
  const SyntheticData d = generate_overlapping(OverlapSpec{});
  CiderConfig cfg = small_config();
  cfg.projection_dim = 16;
  cfg.epochs = 0;
  const CiderModel initial = cider_train(d.id_train, cfg).model;
  cfg.epochs = 20;
  const CiderTrainResult trained = cider_train(d.id_train, cfg);
  EXPECT_GT(own_prototype_margin(trained.model, d.id_train),
            own_prototype_margin(initial, d.id_train) + 0.1);
  EXPECT_LT(trained.epoch_compactness.back(), 0.1 * trained.epoch_compactness.front());
  EXPECT_LT(trained.final_dispersion, trained.initial_dispersion);
}

TEST(CiderTrain, ClassMeansProjectNearOwnPrototype) {
  const SyntheticData d = small_synthetic(93);
  const CiderModel m = cider_train(d.id_train, small_config()).model;
  const auto& y = *d.id_train.labels;
  for (std::size_t c = 0; c < 3; ++c) {
    Vector mean(d.id_train.dim(), 0.0);
    for (std::size_t i = 0; i < d.id_train.size(); ++i)
      if (static_cast<std::size_t>(y[i]) == c)
        for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += d.id_train.features(i, k);
    const Vector z = project(m, mean);
    std::size_t best = 0;
    for (std::size_t j = 1; j < 3; ++j)
      if (dot(z, m.bank.prototypes[j]) > dot(z, m.bank.prototypes[best])) best = j;
    EXPECT_EQ(best, c);
  }
}

TEST(CiderTrain, RejectsSingleClassAndBadConfig) {
  LabeledEmbeddings ds{Matrix(4, 3, 1.0), Labels{0, 0, 0, 0}, "one", Split::train};
  EXPECT_THROW(cider_train(ds, small_config()), ConfigError);
  CiderConfig cfg = small_config();
  cfg.temperature = 0.0;
  EXPECT_THROW(cider_train(small_synthetic(94).id_train, cfg), ConfigError);
  cfg = small_config();
  cfg.lambda_comp = -1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(ProbeOnProjection, AccurateDeterministicAndChecked) {
  const SyntheticData d = small_synthetic(95);
  const CiderModel m = cider_train(d.id_train, small_config()).model;
  TrainConfig tc;
  tc.epochs = 50;
  tc.seed = 2;
  const ProbeEvaluation a = evaluate_with_probe(m, d.id_train, d.id_test, tc);
  EXPECT_GE(a.id_accuracy, 0.95);

  CiderConfig frozen = small_config();
  frozen.epochs = 0;
  const CiderModel random_head = cider_train(d.id_train, frozen).model;
  EXPECT_EQ(evaluate_with_probe(random_head, d.id_train, d.id_test, tc).probe,
            evaluate_with_probe(random_head, d.id_train, d.id_test, tc).probe);

  const LinearProbe wrong{Matrix(3, 5), Vector(3, 0.0)};
  EXPECT_THROW(projected_accuracy(m, wrong, d.id_test), ConfigError);
}

TEST(Checkpoint, CiderRoundTrip) {
  const SyntheticData d = small_synthetic(96);
  CiderConfig cfg = small_config();
  cfg.adapter_enabled = true;
  cfg.hidden = std::vector<std::size_t>{5, 7};
  const CiderModel m = cider_train(d.id_train, cfg).model;
  const auto path = std::filesystem::temp_directory_path() / "oodforge_cider_test.ckpt";
  write_cider(path, m);
  const CiderModel back = read_cider(path);
  std::filesystem::remove(path);
  EXPECT_TRUE(back.adapter.has_value());
  EXPECT_EQ(back.head.layers.size(), 3u);
  EXPECT_EQ(cider_config_to_json(back.config), cider_config_to_json(m.config));
  for (const auto& p : back.bank.prototypes) EXPECT_NEAR(norm2(p), 1.0, 1e-12);
  for (std::size_t i = 0; i < 10; ++i) {
    const Vector a = project(m, d.id_test.features.row(i)), b = project(back, d.id_test.features.row(i));
    EXPECT_LT(rel_err(a, b), 1e-5);
  }
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
  CiderConfig c = small_config();
  c.hidden = std::vector<std::size_t>{3};
  c.adapter_enabled = true;
  const CiderConfig back = cider_config_from_json(cider_config_to_json(c));
  EXPECT_EQ(cider_config_to_json(back), cider_config_to_json(c));
  OrderedJson j = cider_config_to_json(c);
  j["temprature"] = 0.2;
  EXPECT_THROW(cider_config_from_json(j), ConfigError);
}
