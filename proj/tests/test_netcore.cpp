#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <random>

#include "ssa/alignstat.hpp"
#include "ssa/errors.hpp"
#include "ssa/netcore.hpp"

using namespace ssa;

namespace {

Matrix gaussian(Index n, Index d, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix m(n, d);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < d; ++j) m(i, j) = normal(rng);
  return m;
}

// Perturb gamma/beta away from their initial values so their gradients are
// exercised in a generic regime.
void randomize_affine(RegressionModel& model, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& block : model.blocks()) {
    for (Index i = 0; i < block.norm.gamma.size(); ++i) {
      block.norm.gamma(i) = 1.0 + u(rng);
      block.norm.beta(i) = 0.3 + u(rng);
    }
  }
  model.head_b() = u(rng);
}

bool bit_equal(const Vector& a, const Vector& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * std::size_t(a.size())) == 0;
}

using ScalarLoss = std::function<double(const ForwardResult&)>;
using LossGrad = std::function<ParamSet(const RegressionModel&, const ForwardResult&)>;

void expect_parameter_gradients(RegressionModel model, const Matrix& batch, ForwardMode mode,
                                const ScalarLoss& loss, const LossGrad& grad) {
  const ForwardResult fwd = std::as_const(model).forward(batch, mode);
  const Vector analytic = flatten(grad(model, fwd), ParamSelector::All);
  const Vector base = snapshot_params(model, ParamSelector::All);
  ASSERT_EQ(analytic.size(), base.size());
  const double h = 1e-5;
  for (Index p = 0; p < base.size(); ++p) {
    Vector plus = base, minus = base;
    plus(p) += h;
    minus(p) -= h;
    restore_params(model, ParamSelector::All, plus);
    const double lp = loss(std::as_const(model).forward(batch, mode));
    restore_params(model, ParamSelector::All, minus);
    const double lm = loss(std::as_const(model).forward(batch, mode));
    const double fd = (lp - lm) / (2 * h);
    const double g = analytic(p);
    EXPECT_LE(std::abs(fd - g), std::max(1e-4 * std::max(std::abs(fd), std::abs(g)), 1e-6))
        << "parameter " << p << " analytic " << g << " numeric " << fd;
  }
  restore_params(model, ParamSelector::All, base);
}

}  // namespace

TEST(Forward, IdentityExtractor) {
  auto model = RegressionModel::create({2, {}}, 0);
  model.head_w() << 1, 0;
  model.head_b() = 0;
  Matrix x(1, 2);
  x << 3, 7;
  const auto out = std::as_const(model).forward(x, ForwardMode::Eval);
  EXPECT_EQ(out.features, x);
  EXPECT_DOUBLE_EQ(out.predictions(0), 3.0);
}

TEST(Forward, DuplicatedRowsStayFinite) {
  auto model = RegressionModel::create({3, {4, 4}}, 1);
  const Matrix x = Matrix::Constant(5, 3, 0.7);
  const auto out = std::as_const(model).forward(x, ForwardMode::BatchStat);
  EXPECT_TRUE(out.features.allFinite());
  EXPECT_TRUE(out.predictions.allFinite());
}

TEST(Forward, HandComputedSingleBlock) {
  auto model = RegressionModel::create({2, {2}}, 0);
  auto& b = model.blocks()[0];
  b.linear.weight << 1, 2, -1, 1;
  b.linear.bias << 0, 1;
  b.norm.gamma << 2, 1;
  b.norm.beta << 0, 0.5;
  model.head_w() << 1, -1;
  model.head_b() = 0.25;
  Matrix x(2, 2);
  x << 1, 0, 0, 1;
  // Pre-activations: unit 0 -> (1, 2), unit 1 -> (0, 2). Batch mean (1.5, 1),
  // population variance (0.25, 1). Normalized: unit 0 -> (-1, 1) * s0,
  // unit 1 -> (-1, 1) * s1 with s = 1 / sqrt(var + eps) * sqrt(var).
  const double eps = 1e-5;
  const double n0 = 0.5 / std::sqrt(0.25 + eps), n1 = 1.0 / std::sqrt(1.0 + eps);
  const double f00 = std::max(0.0, 2 * -n0), f01 = std::max(0.0, -n1 + 0.5);
  const double f10 = std::max(0.0, 2 * n0), f11 = std::max(0.0, n1 + 0.5);
  const auto out = std::as_const(model).forward(x, ForwardMode::BatchStat);
  EXPECT_NEAR(out.features(0, 0), f00, 1e-15);
  EXPECT_NEAR(out.features(0, 1), f01, 1e-15);
  EXPECT_NEAR(out.features(1, 0), f10, 1e-15);
  EXPECT_NEAR(out.features(1, 1), f11, 1e-15);
  EXPECT_NEAR(out.predictions(0), f00 - f01 + 0.25, 1e-15);
  EXPECT_NEAR(out.predictions(1), f10 - f11 + 0.25, 1e-15);
}

TEST(Forward, Errors) {
  auto model = RegressionModel::create({3, {4}}, 2);
  EXPECT_THROW(std::as_const(model).forward(Matrix::Zero(1, 3), ForwardMode::BatchStat),
               BatchTooSmallError);
  EXPECT_THROW(model.forward(Matrix::Zero(1, 3), ForwardMode::Train), BatchTooSmallError);
  EXPECT_NO_THROW(std::as_const(model).forward(Matrix::Zero(1, 3), ForwardMode::Eval));
  EXPECT_THROW(std::as_const(model).forward(Matrix::Zero(2, 4), ForwardMode::Eval),
               DimensionError);
  Matrix bad = Matrix::Zero(2, 3);
  bad(0, 0) = std::nan("");
  EXPECT_THROW(std::as_const(model).forward(bad, ForwardMode::Eval), NumericalError);
}

TEST(Forward, EvalIsPerSampleAndOrderInvariant) {
  std::mt19937_64 rng(3);
  auto model = RegressionModel::create({4, {6, 5}}, 3);
  model.forward(gaussian(32, 4, rng), ForwardMode::Train);  // move running stats
  const Matrix x = gaussian(10, 4, rng);
  const auto all = std::as_const(model).forward(x, ForwardMode::Eval);
  Matrix reversed = x.colwise().reverse();
  const auto rev = std::as_const(model).forward(reversed, ForwardMode::Eval);
  for (Index i = 0; i < 10; ++i) {
    EXPECT_NEAR(all.predictions(i), rev.predictions(9 - i), 1e-12);
    const auto single = std::as_const(model).forward(Matrix(x.row(i)), ForwardMode::Eval);
    EXPECT_NEAR(single.predictions(0), all.predictions(i), 1e-12);
  }
}

TEST(Forward, BatchStatNormalizesEachUnit) {
  std::mt19937_64 rng(4);
  auto model = RegressionModel::create({3, {6}}, 4);
  // beta large enough that ReLU is the identity, gamma 1: features - beta are
  // the normalized pre-activations.
  model.blocks()[0].norm.beta.setConstant(50.0);
  const auto out = std::as_const(model).forward(gaussian(64, 3, rng, 2.0), ForwardMode::BatchStat);
  const Matrix xhat = out.features.array() - 50.0;
  const auto stats = feature_stats(xhat);
  EXPECT_LE(stats.mean.cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LE((stats.var.array() - 1.0).abs().maxCoeff(), 1e-5);
}

TEST(Forward, TrainModeUpdatesRunningStatisticsByMomentum) {
  std::mt19937_64 rng(5);
  auto model = RegressionModel::create({3, {4}}, 5);
  const Matrix x = gaussian(16, 3, rng);
  const Vector before_mean = model.blocks()[0].norm.running_mean;
  const Vector before_var = model.blocks()[0].norm.running_var;
  const auto& lin = model.blocks()[0].linear;
  const Matrix h = (x * lin.weight.transpose()).rowwise() + lin.bias.transpose();
  const auto s = feature_stats(h);

  const auto copy = model;
  std::as_const(model).forward(x, ForwardMode::Train);
  EXPECT_TRUE(same_non_affine_state(copy, model));
  model.forward(x, ForwardMode::BatchStat);
  EXPECT_TRUE(same_non_affine_state(copy, model));
  model.forward(x, ForwardMode::Train);
  EXPECT_TRUE((model.blocks()[0].norm.running_mean - (0.9 * before_mean + 0.1 * s.mean))
                  .cwiseAbs()
                  .maxCoeff() < 1e-15);
  EXPECT_TRUE((model.blocks()[0].norm.running_var - (0.9 * before_var + 0.1 * s.var))
                  .cwiseAbs()
                  .maxCoeff() < 1e-15);
}

TEST(Backward, HeadGradientIsFeatures) {
  auto model = RegressionModel::create({2, {}}, 0);
  Matrix x(1, 2);
  x << 3, 7;
  const auto fwd = std::as_const(model).forward(x, ForwardMode::Eval);
  const auto g = model.backward(fwd.tape, Matrix(), Vector::Ones(1));
  EXPECT_EQ(g.head_w, Vector(x.row(0).transpose()));
  EXPECT_DOUBLE_EQ(g.head_b, 1.0);
}

TEST(Backward, ConstantLossGivesZeroGradient) {
  std::mt19937_64 rng(6);
  auto model = RegressionModel::create({3, {4, 4}}, 6);
  const auto fwd = std::as_const(model).forward(gaussian(8, 3, rng), ForwardMode::BatchStat);
  const auto g = model.backward(fwd.tape, Matrix(), Vector());
  EXPECT_EQ(flatten(g, ParamSelector::All).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Backward, WithoutForwardIsUsageError) {
  auto model = RegressionModel::create({3, {4}}, 7);
  EXPECT_THROW(model.backward(Tape(), Matrix(), Vector::Ones(2)), UsageError);
}

TEST(Backward, ShapeMismatchIsDimensionError) {
  std::mt19937_64 rng(6);
  auto model = RegressionModel::create({3, {4}}, 7);
  const auto fwd = std::as_const(model).forward(gaussian(8, 3, rng), ForwardMode::BatchStat);
  EXPECT_THROW(model.backward(fwd.tape, Matrix::Zero(8, 3), Vector()), DimensionError);
  EXPECT_THROW(model.backward(fwd.tape, Matrix(), Vector::Ones(7)), DimensionError);
}

TEST(Backward, MseGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 12; ++trial) {
    auto model = RegressionModel::create({3, {5, 4}}, 100 + trial);
    randomize_affine(model, rng);
    if (trial % 3 == 0) model.forward(gaussian(16, 3, rng), ForwardMode::Train);
    const Matrix x = gaussian(8, 3, rng);
    const Vector y = gaussian(8, 1, rng).col(0);
    const ForwardMode mode = trial % 3 == 0 ? ForwardMode::Eval : ForwardMode::BatchStat;
    SCOPED_TRACE(trial);
    expect_parameter_gradients(
        model, x, mode,
        [&](const ForwardResult& f) { return (f.predictions - y).squaredNorm() / 8.0; },
        [&](const RegressionModel& m, const ForwardResult& f) {
          return m.backward(f.tape, Matrix(), Vector(2.0 * (f.predictions - y) / 8.0));
        });
  }
}

TEST(Backward, AlignmentLossGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 12; ++trial) {
    auto model = RegressionModel::create({3, {5, 6}}, 200 + trial);
    randomize_affine(model, rng);
    const Matrix source = std::as_const(model).forward(gaussian(200, 3, rng), ForwardMode::Eval).features;
    const auto stats = feature_stats(source);
    const auto eig = sym_eig(covariance(source, stats.mean));
    const std::size_t k = std::min<std::size_t>(3, numeric_rank(eig.eigenvalues));
    const auto sub = subspace_from_eigen(stats.mean, eig, model.head_w(), k);
    const Matrix x = gaussian(12, 3, rng, 1.5).array() + 0.5;
    const auto metric = trial % 2 ? AlignmentMetric::KL : AlignmentMetric::Wasserstein2;
    SCOPED_TRACE(trial);
    expect_parameter_gradients(
        model, x, ForwardMode::BatchStat,
        [&](const ForwardResult& f) { return subspace_alignment_loss(f.features, sub, metric).value; },
        [&](const RegressionModel& m, const ForwardResult& f) {
          return m.backward(f.tape, subspace_alignment_loss(f.features, sub, metric).grad, Vector());
        });
  }
}

TEST(Params, SnapshotRestoreRoundTrip) {
  std::mt19937_64 rng(9);
  auto model = RegressionModel::create({3, {4, 5}}, 9);
  randomize_affine(model, rng);
  const auto copy = model;
  for (auto sel : {ParamSelector::All, ParamSelector::NormAffineOnly, ParamSelector::HeadOnly}) {
    const Vector snap = snapshot_params(model, sel);
    EXPECT_EQ(static_cast<std::size_t>(snap.size()), model.parameter_count(sel));
    restore_params(model, sel, snap);
    EXPECT_TRUE(bit_equal(snapshot_params(model, ParamSelector::All),
                          snapshot_params(copy, ParamSelector::All)));
  }
}

TEST(Params, NormAffineCountsTwicePerNormUnit) {
  auto model = RegressionModel::create({7, {100, 100, 100, 100}}, 0);
  EXPECT_EQ(model.parameter_count(ParamSelector::NormAffineOnly), 2u * 400u);
  EXPECT_EQ(model.parameter_count(ParamSelector::HeadOnly), 101u);
  EXPECT_EQ(model.parameter_count(ParamSelector::All),
            (7u * 100 + 100 + 200) + 3 * (100u * 100 + 100 + 200) + 101);
}

TEST(Params, RestoreOnlyTouchesSelection) {
  std::mt19937_64 rng(10);
  auto model = RegressionModel::create({3, {4, 5}}, 10);
  const auto copy = model;
  Vector affine = snapshot_params(model, ParamSelector::NormAffineOnly);
  affine.array() += 0.25;
  restore_params(model, ParamSelector::NormAffineOnly, affine);
  EXPECT_TRUE(same_non_affine_state(copy, model));
  EXPECT_FALSE(bit_equal(snapshot_params(model, ParamSelector::All),
                         snapshot_params(copy, ParamSelector::All)));
  EXPECT_EQ(model.blocks()[1].norm.gamma(2), copy.blocks()[1].norm.gamma(2) + 0.25);
}

TEST(Params, WrongLengthRestore) {
  auto model = RegressionModel::create({3, {4}}, 11);
  EXPECT_THROW(restore_params(model, ParamSelector::NormAffineOnly, Vector::Zero(3)),
               DimensionError);
}

TEST(Params, SelectorNames) {
  for (auto sel : {ParamSelector::All, ParamSelector::NormAffineOnly, ParamSelector::HeadOnly})
    EXPECT_EQ(parse_param_selector(to_string(sel)), sel);
  for (auto mode : {ForwardMode::Train, ForwardMode::BatchStat, ForwardMode::Eval})
    EXPECT_EQ(parse_forward_mode(to_string(mode)), mode);
  EXPECT_THROW(parse_param_selector("weights"), ConfigError);
}

TEST(Init, KaimingBoundsAndDefaults) {
  auto model = RegressionModel::create({10, {50, 20}}, 12);
  EXPECT_LE(model.blocks()[0].linear.weight.cwiseAbs().maxCoeff(), std::sqrt(6.0 / 10));
  EXPECT_LE(model.blocks()[1].linear.weight.cwiseAbs().maxCoeff(), std::sqrt(6.0 / 50));
  for (const auto& b : model.blocks()) {
    EXPECT_EQ(b.linear.bias.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(b.norm.gamma, Vector(Vector::Ones(b.norm.gamma.size())));
    EXPECT_EQ(b.norm.beta.cwiseAbs().maxCoeff(), 0.0);
  }
  EXPECT_EQ(model.feature_dim(), 20);
  const auto again = RegressionModel::create({10, {50, 20}}, 12);
  EXPECT_TRUE(bit_equal(snapshot_params(model, ParamSelector::All),
                        snapshot_params(again, ParamSelector::All)));
}

TEST(Checkpoint, RoundTripPreservesPredictions) {
  std::mt19937_64 rng(13);
  auto model = RegressionModel::create({4, {6, 3}}, 13);
  randomize_affine(model, rng);
  model.forward(gaussian(20, 4, rng), ForwardMode::Train);
  const auto path = std::filesystem::temp_directory_path() / "ssa_netcore_checkpoint.json";
  model.save(path);
  const auto loaded = RegressionModel::load(path);
  std::filesystem::remove(path);
  const Matrix x = gaussian(9, 4, rng);
  for (auto mode : {ForwardMode::Eval, ForwardMode::BatchStat}) {
    EXPECT_TRUE(bit_equal(std::as_const(model).forward(x, mode).predictions,
                          loaded.forward(x, mode).predictions));
  }
  EXPECT_TRUE(same_non_affine_state(model, loaded));
}

TEST(Checkpoint, MalformedInput) {
  EXPECT_THROW(RegressionModel::from_json(nlohmann::json::object()), ConfigError);
  auto j = RegressionModel::create({2, {3}}, 0).to_json();
  j["blocks"][0]["weight"] = nlohmann::json::array();
  EXPECT_THROW(RegressionModel::from_json(j), ConfigError);
  EXPECT_THROW(RegressionModel::load("/nonexistent/dir/model.json"), IoError);
}
