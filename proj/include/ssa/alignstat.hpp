#pragma once

// Feature statistics, subspace detection and the alignment losses used for
// test-time adaptation, plus the diagnostics computed on top of them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "ssa/errors.hpp"
#include "ssa/linalg.hpp"

namespace ssa {

/// Per-dimension mean and population variance.
template <typename Scalar>
struct FeatureStatsT {
  VectorX<Scalar> mean;
  VectorX<Scalar> var;

  Index dim() const { return mean.size(); }
};
using FeatureStats = FeatureStatsT<double>;

/// Source subspace: mean, K x D orthonormal basis (rows), the K variances
/// along it, and per-dimension weights 1 + |w . v_k| for the head w.
template <typename Scalar>
struct SubspaceStatsT {
  VectorX<Scalar> mean;
  MatrixX<Scalar> basis;
  VectorX<Scalar> eigenvalues;
  VectorX<Scalar> weights;
  VectorX<Scalar> head_w;

  Index k() const { return basis.rows(); }
  Index dim() const { return basis.cols(); }
};
using SubspaceStats = SubspaceStatsT<double>;

enum class AlignmentMetric { KL, Wasserstein2, L1 };

// Subspace: eigen-subspace of the source covariance (the method).
// NaiveTopVariance: the K raw dimensions of largest source variance, weights 1 + |w_d|.
// FullSpace: every raw dimension, unit weights (the naive symmetric-KL baseline).
enum class AlignmentSpace { Subspace, NaiveTopVariance, FullSpace };

struct AlignmentVariant {
  AlignmentMetric metric = AlignmentMetric::KL;
  AlignmentSpace space = AlignmentSpace::Subspace;
};

inline constexpr double kValidVarianceTol = 1e-12;
inline constexpr double kDefaultRankTol = 1e-6;
inline constexpr double kVarianceFloor = 1e-8;  // relative to the reference variance

/// Mean and population variance (1/N) of each column, two-pass.
template <typename Derived>
FeatureStatsT<typename Derived::Scalar> feature_stats(const Eigen::MatrixBase<Derived>& z) {
  using Scalar = typename Derived::Scalar;
  if (z.rows() < 2)
    throw BatchTooSmallError("feature_stats: need at least 2 rows, got " +
                             std::to_string(z.rows()));
  const Scalar n = static_cast<Scalar>(z.rows());
  FeatureStatsT<Scalar> out;
  out.mean = z.colwise().sum().transpose() / n;
  out.var = (z.rowwise() - out.mean.transpose()).array().square().colwise().sum().transpose() / n;
  return out;
}

/// Population covariance (1/N) of the rows around the given mean.
template <typename Derived, typename DerivedMean>
MatrixX<typename Derived::Scalar> covariance(const Eigen::MatrixBase<Derived>& z,
                                             const Eigen::MatrixBase<DerivedMean>& mean) {
  using Scalar = typename Derived::Scalar;
  if (mean.size() != z.cols())
    throw DimensionError("covariance: mean has length " + std::to_string(mean.size()) +
                         ", features have " + std::to_string(z.cols()) + " columns");
  if (z.rows() < 2) throw BatchTooSmallError("covariance: need at least 2 rows");
  const MatrixX<Scalar> centered = z.rowwise() - mean.transpose();
  MatrixX<Scalar> cov = (centered.transpose() * centered) / static_cast<Scalar>(z.rows());
  return (cov + cov.transpose()) / Scalar(2);
}

/// Dimensions whose variance exceeds abs_tol.
template <typename Scalar>
std::size_t count_valid_dims(const FeatureStatsT<Scalar>& stats,
                             double abs_tol = kValidVarianceTol) {
  return static_cast<std::size_t>((stats.var.array() > Scalar(abs_tol)).count());
}

/// alpha_k = 1 + |w . v_k| for each basis row.
template <typename DerivedBasis, typename DerivedW>
VectorX<typename DerivedBasis::Scalar> dimension_weights(const Eigen::MatrixBase<DerivedBasis>& basis,
                                                         const Eigen::MatrixBase<DerivedW>& head_w) {
  if (basis.cols() != head_w.size())
    throw DimensionError("dimension_weights: head length does not match feature width");
  return ((basis * head_w).array().abs() + 1).matrix();
}

/// Top-K eigenpairs of a precomputed covariance eigendecomposition. K may not
/// exceed the numeric rank, so every kept eigenvalue is strictly positive.
template <typename Scalar, typename DerivedMean, typename DerivedW>
SubspaceStatsT<Scalar> subspace_from_eigen(const Eigen::MatrixBase<DerivedMean>& mean,
                                           const EigenDecomposition<Scalar>& eig,
                                           const Eigen::MatrixBase<DerivedW>& head_w,
                                           std::size_t k, double rank_tol = kDefaultRankTol) {
  const auto d = static_cast<std::size_t>(eig.eigenvalues.size());
  if (k == 0) throw DimensionError("detect_subspace: K must be at least 1");
  if (k > d)
    throw DimensionError("detect_subspace: K = " + std::to_string(k) +
                         " exceeds feature width " + std::to_string(d));
  const std::size_t rank = numeric_rank(eig.eigenvalues, rank_tol);
  if (k > rank) throw RankError(k, rank);

  const auto kk = static_cast<Index>(k);
  SubspaceStatsT<Scalar> sub;
  sub.mean = mean;
  sub.basis = eig.eigenvectors.topRows(kk);
  sub.eigenvalues = eig.eigenvalues.head(kk);
  sub.head_w = head_w;
  sub.weights = dimension_weights(sub.basis, sub.head_w);
  return sub;
}

/// Subspace detection: eigendecompose the source covariance and keep the
/// top-K directions, weighting each by its influence on the linear head.
template <typename Derived, typename DerivedW>
SubspaceStatsT<typename Derived::Scalar> detect_subspace(const Eigen::MatrixBase<Derived>& z,
                                                         const Eigen::MatrixBase<DerivedW>& head_w,
                                                         std::size_t k,
                                                         double rank_tol = kDefaultRankTol) {
  if (head_w.size() != z.cols())
    throw DimensionError("detect_subspace: head length does not match feature width");
  if (k > static_cast<std::size_t>(z.cols()))
    throw DimensionError("detect_subspace: K = " + std::to_string(k) +
                         " exceeds feature width " + std::to_string(z.cols()));
  const auto stats = feature_stats(z);
  const auto eig = sym_eig(covariance(z, stats.mean));
  return subspace_from_eigen(stats.mean, eig, head_w, k, rank_tol);
}

/// Ablation without subspace detection: axis-aligned "basis" over the K raw
/// dimensions of largest source variance (ties go to the lower index), with
/// weights 1 + |w_d|. A selected dimension with zero variance is degenerate.
template <typename Scalar, typename DerivedW>
SubspaceStatsT<Scalar> top_variance_subspace(const FeatureStatsT<Scalar>& source,
                                             const Eigen::MatrixBase<DerivedW>& head_w,
                                             std::size_t k) {
  const Index d = source.dim();
  if (head_w.size() != d) throw DimensionError("top_variance_subspace: head length mismatch");
  if (k == 0 || k > static_cast<std::size_t>(d))
    throw DimensionError("top_variance_subspace: K = " + std::to_string(k) +
                         " outside [1, " + std::to_string(d) + "]");
  std::vector<Index> order(static_cast<std::size_t>(d));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index i, Index j) { return source.var(i) > source.var(j); });

  const auto kk = static_cast<Index>(k);
  SubspaceStatsT<Scalar> sub;
  sub.mean = source.mean;
  sub.basis = MatrixX<Scalar>::Zero(kk, d);
  sub.eigenvalues.resize(kk);
  sub.weights.resize(kk);
  sub.head_w = head_w;
  for (Index r = 0; r < kk; ++r) {
    const Index dim = order[static_cast<std::size_t>(r)];
    if (!(source.var(dim) > Scalar(kValidVarianceTol)))
      throw DegenerateDimensionError(
          static_cast<std::size_t>(dim),
          "top_variance_subspace: selected dimension " + std::to_string(dim) +
              " has zero source variance (K exceeds the valid dimensions)");
    sub.basis(r, dim) = Scalar(1);
    sub.eigenvalues(r) = source.var(dim);
    sub.weights(r) = Scalar(1) + std::abs(head_w(dim));
  }
  return sub;
}

/// z~_i = V (z_i - mu).
template <typename Derived, typename Scalar>
MatrixX<Scalar> project(const Eigen::MatrixBase<Derived>& z, const SubspaceStatsT<Scalar>& sub) {
  if (z.cols() != sub.dim())
    throw DimensionError("project: features have " + std::to_string(z.cols()) +
                         " columns, subspace expects " + std::to_string(sub.dim()));
  return (z.rowwise() - sub.mean.transpose()) * sub.basis.transpose();
}

/// KL(N(mu1, var1) || N(mu2, var2)) in closed form.
template <typename Scalar>
Scalar gaussian_kl(Scalar mu1, Scalar var1, Scalar mu2, Scalar var2) {
  if (!(var1 > 0) || !(var2 > 0))
    throw DomainError("gaussian_kl: variances must be positive");
  const Scalar dm = mu1 - mu2;
  return (std::log(var2 / var1) + (dm * dm + var1) / var2 - Scalar(1)) / Scalar(2);
}

/// Reference distribution for the per-dimension loss terms: zero-mean
/// Gaussians with the given variances, weighted per dimension.
template <typename Scalar>
struct AlignmentReference {
  VectorX<Scalar> variances;
  VectorX<Scalar> weights;
};

template <typename Scalar>
struct LossTerms {
  Scalar value = 0;
  VectorX<Scalar> d_mean;  // dL / d mu~
  VectorX<Scalar> d_var;   // dL / d sigma~^2
};

namespace detail {

template <typename Scalar>
void check_lengths(const FeatureStatsT<Scalar>& target, const AlignmentReference<Scalar>& ref,
                   const char* who) {
  if (target.mean.size() != ref.variances.size() || target.var.size() != ref.variances.size() ||
      ref.weights.size() != ref.variances.size())
    throw DimensionError(std::string(who) + ": statistic lengths differ");
}

// Weighted symmetric KL between N(mu, s) and N(0, lambda) per dimension,
// expanded form. s is floored at kVarianceFloor * lambda.
template <typename Scalar>
LossTerms<Scalar> kl_terms(const FeatureStatsT<Scalar>& target,
                           const AlignmentReference<Scalar>& ref) {
  check_lengths(target, ref, "ssa_loss");
  const Index k = ref.variances.size();
  LossTerms<Scalar> out{Scalar(0), VectorX<Scalar>::Zero(k), VectorX<Scalar>::Zero(k)};
  for (Index d = 0; d < k; ++d) {
    const Scalar lambda = ref.variances(d);
    const Scalar alpha = ref.weights(d);
    if (!(lambda > 0))
      throw DegenerateDimensionError(static_cast<std::size_t>(d),
                                     "alignment loss: reference variance of dimension " +
                                         std::to_string(d) + " is zero");
    const Scalar mu = target.mean(d);
    const Scalar floor = Scalar(kVarianceFloor) * lambda;
    const bool floored = target.var(d) < floor;
    const Scalar s = floored ? floor : target.var(d);
    if (!(s > 0) || !std::isfinite(s))
      throw NumericalError("ssa_loss: non-positive target variance after flooring");
    const Scalar mu2 = mu * mu;
    out.value += alpha * ((mu2 + lambda) / s + (mu2 + s) / lambda - Scalar(2)) / Scalar(2);
    out.d_mean(d) = alpha * mu * (Scalar(1) / s + Scalar(1) / lambda);
    out.d_var(d) = floored ? Scalar(0)
                           : alpha * (Scalar(1) / lambda - (mu2 + lambda) / (s * s)) / Scalar(2);
  }
  return out;
}

template <typename Scalar>
LossTerms<Scalar> wasserstein2_terms(const FeatureStatsT<Scalar>& target,
                                     const AlignmentReference<Scalar>& ref) {
  check_lengths(target, ref, "wasserstein2_loss");
  const Index k = ref.variances.size();
  LossTerms<Scalar> out{Scalar(0), VectorX<Scalar>::Zero(k), VectorX<Scalar>::Zero(k)};
  for (Index d = 0; d < k; ++d) {
    const Scalar alpha = ref.weights(d);
    const Scalar mu = target.mean(d);
    const Scalar sd_t = std::sqrt(std::max(target.var(d), Scalar(0)));
    const Scalar sd_s = std::sqrt(ref.variances(d));
    out.value += alpha * (mu * mu + (sd_t - sd_s) * (sd_t - sd_s));
    out.d_mean(d) = Scalar(2) * alpha * mu;
    out.d_var(d) = sd_t > 0 ? alpha * (sd_t - sd_s) / sd_t : Scalar(0);
  }
  return out;
}

template <typename Scalar>
Scalar sign(Scalar x) {
  return Scalar((x > 0) - (x < 0));
}

template <typename Scalar>
LossTerms<Scalar> l1_terms(const FeatureStatsT<Scalar>& target,
                           const AlignmentReference<Scalar>& ref) {
  check_lengths(target, ref, "l1_loss");
  const Index k = ref.variances.size();
  LossTerms<Scalar> out{Scalar(0), VectorX<Scalar>::Zero(k), VectorX<Scalar>::Zero(k)};
  for (Index d = 0; d < k; ++d) {
    const Scalar alpha = ref.weights(d);
    const Scalar mu = target.mean(d);
    const Scalar sd_t = std::sqrt(std::max(target.var(d), Scalar(0)));
    const Scalar sd_s = std::sqrt(ref.variances(d));
    out.value += alpha * (std::abs(mu) + std::abs(sd_t - sd_s));
    out.d_mean(d) = alpha * sign(mu);
    out.d_var(d) = sd_t > 0 ? alpha * sign(sd_t - sd_s) / (Scalar(2) * sd_t) : Scalar(0);
  }
  return out;
}

template <typename Scalar>
AlignmentReference<Scalar> reference_of(const SubspaceStatsT<Scalar>& sub) {
  return {sub.eigenvalues, sub.weights};
}

}  // namespace detail

template <typename Scalar>
LossTerms<Scalar> alignment_terms(AlignmentMetric metric, const FeatureStatsT<Scalar>& target,
                                  const AlignmentReference<Scalar>& ref) {
  switch (metric) {
    case AlignmentMetric::KL:
      return detail::kl_terms(target, ref);
    case AlignmentMetric::Wasserstein2:
      return detail::wasserstein2_terms(target, ref);
    case AlignmentMetric::L1:
      return detail::l1_terms(target, ref);
  }
  throw UsageError("alignment_terms: unknown metric");
}

/// Weighted symmetric KL between the projected target batch statistics and
/// the source N(0, lambda) in the subspace:
///   1/2 sum_d alpha_d ((mu_d^2 + lambda_d)/s_d + (mu_d^2 + s_d)/lambda_d - 2).
template <typename Scalar>
Scalar ssa_loss(const FeatureStatsT<Scalar>& projected, const SubspaceStatsT<Scalar>& sub) {
  return detail::kl_terms(projected, detail::reference_of(sub)).value;
}

template <typename Scalar>
Scalar wasserstein2_loss(const FeatureStatsT<Scalar>& projected,
                         const SubspaceStatsT<Scalar>& sub) {
  return detail::wasserstein2_terms(projected, detail::reference_of(sub)).value;
}

template <typename Scalar>
Scalar l1_loss(const FeatureStatsT<Scalar>& projected, const SubspaceStatsT<Scalar>& sub) {
  return detail::l1_terms(projected, detail::reference_of(sub)).value;
}

/// Symmetric KL over every raw dimension between source and target diagonal
/// Gaussians. A zero-variance source dimension raises DegenerateDimensionError.
template <typename Scalar>
Scalar naive_alignment_loss(const FeatureStatsT<Scalar>& target,
                            const FeatureStatsT<Scalar>& source) {
  if (target.dim() != source.dim())
    throw DimensionError("naive_alignment_loss: dimension mismatch");
  Scalar total = 0;
  for (Index d = 0; d < source.dim(); ++d) {
    const Scalar vs = source.var(d);
    if (!(vs > Scalar(kValidVarianceTol)))
      throw DegenerateDimensionError(static_cast<std::size_t>(d),
                                     "naive_alignment_loss: source dimension " +
                                         std::to_string(d) + " has zero variance");
    const Scalar vt = std::max(target.var(d), Scalar(kVarianceFloor) * vs);
    total += gaussian_kl(source.mean(d), vs, target.mean(d), vt) +
             gaussian_kl(target.mean(d), vt, source.mean(d), vs);
  }
  return total;
}

/// ||mu + sum_{d<n} ((z - mu) . v_d) v_d - z||_2.
template <typename Derived, typename Scalar>
Scalar reconstruction_error(const Eigen::MatrixBase<Derived>& z,
                            const SubspaceStatsT<Scalar>& sub, std::size_t n) {
  if (z.size() != sub.dim()) throw DimensionError("reconstruction_error: feature width mismatch");
  if (n > static_cast<std::size_t>(sub.k()))
    throw DimensionError("reconstruction_error: n = " + std::to_string(n) + " exceeds K = " +
                         std::to_string(sub.k()));
  const VectorX<Scalar> centered = z - sub.mean;
  const auto nn = static_cast<Index>(n);
  const auto top = sub.basis.topRows(nn);
  const VectorX<Scalar> residual = top.transpose() * (top * centered) - centered;
  return residual.norm();
}

/// Reconstruction error for n = 0..K.
template <typename Derived, typename Scalar>
std::vector<Scalar> reconstruction_curve(const Eigen::MatrixBase<Derived>& z,
                                         const SubspaceStatsT<Scalar>& sub) {
  std::vector<Scalar> curve;
  curve.reserve(static_cast<std::size_t>(sub.k()) + 1);
  for (Index n = 0; n <= sub.k(); ++n)
    curve.push_back(reconstruction_error(z, sub, static_cast<std::size_t>(n)));
  return curve;
}

/// Column norms of the basis: how strongly raw dimension d moves the projection.
template <typename Scalar>
VectorX<Scalar> sensitivity(const SubspaceStatsT<Scalar>& sub) {
  return sub.basis.colwise().norm().transpose();
}

template <typename Scalar>
struct MomentStats {
  Scalar skewness;
  Scalar excess_kurtosis;
};

/// Sample skewness m3 / m2^{3/2} and excess kurtosis m4 / m2^2 - 3 per column
/// (population central moments).
template <typename Derived>
std::vector<MomentStats<typename Derived::Scalar>> normality_diagnostic(
    const Eigen::MatrixBase<Derived>& projected) {
  using Scalar = typename Derived::Scalar;
  if (projected.rows() < 8)
    throw BatchTooSmallError("normality_diagnostic: need at least 8 rows");
  const Scalar n = static_cast<Scalar>(projected.rows());
  std::vector<MomentStats<Scalar>> out;
  out.reserve(static_cast<std::size_t>(projected.cols()));
  for (Index c = 0; c < projected.cols(); ++c) {
    const auto col = projected.col(c).array();
    const auto centered = (col - col.sum() / n).eval();
    const Scalar m2 = centered.square().sum() / n;
    if (!(m2 > 0))
      throw UndefinedStatisticError("normality_diagnostic: column " + std::to_string(c) +
                                    " has zero variance");
    const Scalar m3 = centered.cube().sum() / n;
    const Scalar m4 = centered.square().square().sum() / n;
    out.push_back({m3 / std::pow(m2, Scalar(1.5)), m4 / (m2 * m2) - Scalar(3)});
  }
  return out;
}

/// Loss value and its gradient with respect to the raw feature batch, for a
/// batch projected through `basis` around `mean`.
template <typename Scalar>
struct FeatureLoss {
  Scalar value = 0;
  MatrixX<Scalar> grad;  // B x D
};

/// Projects the batch, takes per-dimension batch mean and population variance,
/// evaluates the metric against `ref` and backpropagates to the features.
template <typename Derived, typename Scalar>
FeatureLoss<Scalar> projected_alignment_loss(const Eigen::MatrixBase<Derived>& z,
                                             const VectorX<Scalar>& mean,
                                             const MatrixX<Scalar>& basis,
                                             const AlignmentReference<Scalar>& ref,
                                             AlignmentMetric metric) {
  if (z.cols() != basis.cols() || mean.size() != basis.cols())
    throw DimensionError("projected_alignment_loss: feature width mismatch");
  const MatrixX<Scalar> proj = (z.rowwise() - mean.transpose()) * basis.transpose();
  const auto stats = feature_stats(proj);
  const auto terms = alignment_terms(metric, stats, ref);
  const Scalar b = static_cast<Scalar>(z.rows());

  // d var_d / d p_id = 2 (p_id - mean_d) / B ;  d mean_d / d p_id = 1 / B.
  MatrixX<Scalar> d_proj = ((proj.rowwise() - stats.mean.transpose()).array().rowwise() *
                            (Scalar(2) * terms.d_var.transpose().array()))
                               .matrix();
  d_proj.rowwise() += terms.d_mean.transpose();
  d_proj /= b;
  return {terms.value, d_proj * basis};
}

template <typename Derived, typename Scalar>
FeatureLoss<Scalar> subspace_alignment_loss(const Eigen::MatrixBase<Derived>& z,
                                            const SubspaceStatsT<Scalar>& sub,
                                            AlignmentMetric metric = AlignmentMetric::KL,
                                            bool use_weights = true) {
  AlignmentReference<Scalar> ref = detail::reference_of(sub);
  if (!use_weights) ref.weights.setOnes();
  return projected_alignment_loss(z, sub.mean, sub.basis, ref, metric);
}

/// Full-space naive alignment as a differentiable loss: identity basis around
/// the source mean, unit weights, source variances as reference.
template <typename Derived, typename Scalar>
FeatureLoss<Scalar> full_space_alignment_loss(const Eigen::MatrixBase<Derived>& z,
                                              const FeatureStatsT<Scalar>& source,
                                              AlignmentMetric metric = AlignmentMetric::KL) {
  if (metric == AlignmentMetric::KL) {
    for (Index d = 0; d < source.dim(); ++d)
      if (!(source.var(d) > Scalar(kValidVarianceTol)))
        throw DegenerateDimensionError(static_cast<std::size_t>(d),
                                       "naive alignment: source dimension " + std::to_string(d) +
                                           " has zero variance");
  }
  const Index d = source.dim();
  AlignmentReference<Scalar> ref{source.var, VectorX<Scalar>::Ones(d)};
  return projected_alignment_loss(z, source.mean, MatrixX<Scalar>::Identity(d, d).eval(), ref,
                                  metric);
}

}  // namespace ssa
