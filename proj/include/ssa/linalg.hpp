#pragma once

// Dense real linear algebra used across the library: matrix/vector aliases,
// a cyclic Jacobi symmetric eigensolver, numeric rank and Pearson correlation.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "ssa/errors.hpp"

namespace ssa {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;
using Index = Eigen::Index;

template <typename Scalar>
struct EigenDecomposition {
  VectorX<Scalar> eigenvalues;   // descending
  MatrixX<Scalar> eigenvectors;  // row k pairs with eigenvalues(k)
};

struct JacobiOptions {
  double tolerance = 1e-12;  // off-diagonal Frobenius norm relative to ||A||_F
  int max_sweeps = 100;
};

namespace detail {

template <typename Scalar>
Scalar off_diagonal_norm(const MatrixX<Scalar>& a) {
  Scalar sum = 0;
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j)
      if (i != j) sum += a(i, j) * a(i, j);
  return std::sqrt(sum);
}

// Flip the sign so that the entry of largest magnitude is positive; the first
// index wins ties.
template <typename Derived>
void canonicalize_sign(Eigen::MatrixBase<Derived>&& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i)
    if (std::abs(v(i)) > std::abs(v(best))) best = i;
  if (v.size() > 0 && v(best) < 0) v = -v;
}

}  // namespace detail

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// The input is symmetrized as (A + A^T) / 2 before iterating. Eigenvalues
/// come back in descending order (stable for ties), eigenvectors as unit rows
/// with a deterministic sign: the largest-magnitude entry of each row is
/// positive. Throws DimensionError for non-square input and NumericalError when
/// the off-diagonal mass fails to drop below tolerance * ||A||_F within
/// max_sweeps sweeps.
template <typename Derived>
EigenDecomposition<typename Derived::Scalar> sym_eig(const Eigen::MatrixBase<Derived>& sigma,
                                                    const JacobiOptions& opts = {}) {
  using Scalar = typename Derived::Scalar;
  if (sigma.rows() != sigma.cols())
    throw DimensionError("sym_eig: matrix is " + std::to_string(sigma.rows()) + "x" +
                         std::to_string(sigma.cols()) + ", expected square");
  const Index n = sigma.rows();

  MatrixX<Scalar> a = (sigma + sigma.transpose()) / Scalar(2);
  MatrixX<Scalar> v = MatrixX<Scalar>::Identity(n, n);  // columns accumulate eigenvectors
  const Scalar threshold = Scalar(opts.tolerance) * a.norm();

  bool converged = detail::off_diagonal_norm(a) <= threshold;
  for (int sweep = 0; sweep < opts.max_sweeps && !converged; ++sweep) {
    for (Index p = 0; p < n - 1; ++p) {
      for (Index q = p + 1; q < n; ++q) {
        const Scalar apq = a(p, q);
        if (apq == Scalar(0)) continue;
        const Scalar theta = (a(q, q) - a(p, p)) / (Scalar(2) * apq);
        const Scalar t = (theta >= 0 ? Scalar(1) : Scalar(-1)) /
                         (std::abs(theta) + std::sqrt(theta * theta + Scalar(1)));
        const Scalar c = Scalar(1) / std::sqrt(t * t + Scalar(1));
        const Scalar s = t * c;

        // A <- J^T A J with J the (p, q) Givens rotation.
        for (Index k = 0; k < n; ++k) {
          const Scalar akp = a(k, p);
          const Scalar akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Index k = 0; k < n; ++k) {
          const Scalar apk = a(p, k);
          const Scalar aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = Scalar(0);
        a(q, p) = Scalar(0);

        for (Index k = 0; k < n; ++k) {
          const Scalar vkp = v(k, p);
          const Scalar vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
    converged = detail::off_diagonal_norm(a) <= threshold;
  }
  if (!converged)
    throw NumericalError("sym_eig: Jacobi iteration did not converge in " +
                         std::to_string(opts.max_sweeps) + " sweeps");

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index i, Index j) { return a(i, i) > a(j, j); });

  EigenDecomposition<Scalar> out;
  out.eigenvalues.resize(n);
  out.eigenvectors.resize(n, n);
  for (Index k = 0; k < n; ++k) {
    const Index src = order[static_cast<std::size_t>(k)];
    out.eigenvalues(k) = a(src, src);
    out.eigenvectors.row(k) = v.col(src).transpose().normalized();
    detail::canonicalize_sign(out.eigenvectors.row(k));
  }
  return out;
}

/// Number of eigenvalues above rel_tol * max eigenvalue. Tiny negatives down
/// to -rel_tol * lambda_1 count as zero; anything more negative is an error.
template <typename Derived>
std::size_t numeric_rank(const Eigen::MatrixBase<Derived>& eigenvalues, double rel_tol = 1e-6) {
  using Scalar = typename Derived::Scalar;
  if (eigenvalues.size() == 0) return 0;
  const Scalar top = std::max(eigenvalues.maxCoeff(), Scalar(0));
  const Scalar cutoff = Scalar(rel_tol) * top;
  std::size_t rank = 0;
  for (Index i = 0; i < eigenvalues.size(); ++i) {
    const Scalar value = eigenvalues(i);
    if (value < -cutoff)
      throw NumericalError("numeric_rank: eigenvalue " + std::to_string(double(value)) +
                           " is negative beyond round-off");
    if (value > cutoff) ++rank;
  }
  return rank;
}

/// Pearson correlation coefficient of two equal-length samples.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar pearson_correlation(const Eigen::MatrixBase<DerivedA>& a,
                                              const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  if (a.size() != b.size())
    throw DimensionError("pearson_correlation: lengths differ");
  if (a.size() < 2) throw DimensionError("pearson_correlation: need at least two samples");
  const auto n = static_cast<Scalar>(a.size());
  const auto da = (a.array() - a.sum() / n).eval();
  const auto db = (b.array() - b.sum() / n).eval();
  const Scalar saa = (da * da).sum();
  const Scalar sbb = (db * db).sum();
  if (saa == Scalar(0) || sbb == Scalar(0))
    throw UndefinedStatisticError("pearson_correlation: zero variance input");
  const Scalar r = (da * db).sum() / std::sqrt(saa * sbb);
  return std::clamp(r, Scalar(-1), Scalar(1));
}

}  // namespace ssa
