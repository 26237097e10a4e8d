#pragma once

#include "rankgauge/core.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace rankgauge
{

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Dense symmetric matrix. Symmetry is exact: the constructor stores
/// (M + M^T) / 2, so entry (i,j) and (j,i) are the same double.
class SymMatrix
{
public:
  SymMatrix() = default;

  explicit SymMatrix(Matrix const &m)
  {
    if (m.rows() != m.cols())
      throw PreconditionError("SymMatrix: matrix is not square");
    m_ = 0.5 * (m + m.transpose());
  }

  static SymMatrix zero(Eigen::Index n) { return SymMatrix(Matrix::Zero(n, n)); }
  static SymMatrix identity(Eigen::Index n) { return SymMatrix(Matrix::Identity(n, n)); }
  static SymMatrix diagonal(Vector const &d) { return SymMatrix(Matrix(d.asDiagonal())); }
  static SymMatrix diagonal(std::initializer_list<double> d)
  {
    Vector v(static_cast<Eigen::Index>(d.size()));
    Eigen::Index i = 0;
    for (double x : d)
      v(i++) = x;
    return diagonal(v);
  }

  Eigen::Index size() const { return m_.rows(); }
  double operator()(Eigen::Index i, Eigen::Index j) const { return m_(i, j); }
  Matrix const &matrix() const { return m_; }

  bool is_diagonal(double tol = 0.0) const
  {
    for (Eigen::Index i = 0; i < size(); ++i)
      for (Eigen::Index j = 0; j < size(); ++j)
        if (i != j && std::abs(m_(i, j)) > tol)
          return false;
    return true;
  }

  bool all_finite() const { return m_.allFinite(); }

  /// Frobenius norm.
  double norm() const { return m_.norm(); }

private:
  Matrix m_;
};

/// Eigenvalues in ascending order and the matching orthonormal eigenvectors as
/// columns, so that M = vectors * diag(values) * vectors^T.
struct EigenDecomposition
{
  Vector values;
  Matrix vectors;
};

/// Cyclic Jacobi rotations, iterated until the off-diagonal mass is at machine
/// precision relative to the matrix norm.
inline EigenDecomposition jacobi_eigen(Matrix const &input)
{
  Eigen::Index const n = input.rows();
  if (n != input.cols())
    throw PreconditionError("jacobi_eigen: matrix is not square");
  if (!input.allFinite())
    throw NumericalError("jacobi_eigen: non-finite matrix entry");

  Matrix a = 0.5 * (input + input.transpose());
  Matrix v = Matrix::Identity(n, n);
  double const scale = a.norm();
  double const eps = std::numeric_limits<double>::epsilon();

  auto off_norm = [&] {
    double s = 0.0;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q)
        s += a(p, q) * a(p, q);
    return std::sqrt(2.0 * s);
  };

  for (int sweep = 0; sweep < 100; ++sweep)
  {
    if (scale == 0.0 || off_norm() <= eps * scale)
      break;
    for (Eigen::Index p = 0; p < n; ++p)
    {
      for (Eigen::Index q = p + 1; q < n; ++q)
      {
        double const apq = a(p, q);
        if (std::abs(apq) <= 0.1 * eps * scale / static_cast<double>(n))
        {
          a(p, q) = a(q, p) = 0.0;
          continue;
        }
        double const theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        double const t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        double const c = 1.0 / std::sqrt(t * t + 1.0);
        double const s = t * c;
        for (Eigen::Index k = 0; k < n; ++k)
        {
          double const akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k)
        {
          double const apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        for (Eigen::Index k = 0; k < n; ++k)
        {
          double const vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index i, Eigen::Index j) { return a(i, i) < a(j, j); });

  EigenDecomposition out;
  out.values.resize(n);
  out.vectors.resize(n, n);
  for (Eigen::Index k = 0; k < n; ++k)
  {
    out.values(k) = a(order[static_cast<std::size_t>(k)], order[static_cast<std::size_t>(k)]);
    out.vectors.col(k) = v.col(order[static_cast<std::size_t>(k)]);
  }
  return out;
}

inline double min_eigenvalue(Matrix const &m)
{
  if (m.rows() == 0)
    return 0.0;
  return jacobi_eigen(m).values(0);
}

// Scaled flattening of symmetric matrices: the upper triangle in row order,
// off-diagonal entries multiplied by sqrt(2). Under this map the Euclidean
// inner product equals the Frobenius pairing sum_ab X_ab Y_ab.

inline Eigen::Index sym_dim(Eigen::Index n) { return n * (n + 1) / 2; }

inline Eigen::Index sym_index(Eigen::Index i, Eigen::Index j, Eigen::Index n)
{
  if (i > j)
    std::swap(i, j);
  return i * n - i * (i - 1) / 2 + (j - i);
}

inline double sym_scale(Eigen::Index i, Eigen::Index j)
{
  return i == j ? 1.0 : std::sqrt(2.0);
}

/// (row, col) pair with row <= col for every flattened coordinate.
inline std::vector<std::pair<Eigen::Index, Eigen::Index>> sym_pairs(Eigen::Index n)
{
  std::vector<std::pair<Eigen::Index, Eigen::Index>> out;
  out.reserve(static_cast<std::size_t>(sym_dim(n)));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i; j < n; ++j)
      out.emplace_back(i, j);
  return out;
}

inline Vector flatten_scaled(Matrix const &m)
{
  Eigen::Index const n = m.rows();
  Vector out(sym_dim(n));
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i; j < n; ++j)
      out(k++) = sym_scale(i, j) * 0.5 * (m(i, j) + m(j, i));
  return out;
}

inline Matrix unflatten_scaled(Eigen::Ref<Vector const> const &v, Eigen::Index n)
{
  if (v.size() != sym_dim(n))
    throw PreconditionError("unflatten_scaled: dimension mismatch");
  Matrix m(n, n);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i; j < n; ++j)
    {
      double const x = v(k++) / sym_scale(i, j);
      m(i, j) = x;
      m(j, i) = x;
    }
  return m;
}

/// Orthonormal basis (columns) of the null space of `constraints` (rows are
/// constraint vectors), computed from a full orthogonal decomposition.
inline Matrix null_space_basis(Matrix const &constraints, double rel_tol = 1e-12)
{
  Eigen::Index const d = constraints.cols();
  if (constraints.rows() == 0)
    return Matrix::Identity(d, d);
  Eigen::JacobiSVD<Matrix> svd(constraints, Eigen::ComputeFullV);
  Vector const &s = svd.singularValues();
  double const smax = s.size() > 0 ? s(0) : 0.0;
  Eigen::Index rank = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > rel_tol * std::max(1.0, smax))
      ++rank;
  return svd.matrixV().rightCols(d - rank);
}

inline bool is_positive_definite(Matrix const &m, double margin = 0.0)
{
  if (m.rows() == 0)
    return true;
  return min_eigenvalue(m) > margin;
}

} // namespace rankgauge
