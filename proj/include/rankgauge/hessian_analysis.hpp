#pragma once

#include "rankgauge/core.hpp"
#include "rankgauge/grid.hpp"
#include "rankgauge/linalg.hpp"
#include "rankgauge/symfun.hpp"

#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

namespace rankgauge
{

// --- Finite-difference stencils -------------------------------------------

/// Second derivative u_ab at a node at least one node from the boundary:
/// 3-point central difference on the diagonal, 4-point cross stencil otherwise.
inline double second_difference(SolutionField const &u, std::int64_t node, int a, int b)
{
  Grid const &g = u.grid();
  if (a == b)
  {
    double const h = g.spacing(a);
    std::int64_t const s = g.stride(a);
    return (u[node + s] - 2.0 * u[node] + u[node - s]) / (h * h);
  }
  std::int64_t const sa = g.stride(a), sb = g.stride(b);
  return (u[node + sa + sb] - u[node + sa - sb] - u[node - sa + sb] + u[node - sa - sb]) /
         (4.0 * g.spacing(a) * g.spacing(b));
}

inline double first_difference(SolutionField const &u, std::int64_t node, int a)
{
  std::int64_t const s = u.grid().stride(a);
  return (u[node + s] - u[node - s]) / (2.0 * u.grid().spacing(a));
}

/// Leading `dims` x `dims` block of the discrete Hessian at `node`.
inline SymMatrix hessian_block(SolutionField const &u, std::int64_t node, int dims)
{
  if (!u.grid().is_interior(node, 1))
    throw PreconditionError("hessian_block: node is on the boundary");
  Matrix w(dims, dims);
  for (int a = 0; a < dims; ++a)
    for (int b = a; b < dims; ++b)
      w(a, b) = w(b, a) = second_difference(u, node, a, b);
  return SymMatrix(w);
}

/// Full N x N discrete Hessian.
inline SymMatrix full_hessian(SolutionField const &u, std::int64_t node)
{
  return hessian_block(u, node, u.dim());
}

inline Vector discrete_gradient(SolutionField const &u, std::int64_t node)
{
  if (!u.grid().is_interior(node, 1))
    throw PreconditionError("discrete_gradient: node is on the boundary");
  Vector p(u.dim());
  for (int a = 0; a < u.dim(); ++a)
    p(a) = first_difference(u, node, a);
  return p;
}

// --- Partial Hessian field ------------------------------------------------

/// W = (u_ij)_{i,j < N'} on every node at least one node from the boundary.
class PartialHessianField
{
public:
  PartialHessianField() = default;
  PartialHessianField(Grid grid, int nprime, std::vector<std::int64_t> nodes,
                      std::vector<SymMatrix> matrices)
      : grid_(std::move(grid)), nprime_(nprime), nodes_(std::move(nodes)),
        matrices_(std::move(matrices))
  {
    if (nodes_.size() != matrices_.size())
      throw PreconditionError("PartialHessianField: node/matrix count mismatch");
    slot_.assign(static_cast<std::size_t>(grid_.size()), -1);
    for (std::size_t k = 0; k < nodes_.size(); ++k)
      slot_[static_cast<std::size_t>(nodes_[k])] = static_cast<std::int64_t>(k);
  }

  Grid const &grid() const { return grid_; }
  int nprime() const { return nprime_; }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }

  /// Interior nodes, increasing.
  std::vector<std::int64_t> const &nodes() const { return nodes_; }
  std::vector<SymMatrix> const &matrices() const { return matrices_; }

  bool contains(std::int64_t node) const
  {
    return node >= 0 && node < grid_.size() && slot_[static_cast<std::size_t>(node)] >= 0;
  }

  SymMatrix const &at(std::int64_t node) const
  {
    if (!contains(node))
      throw PreconditionError("PartialHessianField: node outside the interior");
    return matrices_[static_cast<std::size_t>(slot_[static_cast<std::size_t>(node)])];
  }

private:
  Grid grid_;
  int nprime_ = 0;
  std::vector<std::int64_t> nodes_;
  std::vector<SymMatrix> matrices_;
  std::vector<std::int64_t> slot_;
};

inline PartialHessianField partial_hessian(SolutionField const &u)
{
  for (auto const &ax : u.grid().axes())
    if (ax.nodes < SolutionField::min_nodes_per_axis)
      throw PreconditionError("partial_hessian: grid too small");
  auto nodes = u.grid().interior_nodes(1);
  std::vector<SymMatrix> mats(nodes.size());
  parallel_for(nodes.size(), [&](std::size_t k) { mats[k] = hessian_block(u, nodes[k], u.nprime()); });
  return PartialHessianField(u.grid(), u.nprime(), std::move(nodes), std::move(mats));
}

// --- Spectral analysis ----------------------------------------------------

struct Diagonalization
{
  Spectrum lambda; ///< ascending
  Matrix q;        ///< orthogonal, W = q diag(lambda) q^T
};

inline Diagonalization diagonalize(SymMatrix const &w)
{
  if (!w.all_finite())
    throw NumericalError("diagonalize: non-finite matrix entry");
  auto eig = jacobi_eigen(w.matrix());
  return Diagonalization{Spectrum(eig.values), std::move(eig.vectors)};
}

/// Good/bad split of the ascending spectrum. Indices refer to positions in
/// the ascending eigenvalue list.
struct RankPartition
{
  int l = 0;
  std::vector<int> good;
  std::vector<int> bad;
  double threshold = 0.0;
  Spectrum lambda;

  /// Distance between the largest bad and smallest good eigenvalue
  /// (infinity when one set is empty).
  double gap() const
  {
    if (good.empty() || bad.empty())
      return std::numeric_limits<double>::infinity();
    return lambda[good.front()] - lambda[bad.back()];
  }
};

inline RankPartition rank_partition(Spectrum const &lambda, double threshold)
{
  if (!(threshold > 0.0))
    throw PreconditionError("rank_partition: threshold must be positive");
  RankPartition out;
  out.threshold = threshold;
  out.lambda = lambda;
  for (int i = 0; i < lambda.size(); ++i)
    (lambda[i] >= threshold ? out.good : out.bad).push_back(i);
  out.l = static_cast<int>(out.good.size());
  return out;
}

inline RankPartition rank_partition(SymMatrix const &w, double threshold)
{
  return rank_partition(spectrum_of(w), threshold);
}

/// Stencil-error floor 10 h^2 (1 + |u|_inf), used both as rank threshold and
/// PSD tolerance.
inline double default_threshold(SolutionField const &u)
{
  double const h = u.grid().max_spacing();
  return 10.0 * h * h * (1.0 + u.max_abs());
}

struct MinimalRank
{
  int l = 0;
  std::int64_t node = -1;
  std::vector<int> ranks; ///< per node of the Hessian field, same order
};

/// Smallest rank over the field; ties go to the lowest node index.
inline MinimalRank minimal_rank(PartialHessianField const &w, double threshold)
{
  if (w.empty())
    throw PreconditionError("minimal_rank: empty field");
  MinimalRank out;
  out.ranks.resize(w.size());
  parallel_for(w.size(), [&](std::size_t k) {
    out.ranks[k] = rank_partition(w.matrices()[k], threshold).l;
  });
  out.l = std::numeric_limits<int>::max();
  for (std::size_t k = 0; k < w.size(); ++k)
    if (out.ranks[k] < out.l)
    {
      out.l = out.ranks[k];
      out.node = w.nodes()[k];
    }
  return out;
}

struct ConvexityReport
{
  Verdict verdict = Verdict::pass;
  std::int64_t worst_node = -1;
  double min_eigenvalue = 0.0;
  double tolerance = 0.0;
};

inline ConvexityReport check_partial_convexity(PartialHessianField const &w, double tol_psd)
{
  ConvexityReport out;
  out.tolerance = tol_psd;
  if (w.empty())
    return out;
  std::vector<double> mins(w.size());
  parallel_for(w.size(), [&](std::size_t k) { mins[k] = min_eigenvalue(w.matrices()[k].matrix()); });
  out.min_eigenvalue = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < w.size(); ++k)
    if (mins[k] < out.min_eigenvalue)
    {
      out.min_eigenvalue = mins[k];
      out.worst_node = w.nodes()[k];
    }
  out.verdict = out.min_eigenvalue >= -tol_psd ? Verdict::pass : Verdict::fail;
  return out;
}

// --- Block split ----------------------------------------------------------

struct BlockSplit
{
  SymMatrix a; ///< N' x N'
  Matrix b;    ///< N' x N''
  SymMatrix c; ///< N'' x N''

  SymMatrix assemble() const
  {
    Eigen::Index const n1 = a.size(), n2 = c.size();
    Matrix m(n1 + n2, n1 + n2);
    m.topLeftCorner(n1, n1) = a.matrix();
    m.topRightCorner(n1, n2) = b;
    m.bottomLeftCorner(n2, n1) = b.transpose();
    m.bottomRightCorner(n2, n2) = c.matrix();
    return SymMatrix(m);
  }
};

inline BlockSplit split_blocks(SymMatrix const &m, int nprime)
{
  Eigen::Index const n = m.size();
  if (nprime < 1 || nprime > n)
    throw PreconditionError("split_blocks: need 1 <= nprime <= N");
  Eigen::Index const n2 = n - nprime;
  return BlockSplit{SymMatrix(m.matrix().topLeftCorner(nprime, nprime)),
                    m.matrix().topRightCorner(nprime, n2),
                    SymMatrix(m.matrix().bottomRightCorner(n2, n2))};
}

} // namespace rankgauge
