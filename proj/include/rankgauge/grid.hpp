#pragma once

#include "rankgauge/core.hpp"
#include "rankgauge/linalg.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace rankgauge
{

struct Axis
{
  double lo = 0.0;
  double spacing = 1.0;
  int nodes = 0;

  double hi() const { return lo + spacing * (nodes - 1); }

  /// `nodes` equally spaced nodes covering [lo, hi].
  static Axis span(double lo, double hi, int nodes)
  {
    if (nodes < 2)
      throw PreconditionError("Axis::span: need at least two nodes");
    return Axis{lo, (hi - lo) / (nodes - 1), nodes};
  }

  bool operator==(Axis const &) const = default;
};

/// Uniform tensor-product grid over a box. Nodes are numbered row-major: the
/// last axis varies fastest.
class Grid
{
public:
  Grid() = default;
  explicit Grid(std::vector<Axis> axes) : axes_(std::move(axes))
  {
    if (axes_.empty())
      throw PreconditionError("Grid: need at least one axis");
    strides_.assign(axes_.size(), 1);
    for (int a = dim() - 2; a >= 0; --a)
      strides_[static_cast<std::size_t>(a)] =
          strides_[static_cast<std::size_t>(a) + 1] * axes_[static_cast<std::size_t>(a) + 1].nodes;
    for (auto const &ax : axes_)
      if (ax.nodes < 1 || !(ax.spacing > 0.0))
        throw PreconditionError("Grid: axis needs positive spacing and node count");
  }

  int dim() const { return static_cast<int>(axes_.size()); }
  Axis const &axis(int a) const { return axes_[static_cast<std::size_t>(a)]; }
  std::vector<Axis> const &axes() const { return axes_; }
  double spacing(int a) const { return axis(a).spacing; }
  double max_spacing() const
  {
    double h = 0.0;
    for (auto const &ax : axes_)
      h = std::max(h, ax.spacing);
    return h;
  }

  std::int64_t stride(int a) const { return strides_[static_cast<std::size_t>(a)]; }

  std::int64_t size() const
  {
    std::int64_t n = 1;
    for (auto const &ax : axes_)
      n *= ax.nodes;
    return n;
  }

  std::vector<int> multi_index(std::int64_t node) const
  {
    std::vector<int> idx(axes_.size());
    for (int a = 0; a < dim(); ++a)
    {
      idx[static_cast<std::size_t>(a)] = static_cast<int>(node / stride(a));
      node %= stride(a);
    }
    return idx;
  }

  std::int64_t flat_index(std::vector<int> const &idx) const
  {
    std::int64_t node = 0;
    for (int a = 0; a < dim(); ++a)
      node += idx[static_cast<std::size_t>(a)] * stride(a);
    return node;
  }

  Vector coordinates(std::int64_t node) const
  {
    Vector x(dim());
    auto const idx = multi_index(node);
    for (int a = 0; a < dim(); ++a)
      x(a) = axis(a).lo + axis(a).spacing * idx[static_cast<std::size_t>(a)];
    return x;
  }

  /// True when the node is at least `margin` nodes away from every face.
  bool is_interior(std::int64_t node, int margin) const
  {
    auto const idx = multi_index(node);
    for (int a = 0; a < dim(); ++a)
    {
      int const i = idx[static_cast<std::size_t>(a)];
      if (i < margin || i > axis(a).nodes - 1 - margin)
        return false;
    }
    return true;
  }

  bool is_boundary(std::int64_t node) const { return !is_interior(node, 1); }

  /// Nodes at least `margin` away from the boundary, in increasing order.
  std::vector<std::int64_t> interior_nodes(int margin) const
  {
    std::vector<std::int64_t> out;
    for (std::int64_t n = 0; n < size(); ++n)
      if (is_interior(n, margin))
        out.push_back(n);
    return out;
  }

  /// Same grid with every axis refined by a factor two (2n - 1 nodes).
  Grid refined() const
  {
    std::vector<Axis> axes = axes_;
    for (auto &ax : axes)
    {
      ax.spacing *= 0.5;
      ax.nodes = 2 * ax.nodes - 1;
    }
    return Grid(std::move(axes));
  }

  bool operator==(Grid const &other) const { return axes_ == other.axes_; }

private:
  std::vector<Axis> axes_;
  std::vector<std::int64_t> strides_;
};

/// Box grid with the same node count on every axis.
inline Grid box_grid(std::vector<double> const &lo, std::vector<double> const &hi, int nodes)
{
  if (lo.size() != hi.size())
    throw PreconditionError("box_grid: lo/hi dimension mismatch");
  std::vector<Axis> axes;
  for (std::size_t a = 0; a < lo.size(); ++a)
    axes.push_back(Axis::span(lo[a], hi[a], nodes));
  return Grid(std::move(axes));
}

/// A discrete function u on a grid whose first `nprime` axes form the convex
/// block x' and the remaining axes x''.
class SolutionField
{
public:
  static constexpr int min_nodes_per_axis = 5;

  SolutionField() = default;
  SolutionField(Grid grid, int nprime, std::vector<double> values,
                std::optional<double> time = std::nullopt)
      : grid_(std::move(grid)), nprime_(nprime), values_(std::move(values)), time_(time)
  {
    if (nprime_ < 1 || nprime_ > grid_.dim())
      throw PreconditionError("SolutionField: need 1 <= nprime <= number of axes");
    for (auto const &ax : grid_.axes())
      if (ax.nodes < min_nodes_per_axis)
        throw PreconditionError("SolutionField: grid too small (need >= 5 nodes per axis)");
    if (static_cast<std::int64_t>(values_.size()) != grid_.size())
      throw PreconditionError("SolutionField: value count does not match grid");
  }

  /// Samples fn(x) at every node.
  static SolutionField sample(Grid grid, int nprime, std::function<double(Vector const &)> const &fn,
                              std::optional<double> time = std::nullopt)
  {
    std::vector<double> values(static_cast<std::size_t>(grid.size()));
    for (std::int64_t n = 0; n < grid.size(); ++n)
      values[static_cast<std::size_t>(n)] = fn(grid.coordinates(n));
    return SolutionField(std::move(grid), nprime, std::move(values), time);
  }

  Grid const &grid() const { return grid_; }
  int nprime() const { return nprime_; }
  int ndouble() const { return grid_.dim() - nprime_; }
  int dim() const { return grid_.dim(); }
  std::optional<double> time() const { return time_; }
  std::vector<double> const &values() const { return values_; }
  double operator[](std::int64_t node) const { return values_[static_cast<std::size_t>(node)]; }

  double max_abs() const
  {
    double m = 0.0;
    for (double v : values_)
      m = std::max(m, std::abs(v));
    return m;
  }

  /// Field plus eps |x'|^2 / 2.
  SolutionField plus_convex_shift(double eps) const
  {
    std::vector<double> v = values_;
    for (std::int64_t n = 0; n < grid_.size(); ++n)
    {
      Vector const x = grid_.coordinates(n);
      v[static_cast<std::size_t>(n)] += 0.5 * eps * x.head(nprime_).squaredNorm();
    }
    return SolutionField(grid_, nprime_, std::move(v), time_);
  }

  bool operator==(SolutionField const &other) const
  {
    return grid_ == other.grid_ && nprime_ == other.nprime_ && values_ == other.values_ &&
           time_ == other.time_;
  }

private:
  Grid grid_;
  int nprime_ = 1;
  std::vector<double> values_;
  std::optional<double> time_;
};

} // namespace rankgauge
