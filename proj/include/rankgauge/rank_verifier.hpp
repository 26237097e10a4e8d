#pragma once

// Checks on discrete solution fields: constant rank of the partial Hessian,
// the phi test function, the chain-rule identity for sum F^{ab} phi_ab, the
// differential inequalities for phi, rank monotonicity in time and the
// regularization remainder R_eps.

#include "rankgauge/core.hpp"
#include "rankgauge/grid.hpp"
#include "rankgauge/hessian_analysis.hpp"
#include "rankgauge/operator.hpp"
#include "rankgauge/pde_lab.hpp"
#include "rankgauge/structure_condition.hpp"
#include "rankgauge/symfun.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace rankgauge
{

/// The field violates a hypothesis of the check (e.g. partial convexity).
class HypothesisError : public PreconditionError
{
public:
  using PreconditionError::PreconditionError;
};

struct VerifyOptions
{
  std::optional<double> threshold;     ///< rank threshold and PSD tolerance; default 10 h^2 (1 + |u|_inf)
  std::optional<std::int64_t> center;  ///< neighborhood center; default the min-rank node
  std::optional<int> radius;           ///< box radius in nodes; default per check
  double hypothesis_eps = 1e-2;        ///< regularization of the states used for hypothesis checks
  int structure_samples = 8;
};

// --- Constant rank --------------------------------------------------------

struct RankReport
{
  Grid grid;
  int l_min = 0;
  std::int64_t min_node = -1;
  std::map<int, std::int64_t> histogram;
  bool constant_rank = true;
  std::vector<std::int64_t> offending; ///< nodes with rank != l_min
  double threshold = 0.0;
  ConvexityReport convexity;
  std::vector<std::int64_t> nodes;
  std::vector<int> ranks;

  Verdict verdict() const { return constant_rank ? Verdict::pass : Verdict::fail; }

  nlohmann::json to_json() const
  {
    nlohmann::json hist = nlohmann::json::object();
    for (auto const &[r, c] : histogram)
      hist[std::to_string(r)] = c;
    nlohmann::json off = nlohmann::json::array();
    for (std::size_t k = 0; k < offending.size() && k < 100; ++k)
      off.push_back(offending[k]);
    return {{"verdict", to_string(verdict())},
            {"l_min", l_min},
            {"min_node", min_node},
            {"constant_rank", constant_rank},
            {"histogram", hist},
            {"offending_count", offending.size()},
            {"offending", off},
            {"threshold", threshold},
            {"min_eigenvalue", convexity.min_eigenvalue}};
  }

  void write_csv(std::ostream &os) const
  {
    os << "node";
    for (int a = 0; a < grid.dim(); ++a)
      os << ",x" << a;
    os << ",rank\n";
    os.precision(17);
    for (std::size_t k = 0; k < nodes.size(); ++k)
    {
      os << nodes[k];
      Vector const x = grid.coordinates(nodes[k]);
      for (int a = 0; a < grid.dim(); ++a)
        os << ',' << x(a);
      os << ',' << ranks[k] << '\n';
    }
  }
};

inline RankReport verify_constant_rank(PartialHessianField const &w, double threshold,
                                       std::optional<double> tol_psd = std::nullopt)
{
  if (w.empty())
    throw PreconditionError("verify_constant_rank: empty field");
  RankReport out;
  out.grid = w.grid();
  out.threshold = threshold;
  out.convexity = check_partial_convexity(w, tol_psd.value_or(threshold));
  if (out.convexity.verdict != Verdict::pass)
    throw HypothesisError("verify_constant_rank: field is not partial convex (eigenvalue " +
                          std::to_string(out.convexity.min_eigenvalue) + " at node " +
                          std::to_string(out.convexity.worst_node) + ")");
  auto const mr = minimal_rank(w, threshold);
  out.l_min = mr.l;
  out.min_node = mr.node;
  out.nodes = w.nodes();
  out.ranks = mr.ranks;
  for (std::size_t k = 0; k < out.ranks.size(); ++k)
  {
    ++out.histogram[out.ranks[k]];
    if (out.ranks[k] != out.l_min)
      out.offending.push_back(out.nodes[k]);
  }
  out.constant_rank = out.histogram.size() == 1;
  return out;
}

inline RankReport verify_constant_rank(SolutionField const &u, std::optional<double> threshold = std::nullopt)
{
  double const thr = threshold.value_or(default_threshold(u));
  return verify_constant_rank(partial_hessian(u), thr);
}

// --- phi field ------------------------------------------------------------

struct PhiField
{
  Grid grid;
  int l = 0;
  double eps = 0.0;
  std::vector<std::int64_t> nodes; ///< 1-shrunk interior
  std::vector<double> phi;
  std::vector<std::int64_t> gradient_nodes; ///< 2-shrunk interior
  std::vector<Vector> gradient;
  double min_phi = 0.0;
  std::int64_t min_node = -1;
  std::optional<double> fitted_c; ///< min phi / eps, for eps > 0

  nlohmann::json to_json() const
  {
    nlohmann::json j{{"l", l}, {"eps", eps}, {"min_phi", min_phi}, {"min_node", min_node}};
    j["fitted_c"] = fitted_c ? nlohmann::json(*fitted_c) : nlohmann::json(nullptr);
    double gmax = 0.0;
    for (auto const &g : gradient)
      gmax = std::max(gmax, g.norm());
    j["max_grad_phi"] = gmax;
    return j;
  }
};

inline PhiField phi_field(PartialHessianField const &w, int l, double eps)
{
  if (!(eps >= 0.0))
    throw PreconditionError("phi_field: eps must be non-negative");
  PhiField out;
  out.grid = w.grid();
  out.l = l;
  out.eps = eps;
  out.nodes = w.nodes();
  out.phi.resize(w.size());
  parallel_for(w.size(), [&](std::size_t k) {
    SymMatrix const &m = w.matrices()[k];
    out.phi[k] = phi_value(eps > 0.0 ? epsilon_regularize(m, eps) : m, l);
  });
  Grid const &g = w.grid();
  std::vector<double> full(static_cast<std::size_t>(g.size()), 0.0);
  for (std::size_t k = 0; k < w.size(); ++k)
    full[static_cast<std::size_t>(out.nodes[k])] = out.phi[k];
  out.gradient_nodes = g.interior_nodes(2);
  out.gradient.resize(out.gradient_nodes.size());
  parallel_for(out.gradient_nodes.size(), [&](std::size_t k) {
    std::int64_t const n = out.gradient_nodes[k];
    Vector d(g.dim());
    for (int a = 0; a < g.dim(); ++a)
      d(a) = (full[static_cast<std::size_t>(n + g.stride(a))] - full[static_cast<std::size_t>(n - g.stride(a))]) /
             (2.0 * g.spacing(a));
    out.gradient[k] = d;
  });
  out.min_phi = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < out.phi.size(); ++k)
    if (out.phi[k] < out.min_phi)
    {
      out.min_phi = out.phi[k];
      out.min_node = out.nodes[k];
    }
  if (eps > 0.0)
    out.fitted_c = out.min_phi / eps;
  return out;
}

inline PhiField phi_field(SolutionField const &u, int l, double eps)
{
  return phi_field(partial_hessian(u), l, eps);
}

// --- Stability of fitted constants -----------------------------------------

struct FitStudy
{
  std::string quantity;
  std::vector<std::string> labels;
  std::vector<double> values;
  double factor = 2.0;
  double floor = 0.0;
  bool stable = true;

  Verdict verdict() const { return stable ? Verdict::pass : Verdict::fail; }

  nlohmann::json to_json() const
  {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t k = 0; k < values.size(); ++k)
      rows.push_back({{"label", labels[k]}, {"value", values[k]}});
    return {{"quantity", quantity}, {"factor", factor}, {"floor", floor},
            {"stable", stable},     {"verdict", to_string(verdict())}, {"values", rows}};
  }
};

/// Non-finite values are never stable.
inline FitStudy fit_study(std::string quantity, std::vector<std::string> labels, std::vector<double> values,
                          double factor, double floor = 0.0)
{
  if (labels.size() != values.size())
    throw PreconditionError("fit_study: label/value count mismatch");
  FitStudy s{std::move(quantity), std::move(labels), std::move(values), factor, floor, true};
  for (double v : s.values)
    if (!std::isfinite(v))
      s.stable = false;
  if (s.stable)
    s.stable = stable_within(s.values, factor, floor);
  return s;
}

// --- Per-node stencil calculus --------------------------------------------

namespace detail
{

/// Offsets in {-1,0,1}^N around a node, coded in base 3 with digit a for
/// axis a. Only the codes a centered second difference needs are filled.
class NodeBox
{
public:
  NodeBox(Grid const &g, std::int64_t node) : g_(g), node_(node)
  {
    int const n = g.dim();
    pow3_.resize(static_cast<std::size_t>(n));
    int p = 1;
    for (int a = 0; a < n; ++a)
    {
      pow3_[static_cast<std::size_t>(a)] = p;
      p *= 3;
    }
    center_ = (p - 1) / 2;
    codes_.push_back(center_);
    for (int a = 0; a < n; ++a)
    {
      codes_.push_back(center_ + pw(a));
      codes_.push_back(center_ - pw(a));
      for (int b = a + 1; b < n; ++b)
        for (int sa : {-1, 1})
          for (int sb : {-1, 1})
            codes_.push_back(center_ + sa * pw(a) + sb * pw(b));
    }
    size_ = p;
  }

  int size() const { return size_; }
  std::vector<int> const &codes() const { return codes_; }

  std::int64_t node_of(int code) const
  {
    std::int64_t n = node_;
    for (int a = 0; a < g_.dim(); ++a)
    {
      int const digit = code % 3;
      code /= 3;
      n += (digit - 1) * g_.stride(a);
    }
    return n;
  }

  template <typename V>
  double d1(V const &v, int a) const
  {
    return (v(center_ + pw(a)) - v(center_ - pw(a))) / (2.0 * g_.spacing(a));
  }

  template <typename V>
  double d2(V const &v, int a, int b) const
  {
    if (a == b)
    {
      double const h = g_.spacing(a);
      return (v(center_ + pw(a)) - 2.0 * v(center_) + v(center_ - pw(a))) / (h * h);
    }
    return (v(center_ + pw(a) + pw(b)) - v(center_ + pw(a) - pw(b)) - v(center_ - pw(a) + pw(b)) +
            v(center_ - pw(a) - pw(b))) /
           (4.0 * g_.spacing(a) * g_.spacing(b));
  }

  int center() const { return center_; }

private:
  int pw(int a) const { return pow3_[static_cast<std::size_t>(a)]; }

  Grid const &g_;
  std::int64_t node_;
  std::vector<int> pow3_;
  std::vector<int> codes_;
  int center_ = 0;
  int size_ = 0;
};

/// (D^2 u_eps, D u_eps, u_eps) with u_eps = u + eps |x'|^2 / 2 added analytically.
inline State regularized_state(State s, int nprime, double eps)
{
  if (eps == 0.0)
    return s;
  Matrix a = s.a.matrix();
  for (int i = 0; i < nprime; ++i)
  {
    a(i, i) += eps;
    s.p(i) += eps * s.x(i);
  }
  s.a = SymMatrix(a);
  s.u += 0.5 * eps * s.x.head(nprime).squaredNorm();
  return s;
}

enum class PhiKind
{
  full,   ///< sigma_{l+1}(W_eps) + q(W_eps)
  sigma   ///< sigma_{l+1}(W) only
};

struct NodeCalculus
{
  std::int64_t node = -1;
  double phi = 0.0;
  Vector grad_phi;
  double lhs = 0.0; ///< sum F^{ab} phi_ab
  std::array<double, 4> groups{};
  double grad_bad = 0.0; ///< sum_{i,j in B} |grad u_ij| in the frozen frame
  double gap = std::numeric_limits<double>::infinity();
  double w_norm = 0.0;
  Spectrum lambda; ///< of W_eps at the node, ascending

  double rhs() const { return groups[0] + groups[1] + groups[2] + groups[3]; }
};

inline double sigma2_of(std::vector<double> const &v)
{
  double s1 = 0.0, s2 = 0.0;
  for (double x : v)
  {
    s2 += s1 * x;
    s1 += x;
  }
  return s2;
}

/// Everything the identity and inequality checks need at one node of the
/// 2-shrunk interior. `coef` is (F^{ab}); identity coefficients give the
/// Laplacian.
inline NodeCalculus node_calculus(SolutionField const &u, std::int64_t node, double eps, int l, Matrix const &coef,
                                  PhiKind kind, bool groups)
{
  Grid const &g = u.grid();
  if (!g.is_interior(node, 2))
    throw PreconditionError("node_calculus: node " + std::to_string(node) + " is within two nodes of the boundary");
  int const n = g.dim();
  int const np = u.nprime();
  Matrix const eye = Matrix::Identity(np, np);
  NodeBox box(g, node);

  std::vector<Matrix> w(static_cast<std::size_t>(box.size()));
  std::vector<double> phi(static_cast<std::size_t>(box.size()), 0.0);
  for (int c : box.codes())
  {
    Matrix const m = hessian_block(u, box.node_of(c), np).matrix();
    w[static_cast<std::size_t>(c)] = m;
    phi[static_cast<std::size_t>(c)] =
        kind == PhiKind::full ? phi_value(SymMatrix(m + eps * eye), l) : sigma_of_matrix(SymMatrix(m), l + 1);
  }
  auto phi_at = [&](int c) { return phi[static_cast<std::size_t>(c)]; };

  NodeCalculus out;
  out.node = node;
  out.phi = phi_at(box.center());
  out.grad_phi.resize(n);
  for (int a = 0; a < n; ++a)
    out.grad_phi(a) = box.d1(phi_at, a);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b)
      if (coef(a, b) != 0.0)
        out.lhs += coef(a, b) * box.d2(phi_at, a, b);

  Matrix const wc = w[static_cast<std::size_t>(box.center())];
  out.w_norm = (wc + eps * eye).norm();
  auto const diag = diagonalize(SymMatrix(wc + eps * eye));
  out.lambda = diag.lambda;
  int const nb = np - l;
  if (l > 0 && nb > 0)
    out.gap = (diag.lambda[nb] - eps) - (diag.lambda[nb - 1] - eps);

  // Entries of W in the frame that diagonalizes W(x), held fixed.
  Matrix const &q = diag.q;
  std::vector<Matrix> r(static_cast<std::size_t>(box.size()));
  for (int c : box.codes())
    r[static_cast<std::size_t>(c)] = q.transpose() * w[static_cast<std::size_t>(c)] * q;
  auto entry = [&](int i, int j) {
    return [&r, i, j](int c) { return r[static_cast<std::size_t>(c)](i, j); };
  };
  // u_ija
  std::vector<Matrix> d3(static_cast<std::size_t>(n), Matrix::Zero(np, np));
  for (int a = 0; a < n; ++a)
    for (int i = 0; i < np; ++i)
      for (int j = 0; j < np; ++j)
        d3[static_cast<std::size_t>(a)](i, j) = box.d1(entry(i, j), a);
  auto u3 = [&](int i, int j, int a) { return d3[static_cast<std::size_t>(a)](i, j); };

  for (int i = 0; i < nb; ++i)
    for (int j = 0; j < nb; ++j)
    {
      double s = 0.0;
      for (int a = 0; a < n; ++a)
        s += u3(i, j, a) * u3(i, j, a);
      out.grad_bad += std::sqrt(s);
    }

  if (!groups || nb == 0)
    return out;

  // sum_ab F^{ab} X_a Y_b
  auto pair = [&](auto const &x, auto const &y) {
    double s = 0.0;
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b)
        if (coef(a, b) != 0.0)
          s += coef(a, b) * x(a) * y(b);
    return s;
  };

  std::vector<double> lam(diag.lambda.values().begin(), diag.lambda.values().end());
  double sigma_g = 1.0;
  for (int j = nb; j < np; ++j)
    sigma_g *= lam[static_cast<std::size_t>(j)];
  double s1b = 0.0;
  for (int i = 0; i < nb; ++i)
    s1b += lam[static_cast<std::size_t>(i)];
  // Same zero cut as q(W): drop the q contributions where sigma_{l+1} vanishes.
  bool const q_live = sigma(lam, l + 1) > sigma_zero_threshold(out.w_norm, l);

  std::vector<double> c(static_cast<std::size_t>(nb), sigma_g);
  if (q_live)
    for (int i = 0; i < nb; ++i)
    {
      std::vector<double> rest;
      for (int k = 0; k < nb; ++k)
        if (k != i)
          rest.push_back(lam[static_cast<std::size_t>(k)]);
      double const s1 = s1b - lam[static_cast<std::size_t>(i)];
      c[static_cast<std::size_t>(i)] += (s1 * s1 - sigma2_of(rest)) / (s1b * s1b);
    }

  for (int i = 0; i < nb; ++i)
  {
    double s = 0.0;
    auto const uii = entry(i, i);
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b)
        if (coef(a, b) != 0.0)
          s += coef(a, b) * box.d2(uii, a, b);
    out.groups[0] += c[static_cast<std::size_t>(i)] * s;
  }
  for (int i = 0; i < nb; ++i)
    for (int j = nb; j < np; ++j)
    {
      auto const v = [&](int a) { return u3(i, j, a); };
      out.groups[1] -= 2.0 * c[static_cast<std::size_t>(i)] / lam[static_cast<std::size_t>(j)] * pair(v, v);
    }
  if (q_live)
  {
    for (int i = 0; i < nb; ++i)
    {
      auto const v = [&](int a) {
        double sb = 0.0;
        for (int j = 0; j < nb; ++j)
          sb += u3(j, j, a);
        return s1b * u3(i, i, a) - lam[static_cast<std::size_t>(i)] * sb;
      };
      out.groups[2] -= pair(v, v) / (s1b * s1b * s1b);
    }
    for (int i = 0; i < nb; ++i)
      for (int j = 0; j < nb; ++j)
        if (i != j)
        {
          auto const v = [&](int a) { return u3(i, j, a); };
          out.groups[3] -= pair(v, v) / s1b;
        }
  }
  return out;
}

inline Matrix coefficients_at(OperatorF const &f, SolutionField const &u, std::int64_t node, double eps)
{
  if (f.dim() != u.dim() || f.nprime() != u.nprime())
    throw PreconditionError("operator and field dimensions differ");
  State const s = regularized_state(discrete_state(u, node, u.time().value_or(0.0)), u.nprime(), eps);
  return f.first_order(s).coefficient_matrix();
}

inline int resolve_rank(SolutionField const &u, std::optional<int> l, double threshold)
{
  if (l)
  {
    if (*l < 0 || *l > u.nprime())
      throw PreconditionError("rank l outside [0, nprime]");
    return *l;
  }
  return minimal_rank(partial_hessian(u), threshold).l;
}

inline std::int64_t max_index_distance(Grid const &g, std::int64_t p, std::int64_t q)
{
  auto const a = g.multi_index(p), b = g.multi_index(q);
  std::int64_t d = 0;
  for (std::size_t k = 0; k < a.size(); ++k)
    d = std::max<std::int64_t>(d, std::abs(a[k] - b[k]));
  return d;
}

/// Min-rank node of the 2-shrunk interior, lowest index on ties.
inline std::int64_t default_center(SolutionField const &u, double threshold)
{
  auto const nodes = u.grid().interior_nodes(2);
  if (nodes.empty())
    throw PreconditionError("grid has no nodes two away from the boundary");
  std::int64_t best = nodes.front();
  int best_rank = std::numeric_limits<int>::max();
  for (auto n : nodes)
  {
    int const r = rank_partition(hessian_block(u, n, u.nprime()), threshold).l;
    if (r < best_rank)
    {
      best_rank = r;
      best = n;
    }
  }
  return best;
}

/// 2-shrunk interior nodes, optionally restricted to a box around a center.
inline std::vector<std::int64_t> select_nodes(SolutionField const &u, VerifyOptions const &opt, double threshold,
                                              std::optional<int> default_radius)
{
  auto nodes = u.grid().interior_nodes(2);
  std::optional<int> const radius = opt.radius ? opt.radius : default_radius;
  if (!radius || *radius < 0)
    return nodes;
  std::int64_t const c = opt.center ? *opt.center : default_center(u, threshold);
  if (c < 0 || c >= u.grid().size())
    throw PreconditionError("neighborhood center outside the grid");
  std::vector<std::int64_t> out;
  for (auto n : nodes)
    if (max_index_distance(u.grid(), n, c) <= *radius)
      out.push_back(n);
  if (out.empty())
    throw PreconditionError("neighborhood contains no node two away from the boundary");
  return out;
}

/// Structure verdict of F at eps-regularized discrete states of sampled nodes.
inline StructureReport structure_at_samples(OperatorF const &f, SolutionField const &u,
                                            std::vector<std::int64_t> const &nodes, double eps, int samples)
{
  std::vector<State> states;
  std::size_t const count = std::min<std::size_t>(nodes.size(), static_cast<std::size_t>(std::max(1, samples)));
  for (std::size_t k = 0; k < count; ++k)
  {
    std::size_t const idx = count == 1 ? nodes.size() / 2 : k * (nodes.size() - 1) / (count - 1);
    states.push_back(regularized_state(discrete_state(u, nodes[idx], u.time().value_or(0.0)), u.nprime(), eps));
  }
  try
  {
    return check_condition_3_13(f, states);
  }
  catch (Error const &e)
  {
    StructureReport r;
    r.check = std::string("condition_3_13 (") + e.what() + ")";
    r.verdict = Verdict::inconclusive;
    return r;
  }
}

} // namespace detail

// --- Identity residual ------------------------------------------------------

struct IdentityResidual
{
  std::int64_t node = -1;
  bool applicable = true; ///< false when l = N'
  int l = 0;
  double eps = 0.0;
  double lhs = 0.0;
  std::array<double, 4> groups{};
  double rhs = 0.0;
  double defect = 0.0;
  double grad_bad = 0.0;
  double phi = 0.0;
  double gap = 0.0;

  double budget() const { return grad_bad + phi; }

  nlohmann::json to_json() const
  {
    return {{"node", node},     {"applicable", applicable},
            {"l", l},           {"eps", eps},
            {"lhs", lhs},       {"groups", {groups[0], groups[1], groups[2], groups[3]}},
            {"rhs", rhs},       {"defect", defect},
            {"grad_bad", grad_bad}, {"phi", phi},
            {"budget", budget()}};
  }
};

inline IdentityResidual identity_3_5_residual(SolutionField const &u, OperatorF const &f, std::int64_t node,
                                              double eps, std::optional<int> l = std::nullopt,
                                              std::optional<double> threshold = std::nullopt)
{
  if (!(eps >= 0.0))
    throw PreconditionError("identity_3_5_residual: eps must be non-negative");
  int const rank = detail::resolve_rank(u, l, threshold.value_or(default_threshold(u)));
  IdentityResidual out;
  out.node = node;
  out.l = rank;
  out.eps = eps;
  if (!u.grid().is_interior(node, 2))
    throw PreconditionError("identity_3_5_residual: node is within two nodes of the boundary");
  if (rank == u.nprime())
  {
    out.applicable = false;
    return out;
  }
  auto const nc = detail::node_calculus(u, node, eps, rank, detail::coefficients_at(f, u, node, eps),
                                        detail::PhiKind::full, true);
  out.lhs = nc.lhs;
  out.groups = nc.groups;
  out.rhs = nc.rhs();
  out.defect = std::abs(nc.lhs - nc.rhs());
  out.grad_bad = nc.grad_bad;
  out.phi = nc.phi;
  out.gap = nc.gap;
  return out;
}

struct IdentityFit
{
  int l = 0;
  double eps = 0.0;
  bool applicable = true;
  std::vector<IdentityResidual> residuals;
  int excluded = 0; ///< gap below 2 x threshold
  double k = 0.0;   ///< smallest K with defect <= K budget
  bool finite = true;
  std::int64_t blocking_node = -1;
  double tolerance = 0.0;

  Verdict verdict() const { return finite ? Verdict::pass : Verdict::fail; }

  nlohmann::json to_json() const
  {
    double max_defect = 0.0;
    for (auto const &r : residuals)
      max_defect = std::max(max_defect, r.defect);
    return {{"verdict", to_string(verdict())}, {"applicable", applicable}, {"l", l},
            {"eps", eps},                      {"nodes", residuals.size()}, {"excluded", excluded},
            {"k", k},                          {"finite", finite},         {"blocking_node", blocking_node},
            {"max_defect", max_defect},        {"tolerance", tolerance}};
  }
};

/// Identity residual over a neighborhood (default: 2-node box around the
/// min-rank node) and the fitted K.
inline IdentityFit identity_3_5_fit(SolutionField const &u, OperatorF const &f, double eps,
                                    std::optional<int> l = std::nullopt, VerifyOptions const &opt = {})
{
  double const thr = opt.threshold.value_or(default_threshold(u));
  IdentityFit out;
  out.l = detail::resolve_rank(u, l, thr);
  out.eps = eps;
  if (out.l == u.nprime())
  {
    out.applicable = false;
    return out;
  }
  auto const nodes = detail::select_nodes(u, opt, thr, 2);
  std::vector<IdentityResidual> all(nodes.size());
  parallel_for(nodes.size(), [&](std::size_t k) { all[k] = identity_3_5_residual(u, f, nodes[k], eps, out.l, thr); });
  double wmax = 0.0;
  for (auto n : nodes)
    wmax = std::max(wmax, hessian_block(u, n, u.nprime()).norm() + eps * std::sqrt(double(u.nprime())));
  out.tolerance = 1e-8 * std::pow(1.0 + wmax, out.l + 1);
  for (auto &r : all)
  {
    if (r.gap < 2.0 * thr)
    {
      ++out.excluded;
      continue;
    }
    if (r.budget() > out.tolerance)
      out.k = std::max(out.k, r.defect / r.budget());
    else if (r.defect > out.tolerance && out.finite)
    {
      out.finite = false;
      out.blocking_node = r.node;
    }
    out.residuals.push_back(r);
  }
  if (!out.finite)
    out.k = std::numeric_limits<double>::infinity();
  return out;
}

// --- Differential inequalities ---------------------------------------------

struct LedgerRow
{
  std::int64_t node = -1;
  double t = 0.0;
  double phi = 0.0;
  double grad_phi = 0.0;
  double grad_bad = 0.0;
  double lhs = 0.0;
  std::array<double, 4> groups{};
};

struct ResidualLedger
{
  std::string check;
  Grid grid;
  int l = 0;
  double eps = 0.0;
  bool applicable = true;
  std::vector<LedgerRow> rows;
  int excluded = 0;
  double tolerance = 0.0;
  double c = 0.0; ///< fitted: lhs <= c (phi + |grad phi|)
  bool finite = true;
  std::int64_t blocking_node = -1;
  std::optional<StructureReport> structure;

  Verdict verdict() const { return finite ? Verdict::pass : Verdict::fail; }

  nlohmann::json to_json() const
  {
    nlohmann::json j{{"check", check},   {"verdict", to_string(verdict())},
                     {"applicable", applicable}, {"l", l},
                     {"eps", eps},       {"nodes", rows.size()},
                     {"excluded", excluded}, {"tolerance", tolerance},
                     {"c", finite ? nlohmann::json(c) : nlohmann::json(nullptr)},
                     {"finite", finite}, {"blocking_node", blocking_node}};
    if (!applicable)
      j["note"] = "not applicable: full rank, nothing to prove";
    if (structure)
      j["structure"] = structure->to_json();
    return j;
  }

  void write_csv(std::ostream &os) const
  {
    os << "node,t";
    for (int a = 0; a < grid.dim(); ++a)
      os << ",x" << a;
    os << ",phi,grad_phi,grad_bad,lhs,g1,g2,g3,g4\n";
    os.precision(17);
    for (auto const &r : rows)
    {
      os << r.node << ',' << r.t;
      Vector const x = grid.coordinates(r.node);
      for (int a = 0; a < grid.dim(); ++a)
        os << ',' << x(a);
      os << ',' << r.phi << ',' << r.grad_phi << ',' << r.grad_bad << ',' << r.lhs;
      for (double g : r.groups)
        os << ',' << g;
      os << '\n';
    }
  }
};

namespace detail
{

inline void fit_ledger(ResidualLedger &out)
{
  out.c = 0.0;
  out.finite = true;
  for (auto const &r : out.rows)
  {
    double const budget = r.phi + r.grad_phi;
    if (budget > out.tolerance)
      out.c = std::max(out.c, r.lhs / budget);
    else if (r.lhs > out.tolerance && out.finite)
    {
      out.finite = false;
      out.blocking_node = r.node;
    }
  }
}

inline double phi_scale_tolerance(SolutionField const &u, std::vector<std::int64_t> const &nodes, double eps, int l)
{
  double wmax = 0.0;
  for (auto n : nodes)
    wmax = std::max(wmax, hessian_block(u, n, u.nprime()).norm() + eps * std::sqrt(double(u.nprime())));
  return 1e-8 * std::pow(1.0 + wmax, l + 1);
}

} // namespace detail

/// Fits C in sum F^{ab} phi_ab <= C (phi + |grad phi|) over the admissible
/// nodes (default: the whole 2-shrunk interior) and records the structure
/// verdict of F at regularized sample states alongside.
inline ResidualLedger inequality_4_4(SolutionField const &u, OperatorF const &f, double eps,
                                     std::optional<int> l = std::nullopt, VerifyOptions const &opt = {})
{
  if (!(eps >= 0.0))
    throw PreconditionError("inequality_4_4: eps must be non-negative");
  double const thr = opt.threshold.value_or(default_threshold(u));
  ResidualLedger out;
  out.check = "inequality_4_4";
  out.grid = u.grid();
  out.eps = eps;
  out.l = detail::resolve_rank(u, l, thr);
  auto const nodes = detail::select_nodes(u, opt, thr, std::nullopt);
  out.structure = detail::structure_at_samples(f, u, nodes, std::max(eps, 1e-12), opt.structure_samples);
  if (out.l == u.nprime())
  {
    out.applicable = false;
    return out;
  }
  std::vector<detail::NodeCalculus> calc(nodes.size());
  parallel_for(nodes.size(), [&](std::size_t k) {
    calc[k] = detail::node_calculus(u, nodes[k], eps, out.l, detail::coefficients_at(f, u, nodes[k], eps),
                                    detail::PhiKind::full, true);
  });
  out.tolerance = detail::phi_scale_tolerance(u, nodes, eps, out.l);
  double const t = u.time().value_or(0.0);
  for (auto const &nc : calc)
  {
    if (nc.gap < 2.0 * thr)
    {
      ++out.excluded;
      continue;
    }
    out.rows.push_back({nc.node, t, nc.phi, nc.grad_phi.norm(), nc.grad_bad, nc.lhs, nc.groups});
  }
  detail::fit_ledger(out);
  return out;
}

/// Parabolic analogue on time-ordered snapshots: the left side is
/// sum F^{ab} phi_ab - phi_t with phi_t a backward difference; rows for every
/// snapshot after the first.
inline ResidualLedger inequality_5_1(std::vector<SolutionField> const &snapshots, OperatorF const &f, double eps,
                                     std::optional<int> l = std::nullopt, VerifyOptions const &opt = {})
{
  if (snapshots.size() < 2)
    throw PreconditionError("inequality_5_1: need at least two snapshots");
  for (std::size_t k = 0; k < snapshots.size(); ++k)
  {
    if (!snapshots[k].time())
      throw PreconditionError("inequality_5_1: snapshot without a time stamp");
    if (k > 0 && !(*snapshots[k].time() > *snapshots[k - 1].time()))
      throw PreconditionError("inequality_5_1: time stamps must increase strictly");
    if (!(snapshots[k].grid() == snapshots[0].grid()))
      throw PreconditionError("inequality_5_1: snapshots live on different grids");
  }
  double thr = 0.0;
  for (auto const &s : snapshots)
    thr = std::max(thr, opt.threshold.value_or(default_threshold(s)));
  ResidualLedger out;
  out.check = "inequality_5_1";
  out.grid = snapshots[0].grid();
  out.eps = eps;
  if (l)
    out.l = detail::resolve_rank(snapshots[0], l, thr);
  else
  {
    out.l = std::numeric_limits<int>::max();
    for (std::size_t k = 1; k < snapshots.size(); ++k)
      out.l = std::min(out.l, minimal_rank(partial_hessian(snapshots[k]), thr).l);
  }
  VerifyOptions o = opt;
  o.threshold = thr;
  auto const nodes = detail::select_nodes(snapshots.back(), o, thr, std::nullopt);
  out.structure = detail::structure_at_samples(f, snapshots.back(), nodes, std::max(eps, 1e-12), opt.structure_samples);
  if (out.l == snapshots[0].nprime())
  {
    out.applicable = false;
    return out;
  }
  Matrix const eye = Matrix::Identity(snapshots[0].nprime(), snapshots[0].nprime());
  double tol = 0.0;
  for (std::size_t k = 1; k < snapshots.size(); ++k)
  {
    auto const &u = snapshots[k];
    auto const &prev = snapshots[k - 1];
    double const dt = *u.time() - *prev.time();
    std::vector<detail::NodeCalculus> calc(nodes.size());
    std::vector<double> phi_prev(nodes.size());
    parallel_for(nodes.size(), [&](std::size_t i) {
      calc[i] = detail::node_calculus(u, nodes[i], eps, out.l, detail::coefficients_at(f, u, nodes[i], eps),
                                      detail::PhiKind::full, true);
      phi_prev[i] = phi_value(SymMatrix(hessian_block(prev, nodes[i], u.nprime()).matrix() + eps * eye), out.l);
    });
    tol = std::max(tol, detail::phi_scale_tolerance(u, nodes, eps, out.l));
    for (std::size_t i = 0; i < nodes.size(); ++i)
    {
      auto const &nc = calc[i];
      if (nc.gap < 2.0 * thr)
      {
        ++out.excluded;
        continue;
      }
      double const phi_t = (nc.phi - phi_prev[i]) / dt;
      out.rows.push_back({nc.node, *u.time(), nc.phi, nc.grad_phi.norm(), nc.grad_bad, nc.lhs - phi_t, nc.groups});
    }
  }
  out.tolerance = tol;
  detail::fit_ledger(out);
  return out;
}

// --- Laplace example -------------------------------------------------------

struct LaplacePhiReport
{
  ResidualLedger ledger; ///< lhs column holds Laplacian of sigma_{l+1}(W)
  StructureReport hypothesis;
  double min_f = 0.0;
  double max_residual = 0.0; ///< max |Laplacian u - f| at the 1-shrunk interior

  /// c1 = c2 = C.
  double c1() const { return ledger.c; }
  double c2() const { return ledger.c; }
  bool informational() const { return hypothesis.verdict != Verdict::pass; }

  Verdict verdict() const
  {
    if (hypothesis.verdict == Verdict::fail)
      return Verdict::fail;
    return combine(hypothesis.verdict, ledger.verdict());
  }

  nlohmann::json to_json() const
  {
    nlohmann::json j{{"verdict", to_string(verdict())},
                     {"hypothesis", to_string(hypothesis.verdict)},
                     {"hypothesis_report", hypothesis.to_json()},
                     {"inequality", ledger.to_json()},
                     {"c1", ledger.finite ? nlohmann::json(c1()) : nlohmann::json(nullptr)},
                     {"c2", ledger.finite ? nlohmann::json(c2()) : nlohmann::json(nullptr)},
                     {"min_f", min_f},
                     {"max_residual", max_residual}};
    if (hypothesis.verdict == Verdict::fail)
      j["note"] = "hypothesis FAIL; inequality outcome informational";
    return j;
  }
};

/// Fits Laplacian(phi) <= C (|grad phi| + phi) for phi = sigma_{l+1}(W) on the
/// neighborhood (default 2-node box around the min-rank node). The
/// hypothesis gate checks the structure condition of tr(A) - f.
inline LaplacePhiReport laplace_phi_check(SolutionField const &u, Polynomial const &f,
                                          std::optional<int> l = std::nullopt, VerifyOptions const &opt = {})
{
  double const thr = opt.threshold.value_or(default_threshold(u));
  auto const op = laplace_operator(u.nprime(), u.ndouble(), f);
  LaplacePhiReport out;
  out.ledger.check = "laplace_phi";
  out.ledger.grid = u.grid();
  out.ledger.l = detail::resolve_rank(u, l, thr);
  auto const nodes = detail::select_nodes(u, opt, thr, 2);
  out.hypothesis = detail::structure_at_samples(op, u, nodes, opt.hypothesis_eps, opt.structure_samples);

  auto const fpoly = polynomial_operator("f", u.nprime(), u.ndouble(), f);
  auto const all = u.grid().interior_nodes(1);
  double const t = u.time().value_or(0.0);
  out.min_f = std::numeric_limits<double>::infinity();
  for (auto n : all)
  {
    State const s = discrete_state(u, n, t);
    double const fv = fpoly(s);
    out.min_f = std::min(out.min_f, fv);
    out.max_residual = std::max(out.max_residual, std::abs(s.a.matrix().trace() - fv));
  }

  if (out.ledger.l == u.nprime())
  {
    out.ledger.applicable = false;
    return out;
  }
  Matrix const eye = Matrix::Identity(u.dim(), u.dim());
  std::vector<detail::NodeCalculus> calc(nodes.size());
  parallel_for(nodes.size(), [&](std::size_t k) {
    calc[k] = detail::node_calculus(u, nodes[k], 0.0, out.ledger.l, eye, detail::PhiKind::sigma, false);
  });
  out.ledger.tolerance = detail::phi_scale_tolerance(u, nodes, 0.0, out.ledger.l);
  for (auto const &nc : calc)
  {
    if (nc.gap < 2.0 * thr)
    {
      ++out.ledger.excluded;
      continue;
    }
    out.ledger.rows.push_back({nc.node, t, nc.phi, nc.grad_phi.norm(), nc.grad_bad, nc.lhs, {}});
  }
  detail::fit_ledger(out.ledger);
  return out;
}

// --- Rank in time ---------------------------------------------------------

struct ParabolicRankTrace
{
  std::vector<std::pair<double, int>> points;
  double threshold = 0.0;

  bool monotone() const
  {
    for (std::size_t k = 1; k < points.size(); ++k)
      if (points[k].second < points[k - 1].second)
        return false;
    return true;
  }
  Verdict verdict() const { return monotone() ? Verdict::pass : Verdict::fail; }

  nlohmann::json to_json() const
  {
    nlohmann::json pts = nlohmann::json::array();
    for (auto const &[t, l] : points)
      pts.push_back({{"t", t}, {"l", l}});
    return {{"verdict", to_string(verdict())}, {"monotone", monotone()}, {"threshold", threshold}, {"trace", pts}};
  }
};

/// l(t_k) for each snapshot; PASS iff non-decreasing. The threshold defaults
/// to the largest per-snapshot default.
inline ParabolicRankTrace parabolic_rank_monotonicity(std::vector<SolutionField> const &snapshots,
                                                      std::optional<double> threshold = std::nullopt)
{
  if (snapshots.empty())
    throw PreconditionError("parabolic_rank_monotonicity: no snapshots");
  ParabolicRankTrace out;
  for (std::size_t k = 0; k < snapshots.size(); ++k)
  {
    if (!snapshots[k].time())
      throw PreconditionError("parabolic_rank_monotonicity: snapshot without a time stamp");
    if (k > 0 && !(*snapshots[k].time() > *snapshots[k - 1].time()))
      throw PreconditionError("parabolic_rank_monotonicity: time stamps must increase strictly");
  }
  if (threshold)
    out.threshold = *threshold;
  else
    for (auto const &s : snapshots)
      out.threshold = std::max(out.threshold, default_threshold(s));
  for (auto const &s : snapshots)
  {
    auto const w = partial_hessian(s);
    auto const cv = check_partial_convexity(w, out.threshold);
    if (cv.verdict != Verdict::pass)
      throw HypothesisError("parabolic_rank_monotonicity: snapshot at t = " + std::to_string(*s.time()) +
                            " is not partial convex");
    out.points.emplace_back(*s.time(), minimal_rank(w, out.threshold).l);
  }
  return out;
}

// --- Regularization remainder ----------------------------------------------

struct RegularizationRow
{
  double eps = 0.0;
  std::array<double, 3> ratio{}; ///< max |D^j R_eps| / eps, j = 0, 1, 2
};

struct RegularizationLedger
{
  std::vector<RegularizationRow> rows;
  std::array<FitStudy, 3> studies;

  Verdict verdict() const
  {
    Verdict v = Verdict::pass;
    for (auto const &s : studies)
      v = combine(v, s.verdict());
    return v;
  }

  nlohmann::json to_json() const
  {
    nlohmann::json r = nlohmann::json::array();
    for (auto const &row : rows)
      r.push_back({{"eps", row.eps}, {"ratio", {row.ratio[0], row.ratio[1], row.ratio[2]}}});
    return {{"verdict", to_string(verdict())},
            {"rows", r},
            {"studies", {studies[0].to_json(), studies[1].to_json(), studies[2].to_json()}}};
  }
};

/// R_eps = F(u_eps) - F(u) at the discrete states of the 1-shrunk interior,
/// with first and second differences on the 2-shrunk interior. Ratios below
/// `floor` count as zero in the stability test.
inline RegularizationLedger regularization_ledger(SolutionField const &u, OperatorF const &f,
                                                  std::vector<double> const &eps_list, double factor = 2.0,
                                                  double floor = 1e-6)
{
  if (eps_list.empty())
    throw PreconditionError("regularization_ledger: empty eps list");
  if (f.dim() != u.dim() || f.nprime() != u.nprime())
    throw PreconditionError("regularization_ledger: operator and field dimensions differ");
  Grid const &g = u.grid();
  double const t = u.time().value_or(0.0);
  auto const inner = g.interior_nodes(1);
  auto const inner2 = g.interior_nodes(2);
  std::vector<State> states(inner.size());
  std::vector<double> base(inner.size());
  parallel_for(inner.size(), [&](std::size_t k) {
    states[k] = discrete_state(u, inner[k], t);
    base[k] = f(states[k]);
  });
  RegularizationLedger out;
  std::array<std::vector<double>, 3> series;
  std::vector<std::string> labels;
  for (double eps : eps_list)
  {
    if (!(eps > 0.0))
      throw PreconditionError("regularization_ledger: eps must be positive");
    std::vector<double> r(static_cast<std::size_t>(g.size()), 0.0);
    parallel_for(inner.size(), [&](std::size_t k) {
      r[static_cast<std::size_t>(inner[k])] =
          f(detail::regularized_state(states[k], u.nprime(), eps)) - base[k];
    });
    RegularizationRow row;
    row.eps = eps;
    for (auto n : inner)
      row.ratio[0] = std::max(row.ratio[0], std::abs(r[static_cast<std::size_t>(n)]));
    std::vector<std::array<double, 2>> d(inner2.size());
    parallel_for(inner2.size(), [&](std::size_t k) {
      detail::NodeBox box(g, inner2[k]);
      auto v = [&](int c) { return r[static_cast<std::size_t>(box.node_of(c))]; };
      double m1 = 0.0, m2 = 0.0;
      for (int a = 0; a < g.dim(); ++a)
      {
        m1 = std::max(m1, std::abs(box.d1(v, a)));
        for (int b = 0; b < g.dim(); ++b)
          m2 = std::max(m2, std::abs(box.d2(v, a, b)));
      }
      d[k] = {m1, m2};
    });
    for (auto const &x : d)
    {
      row.ratio[1] = std::max(row.ratio[1], x[0]);
      row.ratio[2] = std::max(row.ratio[2], x[1]);
    }
    for (double &x : row.ratio)
      x /= eps;
    for (int j = 0; j < 3; ++j)
      series[static_cast<std::size_t>(j)].push_back(row.ratio[static_cast<std::size_t>(j)]);
    labels.push_back("eps=" + nlohmann::json(eps).dump());
    out.rows.push_back(row);
  }
  for (int j = 0; j < 3; ++j)
    out.studies[static_cast<std::size_t>(j)] =
        fit_study("R_eps ratio j=" + std::to_string(j), labels, series[static_cast<std::size_t>(j)], factor, floor);
  return out;
}

} // namespace rankgauge
