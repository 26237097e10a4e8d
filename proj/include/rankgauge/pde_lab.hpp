#pragma once

// Manufactured partial convex fields and finite-difference solvers for
// F(D^2u, Du, u, x, t) = 0 and u_t = F(D^2u, Du, u, x, t) on boxes.

#include "rankgauge/core.hpp"
#include "rankgauge/grid.hpp"
#include "rankgauge/hessian_analysis.hpp"
#include "rankgauge/operator.hpp"

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseCore>
#include <Eigen/SparseLU>
#include <nlohmann/json.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace rankgauge
{

// --- Manufactured solutions -----------------------------------------------

/// Closed-form partial convex field u(x, t) given as a polynomial in x and t,
/// with the rank of its partial Hessian known by construction.
class ManufacturedSpec
{
public:
  ManufacturedSpec() = default;
  ManufacturedSpec(std::string id, int nprime, int ndouble, Polynomial u, int declared_rank,
                   nlohmann::json params = nlohmann::json::object())
      : id_(std::move(id)), nprime_(nprime), ndouble_(ndouble), u_(std::move(u)), rank_(declared_rank),
        params_(std::move(params))
  {
    if (nprime_ < 1 || ndouble_ < 0)
      throw PreconditionError("ManufacturedSpec: need nprime >= 1 and ndouble >= 0");
    if (rank_ < 0 || rank_ > nprime_)
      throw PreconditionError("ManufacturedSpec: declared rank must lie in [0, nprime]");
    if (!u_.uses_only([](Factor const &f) { return f.kind == VarKind::x || f.kind == VarKind::t; }))
      throw PreconditionError("ManufacturedSpec: closed form may depend on x and t only");
    eval_ = polynomial_operator(id_, nprime_, ndouble_, u_);
  }

  std::string const &id() const { return id_; }
  int nprime() const { return nprime_; }
  int ndouble() const { return ndouble_; }
  int dim() const { return nprime_ + ndouble_; }
  int declared_rank() const { return rank_; }
  Polynomial const &polynomial() const { return u_; }
  nlohmann::json const &params() const { return params_; }

  double value(Vector const &x, double t = 0.0) const { return eval_(at(x, t)); }

  Vector gradient(Vector const &x, double t = 0.0) const
  {
    auto const j = eval_.first_order(at(x, t));
    Vector g(dim());
    for (int a = 0; a < dim(); ++a)
      g(a) = j.Fx(a);
    return g;
  }

  SymMatrix hessian(Vector const &x, double t = 0.0) const
  {
    auto const j = eval_.jet(at(x, t));
    Matrix h(dim(), dim());
    for (int a = 0; a < dim(); ++a)
      for (int b = 0; b < dim(); ++b)
        h(a, b) = j.Fxx(a, b);
    return SymMatrix(h);
  }

  /// Dirichlet data taken from the closed form.
  std::function<double(Vector const &, double)> boundary() const
  {
    auto self = *this;
    return [self](Vector const &x, double t) { return self.value(x, t); };
  }

private:
  State at(Vector const &x, double t) const
  {
    if (x.size() != dim())
      throw PreconditionError("ManufacturedSpec: point has the wrong dimension");
    return State{SymMatrix::zero(dim()), Vector::Zero(dim()), 0.0, x, t};
  }

  std::string id_;
  int nprime_ = 1;
  int ndouble_ = 0;
  Polynomial u_;
  int rank_ = 0;
  nlohmann::json params_ = nlohmann::json::object();
  OperatorF eval_;
};

/// u = sum_r (v_r . x')^2 / 2 + h(x'') with orthonormal rows v_r: rank l
/// everywhere. `h` may use x'' coordinates only; default |x''|^2 / 2.
inline ManufacturedSpec rank_template(int nprime, int ndouble, int l, std::optional<Matrix> vectors = std::nullopt,
                                      std::optional<Polynomial> h = std::nullopt)
{
  if (l < 0 || l > nprime)
    throw PreconditionError("rank_template: need 0 <= l <= nprime");
  Matrix v = vectors ? *vectors : Matrix(Matrix::Identity(nprime, nprime).topRows(l));
  if (v.rows() != l || v.cols() != nprime)
    throw PreconditionError("rank_template: need l rows of length nprime");
  if (l > 0 && (v * v.transpose() - Matrix::Identity(l, l)).cwiseAbs().maxCoeff() > 1e-12)
    throw PreconditionError("rank_template: rows must be orthonormal");
  Polynomial hh;
  if (h)
  {
    if (!h->uses_only([nprime](Factor const &f) { return f.kind == VarKind::x && f.i >= nprime; }))
      throw PreconditionError("rank_template: h may depend on x'' only");
    hh = *h;
  }
  else
    for (int a = nprime; a < nprime + ndouble; ++a)
      hh = hh + 0.5 * (Polynomial::X(a) * Polynomial::X(a));
  Polynomial u = hh;
  for (int r = 0; r < l; ++r)
  {
    Polynomial lin;
    for (int i = 0; i < nprime; ++i)
      if (v(r, i) != 0.0)
        lin = lin + v(r, i) * Polynomial::X(i);
    u = u + 0.5 * (lin * lin);
  }
  nlohmann::json params{{"l", l}};
  params["vectors"] = nlohmann::json::array();
  for (int r = 0; r < l; ++r)
  {
    std::vector<double> row;
    for (int i = 0; i < nprime; ++i)
      row.push_back(v(r, i));
    params["vectors"].push_back(row);
  }
  return ManufacturedSpec("rank", nprime, ndouble, u, l, params);
}

/// u = |x'|^2 / 2 + h(x'').
inline ManufacturedSpec full_template(int nprime, int ndouble, std::optional<Polynomial> h = std::nullopt)
{
  auto s = rank_template(nprime, ndouble, nprime, std::nullopt, std::move(h));
  return ManufacturedSpec("full", nprime, ndouble, s.polynomial(), nprime, {{"l", nprime}});
}

/// u_eps = u + eps |x'|^2 / 2.
inline ManufacturedSpec eps_family(ManufacturedSpec const &base, double eps)
{
  if (!(eps >= 0.0))
    throw PreconditionError("eps_family: eps must be non-negative");
  Polynomial u = base.polynomial();
  for (int i = 0; i < base.nprime(); ++i)
    u = u + (0.5 * eps) * (Polynomial::X(i) * Polynomial::X(i));
  nlohmann::json params{{"base", base.id()}, {"eps", eps}, {"base_params", base.params()}};
  return ManufacturedSpec("eps_family", base.nprime(), base.ndouble(), u,
                          eps > 0.0 ? base.nprime() : base.declared_rank(), params);
}

struct ManufacturedField
{
  SolutionField field;
  PartialHessianField exact; ///< W from the closed form on the 1-shrunk interior
};

inline ManufacturedField manufactured(ManufacturedSpec const &spec, Grid const &grid,
                                      std::optional<double> time = std::nullopt)
{
  if (grid.dim() != spec.dim())
    throw PreconditionError("manufactured: grid dimension does not match the template");
  double const t = time.value_or(0.0);
  std::vector<double> values(static_cast<std::size_t>(grid.size()));
  parallel_for(values.size(), [&](std::size_t n) {
    values[n] = spec.value(grid.coordinates(static_cast<std::int64_t>(n)), t);
  });
  SolutionField field(grid, spec.nprime(), std::move(values), time);
  auto nodes = grid.interior_nodes(1);
  std::vector<SymMatrix> mats(nodes.size());
  parallel_for(nodes.size(), [&](std::size_t k) {
    mats[k] = SymMatrix(spec.hessian(grid.coordinates(nodes[k]), t).matrix().topLeftCorner(spec.nprime(),
                                                                                         spec.nprime()));
  });
  return {std::move(field), PartialHessianField(grid, spec.nprime(), std::move(nodes), std::move(mats))};
}

// --- Discrete state -------------------------------------------------------

/// (D^2u, Du, u, x, t) at an interior node from central differences.
inline State discrete_state(SolutionField const &u, std::int64_t node, double t = 0.0)
{
  return State{full_hessian(u, node), discrete_gradient(u, node), u[node], u.grid().coordinates(node), t};
}

/// f = sum_ab F^{ab} A_ab - F at a state. For F linear in A this is the
/// right-hand side of sum a^{ab} u_ab = f.
inline double source_term(OperatorJet const &j, State const &s)
{
  double lin = 0.0;
  for (int a = 0; a < s.a.size(); ++a)
    for (int b = 0; b < s.a.size(); ++b)
      lin += j.Fa(a, b) * s.a(a, b);
  return lin - j.value;
}

// --- Newton solver --------------------------------------------------------

struct SolverOptions
{
  int max_iter = 50;
  int max_halvings = 8;
  double tol_factor = 1e-10;             ///< elliptic: tol = tol_factor (1 + |f|_inf)
  double step_tolerance = 1e-9;          ///< parabolic per-step residual
  std::optional<std::vector<double>> initial; ///< full-grid initial guess
};

struct SolveReport
{
  bool converged = false;
  int iterations = 0;
  double residual = 0.0;
  double tolerance = 0.0;
  std::string linear_solver;
  double min_f = std::numeric_limits<double>::quiet_NaN();
  bool positivity_checked = false;
  bool positivity_ok = true;
  std::int64_t min_f_node = -1;
  double min_ellipticity = std::numeric_limits<double>::quiet_NaN();

  nlohmann::json to_json() const
  {
    nlohmann::json j{{"converged", converged},         {"iterations", iterations},
                     {"residual", residual},           {"tolerance", tolerance},
                     {"linear_solver", linear_solver}, {"positivity_checked", positivity_checked}};
    if (positivity_checked)
    {
      j["positivity_ok"] = positivity_ok;
      j["min_f"] = min_f;
      j["min_f_node"] = min_f_node;
    }
    j["min_ellipticity"] = min_ellipticity;
    return j;
  }
};

/// Newton failure; carries the last residual.
class DivergenceError : public NumericalError
{
public:
  DivergenceError(std::string const &what, double residual)
      : NumericalError(what + " (last residual " + std::to_string(residual) + ")"), residual_(residual)
  {
  }
  double residual() const { return residual_; }

private:
  double residual_;
};

namespace detail
{

/// Node equations  mass * U_n - weight * F(state_n(U)) - rhs_n = 0  on the
/// 1-shrunk interior, boundary values held fixed.
struct NodeSystem
{
  OperatorF op;
  double mass = 0.0;
  double weight = -1.0;
  std::vector<double> rhs; ///< per unknown, empty means zero
  double time = 0.0;
};

struct Assembly
{
  Vector residual;
  std::vector<Eigen::Triplet<double>> triplets;
  double min_ellipticity = std::numeric_limits<double>::infinity();
  std::int64_t bad_node = -1;
  double f_inf = 0.0;
};

inline Assembly assemble(NodeSystem const &sys, SolutionField const &u, std::vector<std::int64_t> const &nodes,
                         std::vector<std::int64_t> const &unknown_of, bool with_jacobian)
{
  Grid const &g = u.grid();
  int const n = g.dim();
  std::size_t const m = nodes.size();
  std::size_t const per = static_cast<std::size_t>(1 + 2 * n + 2 * n * (n - 1));
  Assembly out;
  out.residual.resize(static_cast<Eigen::Index>(m));
  std::vector<Eigen::Triplet<double>> trip(with_jacobian ? m * per : 0);
  std::vector<double> ell(m), fs(m);
  parallel_for(m, [&](std::size_t k) {
    std::int64_t const node = nodes[k];
    State const s = discrete_state(u, node, sys.time);
    auto const j = sys.op.first_order(s);
    double const rhs = sys.rhs.empty() ? 0.0 : sys.rhs[k];
    out.residual(static_cast<Eigen::Index>(k)) = sys.mass * u[node] - sys.weight * j.value - rhs;
    fs[k] = std::abs(source_term(j, s));
    Matrix const coef = j.coefficient_matrix();
    ell[k] = Eigen::SelfAdjointEigenSolver<Matrix>(coef, Eigen::EigenvaluesOnly).eigenvalues()(0);
    if (!with_jacobian)
      return;
    std::size_t slot = k * per;
    auto row = static_cast<int>(k);
    auto put = [&](std::int64_t nb, double v) {
      std::int64_t const col = unknown_of[static_cast<std::size_t>(nb)];
      trip[slot++] = Eigen::Triplet<double>(row, col < 0 ? row : static_cast<int>(col), col < 0 ? 0.0 : v);
    };
    double const w = -sys.weight;
    double centre = sys.mass + w * j.Fu();
    for (int a = 0; a < n; ++a)
    {
      double const ha = g.spacing(a);
      std::int64_t const sa = g.stride(a);
      double const caa = w * j.Fa(a, a) / (ha * ha);
      double const cp = w * j.Fp(a) / (2.0 * ha);
      centre -= 2.0 * caa;
      put(node + sa, caa + cp);
      put(node - sa, caa - cp);
      for (int b = a + 1; b < n; ++b)
      {
        std::int64_t const sb = g.stride(b);
        double const cab = w * 2.0 * j.Fa(a, b) / (4.0 * ha * g.spacing(b));
        put(node + sa + sb, cab);
        put(node + sa - sb, -cab);
        put(node - sa + sb, -cab);
        put(node - sa - sb, cab);
      }
    }
    put(node, centre);
  });
  out.triplets = std::move(trip);
  for (std::size_t k = 0; k < m; ++k)
  {
    out.f_inf = std::max(out.f_inf, fs[k]);
    if (ell[k] < out.min_ellipticity)
    {
      out.min_ellipticity = ell[k];
      if (ell[k] <= 0.0)
        out.bad_node = nodes[k];
    }
  }
  return out;
}

inline Vector solve_linear(Eigen::SparseMatrix<double> const &jac, Vector const &rhs, std::string &used)
{
  double const scale = jac.norm();
  Eigen::SparseMatrix<double> const asym = jac - Eigen::SparseMatrix<double>(jac.transpose());
  bool const symmetric = asym.norm() <= 1e-12 * scale;
  if (symmetric)
  {
    // Elliptic Jacobians are negative definite; flip to use CG.
    double const sign = jac.diagonal().sum() < 0.0 ? -1.0 : 1.0;
    Eigen::SparseMatrix<double> const spd = sign * jac;
    Eigen::ConjugateGradient<Eigen::SparseMatrix<double>, Eigen::Lower | Eigen::Upper,
                             Eigen::IncompleteCholesky<double>>
        cg;
    cg.setTolerance(1e-14);
    cg.setMaxIterations(std::max<Eigen::Index>(1000, 4 * jac.rows()));
    cg.compute(spd);
    if (cg.info() == Eigen::Success)
    {
      Vector x = cg.solve(sign * rhs);
      if (cg.info() == Eigen::Success || cg.error() < 1e-10)
      {
        used = "cg+ichol";
        return x;
      }
    }
  }
  Eigen::BiCGSTAB<Eigen::SparseMatrix<double>, Eigen::IncompleteLUT<double>> bicg;
  bicg.setTolerance(1e-14);
  bicg.compute(jac);
  if (bicg.info() == Eigen::Success)
  {
    Vector x = bicg.solve(rhs);
    if (bicg.info() == Eigen::Success || bicg.error() < 1e-10)
    {
      used = "bicgstab+ilut";
      return x;
    }
  }
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
  lu.compute(jac);
  if (lu.info() != Eigen::Success)
    throw NumericalError("solver: singular Jacobian");
  used = "sparse_lu";
  return lu.solve(rhs);
}

struct NewtonOutcome
{
  SolutionField field;
  SolveReport report;
  double f_inf = 0.0;
};

inline NewtonOutcome newton(NodeSystem const &sys, SolutionField u, std::function<double(double)> const &tolerance,
                            SolverOptions const &opt)
{
  Grid const &g = u.grid();
  auto const nodes = g.interior_nodes(1);
  std::vector<std::int64_t> unknown_of(static_cast<std::size_t>(g.size()), -1);
  for (std::size_t k = 0; k < nodes.size(); ++k)
    unknown_of[static_cast<std::size_t>(nodes[k])] = static_cast<std::int64_t>(k);

  auto with_values = [&](SolutionField const &base, Vector const &interior) {
    std::vector<double> v = base.values();
    for (std::size_t k = 0; k < nodes.size(); ++k)
      v[static_cast<std::size_t>(nodes[k])] = interior(static_cast<Eigen::Index>(k));
    return SolutionField(base.grid(), base.nprime(), std::move(v), base.time());
  };

  SolveReport rep;
  Assembly cur = assemble(sys, u, nodes, unknown_of, true);
  double res = cur.residual.cwiseAbs().maxCoeff();
  for (int it = 0;; ++it)
  {
    if (cur.bad_node >= 0)
      throw NumericalError("solver: operator is not elliptic at node " + std::to_string(cur.bad_node));
    rep.min_ellipticity = cur.min_ellipticity;
    rep.tolerance = tolerance(cur.f_inf);
    rep.iterations = it;
    rep.residual = res;
    if (!std::isfinite(res))
      throw DivergenceError("solver: non-finite residual", res);
    if (res <= rep.tolerance)
    {
      rep.converged = true;
      return {std::move(u), rep, cur.f_inf};
    }
    if (it >= opt.max_iter)
      throw DivergenceError("solver: Newton did not converge in " + std::to_string(opt.max_iter) + " iterations",
                            res);

    auto const m = static_cast<Eigen::Index>(nodes.size());
    Eigen::SparseMatrix<double> jac(m, m);
    jac.setFromTriplets(cur.triplets.begin(), cur.triplets.end());
    Vector const delta = solve_linear(jac, -cur.residual, rep.linear_solver);

    Vector base(m);
    for (std::size_t k = 0; k < nodes.size(); ++k)
      base(static_cast<Eigen::Index>(k)) = u[nodes[k]];
    double step = 1.0;
    SolutionField trial = with_values(u, base + delta);
    Assembly next = assemble(sys, trial, nodes, unknown_of, false);
    double next_res = next.residual.cwiseAbs().maxCoeff();
    for (int halving = 0; halving < opt.max_halvings && !(next_res < res); ++halving)
    {
      step *= 0.5;
      trial = with_values(u, base + step * delta);
      next = assemble(sys, trial, nodes, unknown_of, false);
      next_res = next.residual.cwiseAbs().maxCoeff();
    }
    u = std::move(trial);
    res = next_res;
    cur = assemble(sys, u, nodes, unknown_of, true);
  }
}

inline SolutionField boundary_filled(Grid const &grid, int nprime, std::function<double(Vector const &, double)> const &g,
                                     double t, std::vector<double> const *interior_from)
{
  std::vector<double> v(static_cast<std::size_t>(grid.size()), 0.0);
  parallel_for(v.size(), [&](std::size_t n) {
    auto const node = static_cast<std::int64_t>(n);
    if (grid.is_boundary(node))
      v[n] = g(grid.coordinates(node), t);
    else if (interior_from)
      v[n] = (*interior_from)[n];
  });
  return SolutionField(grid, nprime, std::move(v), t);
}

} // namespace detail

// --- Elliptic problems ----------------------------------------------------

struct EllipticProblem
{
  OperatorF op;
  std::function<double(Vector const &, double)> boundary; ///< Dirichlet data g(x, t)
  bool require_positive_f = false;
  double time = 0.0;
};

struct SolveResult
{
  SolutionField field;
  SolveReport report;
};

/// Damped Newton on the central-difference discretization of F = 0.
inline SolveResult solve_elliptic(EllipticProblem const &problem, Grid const &grid, SolverOptions const &opt = {})
{
  if (grid.dim() != problem.op.dim())
    throw PreconditionError("solve_elliptic: grid dimension does not match the operator");
  if (!problem.boundary)
    throw PreconditionError("solve_elliptic: boundary data missing");
  if (opt.initial && static_cast<std::int64_t>(opt.initial->size()) != grid.size())
    throw PreconditionError("solve_elliptic: initial guess has the wrong size");
  for (auto const &ax : grid.axes())
    if (ax.nodes < SolutionField::min_nodes_per_axis)
      throw PreconditionError("solve_elliptic: grid too small (need >= 5 nodes per axis)");

  auto u0 = detail::boundary_filled(grid, problem.op.nprime(), problem.boundary, problem.time,
                                    opt.initial ? &*opt.initial : nullptr);
  detail::NodeSystem sys{problem.op, 0.0, -1.0, {}, problem.time};
  double const tf = opt.tol_factor;
  auto out = detail::newton(sys, std::move(u0), [tf](double finf) { return tf * (1.0 + finf); }, opt);

  SolutionField field(out.field.grid(), out.field.nprime(), out.field.values());
  if (problem.require_positive_f)
  {
    auto const nodes = grid.interior_nodes(1);
    std::vector<double> f(nodes.size());
    parallel_for(nodes.size(), [&](std::size_t k) {
      State const s = discrete_state(field, nodes[k], problem.time);
      f[k] = source_term(problem.op.first_order(s), s);
    });
    out.report.positivity_checked = true;
    out.report.min_f = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < nodes.size(); ++k)
      if (f[k] < out.report.min_f)
      {
        out.report.min_f = f[k];
        out.report.min_f_node = nodes[k];
      }
    out.report.positivity_ok = out.report.min_f > 0.0;
  }
  return {std::move(field), out.report};
}

// --- Parabolic problems ---------------------------------------------------

struct ParabolicProblem
{
  OperatorF op;               ///< right-hand side F(D^2u, Du, u, x, t)
  SolutionField initial;      ///< u(., t0)
  std::function<double(Vector const &, double)> boundary;
  double t0 = 0.0;
  std::optional<double> horizon = std::nullopt; ///< T, when given dt * nsteps must not exceed T - t0
};

struct ParabolicResult
{
  std::vector<SolutionField> snapshots; ///< t0, t0 + dt, ..., nsteps + 1 fields
  std::vector<SolveReport> steps;
};

/// Implicit Euler: u^{k+1} - dt F(D^2u^{k+1}, ..., t_{k+1}) = u^k.
inline ParabolicResult step_parabolic(ParabolicProblem const &problem, double dt, int nsteps,
                                      SolverOptions const &opt = {})
{
  if (!(dt > 0.0))
    throw PreconditionError("step_parabolic: dt must be positive");
  if (nsteps < 1)
    throw PreconditionError("step_parabolic: need at least one step");
  if (problem.horizon && dt * nsteps > (*problem.horizon - problem.t0) * (1.0 + 1e-12))
    throw PreconditionError("step_parabolic: dt * nsteps exceeds the horizon");
  if (problem.initial.dim() != problem.op.dim())
    throw PreconditionError("step_parabolic: initial field dimension does not match the operator");
  if (!problem.boundary)
    throw PreconditionError("step_parabolic: boundary data missing");
  auto const w0 = partial_hessian(problem.initial);
  if (check_partial_convexity(w0, default_threshold(problem.initial)).verdict != Verdict::pass)
    throw PreconditionError("step_parabolic: initial field is not partial convex");

  Grid const &grid = problem.initial.grid();
  auto const nodes = grid.interior_nodes(1);
  ParabolicResult out;
  out.snapshots.emplace_back(grid, problem.initial.nprime(), problem.initial.values(), problem.t0);
  for (int k = 1; k <= nsteps; ++k)
  {
    double const t = problem.t0 + k * dt;
    SolutionField const &prev = out.snapshots.back();
    detail::NodeSystem sys{problem.op, 1.0, dt, {}, t};
    sys.rhs.resize(nodes.size());
    for (std::size_t i = 0; i < nodes.size(); ++i)
      sys.rhs[i] = prev[nodes[i]];
    auto guess = detail::boundary_filled(grid, prev.nprime(), problem.boundary, t, &prev.values());
    double const tol = opt.step_tolerance;
    auto res = detail::newton(sys, std::move(guess), [tol](double) { return tol; }, opt);
    out.snapshots.emplace_back(grid, prev.nprime(), res.field.values(), t);
    out.steps.push_back(res.report);
  }
  return out;
}

} // namespace rankgauge
