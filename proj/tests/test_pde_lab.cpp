#include "rankgauge/expression.hpp"
#include "rankgauge/pde_lab.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace rankgauge;

namespace
{
double max_error(SolutionField const &u, ManufacturedSpec const &truth, double t = 0.0)
{
  double e = 0.0;
  for (std::int64_t n = 0; n < u.grid().size(); ++n)
    e = std::max(e, std::abs(u[n] - truth.value(u.grid().coordinates(n), t)));
  return e;
}

Vector central_gradient(std::function<double(Vector const &)> const &f, Vector const &x, double h = 1e-4)
{
  Vector g(x.size());
  for (int a = 0; a < x.size(); ++a)
  {
    Vector p = x, m = x;
    p(a) += h;
    m(a) -= h;
    g(a) = (f(p) - f(m)) / (2.0 * h);
  }
  return g;
}

Matrix central_hessian(std::function<double(Vector const &)> const &f, Vector const &x, double h = 1e-3)
{
  Matrix out(x.size(), x.size());
  for (int a = 0; a < x.size(); ++a)
    for (int b = 0; b < x.size(); ++b)
    {
      auto at = [&](double sa, double sb) {
        Vector y = x;
        y(a) += sa * h;
        y(b) += sb * h;
        return f(y);
      };
      out(a, b) = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / (4.0 * h * h);
    }
  return out;
}

Grid cube(int dim, int nodes, double lo = -1.0, double hi = 1.0)
{
  return box_grid(std::vector<double>(static_cast<std::size_t>(dim), lo),
                  std::vector<double>(static_cast<std::size_t>(dim), hi), nodes);
}
} // namespace

TEST(Expression, ParsesAndEvaluates)
{
  auto const p = parse_polynomial("x0^2/2 + 3*x1*x2 - (u - 1)^2 + A01 + 0.5*p2 - t");
  auto const f = polynomial_operator("e", 2, 1, p);
  State s = make_state(Matrix::Identity(3, 3), Vector::Zero(3), 0.0, Vector::Zero(3), 0.0);
  s.a = SymMatrix((Matrix(3, 3) << 1, 0.7, 0, 0.7, 1, 0, 0, 0, 1).finished());
  s.x << 2.0, -1.0, 0.5;
  s.p << 0, 0, 4.0;
  s.u = 3.0;
  s.t = 0.25;
  double const expect = 2.0 + 3.0 * (-0.5) - 4.0 + 0.7 + 2.0 - 0.25;
  EXPECT_NEAR(f(s), expect, 1e-14);
  EXPECT_NEAR(polynomial_operator("b", 11, 0, parse_polynomial("A10_3")).jet(zero_state(11)).Fa(10, 3), 0.5,
              1e-15);
}

TEST(Expression, Errors)
{
  EXPECT_THROW(parse_polynomial("x0 +"), ExpressionError);
  EXPECT_THROW(parse_polynomial("x0 / x1"), ExpressionError);
  EXPECT_THROW(parse_polynomial("x0 / 0"), ExpressionError);
  EXPECT_THROW(parse_polynomial("q1"), ExpressionError);
  EXPECT_THROW(parse_polynomial("A1"), ExpressionError);
  EXPECT_THROW(parse_polynomial("(x0"), ExpressionError);
  try
  {
    parse_polynomial("x0 + $");
    FAIL();
  }
  catch (ExpressionError const &e)
  {
    EXPECT_EQ(e.position(), 5u);
  }
}

TEST(Manufactured, RankTemplates)
{
  Grid const g = cube(3, 21);
  auto const r1 = manufactured(rank_template(2, 1, 1), g);
  auto const w = partial_hessian(r1.field);
  double const thr = default_threshold(r1.field);
  auto const mr = minimal_rank(w, thr);
  EXPECT_EQ(mr.l, 1);
  for (int r : mr.ranks)
    EXPECT_EQ(r, 1);
  auto const mr_exact = minimal_rank(r1.exact, thr);
  EXPECT_EQ(mr_exact.l, 1);

  auto const full = manufactured(full_template(2, 1), g);
  EXPECT_EQ(minimal_rank(partial_hessian(full.field), thr).l, 2);

  auto const shifted = eps_family(rank_template(2, 1, 1), 0.1);
  EXPECT_EQ(shifted.declared_rank(), 2);
  auto const lam = spectrum_of(SymMatrix(shifted.hessian(Vector::Constant(3, 0.3)).matrix().topLeftCorner(2, 2)));
  EXPECT_NEAR(lam[0], 0.1, 1e-14);
  EXPECT_NEAR(lam[1], 1.1, 1e-14);

  EXPECT_THROW(rank_template(2, 1, 3), PreconditionError);
  EXPECT_THROW(rank_template(2, 1, 1, Matrix::Constant(1, 2, 1.0)), PreconditionError);
  EXPECT_THROW(rank_template(2, 1, 1, std::nullopt, Polynomial::X(0)), PreconditionError);
}

TEST(Manufactured, RotatedRankTemplate)
{
  std::mt19937_64 rng(61);
  Matrix const q = oracle::random_orthogonal(3, rng);
  auto const spec = rank_template(3, 0, 2, q.topRows(2));
  Grid const g = cube(3, 11);
  auto const mf = manufactured(spec, g);
  for (auto const &m : mf.exact.matrices())
  {
    auto const lam = spectrum_of(m);
    EXPECT_NEAR(lam[0], 0.0, 1e-13);
    EXPECT_NEAR(lam[1], 1.0, 1e-13);
    EXPECT_NEAR(lam[2], 1.0, 1e-13);
  }
  EXPECT_EQ(minimal_rank(partial_hessian(mf.field), default_threshold(mf.field)).l, 2);
}

TEST(ManufacturedProperty, DeclaredDerivativesMatchDifferences)
{
  std::mt19937_64 rng(62);
  auto const spec = ManufacturedSpec("custom", 2, 1, parse_polynomial("x0^4/12 + x0*x1^2 + x1^2*x2^2 + x2^3 - t*x0^2"), 2);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  for (int trial = 0; trial < 20; ++trial)
  {
    Vector x(3);
    x << d(rng), d(rng), d(rng);
    double const t = d(rng);
    auto fn = [&](Vector const &y) { return spec.value(y, t); };
    Vector const g = spec.gradient(x, t);
    Matrix const h = spec.hessian(x, t).matrix();
    EXPECT_LE((g - central_gradient(fn, x)).cwiseAbs().maxCoeff(), 1e-7);
    EXPECT_LE((h - central_hessian(fn, x)).cwiseAbs().maxCoeff(), 1e-5);
  }
  // Stencil error of the discrete Hessian is second order.
  double prev = 0.0;
  for (int nodes : {9, 17, 33})
  {
    auto const mf = manufactured(spec, cube(3, nodes));
    auto const w = partial_hessian(mf.field);
    double e = 0.0;
    for (std::size_t k = 0; k < w.size(); ++k)
      e = std::max(e, (w.matrices()[k].matrix() - mf.exact.matrices()[k].matrix()).cwiseAbs().maxCoeff());
    if (prev > 0.0)
    {
      EXPECT_NEAR(std::log2(prev / e), 2.0, 0.2);
    }
    prev = e;
  }
}

TEST(SolveElliptic, QuadraticTruthsAreExact)
{
  Grid const g = cube(3, 9);
  ManufacturedSpec const a("quad_a", 2, 1, parse_polynomial("x0^2/2 + x2^2"), 1);
  auto const ra = solve_elliptic({laplace_operator(2, 1, Polynomial(3.0)), a.boundary()}, g);
  EXPECT_TRUE(ra.report.converged);
  EXPECT_LE(max_error(ra.field, a), 1e-10);
  EXPECT_LE(ra.report.residual, ra.report.tolerance);
  EXPECT_EQ(ra.report.linear_solver, "cg+ichol");

  ManufacturedSpec const b("quad_b", 2, 1, parse_polynomial("(x0 + x1)^2/2 + x2^2"), 1);
  auto const rb = solve_elliptic({laplace_operator(2, 1, Polynomial(4.0)), b.boundary()}, g);
  EXPECT_LE(max_error(rb.field, b), 1e-9);
}

TEST(SolveElliptic, SecondOrderConvergence)
{
  ManufacturedSpec const truth("quartic", 2, 1, parse_polynomial("x0^4/12 + x1^2"), 1);
  auto const op = laplace_operator(2, 1, parse_polynomial("x0^2 + 2"));
  std::vector<double> errs;
  for (int nodes : {9, 17, 33})
  {
    auto const r = solve_elliptic({op, truth.boundary(), true}, cube(3, nodes));
    EXPECT_TRUE(r.report.positivity_ok);
    EXPECT_GE(r.report.min_f, 2.0 - 1e-6);
    errs.push_back(max_error(r.field, truth));
  }
  EXPECT_NEAR(std::log2(errs[0] / errs[1]), 2.0, 0.2);
  EXPECT_NEAR(std::log2(errs[1] / errs[2]), 2.0, 0.2);
}

TEST(SolveElliptic, DiscreteMaximumPrinciple)
{
  auto const op = laplace_operator(2, 0, parse_polynomial("1 + x0^2 + x1^2"));
  auto const r = solve_elliptic({op, [](Vector const &, double) { return 0.0; }}, cube(2, 17));
  for (double v : r.field.values())
    EXPECT_LE(v, 1e-12);
}

TEST(SolveElliptic, QuasilinearNewton)
{
  // (1 + p0^2) u_00 + u_11 = f with u* = x0^2/2 + x1^2.
  using P = Polynomial;
  std::vector<std::vector<Polynomial>> coef{{P(1.0) + P::P(0) * P::P(0), P()}, {P(), P(1.0)}};
  ManufacturedSpec const truth("ql", 1, 1, parse_polynomial("x0^2/2 + x1^2"), 1);
  // u0 = x0, u00 = 1, u11 = 2: f = 1 + x0^2 + 2.
  auto const op = quasilinear_operator(1, 1, coef, parse_polynomial("3 + x0^2"));
  auto const r = solve_elliptic({op, truth.boundary(), true}, cube(2, 17));
  EXPECT_TRUE(r.report.converged);
  EXPECT_GT(r.report.iterations, 1);
  EXPECT_LE(max_error(r.field, truth), 1e-9);
  EXPECT_FALSE(r.report.linear_solver.empty());
}

TEST(SolveElliptic, Errors)
{
  Grid const g = cube(2, 9);
  auto zero = [](Vector const &, double) { return 0.0; };
  auto const neg = polynomial_operator("neg", 1, 1, -1.0 * trace_polynomial(2) - 1.0);
  EXPECT_THROW(solve_elliptic({neg, zero}, g), NumericalError);

  SolverOptions opt;
  opt.max_iter = 0;
  try
  {
    solve_elliptic({laplace_operator(1, 1, Polynomial(1.0)), zero}, g, opt);
    FAIL();
  }
  catch (DivergenceError const &e)
  {
    EXPECT_NEAR(e.residual(), 1.0, 1e-12);
  }
  EXPECT_THROW(solve_elliptic({laplace_operator(2, 1), zero}, g), PreconditionError);
  EXPECT_THROW(solve_elliptic({laplace_operator(1, 1), zero}, cube(2, 4)), PreconditionError);

  auto const r = solve_elliptic({laplace_operator(1, 1, Polynomial(-1.0)), zero, true}, g);
  EXPECT_FALSE(r.report.positivity_ok);
  EXPECT_NEAR(r.report.min_f, -1.0, 1e-9);
}

TEST(StepParabolic, QuadraticDrift)
{
  Grid const g = cube(3, 9);
  ManufacturedSpec const truth("drift", 2, 1, parse_polynomial("(x0^2 + x1^2)/2 + 2*t"), 2);
  auto const u0 = manufactured(truth, g, 0.0).field;
  auto const res = step_parabolic({laplace_operator(2, 1), u0, truth.boundary()}, 0.05, 4);
  ASSERT_EQ(res.snapshots.size(), 5u);
  for (std::size_t k = 0; k < res.snapshots.size(); ++k)
  {
    double const t = 0.05 * static_cast<double>(k);
    EXPECT_NEAR(*res.snapshots[k].time(), t, 1e-15);
    EXPECT_LE(max_error(res.snapshots[k], truth, t), 1e-9);
  }
  for (auto const &s : res.steps)
    EXPECT_LE(s.residual, 1e-9);
}

TEST(StepParabolic, RankOnePreserved)
{
  Grid const g = cube(3, 9);
  ManufacturedSpec const truth("rank1_heat", 2, 1, parse_polynomial("x0^2/2 + t"), 1);
  auto const res = step_parabolic({laplace_operator(2, 1), manufactured(truth, g).field, truth.boundary()}, 0.1, 3);
  for (auto const &snap : res.snapshots)
  {
    auto const w = partial_hessian(snap);
    for (auto const &m : w.matrices())
    {
      EXPECT_NEAR(m(0, 0), 1.0, 1e-8);
      EXPECT_NEAR(m(1, 1), 0.0, 1e-8);
      EXPECT_NEAR(m(0, 1), 0.0, 1e-8);
    }
  }
}

TEST(StepParabolic, FourierDecay)
{
  // u0 = -sin(pi x) on [0, 1] is convex; each implicit step multiplies the
  // mode by 1 / (1 + dt mu), mu = 4 sin^2(pi h / 2) / h^2.
  int const nodes = 33;
  Grid const g({Axis::span(0.0, 1.0, nodes)});
  double const h = g.spacing(0);
  auto const u0 = SolutionField::sample(g, 1, [](Vector const &x) { return -std::sin(std::numbers::pi * x(0)); });
  double const dt = h * h;
  int const steps = 20;
  auto const res = step_parabolic({laplace_operator(1, 0), u0, [](Vector const &, double) { return 0.0; }}, dt, steps);
  std::int64_t const mid = (nodes - 1) / 2;
  double const amp0 = -res.snapshots.front()[mid], amp = -res.snapshots.back()[mid];
  double const mu = 4.0 * std::pow(std::sin(std::numbers::pi * h / 2.0), 2) / (h * h);
  EXPECT_NEAR(amp / amp0, std::pow(1.0 + dt * mu, -steps), 1e-8);
  double const rate = -std::log(amp / amp0) / (steps * dt);
  EXPECT_NEAR(rate / (std::numbers::pi * std::numbers::pi), 1.0, 0.05);
}

TEST(StepParabolic, ConsistencyAsStepShrinks)
{
  Grid const g = cube(2, 9, 0.0, 1.0);
  ManufacturedSpec const truth("heat_quartic", 1, 1, parse_polynomial("x0^4/12 + x0^2*t + t^2 + x1^2/2 + t"), 1);
  auto const u0 = manufactured(truth, g).field;
  std::vector<double> ratios;
  for (double dt : {1e-2, 1e-3, 1e-4})
  {
    auto const res = step_parabolic({laplace_operator(1, 1), u0, truth.boundary()}, dt, 1);
    double d = 0.0;
    for (std::int64_t n = 0; n < g.size(); ++n)
      d = std::max(d, std::abs(res.snapshots[1][n] - u0[n]));
    ratios.push_back(d / dt);
  }
  EXPECT_TRUE(stable_within(ratios, 1.2, 0.0));
}

TEST(StepParabolic, Preconditions)
{
  Grid const g = cube(2, 9);
  auto zero = [](Vector const &, double) { return 0.0; };
  auto const convex = SolutionField::sample(g, 1, [](Vector const &x) { return x.squaredNorm(); });
  auto const concave = SolutionField::sample(g, 1, [](Vector const &x) { return -x.squaredNorm(); });
  auto const op = laplace_operator(1, 1);
  EXPECT_THROW(step_parabolic({op, convex, zero}, 0.0, 1), PreconditionError);
  EXPECT_THROW(step_parabolic({op, convex, zero}, 0.1, 0), PreconditionError);
  EXPECT_THROW(step_parabolic({op, concave, zero}, 0.1, 1), PreconditionError);
  EXPECT_THROW(step_parabolic({op, convex, zero, 0.0, 0.15}, 0.1, 2), PreconditionError);
}
