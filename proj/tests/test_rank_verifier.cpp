#include "rankgauge/rank_verifier.hpp"

#include "instances.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <numbers>
#include <random>
#include <sstream>

using namespace rankgauge;
using instance::cube;
using instance::nearest_node;

namespace
{
/// W-level copy of a field with one matrix entry changed.
PartialHessianField with_entry_shift(PartialHessianField const &w, std::int64_t node, int i, int j, double by)
{
  auto mats = w.matrices();
  for (std::size_t k = 0; k < w.nodes().size(); ++k)
    if (w.nodes()[k] == node)
    {
      Matrix m = mats[k].matrix();
      m(i, j) += by;
      if (i != j)
        m(j, i) += by;
      mats[k] = SymMatrix(m);
    }
  return PartialHessianField(w.grid(), w.nprime(), w.nodes(), mats);
}
} // namespace

// --- verify_constant_rank ---------------------------------------------------

TEST(ConstantRank, RankOneTemplate)
{
  auto const mf = manufactured(rank_template(2, 1, 1), cube(3, 9, -0.5, 0.5));
  auto const r = verify_constant_rank(mf.field);
  EXPECT_TRUE(r.constant_rank);
  EXPECT_EQ(r.l_min, 1);
  EXPECT_EQ(r.histogram.size(), 1u);
  EXPECT_TRUE(r.offending.empty());
  EXPECT_EQ(r.verdict(), Verdict::pass);
}

TEST(ConstantRank, SolvedLaplaceQuadratic)
{
  // Laplacian u = 3 with data x1^2/2 + x3^2 recovers the quadratic.
  Polynomial const x1 = Polynomial::X(0), x3 = Polynomial::X(2);
  ManufacturedSpec truth("q", 2, 1, 0.5 * (x1 * x1) + x3 * x3, 1);
  EllipticProblem prob{laplace_operator(2, 1, Polynomial(3.0)), truth.boundary()};
  auto const sol = solve_elliptic(prob, cube(3, 9, -0.5, 0.5));
  auto const r = verify_constant_rank(sol.field);
  EXPECT_TRUE(r.constant_rank);
  EXPECT_EQ(r.l_min, 1);
}

TEST(ConstantRank, InjectedDefectIsReported)
{
  // u = x2^2/2: u11 vanishes, so a bump of 10 x threshold in u11 raises the rank.
  Matrix v(1, 2);
  v << 0.0, 1.0;
  auto const mf = manufactured(rank_template(2, 1, 1, v), cube(3, 9, -0.5, 0.5));
  double const thr = default_threshold(mf.field);
  auto const w = partial_hessian(mf.field);
  std::int64_t const bad = w.nodes()[w.size() / 3];
  auto const r = verify_constant_rank(with_entry_shift(w, bad, 0, 0, 10.0 * thr), thr);
  EXPECT_FALSE(r.constant_rank);
  EXPECT_EQ(r.l_min, 1);
  ASSERT_EQ(r.offending.size(), 1u);
  EXPECT_EQ(r.offending[0], bad);
  EXPECT_EQ(r.histogram.at(2), 1);
}

TEST(ConstantRank, RefusesNonConvexField)
{
  Polynomial const x1 = Polynomial::X(0);
  ManufacturedSpec s("concave", 2, 1, -0.5 * (x1 * x1), 0);
  auto const mf = manufactured(s, cube(3, 9, -0.5, 0.5));
  EXPECT_THROW(verify_constant_rank(mf.field), HypothesisError);
}

TEST(ConstantRankProperty, ManufacturedTemplates)
{
  std::mt19937_64 rng(11);
  for (int np = 1; np <= 3; ++np)
    for (int nd = 0; nd <= 1; ++nd)
      for (int l = 0; l <= np; ++l)
      {
        if (np + nd < 2)
          continue;
        Matrix const q = oracle::random_orthogonal(np, rng);
        auto const spec = rank_template(np, nd, l, Matrix(q.topRows(l)));
        auto const mf = manufactured(spec, cube(np + nd, 7, -0.5, 0.5));
        auto const r = verify_constant_rank(mf.field);
        EXPECT_TRUE(r.constant_rank) << np << nd << l;
        EXPECT_EQ(r.l_min, l) << np << nd << l;
      }
}

TEST(ConstantRank, CsvHasOneRowPerInteriorNode)
{
  auto const mf = manufactured(rank_template(2, 1, 1), cube(3, 7, -0.5, 0.5));
  auto const r = verify_constant_rank(mf.field);
  std::ostringstream os;
  r.write_csv(os);
  std::string const s = os.str();
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 1 + 5 * 5 * 5);
  EXPECT_EQ(s.substr(0, s.find('\n')), "node,x0,x1,x2,rank");
}

// --- phi_field ----------------------------------------------------------------

TEST(PhiField, VanishesOnRankTemplate)
{
  auto const mf = manufactured(rank_template(3, 1, 1), cube(4, 7, -0.5, 0.5));
  auto const pf = phi_field(mf.field, 1, 0.0);
  for (double v : pf.phi)
    EXPECT_NEAR(v, 0.0, 1e-8);
  EXPECT_FALSE(pf.fitted_c.has_value());
}

TEST(PhiField, FittedConstantStableAcrossEps)
{
  auto const mf = manufactured(rank_template(2, 1, 1), cube(3, 9, -0.5, 0.5));
  std::vector<double> cs;
  for (double eps : {1e-2, 1e-3, 1e-4})
  {
    auto const pf = phi_field(mf.field, 1, eps);
    ASSERT_TRUE(pf.fitted_c.has_value());
    EXPECT_GE(pf.min_phi, *pf.fitted_c * eps * (1 - 1e-12));
    // W_eps = diag(1 + eps, eps): phi = eps (1 + eps).
    EXPECT_NEAR(*pf.fitted_c, 1.0 + eps, 1e-8);
    cs.push_back(*pf.fitted_c);
  }
  EXPECT_LE(relative_spread(cs), 0.2);
}

TEST(PhiField, FullRankBoundedBelow)
{
  auto const mf = manufactured(full_template(2, 1), cube(3, 7, -0.5, 0.5));
  auto const pf = phi_field(mf.field, 1, 0.0);
  for (std::size_t k = 0; k < pf.nodes.size(); ++k)
    EXPECT_GE(pf.phi[k], sigma_of_matrix(mf.exact.matrices()[k], 2) - 1e-10);
  EXPECT_GT(pf.min_phi, 0.9);
}

TEST(PhiFieldProperty, NonNegativeOnPartialConvexFields)
{
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> d(0.0, 1.0);
  for (int trial = 0; trial < 10; ++trial)
  {
    // u = sum_r c_r (v_r . x')^2 / 2 + x'^T-free cubic in x'': convex in x'.
    int const np = 3;
    Matrix const q = oracle::random_orthogonal(np, rng);
    Polynomial u;
    for (int r = 0; r < np; ++r)
    {
      Polynomial lin;
      for (int i = 0; i < np; ++i)
        lin = lin + q(r, i) * Polynomial::X(i);
      double const c = r == 0 ? 0.0 : d(rng);
      u = u + (0.5 * c) * (lin * lin) * (1.0 + 0.2 * Polynomial::X(3) * Polynomial::X(3));
    }
    auto const mf = manufactured(ManufacturedSpec("rnd", np, 1, u, 2), cube(4, 6, -0.5, 0.5));
    for (int l = 0; l < np; ++l)
    {
      auto const pf = phi_field(mf.field, l, 1e-3);
      for (double v : pf.phi)
        EXPECT_GE(v, -1e-10);
    }
  }
}

// --- identity residual ----------------------------------------------------------

TEST(Identity, TrivialOnQuadraticTemplate)
{
  auto const mf = manufactured(rank_template(2, 1, 1), cube(3, 9, -0.5, 0.5));
  auto const op = laplace_operator(2, 1);
  for (auto n : mf.field.grid().interior_nodes(2))
  {
    auto const r = identity_3_5_residual(mf.field, op, n, 1e-3);
    EXPECT_LE(r.defect, 1e-8);
    EXPECT_LE(r.grad_bad, 1e-8);
  }
}

TEST(Identity, MatchesClosedFormOnDesignedInstance)
{
  instance::IdentityInstance inst;
  auto const mf = manufactured(inst.spec(), cube(3, 17, -0.5, 0.5));
  Grid const &g = mf.field.grid();
  for (double eps : {1e-2, 1e-4})
    for (auto n : g.interior_nodes(2))
    {
      if (n % 37 != 0)
        continue;
      Vector const x = g.coordinates(n);
      auto const r = identity_3_5_residual(mf.field, inst.op(), n, eps, 1);
      ASSERT_TRUE(r.applicable);
      double const scale = 1.0 + std::abs(inst.lhs(x, eps));
      // The frame only matches when the bad eigenvalue is the x3 one.
      if (2.0 * inst.delta * x(2) * x(2) >= 1.0 + inst.gamma * inst.y1(x))
        continue;
      EXPECT_NEAR(r.lhs, inst.lhs(x, eps), 1e-9 * scale);
      EXPECT_NEAR(r.groups[0], inst.g1(x, eps), 1e-9 * scale);
      EXPECT_NEAR(r.groups[1], 0.0, 1e-9 * scale);
      EXPECT_NEAR(r.groups[2], 0.0, 1e-9 * scale);
      EXPECT_NEAR(r.groups[3], 0.0, 1e-9 * scale);
      EXPECT_NEAR(r.defect, inst.defect(x), 1e-9 * scale);
      EXPECT_NEAR(r.budget(), inst.budget(x, eps), 1e-9 * scale);
    }
}

TEST(Identity, FittedKStableUnderRefinementAndEps)
{
  instance::IdentityInstance inst;
  std::vector<double> by_grid, by_eps;
  for (int nodes : {17, 33})
  {
    auto const mf = manufactured(inst.spec(), cube(3, nodes, -0.5, 0.5));
    VerifyOptions opt;
    opt.center = nearest_node(mf.field.grid(), Vector::Zero(3));
    for (double eps : {1e-2, 1e-3, 1e-4})
    {
      auto const fit = identity_3_5_fit(mf.field, inst.op(), eps, std::nullopt, opt);
      ASSERT_TRUE(fit.finite);
      EXPECT_EQ(fit.l, 1);
      EXPECT_GT(fit.k, 0.0);
      for (auto const &r : fit.residuals)
        EXPECT_LE(r.defect, fit.k * r.budget() * (1 + 1e-12) + fit.tolerance);
      if (nodes == 17)
        by_eps.push_back(fit.k);
      if (eps == 1e-3)
        by_grid.push_back(fit.k);
    }
  }
  EXPECT_LE(relative_spread(by_grid), 0.5);
  EXPECT_TRUE(stable_within(by_eps, 2.0, 0.0));
}

TEST(IdentityProperty, RotationConsistency)
{
  // Quarter turn: the rotated field at the permuted node reproduces the
  // residual exactly; a generic angle matches the closed form.
  instance::IdentityInstance base, quarter, generic;
  quarter.theta = std::numbers::pi / 2;
  generic.theta = 0.4;
  auto const f0 = manufactured(base.spec(), cube(3, 17, -0.5, 0.5)).field;
  auto const f1 = manufactured(quarter.spec(), cube(3, 17, -0.5, 0.5)).field;
  auto const f2 = manufactured(generic.spec(), cube(3, 17, -0.5, 0.5)).field;
  Grid const &g = f0.grid();
  for (auto n : g.interior_nodes(2))
  {
    if (n % 29 != 0)
      continue;
    Vector const x = g.coordinates(n);
    if (2.0 * x(2) * x(2) >= 0.6)
      continue;
    // y = R(pi/2) x' maps node x to node (-x2, x1, x3) in the base frame.
    Vector xr = x;
    xr(0) = -x(1);
    xr(1) = x(0);
    auto const r0 = identity_3_5_residual(f0, base.op(), nearest_node(g, xr), 1e-3, 1);
    auto const r1 = identity_3_5_residual(f1, quarter.op(), n, 1e-3, 1);
    double const s = 1.0 + std::abs(r0.lhs);
    EXPECT_NEAR(r1.lhs, r0.lhs, 1e-8 * s);
    EXPECT_NEAR(r1.rhs, r0.rhs, 1e-8 * s);
    EXPECT_NEAR(r1.defect, r0.defect, 1e-8 * s);
    auto const r2 = identity_3_5_residual(f2, generic.op(), n, 1e-3, 1);
    EXPECT_NEAR(r2.defect, generic.defect(x), 1e-8 * (1.0 + std::abs(generic.lhs(x, 1e-3))));
  }
}

TEST(Identity, Preconditions)
{
  auto const mf = manufactured(rank_template(2, 1, 1), cube(3, 9, -0.5, 0.5));
  auto const op = laplace_operator(2, 1);
  std::int64_t const edge = mf.field.grid().interior_nodes(1).front();
  EXPECT_THROW(identity_3_5_residual(mf.field, op, edge, 1e-3), PreconditionError);
  auto const full = manufactured(full_template(2, 1), cube(3, 9, -0.5, 0.5));
  auto const r = identity_3_5_residual(full.field, op, full.field.grid().interior_nodes(2).front(), 1e-3);
  EXPECT_FALSE(r.applicable);
  EXPECT_THROW(identity_3_5_residual(mf.field, laplace_operator(3, 0), edge, 1e-3), PreconditionError);
}

// --- elliptic and parabolic inequalities -------------------------------------------

TEST(Inequality44, DesignedInstancePasses)
{
  instance::InequalityInstance inst;
  std::vector<double> cs;
  for (int nodes : {17, 33})
  {
    auto const mf = manufactured(inst.spec(), cube(3, nodes));
    double const h = mf.field.grid().spacing(0);
    for (double eps : {1e-2, 1e-3, 1e-4})
    {
      auto const led = inequality_4_4(mf.field, inst.op(), eps);
      ASSERT_TRUE(led.applicable);
      EXPECT_EQ(led.l, 1);
      EXPECT_TRUE(led.finite);
      EXPECT_EQ(led.verdict(), Verdict::pass);
      EXPECT_NEAR(led.c, instance::InequalityInstance::expected_c(h, eps), 1e-5);
      ASSERT_TRUE(led.structure.has_value());
      EXPECT_EQ(led.structure->verdict, Verdict::pass);
      for (auto const &r : led.rows)
        EXPECT_NEAR(r.lhs, 2.0 * eps, 1e-6 * eps + 1e-9);
      cs.push_back(led.c);
    }
  }
  EXPECT_TRUE(stable_within(cs, 2.0, 0.0));
}

TEST(Inequality44, FullRankNotApplicable)
{
  auto const mf = manufactured(full_template(2, 1), cube(3, 9, -0.5, 0.5));
  auto const led = inequality_4_4(mf.field, laplace_operator(2, 1), 1e-3);
  EXPECT_FALSE(led.applicable);
  EXPECT_EQ(led.verdict(), Verdict::pass);
  EXPECT_TRUE(led.to_json().contains("note"));
}

TEST(Inequality44, StructureVerdictRecordedForViolatingOperator)
{
  Polynomial const u = Polynomial::U();
  auto const op = laplace_operator(2, 1, u * u);
  auto const mf = manufactured(instance::InequalityInstance{}.spec(), cube(3, 9, -0.5, 0.5));
  auto const led = inequality_4_4(mf.field, op, 1e-3);
  ASSERT_TRUE(led.structure.has_value());
  EXPECT_EQ(led.structure->verdict, Verdict::fail);
  EXPECT_TRUE(led.to_json().contains("structure"));
}

TEST(Inequality51, ClosedFormSnapshots)
{
  instance::InequalityInstance inst{0.5};
  auto const spec = inst.spec();
  std::vector<SolutionField> snaps;
  for (double t : {0.0, 0.1, 0.2})
    snaps.push_back(manufactured(spec, cube(3, 17), t).field);
  auto const led = inequality_5_1(snaps, inst.op(), 1e-3);
  EXPECT_EQ(led.l, 1);
  EXPECT_TRUE(led.finite);
  EXPECT_NEAR(led.c, instance::InequalityInstance::expected_c(0.125, 1e-3), 1e-5);
  EXPECT_EQ(led.rows.size(), 2 * std::size_t(13 * 13 * 13));
}

TEST(Inequality51, SolverSnapshots)
{
  Grid const g = cube(3, 17);
  instance::InequalityInstance inst{0.5, g.spacing(0)};
  auto const spec = inst.spec();
  ParabolicProblem prob{inst.op(), manufactured(spec, g, 0.0).field, spec.boundary()};
  auto const res = step_parabolic(prob, 0.05, 3);
  for (std::size_t k = 0; k < res.snapshots.size(); ++k)
    for (std::int64_t n = 0; n < g.size(); n += 97)
      EXPECT_NEAR(res.snapshots[k][n], spec.value(g.coordinates(n), *res.snapshots[k].time()), 1e-10);
  std::vector<double> cs;
  for (double eps : {1e-2, 1e-3, 1e-4})
  {
    auto const led = inequality_5_1(res.snapshots, inst.op(), eps);
    EXPECT_TRUE(led.finite);
    EXPECT_NEAR(led.c, instance::InequalityInstance::expected_c(g.spacing(0), eps), 1e-4);
    cs.push_back(led.c);
  }
  EXPECT_TRUE(stable_within(cs, 2.0, 0.0));
}

TEST(Inequality51, Preconditions)
{
  auto const spec = instance::heat_rank_one();
  auto const a = manufactured(spec, cube(3, 7, -0.5, 0.5), 0.1).field;
  auto const b = manufactured(spec, cube(3, 7, -0.5, 0.5), 0.0).field;
  EXPECT_THROW(inequality_5_1({a}, laplace_operator(2, 1), 1e-3), PreconditionError);
  EXPECT_THROW(inequality_5_1({a, b}, laplace_operator(2, 1), 1e-3), PreconditionError);
}

// --- Laplace phi check ---------------------------------------------------------------

TEST(LaplacePhi, RankOneTemplateTrivial)
{
  auto const mf = manufactured(rank_template(2, 1, 1), cube(3, 9, -0.5, 0.5));
  auto const rep = laplace_phi_check(mf.field, Polynomial(2.0));
  EXPECT_EQ(rep.hypothesis.verdict, Verdict::pass);
  EXPECT_EQ(rep.verdict(), Verdict::pass);
  for (auto const &r : rep.ledger.rows)
  {
    EXPECT_NEAR(r.phi, 0.0, 1e-8);
    EXPECT_NEAR(r.lhs, 0.0, 1e-8);
  }
  EXPECT_NEAR(rep.max_residual, 0.0, 1e-10);
  EXPECT_NEAR(rep.min_f, 2.0, 1e-12);
}

TEST(LaplacePhi, PerturbedSolveStableAcrossGrids)
{
  // Rotated rank-one data s = (x1 + x2) / sqrt 2, u = s^2/2 - s^4/12 + x3^2/2,
  // f = 2 - s^2 (concave in x'). The discrete solution is only rank one up to
  // stencil error.
  double const c = 1.0 / std::sqrt(2.0);
  Polynomial const s = c * Polynomial::X(0) + c * Polynomial::X(1);
  Polynomial const x3 = Polynomial::X(2);
  ManufacturedSpec truth("rot", 2, 1, 0.5 * (s * s) - (1.0 / 12.0) * (s * s * s * s) + 0.5 * (x3 * x3), 1);
  Polynomial const f = Polynomial(2.0) - s * s;
  std::vector<double> c1;
  for (int nodes : {17, 33})
  {
    Grid const g = cube(3, nodes, -0.5, 0.5);
    auto const sol = solve_elliptic({laplace_operator(2, 1, f), truth.boundary()}, g);
    VerifyOptions opt;
    opt.center = nearest_node(g, Vector::Zero(3));
    auto const rep = laplace_phi_check(sol.field, f, 1, opt);
    EXPECT_EQ(rep.hypothesis.verdict, Verdict::pass);
    EXPECT_TRUE(rep.ledger.finite);
    EXPECT_GT(rep.min_f, 0.0);
    c1.push_back(rep.c1());
  }
  EXPECT_TRUE(stable_within(c1, 2.0, 1e-6)) << c1[0] << " " << c1[1];
}

TEST(LaplacePhi, ConvexInUMarksHypothesisFail)
{
  Polynomial const u = Polynomial::U();
  auto const mf = manufactured(rank_template(2, 1, 1), cube(3, 9, -0.5, 0.5));
  auto const rep = laplace_phi_check(mf.field, u * u + Polynomial(1.0));
  EXPECT_EQ(rep.hypothesis.verdict, Verdict::fail);
  EXPECT_TRUE(rep.informational());
  EXPECT_EQ(rep.verdict(), Verdict::fail);
  EXPECT_EQ(rep.to_json()["note"], "hypothesis FAIL; inequality outcome informational");
}

// --- parabolic rank trace ------------------------------------------------------------

TEST(ParabolicRank, HeatFlowPreservesRankOne)
{
  auto const spec = instance::heat_rank_one();
  Grid const g = cube(3, 9, -0.5, 0.5);
  ParabolicProblem prob{laplace_operator(2, 1), manufactured(spec, g, 0.0).field, spec.boundary()};
  auto const res = step_parabolic(prob, 0.05, 4);
  auto const tr = parabolic_rank_monotonicity(res.snapshots);
  ASSERT_EQ(tr.points.size(), 5u);
  for (auto const &[t, l] : tr.points)
    EXPECT_EQ(l, 1) << t;
  EXPECT_EQ(tr.verdict(), Verdict::pass);
}

TEST(ParabolicRank, ActivatedBumpRaisesRank)
{
  auto const spec = instance::heat_rank_rising();
  Grid const g = cube(3, 9, -0.5, 0.5);
  ParabolicProblem prob{laplace_operator(2, 1), manufactured(spec, g, 0.0).field, spec.boundary()};
  auto const res = step_parabolic(prob, 0.1, 6);
  auto const tr = parabolic_rank_monotonicity(res.snapshots);
  EXPECT_EQ(tr.points.front().second, 1);
  EXPECT_EQ(tr.points.back().second, 2);
  EXPECT_EQ(tr.verdict(), Verdict::pass);
}

TEST(ParabolicRank, SingleSnapshotAndOrdering)
{
  auto const spec = instance::heat_rank_one();
  auto const a = manufactured(spec, cube(3, 7, -0.5, 0.5), 0.0).field;
  auto const b = manufactured(spec, cube(3, 7, -0.5, 0.5), 0.5).field;
  EXPECT_EQ(parabolic_rank_monotonicity({a}).verdict(), Verdict::pass);
  EXPECT_THROW(parabolic_rank_monotonicity({b, a}), PreconditionError);
  EXPECT_THROW(parabolic_rank_monotonicity({SolutionField(a.grid(), 2, a.values())}), PreconditionError);
}

TEST(ParabolicRank, DecreaseIsAFail)
{
  auto const rising = instance::heat_rank_rising();
  auto const flat = instance::heat_rank_one();
  auto const a = manufactured(rising, cube(3, 7, -0.5, 0.5), 1.0).field;
  auto const b = manufactured(flat, cube(3, 7, -0.5, 0.5), 2.0).field;
  auto const tr = parabolic_rank_monotonicity({a, b});
  EXPECT_EQ(tr.verdict(), Verdict::fail);
}

// --- regularization ledger --------------------------------------------------------------

TEST(Regularization, TraceGivesNPrimeExactly)
{
  auto const mf = manufactured(instance::InequalityInstance{}.spec(), cube(3, 9, -0.5, 0.5));
  auto const led = regularization_ledger(mf.field, laplace_operator(2, 1), {1e-2, 1e-3, 1e-4});
  for (auto const &row : led.rows)
  {
    EXPECT_NEAR(row.ratio[0], 2.0, 1e-9);
    EXPECT_LE(row.ratio[1], 1e-6);
    EXPECT_LE(row.ratio[2], 1e-6);
  }
  EXPECT_EQ(led.verdict(), Verdict::pass);
}

TEST(Regularization, TraceMinusUClosedForm)
{
  auto const mf = manufactured(rank_template(2, 1, 1), cube(3, 9, -0.5, 0.5));
  Polynomial const f = Polynomial::U();
  auto const op = laplace_operator(2, 1, f);
  auto const led = regularization_ledger(mf.field, op, {1e-2, 1e-3, 1e-4});
  // R = 2 eps - eps |x'|^2 / 2 on the interior, |x'|^2 <= 2 (3/8)^2.
  double const xmax2 = 2.0 * 0.375 * 0.375;
  for (auto const &row : led.rows)
  {
    EXPECT_LE(row.ratio[0], 2.0 + 0.5 * xmax2 + 1e-9);
    EXPECT_NEAR(row.ratio[0], 2.0, 1e-9); // attained at x' = 0
    EXPECT_NEAR(row.ratio[2], 1.0, 1e-6); // second difference of |x'|^2/2
  }
  EXPECT_EQ(led.verdict(), Verdict::pass);
}

TEST(Regularization, SmoothOperatorStable)
{
  Polynomial const a00 = Polynomial::A(0, 0), a11 = Polynomial::A(1, 1), u = Polynomial::U();
  Polynomial const f = a00 + a11 + Polynomial::A(2, 2) + 0.1 * (a00 * a11) - 0.2 * (u * u) +
                       0.1 * (Polynomial::P(0) * Polynomial::P(0));
  auto const op = polynomial_operator("smooth", 2, 1, f);
  auto const mf = manufactured(instance::InequalityInstance{}.spec(), cube(3, 9, -0.5, 0.5));
  auto const led = regularization_ledger(mf.field, op, {1e-2, 1e-3, 1e-4});
  for (auto const &s : led.studies)
    EXPECT_TRUE(s.stable) << s.to_json().dump();
  EXPECT_EQ(led.verdict(), Verdict::pass);
}

TEST(FitStudy, NonFiniteIsUnstable)
{
  auto const s = fit_study("k", {"a", "b"}, {1.0, std::numeric_limits<double>::infinity()}, 2.0);
  EXPECT_FALSE(s.stable);
  EXPECT_TRUE(fit_study("k", {"a", "b"}, {1.0, 1.9}, 2.0).stable);
  EXPECT_FALSE(fit_study("k", {"a", "b"}, {1.0, 2.1}, 2.0).stable);
}
