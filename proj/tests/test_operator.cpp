#include "rankgauge/operator.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace rankgauge;

namespace
{
State random_state(int n, std::mt19937_64 &rng, double spread = 1.0)
{
  std::uniform_real_distribution<double> d(-spread, spread);
  Matrix a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      a(i, j) = d(rng);
  Vector p(n), x(n);
  for (int i = 0; i < n; ++i)
  {
    p(i) = d(rng);
    x(i) = d(rng);
  }
  return make_state(a + 3.0 * Matrix::Identity(n, n), p, d(rng), x, 0.3);
}

// Written out by hand, independent of the polynomial machinery.
double sample_value(State const &s)
{
  Matrix const &A = s.a.matrix();
  return A(0, 0) * A(1, 1) - A(0, 1) * A(0, 1) + A(2, 2) + 0.5 * A(0, 2) * s.p(2) - s.u * s.u +
         s.x(0) * s.x(0) * s.x(2) + s.p(1) * s.u + std::pow(s.x(1), 3) * s.t;
}

Polynomial sample_polynomial()
{
  using P = Polynomial;
  return P::A(0, 0) * P::A(1, 1) - P::A(0, 1) * P::A(1, 0) + P::A(2, 2) + 0.5 * (P::A(2, 0) * P::P(2)) -
         P::U() * P::U() + P::var(VarKind::x, 0, 0, 2) * P::X(2) + P::P(1) * P::U() +
         P::var(VarKind::x, 1, 0, 3) * P::T();
}
} // namespace

TEST(Layout, RoundTrip)
{
  std::mt19937_64 rng(31);
  StateLayout const lay(3);
  EXPECT_EQ(lay.size(), 6 + 6 + 1);
  auto const s = random_state(3, rng);
  auto const back = lay.unpack(lay.pack(s), s.t);
  EXPECT_LE((back.a.matrix() - s.a.matrix()).norm(), 1e-14);
  EXPECT_EQ(back.u, s.u);
  EXPECT_EQ(lay.pair_of(lay.a(1, 2)), std::make_pair(1, 2));
  EXPECT_DOUBLE_EQ(lay.scale(lay.a(0, 1)), std::sqrt(2.0));
  EXPECT_DOUBLE_EQ(lay.scale(lay.a(1, 1)), 1.0);
}

TEST(Operator, TraceAccessors)
{
  auto const f = laplace_operator(2, 1);
  auto const j = f.jet(zero_state(3));
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      EXPECT_DOUBLE_EQ(j.Fa(a, b), a == b ? 1.0 : 0.0);
  EXPECT_EQ(j.hess.norm(), 0.0);
  EXPECT_TRUE(is_elliptic(f, zero_state(3)));
}

TEST(Operator, OffDiagonalEntryUsesSymmetricConvention)
{
  auto const f = polynomial_operator("a01", 2, 0, Polynomial::A(0, 1));
  auto const j = f.jet(zero_state(2));
  EXPECT_DOUBLE_EQ(j.Fa(0, 1), 0.5);
  EXPECT_DOUBLE_EQ(j.Fa(1, 0), 0.5);
  // dF along the symmetric perturbation E_01 = E_10 = 1 is sum_ab F^{ab} E_ab.
  State s = zero_state(2);
  Matrix e = Matrix::Zero(2, 2);
  e(0, 1) = e(1, 0) = 1e-3;
  s.a = SymMatrix(e);
  EXPECT_NEAR((f(s) - f(zero_state(2))) / 1e-3, j.Fa(0, 1) + j.Fa(1, 0), 1e-12);
}

TEST(Operator, SingleCurvatureTerm)
{
  auto const f = laplace_operator(1, 1, Polynomial::U() * Polynomial::U());
  auto const j = f.jet(zero_state(2));
  EXPECT_DOUBLE_EQ(j.Fuu(), -2.0);
  EXPECT_DOUBLE_EQ(j.Fa(0, 0), 1.0);
}

TEST(Operator, PolynomialMatchesHandWrittenValue)
{
  std::mt19937_64 rng(32);
  auto const f = polynomial_operator("sample", 2, 1, sample_polynomial());
  for (int trial = 0; trial < 20; ++trial)
  {
    auto const s = random_state(3, rng);
    EXPECT_NEAR(f(s), sample_value(s), 1e-12 * (1.0 + std::abs(sample_value(s))));
    EXPECT_NEAR(f.jet(s).value, f(s), 1e-12 * (1.0 + std::abs(f(s))));
  }
}

TEST(OperatorProperty, FiniteDifferenceSynthesisMatchesAnalytic)
{
  std::mt19937_64 rng(33);
  auto const exact = polynomial_operator("sample", 2, 1, sample_polynomial());
  auto const fd = lambda_operator("sample_fd", 2, 1, sample_value);
  EXPECT_TRUE(exact.analytic());
  EXPECT_FALSE(fd.analytic());
  for (int trial = 0; trial < 20; ++trial)
  {
    auto const s = random_state(3, rng);
    auto const a = exact.jet(s), b = fd.jet(s);
    double const gs = 1.0 + a.grad.cwiseAbs().maxCoeff();
    double const hs = 1.0 + a.hess.cwiseAbs().maxCoeff();
    EXPECT_LE((a.grad - b.grad).cwiseAbs().maxCoeff(), 1e-6 * gs);
    EXPECT_LE((a.hess - b.hess).cwiseAbs().maxCoeff(), 1e-6 * hs);
  }
}

TEST(OperatorProperty, HessianSymmetric)
{
  std::mt19937_64 rng(34);
  auto const f = polynomial_operator("sample", 2, 1, sample_polynomial());
  auto const j = f.jet(random_state(3, rng));
  EXPECT_EQ((j.hess - j.hess.transpose()).norm(), 0.0);
  EXPECT_DOUBLE_EQ(j.Faa(0, 0, 1, 1), j.Faa(1, 1, 0, 0));
}

TEST(Operator, QuadraticMatchesFiniteDifferences)
{
  std::mt19937_64 rng(35);
  StateLayout const lay(2);
  Matrix h = Matrix::Random(lay.size(), lay.size());
  h = SymMatrix(h).matrix();
  Vector const g = Vector::Random(lay.size());
  auto const q = quadratic_operator("q", 1, 1, 0.5, g, h);
  auto const fd = lambda_operator("q_fd", 1, 1, [&](State const &s) { return q(s); });
  auto const s = random_state(2, rng);
  EXPECT_LE((q.jet(s).hess - fd.jet(s).hess).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LE((q.jet(s).grad - fd.jet(s).grad).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Operator, Validation)
{
  EXPECT_THROW(laplace_operator(1, 1, Polynomial::A(0, 0)), PreconditionError);
  std::vector<std::vector<Polynomial>> coef{{Polynomial(1.0), Polynomial()}, {Polynomial(), Polynomial::U()}};
  EXPECT_THROW(quasilinear_operator(1, 1, coef, Polynomial()), PreconditionError);
  coef[1][1] = Polynomial(1.0) + Polynomial::P(0) * Polynomial::P(0) + Polynomial::X(1);
  auto const ok = quasilinear_operator(1, 1, coef, Polynomial());
  EXPECT_DOUBLE_EQ(ok.jet(zero_state(2)).Fa(1, 1), 1.0);
  EXPECT_THROW(quasilinear_operator(1, 1, {{Polynomial(1.0)}}, Polynomial()), PreconditionError);
  EXPECT_THROW(ok(zero_state(3)), PreconditionError);
  EXPECT_THROW(polynomial_operator("bad", 1, 0, Polynomial::X(4)).jet(zero_state(1)), PreconditionError);
  EXPECT_FALSE(is_elliptic(polynomial_operator("neg", 1, 0, -1.0 * Polynomial::A(0, 0)), zero_state(1)));
}

TEST(Compose, ChainRule)
{
  std::mt19937_64 rng(36);
  auto const f1 = laplace_operator(2, 1, Polynomial::U() * Polynomial::X(0));
  auto const f2 = polynomial_operator("sample", 2, 1, sample_polynomial());
  auto const s = random_state(3, rng);

  auto const sum = compose(outer_sum(2), {f1, f2});
  auto const js = sum.jet(s), j1 = f1.jet(s), j2 = f2.jet(s);
  EXPECT_NEAR(js.value, j1.value + j2.value, 1e-12);
  EXPECT_LE((js.hess - j1.hess - j2.hess).norm(), 1e-12);

  auto const lse = compose(outer_log_sum_exp(2), {f1, f2});
  auto const fd = lambda_operator("lse_fd", 2, 1, [&](State const &st) { return lse(st); });
  auto const a = lse.jet(s), b = fd.jet(s);
  EXPECT_LE((a.hess - b.hess).cwiseAbs().maxCoeff(), 1e-6 * (1.0 + a.hess.cwiseAbs().maxCoeff()));
}

TEST(Compose, RejectsBadOuterFunctions)
{
  auto const f = laplace_operator(1, 0);
  auto const sq = compose(outer_power(2.0), {f});
  State s = zero_state(1);
  EXPECT_THROW(sq.jet(s), PreconditionError); // tr(A) = 0 is not positive
  s.a = SymMatrix::identity(1);
  EXPECT_DOUBLE_EQ(sq(s), 1.0);

  OuterFunction decreasing{"neg", 1, [](Vector const &y) {
                             return OuterFunction::Jet{-y(0), Vector::Constant(1, -1.0), Matrix::Zero(1, 1)};
                           }};
  EXPECT_THROW(compose(decreasing, {f}).jet(s), PreconditionError);
  OuterFunction concave{"concave", 1, [](Vector const &y) {
                          return OuterFunction::Jet{y(0), Vector::Constant(1, 1.0), Matrix::Constant(1, 1, -1.0)};
                        }};
  EXPECT_THROW(compose(concave, {f}).jet(s), PreconditionError);
  EXPECT_THROW(compose(outer_sum(2), {f}), PreconditionError);
  EXPECT_THROW(compose(outer_sum(2), {f, laplace_operator(2, 0)}), PreconditionError);
}
