#pragma once

// Structure-condition checkers. Every condition is reduced to the sign of a
// quadratic form in the test-vector space
//
//   X~ = (X, X_alpha, Y, Z),  X in S^N, X_alpha in R^{N''}, Y in R, Z in R^{N'}
//
// flattened as (flatten_scaled(X), X_alpha, Y, Z). With the sqrt(2) scaling the
// Euclidean product is the Frobenius pairing used by the constraint
// <X~, X*_F> = 0.

#include "rankgauge/core.hpp"
#include "rankgauge/linalg.hpp"
#include "rankgauge/operator.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace rankgauge
{

// --- Test vectors ---------------------------------------------------------

struct TestVector
{
  SymMatrix xmat; ///< N x N
  Vector xp;      ///< N''
  double y = 0.0;
  Vector z;       ///< N'

  static int flat_dim(int nprime, int ndouble)
  {
    int const n = nprime + ndouble;
    return static_cast<int>(sym_dim(n)) + ndouble + 1 + nprime;
  }

  Vector flatten() const
  {
    int const n = static_cast<int>(xmat.size());
    int const s = static_cast<int>(sym_dim(n));
    Vector v(s + xp.size() + 1 + z.size());
    v.head(s) = flatten_scaled(xmat.matrix());
    v.segment(s, xp.size()) = xp;
    v(s + xp.size()) = y;
    v.tail(z.size()) = z;
    return v;
  }

  static TestVector from_flat(Vector const &v, int nprime, int ndouble)
  {
    int const n = nprime + ndouble;
    int const s = static_cast<int>(sym_dim(n));
    if (v.size() != flat_dim(nprime, ndouble))
      throw PreconditionError("TestVector: flat vector has the wrong length");
    TestVector t;
    t.xmat = SymMatrix(unflatten_scaled(v.head(s), n));
    t.xp = v.segment(s, ndouble);
    t.y = v(s + ndouble);
    t.z = v.tail(nprime);
    return t;
  }
};

/// Symmetric matrix of a quadratic form on flattened test vectors.
struct GramForm
{
  int nprime = 1;
  int ndouble = 0;
  Matrix matrix;
  State basepoint;

  int dim() const { return static_cast<int>(matrix.rows()); }
  double value(TestVector const &x) const
  {
    Vector const v = x.flatten();
    return v.dot(matrix * v);
  }
};

// --- Reports --------------------------------------------------------------

/// Tolerance for PSD decisions on a form matrix.
inline double form_tolerance(Matrix const &m) { return 1e-8 * (1.0 + m.norm()); }

/// PASS at or above -tol, FAIL below -10 tol, INCONCLUSIVE in between.
inline Verdict classify(double min_eig, double tol)
{
  if (min_eig >= -tol)
    return Verdict::pass;
  if (min_eig >= -10.0 * tol)
    return Verdict::inconclusive;
  return Verdict::fail;
}

struct StructureReport
{
  std::string check;
  Verdict verdict = Verdict::pass;
  double worst_eigenvalue = 0.0;
  double tolerance = 0.0;
  std::optional<Vector> witness; ///< unit vector, see witness_space
  std::string witness_space;     ///< "test_vector", "projected", "G" or "c_p_u_x"
  double witness_value = 0.0;
  int basepoints = 0;
  int worst_basepoint = -1;
  std::vector<double> min_eigenvalues; ///< per basepoint / sample

  nlohmann::json to_json() const
  {
    nlohmann::json j;
    j["check"] = check;
    j["verdict"] = to_string(verdict);
    j["worst_eigenvalue"] = worst_eigenvalue;
    j["tolerance"] = tolerance;
    j["basepoints"] = basepoints;
    j["worst_basepoint"] = worst_basepoint;
    j["min_eigenvalues"] = min_eigenvalues;
    if (witness)
    {
      j["witness"] = std::vector<double>(witness->data(), witness->data() + witness->size());
      j["witness_space"] = witness_space;
      j["witness_value"] = witness_value;
    }
    j["note"] = "sampled check: PASS means no violation found at the tested points";
    return j;
  }
};

namespace detail
{

/// Folds one sampled form into a running report.
inline void accumulate(StructureReport &r, Matrix const &m, int index, std::string const &space,
                       Matrix const *basis = nullptr)
{
  double const tol = form_tolerance(m);
  auto eig = jacobi_eigen(m);
  double const lmin = m.rows() ? eig.values(0) : 0.0;
  r.min_eigenvalues.push_back(lmin);
  Verdict const v = classify(lmin, tol);
  bool const worse = r.worst_basepoint < 0 || lmin < r.worst_eigenvalue;
  if (worse)
  {
    r.worst_eigenvalue = lmin;
    r.tolerance = tol;
    r.worst_basepoint = index;
    if (v != Verdict::pass && m.rows())
    {
      Vector w = eig.vectors.col(0);
      r.witness_value = w.dot(m * w);
      r.witness = basis ? Vector(*basis * w) : w;
      r.witness_space = space;
    }
  }
  r.verdict = combine(r.verdict, v);
  ++r.basepoints;
  if (r.verdict == Verdict::pass)
    r.witness.reset();
}

inline Matrix block_inverse_checked(Matrix const &a, char const *what)
{
  double const lmin = min_eigenvalue(a);
  if (!(lmin > 1e-12 * (1.0 + a.norm())))
    throw PreconditionError(std::string(what) + ": leading block is not positive definite");
  return a.inverse();
}

/// Scaled unit symmetric matrices: flatten_scaled(E_m) = e_m.
inline std::vector<Matrix> scaled_units(int n)
{
  std::vector<Matrix> out;
  for (auto const &[i, j] : sym_pairs(n))
  {
    Matrix e = Matrix::Zero(n, n);
    double const v = 1.0 / sym_scale(i, j);
    e(i, j) = v;
    e(j, i) = v;
    out.push_back(e);
  }
  return out;
}

} // namespace detail

// --- Structure form in full-rank coordinates ---------------------------------

/// Direct evaluation of the eleven-term form with the entries of `ainv` in
/// the a^{kl} slot.
inline double qform_with(OperatorJet const &j, int nprime, Matrix const &ainv, TestVector const &x)
{
  int const n = j.layout.n();
  Matrix const &X = x.xmat.matrix();
  double s = 0.0;
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b)
    {
      for (int c = 0; c < n; ++c)
        for (int d = 0; d < n; ++d)
          s += j.Faa(a, b, c, d) * X(a, b) * X(c, d);
      for (int k = 0; k < nprime; ++k)
        for (int l = 0; l < nprime; ++l)
          s += 2.0 * j.Fa(a, b) * ainv(k, l) * X(k, a) * X(l, b);
      for (int al = nprime; al < n; ++al)
        s += 2.0 * j.Fap(a, b, al) * X(a, b) * x.xp(al - nprime);
      s += 2.0 * j.Fau(a, b) * X(a, b) * x.y;
      for (int i = 0; i < nprime; ++i)
        s += 2.0 * j.Fax(a, b, i) * X(a, b) * x.z(i);
    }
  for (int al = nprime; al < n; ++al)
  {
    for (int be = nprime; be < n; ++be)
      s += j.Fpp(al, be) * x.xp(al - nprime) * x.xp(be - nprime);
    s += 2.0 * j.Fpu(al) * x.xp(al - nprime) * x.y;
    for (int i = 0; i < nprime; ++i)
      s += 2.0 * j.Fpx(al, i) * x.xp(al - nprime) * x.z(i);
  }
  s += j.Fuu() * x.y * x.y;
  for (int i = 0; i < nprime; ++i)
  {
    s += 2.0 * j.Fux(i) * x.y * x.z(i);
    for (int k = 0; k < nprime; ++k)
      s += j.Fxx(i, k) * x.z(i) * x.z(k);
  }
  return s;
}

inline Matrix leading_block_inverse(OperatorF const &f, State const &point)
{
  return detail::block_inverse_checked(point.a.matrix().topLeftCorner(f.nprime(), f.nprime()), "qform_3_13");
}

inline double qform_3_13(OperatorF const &f, State const &point, TestVector const &x)
{
  return qform_with(f.jet(point), f.nprime(), leading_block_inverse(f, point), x);
}

/// Gram matrix of the eleven-term form with `ainv` in the a^{kl} slot.
inline Matrix gram_with(OperatorJet const &j, int nprime, Matrix const &ainv)
{
  int const n = j.layout.n();
  int const ndouble = n - nprime;
  int const s = static_cast<int>(sym_dim(n));
  int const d = TestVector::flat_dim(nprime, ndouble);

  // Test-vector coordinate -> operator coordinate.
  std::vector<int> to_z(static_cast<std::size_t>(d));
  for (int r = 0; r < s; ++r)
    to_z[static_cast<std::size_t>(r)] = r;
  for (int al = 0; al < ndouble; ++al)
    to_z[static_cast<std::size_t>(s + al)] = j.layout.p(nprime + al);
  to_z[static_cast<std::size_t>(s + ndouble)] = j.layout.u();
  for (int i = 0; i < nprime; ++i)
    to_z[static_cast<std::size_t>(s + ndouble + 1 + i)] = j.layout.x(i);

  Matrix m(d, d);
  for (int r = 0; r < d; ++r)
    for (int c = 0; c < d; ++c)
      m(r, c) = j.hess(to_z[static_cast<std::size_t>(r)], to_z[static_cast<std::size_t>(c)]);

  // 2 tr((P X)^T ainv (P Y) F), P = first N' rows.
  Matrix const fm = j.coefficient_matrix();
  auto const units = detail::scaled_units(n);
  std::vector<Matrix> rows;
  for (auto const &e : units)
    rows.push_back(e.topRows(nprime));
  for (int r = 0; r < s; ++r)
    for (int c = r; c < s; ++c)
    {
      double const v = 2.0 * (rows[static_cast<std::size_t>(r)].transpose() * ainv *
                              rows[static_cast<std::size_t>(c)] * fm).trace();
      m(r, c) += v;
      if (c != r)
        m(c, r) += v;
    }
  return 0.5 * (m + m.transpose());
}

inline GramForm assemble_gram_3_13(OperatorF const &f, State const &point)
{
  GramForm g;
  g.nprime = f.nprime();
  g.ndouble = f.ndouble();
  g.basepoint = point;
  g.matrix = gram_with(f.jet(point), f.nprime(), leading_block_inverse(f, point));
  return g;
}

inline StructureReport check_condition_3_13(OperatorF const &f, std::vector<State> const &basepoints)
{
  if (basepoints.empty())
    throw PreconditionError("check_condition_3_13: empty basepoint set");
  std::vector<Matrix> grams(basepoints.size());
  parallel_for(basepoints.size(), [&](std::size_t k) { grams[k] = assemble_gram_3_13(f, basepoints[k]).matrix; });
  StructureReport r;
  r.check = "gram_3_13";
  for (std::size_t k = 0; k < grams.size(); ++k)
    detail::accumulate(r, grams[k], static_cast<int>(k), "test_vector");
  return r;
}

// --- The transformed function G ------------------------------------------

/// Coordinates of G: (a scaled, b row-major, c scaled, p'', u, x').
struct GLayout
{
  int nprime = 1;
  int ndouble = 0;

  int sa() const { return static_cast<int>(sym_dim(nprime)); }
  int nb() const { return nprime * ndouble; }
  int sc() const { return static_cast<int>(sym_dim(ndouble)); }
  int a0() const { return 0; }
  int b0() const { return sa(); }
  int c0() const { return sa() + nb(); }
  int p0() const { return c0() + sc(); }
  int u0() const { return p0() + ndouble; }
  int x0() const { return u0() + 1; }
  int size() const { return x0() + nprime; }
};

struct GPoint
{
  Matrix a; ///< N' x N', positive definite
  Matrix b; ///< N' x N''
  Matrix c; ///< N'' x N''
  Vector pdd;
  double u = 0.0;
  Vector xp;
};

inline Vector pack_g(GPoint const &g, GLayout const &lay)
{
  Vector y(lay.size());
  y.segment(lay.a0(), lay.sa()) = flatten_scaled(g.a);
  for (int k = 0; k < lay.nprime; ++k)
    for (int al = 0; al < lay.ndouble; ++al)
      y(lay.b0() + k * lay.ndouble + al) = g.b(k, al);
  if (lay.ndouble)
    y.segment(lay.c0(), lay.sc()) = flatten_scaled(g.c);
  y.segment(lay.p0(), lay.ndouble) = g.pdd;
  y(lay.u0()) = g.u;
  y.segment(lay.x0(), lay.nprime) = g.xp;
  return y;
}

inline GPoint unpack_g(Vector const &y, GLayout const &lay)
{
  GPoint g;
  g.a = unflatten_scaled(y.segment(lay.a0(), lay.sa()), lay.nprime);
  g.b.resize(lay.nprime, lay.ndouble);
  for (int k = 0; k < lay.nprime; ++k)
    for (int al = 0; al < lay.ndouble; ++al)
      g.b(k, al) = y(lay.b0() + k * lay.ndouble + al);
  g.c = lay.ndouble ? unflatten_scaled(y.segment(lay.c0(), lay.sc()), lay.ndouble) : Matrix(0, 0);
  g.pdd = y.segment(lay.p0(), lay.ndouble);
  g.u = y(lay.u0());
  g.xp = y.segment(lay.x0(), lay.nprime);
  return g;
}

/// [[a^-1, a^-1 b], [(a^-1 b)^T, c + b^T a^-1 b]].
inline Matrix transformed_matrix(Matrix const &a, Matrix const &b, Matrix const &c)
{
  Matrix const ainv = detail::block_inverse_checked(a, "transform_G");
  Eigen::Index const n1 = a.rows(), n2 = c.rows();
  Matrix m(n1 + n2, n1 + n2);
  m.topLeftCorner(n1, n1) = ainv;
  m.topRightCorner(n1, n2) = ainv * b;
  m.bottomLeftCorner(n2, n1) = (ainv * b).transpose();
  m.bottomRightCorner(n2, n2) = c + b.transpose() * ainv * b;
  return m;
}

/// G as a function of its own variables, with (p', x'', t) frozen at `frozen`.
class TransformedG
{
public:
  TransformedG(OperatorF f, State frozen) : f_(std::move(f)), frozen_(std::move(frozen)), lay_{f_.nprime(), f_.ndouble()} {}

  GLayout const &layout() const { return lay_; }

  State state_at(GPoint const &g) const
  {
    State s = frozen_;
    s.a = SymMatrix(transformed_matrix(g.a, g.b, g.c));
    int const np = lay_.nprime;
    s.p.tail(lay_.ndouble) = g.pdd;
    s.u = g.u;
    s.x.head(np) = g.xp;
    return s;
  }

  double operator()(GPoint const &g) const { return f_(state_at(g)); }
  double operator()(Vector const &y) const { return (*this)(unpack_g(y, lay_)); }

  /// Analytic gradient in G coordinates, from dM = dL^T K + K^T dL - K^T da K + diag(0, dc)
  /// with L = [I, b] and K = a^-1 L.
  Vector gradient(Vector const &y) const
  {
    GPoint const g = unpack_g(y, lay_);
    OperatorJet const j = f_.jet(state_at(g));
    Matrix const fm = j.coefficient_matrix();
    int const np = lay_.nprime, nd = lay_.ndouble, n = np + nd;
    Matrix l(np, n);
    l << Matrix::Identity(np, np), g.b;
    Matrix const k = g.a.inverse() * l;

    Vector out(lay_.size());
    auto const ua = detail::scaled_units(np);
    for (int m = 0; m < lay_.sa(); ++m)
      out(lay_.a0() + m) = -(k.transpose() * ua[static_cast<std::size_t>(m)] * k).cwiseProduct(fm).sum();
    for (int kk = 0; kk < np; ++kk)
      for (int al = 0; al < nd; ++al)
      {
        Matrix dl = Matrix::Zero(np, n);
        dl(kk, np + al) = 1.0;
        Matrix const dm = dl.transpose() * k + k.transpose() * dl;
        out(lay_.b0() + kk * nd + al) = dm.cwiseProduct(fm).sum();
      }
    auto const uc = detail::scaled_units(nd);
    for (int m = 0; m < lay_.sc(); ++m)
      out(lay_.c0() + m) = uc[static_cast<std::size_t>(m)].cwiseProduct(fm.bottomRightCorner(nd, nd)).sum();
    for (int al = 0; al < nd; ++al)
      out(lay_.p0() + al) = j.Fp(np + al);
    out(lay_.u0()) = j.Fu();
    for (int i = 0; i < np; ++i)
      out(lay_.x0() + i) = j.Fx(i);
    return out;
  }

  /// Hessian by central differences of the analytic gradient, one Richardson step.
  Matrix hessian(Vector const &y) const
  {
    int const d = lay_.size();
    auto pass = [&](double frac) {
      Matrix h(d, d);
      for (int c = 0; c < d; ++c)
      {
        double const step = frac * 1e-4 * (1.0 + std::abs(y(c)));
        Vector yp = y, ym = y;
        yp(c) += step;
        ym(c) -= step;
        h.col(c) = (gradient(yp) - gradient(ym)) / (2.0 * step);
      }
      return h;
    };
    Matrix const h = (4.0 * pass(0.5) - pass(1.0)) / 3.0;
    return 0.5 * (h + h.transpose());
  }

  /// G coordinates of the F-point `s` (requires a PD leading block).
  Vector coordinates_of(State const &s) const
  {
    int const np = lay_.nprime, nd = lay_.ndouble;
    Matrix const &m = s.a.matrix();
    GPoint g;
    Matrix const a_inv_block = m.topLeftCorner(np, np);
    g.a = detail::block_inverse_checked(a_inv_block, "transform_G").eval();
    g.b = g.a * m.topRightCorner(np, nd);
    g.c = m.bottomRightCorner(nd, nd) - m.topRightCorner(np, nd).transpose() * g.b;
    g.pdd = s.p.tail(nd);
    g.u = s.u;
    g.xp = s.x.head(np);
    return pack_g(g, lay_);
  }

private:
  OperatorF f_;
  State frozen_;
  GLayout lay_;
};

inline TransformedG transform_G(OperatorF const &f, State const &frozen) { return TransformedG(f, frozen); }

/// The rotated degenerate variant: F evaluated at
/// [[Q diag(0, A^-1) Q^T, Q diag(0, A^-1) b], [.., c + b^T diag(0, A^-1) b]],
/// A positive definite of size N'-1.
inline double transform_FQ(OperatorF const &f, State const &frozen, Matrix const &q, Matrix const &a,
                           Matrix const &b, Matrix const &c, Vector const &pdd, double u, Vector const &xp)
{
  int const np = f.nprime(), nd = f.ndouble();
  if (q.rows() != np || a.rows() != np - 1)
    throw PreconditionError("transform_FQ: dimension mismatch");
  Matrix t = Matrix::Zero(np, np);
  t.bottomRightCorner(np - 1, np - 1) = detail::block_inverse_checked(a, "transform_FQ");
  Matrix m(np + nd, np + nd);
  m.topLeftCorner(np, np) = q * t * q.transpose();
  m.topRightCorner(np, nd) = q * t * b;
  m.bottomLeftCorner(nd, np) = (q * t * b).transpose();
  m.bottomRightCorner(nd, nd) = c + b.transpose() * t * b;
  State s = frozen;
  s.a = SymMatrix(m);
  s.p.tail(nd) = pdd;
  s.u = u;
  s.x.head(np) = xp;
  return f(s);
}

namespace detail
{
inline std::vector<int> first_primes(int count)
{
  std::vector<int> out;
  for (int c = 2; static_cast<int>(out.size()) < count; ++c)
  {
    bool prime = true;
    for (int p : out)
      if (c % p == 0)
      {
        prime = false;
        break;
      }
    if (prime)
      out.push_back(c);
  }
  return out;
}

inline double radical_inverse(int index, int base)
{
  double r = 0.0, f = 1.0 / base;
  for (int i = index; i > 0; i /= base, f /= base)
    r += f * (i % base);
  return r;
}
} // namespace detail

/// Halton point `index` (1-based) in [0,1]^dim.
inline Vector halton_point(int index, int dim)
{
  auto const primes = detail::first_primes(dim);
  Vector v(dim);
  for (int k = 0; k < dim; ++k)
    v(k) = detail::radical_inverse(index, primes[static_cast<std::size_t>(k)]);
  return v;
}

/// Sampled local convexity of G in a ball around the G-image of `point`. The
/// first sample is the centre; the rest are Halton points of the cube
/// inscribed in the ball. radius <= 0 selects 0.1 times the PD margin of a.
inline StructureReport check_convexity_G(OperatorF const &f, State const &point, double radius = 0.0,
                                         int nsamples = 20)
{
  TransformedG const g(f, point);
  Vector const y0 = g.coordinates_of(point);
  double const margin = min_eigenvalue(unpack_g(y0, g.layout()).a);
  if (radius <= 0.0)
    radius = 0.1 * margin;
  if (radius >= margin)
    throw PreconditionError("check_convexity_G: radius exceeds the positive-definite margin");
  int const d = g.layout().size();
  std::vector<Vector> samples;
  samples.push_back(y0);
  for (int k = 1; k < nsamples; ++k)
    samples.push_back(y0 + radius / std::sqrt(static_cast<double>(d)) *
                               (2.0 * halton_point(k, d) - Vector::Ones(d)));
  std::vector<Matrix> hs(samples.size());
  parallel_for(samples.size(), [&](std::size_t k) { hs[k] = g.hessian(samples[k]); });
  StructureReport r;
  r.check = "convexity_G";
  for (std::size_t k = 0; k < hs.size(); ++k)
    detail::accumulate(r, hs[k], static_cast<int>(k), "G");
  return r;
}

// --- Gamma-perp and the restricted form -----------------------------------

/// X*_F as a flattened test vector.
inline Vector gradient_test_vector(OperatorJet const &j, int nprime)
{
  int const n = j.layout.n(), nd = n - nprime;
  TestVector t;
  t.xmat = SymMatrix(j.coefficient_matrix());
  t.xp.resize(nd);
  for (int al = 0; al < nd; ++al)
    t.xp(al) = j.Fp(nprime + al);
  t.y = j.Fu();
  t.z.resize(nprime);
  for (int i = 0; i < nprime; ++i)
    t.z(i) = j.Fx(i);
  return t.flatten();
}

/// Constraint rows: (Q^T X_a Q)_{0j} = 0 for j < N', then <X~, X*_F> = 0.
inline Matrix gamma_perp_constraints(OperatorJet const &j, int nprime, Matrix const &q)
{
  int const n = j.layout.n(), nd = n - nprime;
  int const d = TestVector::flat_dim(nprime, nd);
  int const s = static_cast<int>(sym_dim(n));
  Vector const xstar = gradient_test_vector(j, nprime);
  if (xstar.norm() == 0.0)
    throw PreconditionError("gamma_perp: X*_F vanishes");
  Matrix c = Matrix::Zero(nprime + 1, d);
  for (int jj = 0; jj < nprime; ++jj)
  {
    Matrix e = Matrix::Zero(n, n);
    Matrix const outer = q.col(0) * q.col(jj).transpose();
    e.topLeftCorner(nprime, nprime) = 0.5 * (outer + outer.transpose());
    c.row(jj).head(s) = flatten_scaled(e).transpose();
  }
  c.row(nprime) = xstar.transpose();
  return c;
}

/// Orthonormal basis of Gamma-perp (columns) and the orthogonal projector onto it.
struct GammaPerp
{
  Matrix basis;
  Matrix projector;
};

inline GammaPerp gamma_perp_projector(OperatorF const &f, State const &point, Matrix const &q)
{
  if (q.rows() != f.nprime() || q.cols() != f.nprime())
    throw PreconditionError("gamma_perp_projector: Q must be N' x N'");
  Matrix const basis = null_space_basis(gamma_perp_constraints(f.jet(point), f.nprime(), q));
  return GammaPerp{basis, basis * basis.transpose()};
}

/// Basepoint [[Q diag(0,B) Q^T, Q b], [b^T Q^T, c]] for the degenerate form.
inline State degenerate_state(Matrix const &q, Matrix const &b_block, Matrix const &b, Matrix const &c, Vector p,
                              double u, Vector x, double t = 0.0)
{
  int const np = static_cast<int>(q.rows()), nd = static_cast<int>(c.rows());
  Matrix bt = Matrix::Zero(np, np);
  bt.bottomRightCorner(np - 1, np - 1) = b_block;
  Matrix m(np + nd, np + nd);
  m.topLeftCorner(np, np) = q * bt * q.transpose();
  m.topRightCorner(np, nd) = q * b;
  m.bottomLeftCorner(nd, np) = (q * b).transpose();
  m.bottomRightCorner(nd, nd) = c;
  return State{SymMatrix(m), std::move(p), u, std::move(x), t};
}

/// Q diag(0, B^-1) Q^T for a basepoint of degenerate shape; checks the shape.
inline Matrix degenerate_inverse(State const &point, int nprime, Matrix const &q)
{
  Matrix const rot = q.transpose() * point.a.matrix().topLeftCorner(nprime, nprime) * q;
  double const tol = 1e-10 * (1.0 + rot.norm());
  if (rot.row(0).cwiseAbs().maxCoeff() > tol)
    throw PreconditionError("check_condition_4_3: basepoint a-block is not Q diag(0, B) Q^T");
  Matrix t = Matrix::Zero(nprime, nprime);
  if (nprime > 1)
    t.bottomRightCorner(nprime - 1, nprime - 1) =
        detail::block_inverse_checked(rot.bottomRightCorner(nprime - 1, nprime - 1), "check_condition_4_3");
  return q * t * q.transpose();
}

/// The restricted form at one basepoint, as a matrix on the full test space.
inline GramForm assemble_gram_4_2(OperatorF const &f, State const &point, Matrix const &q)
{
  GramForm g;
  g.nprime = f.nprime();
  g.ndouble = f.ndouble();
  g.basepoint = point;
  g.matrix = gram_with(f.jet(point), f.nprime(), degenerate_inverse(point, f.nprime(), q));
  return g;
}

inline StructureReport check_condition_4_3(OperatorF const &f, std::vector<State> const &basepoints,
                                           Matrix const &q)
{
  if (basepoints.empty())
    throw PreconditionError("check_condition_4_3: empty basepoint set");
  StructureReport r;
  r.check = "restricted_4_3";
  for (std::size_t k = 0; k < basepoints.size(); ++k)
  {
    Matrix const m = assemble_gram_4_2(f, basepoints[k], q).matrix;
    GammaPerp const gp = gamma_perp_projector(f, basepoints[k], q);
    Matrix const restricted = gp.basis.transpose() * m * gp.basis;
    detail::accumulate(r, restricted, static_cast<int>(k), "test_vector", &gp.basis);
  }
  return r;
}

// --- One-dimensional convex block ------------------------------------------

/// For N' = 1: convexity of F([[0, b], [b^T, c]], p, u, x) in (c, p'', u, x')
/// at `point` (whose a-block is replaced by 0), by differences of the
/// analytic gradient.
inline StructureReport check_condition_N1(OperatorF const &f, State const &point)
{
  if (f.nprime() != 1)
    throw PreconditionError("check_condition_N1: requires nprime = 1");
  StateLayout const lay = f.layout();
  int const nd = f.ndouble();
  std::vector<int> coords;
  for (int a = 1; a <= nd; ++a)
    for (int b = a; b <= nd; ++b)
      coords.push_back(lay.a(a, b));
  for (int al = 1; al <= nd; ++al)
    coords.push_back(lay.p(al));
  coords.push_back(lay.u());
  coords.push_back(lay.x(0));

  Matrix m = point.a.matrix();
  m(0, 0) = 0.0;
  Vector const z0 = lay.pack(State{SymMatrix(m), point.p, point.u, point.x, point.t});
  int const d = static_cast<int>(coords.size());
  auto grad = [&](Vector const &z) {
    Vector const g = f.jet(lay.unpack(z, point.t)).grad;
    Vector out(d);
    for (int k = 0; k < d; ++k)
      out(k) = g(coords[static_cast<std::size_t>(k)]);
    return out;
  };
  auto pass = [&](double frac) {
    Matrix h(d, d);
    for (int c = 0; c < d; ++c)
    {
      int const zc = coords[static_cast<std::size_t>(c)];
      double const step = frac * 1e-4 * (1.0 + std::abs(z0(zc)));
      Vector zp = z0, zm = z0;
      zp(zc) += step;
      zm(zc) -= step;
      h.col(c) = (grad(zp) - grad(zm)) / (2.0 * step);
    }
    return h;
  };
  Matrix h = (4.0 * pass(0.5) - pass(1.0)) / 3.0;
  h = 0.5 * (h + h.transpose());
  StructureReport r;
  r.check = "convexity_N1";
  detail::accumulate(r, h, 0, "c_p_u_x");
  return r;
}

} // namespace rankgauge
