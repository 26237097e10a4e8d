#pragma once

// Second-order operators F(A, p, u, x, t) with first and second derivatives.
//
// Derivatives are taken in the scaled coordinate vector
//   z = (flatten_scaled(A), p, u, x)
// of length sym_dim(N) + 2N + 1; t is a parameter and is never
// differentiated. Named accessors convert back to entry derivatives with the
// symmetric convention dF = sum_ab F^{ab} dA_ab (sum over all a, b).

#include "rankgauge/core.hpp"
#include "rankgauge/linalg.hpp"

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace rankgauge
{

struct State
{
  SymMatrix a; ///< N x N second-derivative slot
  Vector p;
  double u = 0.0;
  Vector x;
  double t = 0.0;

  int dim() const { return static_cast<int>(p.size()); }
};

/// Index map of the scaled coordinate vector for dimension N.
class StateLayout
{
public:
  explicit StateLayout(int n) : n_(n), sym_(static_cast<int>(sym_dim(n))) {}

  int n() const { return n_; }
  int size() const { return sym_ + 2 * n_ + 1; }
  int sym_size() const { return sym_; }
  int a(int i, int j) const { return static_cast<int>(sym_index(i, j, n_)); }
  int p(int i) const { return sym_ + i; }
  int u() const { return sym_ + n_; }
  int x(int i) const { return sym_ + n_ + 1 + i; }

  /// Factor between the scaled coordinate and the raw entry: z_k = scale * entry.
  double scale(int k) const
  {
    if (k >= sym_)
      return 1.0;
    auto const [i, j] = pair_of(k);
    return sym_scale(i, j);
  }

  std::pair<int, int> pair_of(int k) const
  {
    for (int i = 0; i < n_; ++i)
    {
      int const row_end = a(i, n_ - 1);
      if (k <= row_end)
        return {i, i + (k - a(i, i))};
    }
    throw PreconditionError("StateLayout: not a matrix coordinate");
  }

  Vector pack(State const &s) const
  {
    check(s);
    Vector z(size());
    z.head(sym_) = flatten_scaled(s.a.matrix());
    z.segment(sym_, n_) = s.p;
    z(u()) = s.u;
    z.tail(n_) = s.x;
    return z;
  }

  State unpack(Vector const &z, double t) const
  {
    State s;
    s.a = SymMatrix(unflatten_scaled(z.head(sym_), n_));
    s.p = z.segment(sym_, n_);
    s.u = z(u());
    s.x = z.tail(n_);
    s.t = t;
    return s;
  }

  void check(State const &s) const
  {
    if (s.a.size() != n_ || s.p.size() != n_ || s.x.size() != n_)
      throw PreconditionError("State: dimension mismatch with operator");
  }

private:
  int n_;
  int sym_;
};

/// Value, gradient and Hessian of F in scaled coordinates, plus named
/// entry-derivative accessors.
struct OperatorJet
{
  StateLayout layout{1};
  double value = 0.0;
  Vector grad;
  Matrix hess;

  double g(int k) const { return grad(k) / layout.scale(k); }
  double h(int k, int l) const { return hess(k, l) / (layout.scale(k) * layout.scale(l)); }

  double Fa(int a, int b) const { return g(layout.a(a, b)); }
  double Fp(int a) const { return g(layout.p(a)); }
  double Fu() const { return g(layout.u()); }
  double Fx(int i) const { return g(layout.x(i)); }

  double Faa(int a, int b, int c, int d) const { return h(layout.a(a, b), layout.a(c, d)); }
  double Fap(int a, int b, int c) const { return h(layout.a(a, b), layout.p(c)); }
  double Fau(int a, int b) const { return h(layout.a(a, b), layout.u()); }
  double Fax(int a, int b, int i) const { return h(layout.a(a, b), layout.x(i)); }
  double Fpp(int a, int b) const { return h(layout.p(a), layout.p(b)); }
  double Fpu(int a) const { return h(layout.p(a), layout.u()); }
  double Fpx(int a, int i) const { return h(layout.p(a), layout.x(i)); }
  double Fuu() const { return h(layout.u(), layout.u()); }
  double Fux(int i) const { return h(layout.u(), layout.x(i)); }
  double Fxx(int i, int j) const { return h(layout.x(i), layout.x(j)); }

  /// (F^{ab}) as an N x N matrix.
  Matrix coefficient_matrix() const
  {
    int const n = layout.n();
    Matrix m(n, n);
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b)
        m(a, b) = Fa(a, b);
    return m;
  }
};

// --- Polynomials in (A, p, u, x, t) ---------------------------------------

enum class VarKind
{
  a,
  p,
  u,
  x,
  t
};

struct Factor
{
  VarKind kind = VarKind::u;
  int i = 0;
  int j = 0;
  int power = 1;
};

struct Monomial
{
  double coef = 0.0;
  std::vector<Factor> factors;
};

class Polynomial
{
public:
  Polynomial() = default;
  Polynomial(double c) { if (c != 0.0) terms_.push_back(Monomial{c, {}}); }
  explicit Polynomial(std::vector<Monomial> terms) : terms_(std::move(terms)) {}

  static Polynomial var(VarKind k, int i = 0, int j = 0, int power = 1)
  {
    if (k == VarKind::a && i > j)
      std::swap(i, j);
    return Polynomial({Monomial{1.0, {Factor{k, i, j, power}}}});
  }
  static Polynomial A(int i, int j) { return var(VarKind::a, i, j); }
  static Polynomial P(int i) { return var(VarKind::p, i); }
  static Polynomial U() { return var(VarKind::u); }
  static Polynomial X(int i) { return var(VarKind::x, i); }
  static Polynomial T() { return var(VarKind::t); }

  std::vector<Monomial> const &terms() const { return terms_; }

  friend Polynomial operator+(Polynomial lhs, Polynomial const &rhs)
  {
    lhs.terms_.insert(lhs.terms_.end(), rhs.terms_.begin(), rhs.terms_.end());
    return lhs;
  }
  friend Polynomial operator*(double s, Polynomial p)
  {
    for (auto &m : p.terms_)
      m.coef *= s;
    return p;
  }
  friend Polynomial operator-(Polynomial lhs, Polynomial const &rhs) { return lhs + (-1.0) * rhs; }
  friend Polynomial operator*(Polynomial const &lhs, Polynomial const &rhs)
  {
    std::vector<Monomial> out;
    for (auto const &l : lhs.terms_)
      for (auto const &r : rhs.terms_)
      {
        Monomial m{l.coef * r.coef, l.factors};
        m.factors.insert(m.factors.end(), r.factors.begin(), r.factors.end());
        out.push_back(std::move(m));
      }
    return Polynomial(std::move(out));
  }

  /// True when only the listed variable kinds occur.
  bool uses_only(std::function<bool(Factor const &)> const &allowed) const
  {
    for (auto const &m : terms_)
      for (auto const &f : m.factors)
        if (f.power != 0 && !allowed(f))
          return false;
    return true;
  }

private:
  std::vector<Monomial> terms_;
};

namespace detail
{

/// Monomial in compiled form: raw coordinate indices with powers.
struct CompiledMonomial
{
  double coef = 0.0;
  int t_power = 0;
  std::vector<std::pair<int, int>> vars; // (coordinate, power), distinct coordinates
};

inline std::vector<CompiledMonomial> compile(Polynomial const &poly, StateLayout const &lay)
{
  std::vector<CompiledMonomial> out;
  int const n = lay.n();
  for (auto const &m : poly.terms())
  {
    CompiledMonomial c;
    c.coef = m.coef;
    std::map<int, int> powers;
    for (auto const &f : m.factors)
    {
      if (f.power < 0)
        throw PreconditionError("Polynomial: negative exponent");
      auto in_range = [n](int i) { return i >= 0 && i < n; };
      switch (f.kind)
      {
      case VarKind::a:
        if (!in_range(f.i) || !in_range(f.j))
          throw PreconditionError("Polynomial: matrix index out of range");
        powers[lay.a(f.i, f.j)] += f.power;
        break;
      case VarKind::p:
        if (!in_range(f.i))
          throw PreconditionError("Polynomial: gradient index out of range");
        powers[lay.p(f.i)] += f.power;
        break;
      case VarKind::u:
        powers[lay.u()] += f.power;
        break;
      case VarKind::x:
        if (!in_range(f.i))
          throw PreconditionError("Polynomial: coordinate index out of range");
        powers[lay.x(f.i)] += f.power;
        break;
      case VarKind::t:
        c.t_power += f.power;
        break;
      }
    }
    for (auto const &[k, pw] : powers)
      if (pw > 0)
        c.vars.emplace_back(k, pw);
    out.push_back(std::move(c));
  }
  return out;
}

inline double ipow(double v, int k)
{
  double r = 1.0;
  for (int i = 0; i < k; ++i)
    r *= v;
  return r;
}

} // namespace detail

// --- Operator -------------------------------------------------------------

class OperatorF
{
public:
  /// Implementation interface. Implementations must be reentrant.
  struct Impl
  {
    virtual ~Impl() = default;
    virtual double value(State const &s) const = 0;
    virtual OperatorJet jet(State const &s) const = 0;
    /// Value and gradient only; the returned Hessian is empty.
    virtual OperatorJet first_order(State const &s) const
    {
      auto j = jet(s);
      j.hess.resize(0, 0);
      return j;
    }
    virtual bool analytic() const { return true; }
  };

  OperatorF() = default;
  OperatorF(std::string name, int nprime, int ndouble, std::shared_ptr<Impl const> impl)
      : name_(std::move(name)), nprime_(nprime), ndouble_(ndouble), impl_(std::move(impl))
  {
    if (nprime_ < 1 || ndouble_ < 0)
      throw PreconditionError("OperatorF: need nprime >= 1 and ndouble >= 0");
  }

  std::string const &name() const { return name_; }
  int nprime() const { return nprime_; }
  int ndouble() const { return ndouble_; }
  int dim() const { return nprime_ + ndouble_; }
  StateLayout layout() const { return StateLayout(dim()); }
  bool analytic() const { return impl_->analytic(); }

  double operator()(State const &s) const
  {
    layout().check(s);
    return impl_->value(s);
  }

  OperatorJet jet(State const &s) const
  {
    layout().check(s);
    return impl_->jet(s);
  }

  OperatorJet first_order(State const &s) const
  {
    layout().check(s);
    return impl_->first_order(s);
  }

private:
  std::string name_;
  int nprime_ = 1;
  int ndouble_ = 0;
  std::shared_ptr<Impl const> impl_;
};

namespace detail
{

class PolynomialImpl final : public OperatorF::Impl
{
public:
  PolynomialImpl(Polynomial const &poly, int n) : layout_(n), terms_(compile(poly, layout_)) {}

  double value(State const &s) const override { return eval(layout_.pack(s), s.t, nullptr, nullptr); }

  OperatorJet jet(State const &s) const override
  {
    OperatorJet j;
    j.layout = layout_;
    Vector raw_grad = Vector::Zero(layout_.size());
    Matrix raw_hess = Matrix::Zero(layout_.size(), layout_.size());
    j.value = eval(layout_.pack(s), s.t, &raw_grad, &raw_hess);
    j.grad.resize(layout_.size());
    j.hess.resize(layout_.size(), layout_.size());
    for (int k = 0; k < layout_.size(); ++k)
    {
      j.grad(k) = raw_grad(k) / layout_.scale(k);
      for (int l = 0; l < layout_.size(); ++l)
        j.hess(k, l) = raw_hess(k, l) / (layout_.scale(k) * layout_.scale(l));
    }
    return j;
  }

  OperatorJet first_order(State const &s) const override
  {
    OperatorJet j;
    j.layout = layout_;
    Vector raw_grad = Vector::Zero(layout_.size());
    j.value = eval(layout_.pack(s), s.t, &raw_grad, nullptr);
    j.grad.resize(layout_.size());
    for (int k = 0; k < layout_.size(); ++k)
      j.grad(k) = raw_grad(k) / layout_.scale(k);
    return j;
  }

private:
  // Derivatives here are with respect to the raw entries r_k = z_k / scale_k.
  double eval(Vector const &z, double t, Vector *grad, Matrix *hess) const
  {
    double total = 0.0;
    for (auto const &m : terms_)
    {
      std::size_t const nv = m.vars.size();
      std::vector<double> v(nv);
      for (std::size_t a = 0; a < nv; ++a)
        v[a] = z(m.vars[a].first) / layout_.scale(m.vars[a].first);
      double const tc = m.coef * ipow(t, m.t_power);
      auto prod_except = [&](std::size_t skip1, int drop1, std::size_t skip2, int drop2) {
        double r = tc;
        for (std::size_t a = 0; a < nv; ++a)
        {
          int pw = m.vars[a].second;
          if (a == skip1)
            pw -= drop1;
          if (a == skip2)
            pw -= drop2;
          r *= ipow(v[a], pw);
        }
        return r;
      };
      std::size_t const none = nv;
      total += prod_except(none, 0, none, 0);
      if (!grad)
        continue;
      for (std::size_t a = 0; a < nv; ++a)
      {
        int const ka = m.vars[a].first, pa = m.vars[a].second;
        (*grad)(ka) += pa * prod_except(a, 1, none, 0);
        if (!hess)
          continue;
        if (pa >= 2)
          (*hess)(ka, ka) += pa * (pa - 1) * prod_except(a, 2, none, 0);
        for (std::size_t b = a + 1; b < nv; ++b)
        {
          int const kb = m.vars[b].first, pb = m.vars[b].second;
          double const hv = pa * pb * prod_except(a, 1, b, 1);
          (*hess)(ka, kb) += hv;
          (*hess)(kb, ka) += hv;
        }
      }
    }
    return total;
  }

  StateLayout layout_;
  std::vector<CompiledMonomial> terms_;
};

class QuadraticImpl final : public OperatorF::Impl
{
public:
  QuadraticImpl(int n, double c0, Vector g, Matrix h) : layout_(n), c0_(c0), g_(std::move(g)), h_(0.5 * (h + h.transpose()))
  {
    if (g_.size() != layout_.size() || h_.rows() != layout_.size())
      throw PreconditionError("quadratic_operator: coefficient size mismatch");
  }

  double value(State const &s) const override
  {
    Vector const z = layout_.pack(s);
    return c0_ + g_.dot(z) + 0.5 * z.dot(h_ * z);
  }

  OperatorJet jet(State const &s) const override
  {
    Vector const z = layout_.pack(s);
    OperatorJet j;
    j.layout = layout_;
    j.value = c0_ + g_.dot(z) + 0.5 * z.dot(h_ * z);
    j.grad = g_ + h_ * z;
    j.hess = h_;
    return j;
  }

private:
  StateLayout layout_;
  double c0_;
  Vector g_;
  Matrix h_;
};

/// Central differences with one Richardson step, h_k = 1e-4 (1 + |z_k|).
class FiniteDifferenceImpl final : public OperatorF::Impl
{
public:
  FiniteDifferenceImpl(std::function<double(State const &)> fn, int n) : layout_(n), fn_(std::move(fn)) {}

  double value(State const &s) const override { return fn_(s); }
  bool analytic() const override { return false; }

  OperatorJet jet(State const &s) const override
  {
    Vector const z0 = layout_.pack(s);
    int const d = layout_.size();
    auto f = [&](Vector const &z) { return fn_(layout_.unpack(z, s.t)); };
    double const f0 = f(z0);
    Vector step(d);
    for (int k = 0; k < d; ++k)
      step(k) = 1e-4 * (1.0 + std::abs(z0(k)));

    auto derivs = [&](double frac, Vector &grad, Matrix &hess) {
      grad.resize(d);
      hess.resize(d, d);
      std::vector<double> fp(static_cast<std::size_t>(d)), fm(static_cast<std::size_t>(d));
      for (int k = 0; k < d; ++k)
      {
        Vector z = z0;
        double const hk = frac * step(k);
        z(k) = z0(k) + hk;
        fp[static_cast<std::size_t>(k)] = f(z);
        z(k) = z0(k) - hk;
        fm[static_cast<std::size_t>(k)] = f(z);
        grad(k) = (fp[static_cast<std::size_t>(k)] - fm[static_cast<std::size_t>(k)]) / (2.0 * hk);
        hess(k, k) = (fp[static_cast<std::size_t>(k)] - 2.0 * f0 + fm[static_cast<std::size_t>(k)]) / (hk * hk);
      }
      for (int k = 0; k < d; ++k)
        for (int l = k + 1; l < d; ++l)
        {
          double const hk = frac * step(k), hl = frac * step(l);
          Vector z = z0;
          auto at = [&](double sk, double sl) {
            z(k) = z0(k) + sk * hk;
            z(l) = z0(l) + sl * hl;
            return f(z);
          };
          double const v = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / (4.0 * hk * hl);
          hess(k, l) = hess(l, k) = v;
        }
    };

    Vector g1, g2;
    Matrix h1, h2;
    derivs(1.0, g1, h1);
    derivs(0.5, g2, h2);
    OperatorJet j;
    j.layout = layout_;
    j.value = f0;
    j.grad = (4.0 * g2 - g1) / 3.0;
    j.hess = (4.0 * h2 - h1) / 3.0;
    return j;
  }

  OperatorJet first_order(State const &s) const override
  {
    Vector const z0 = layout_.pack(s);
    int const d = layout_.size();
    auto f = [&](Vector const &z) { return fn_(layout_.unpack(z, s.t)); };
    auto diff = [&](int k, double hk) {
      Vector z = z0;
      z(k) = z0(k) + hk;
      double const fp = f(z);
      z(k) = z0(k) - hk;
      return (fp - f(z)) / (2.0 * hk);
    };
    OperatorJet j;
    j.layout = layout_;
    j.value = f(z0);
    j.grad.resize(d);
    for (int k = 0; k < d; ++k)
    {
      double const hk = 1e-4 * (1.0 + std::abs(z0(k)));
      j.grad(k) = (4.0 * diff(k, 0.5 * hk) - diff(k, hk)) / 3.0;
    }
    return j;
  }

private:
  StateLayout layout_;
  std::function<double(State const &)> fn_;
};

} // namespace detail

// --- Builders -------------------------------------------------------------

inline OperatorF polynomial_operator(std::string name, int nprime, int ndouble, Polynomial const &poly)
{
  return OperatorF(std::move(name), nprime, ndouble,
                   std::make_shared<detail::PolynomialImpl>(poly, nprime + ndouble));
}

inline Polynomial trace_polynomial(int n)
{
  Polynomial tr;
  for (int a = 0; a < n; ++a)
    tr = tr + Polynomial::A(a, a);
  return tr;
}

/// F = tr(A) - f(p, u, x, t).
inline OperatorF laplace_operator(int nprime, int ndouble, Polynomial const &f = Polynomial())
{
  bool const no_hessian = f.uses_only([](Factor const &fa) { return fa.kind != VarKind::a; });
  if (!no_hessian)
    throw PreconditionError("laplace_operator: f must not depend on A");
  return polynomial_operator("laplace", nprime, ndouble, trace_polynomial(nprime + ndouble) - f);
}

/// F = sum_ab a^{ab}(p', x'') A_ab - f(x, u, p). The coefficient table is a
/// symmetric N x N array of polynomials in p' and x'' only.
inline OperatorF quasilinear_operator(int nprime, int ndouble,
                                      std::vector<std::vector<Polynomial>> const &coef,
                                      Polynomial const &f)
{
  int const n = nprime + ndouble;
  if (static_cast<int>(coef.size()) != n)
    throw PreconditionError("quasilinear_operator: coefficient table must be N x N");
  auto allowed = [nprime](Factor const &fa) {
    return (fa.kind == VarKind::p && fa.i < nprime) || (fa.kind == VarKind::x && fa.i >= nprime);
  };
  Polynomial lin;
  for (int a = 0; a < n; ++a)
  {
    if (static_cast<int>(coef[static_cast<std::size_t>(a)].size()) != n)
      throw PreconditionError("quasilinear_operator: coefficient table must be N x N");
    for (int b = 0; b < n; ++b)
    {
      auto const &c = coef[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)];
      if (!c.uses_only(allowed))
        throw PreconditionError("quasilinear_operator: coefficients may depend on p' and x'' only");
      lin = lin + c * Polynomial::A(a, b);
    }
  }
  if (!f.uses_only([](Factor const &fa) { return fa.kind != VarKind::a; }))
    throw PreconditionError("quasilinear_operator: f must not depend on A");
  return polynomial_operator("quasilinear", nprime, ndouble, lin - f);
}

/// F = c0 + g.z + z.H.z / 2 in scaled coordinates.
inline OperatorF quadratic_operator(std::string name, int nprime, int ndouble, double c0, Vector g, Matrix h)
{
  return OperatorF(std::move(name), nprime, ndouble,
                   std::make_shared<detail::QuadraticImpl>(nprime + ndouble, c0, std::move(g), std::move(h)));
}

/// Operator given only by its value; derivatives by finite differences.
inline OperatorF lambda_operator(std::string name, int nprime, int ndouble,
                                 std::function<double(State const &)> fn)
{
  return OperatorF(std::move(name), nprime, ndouble,
                   std::make_shared<detail::FiniteDifferenceImpl>(std::move(fn), nprime + ndouble));
}

// --- Composition ----------------------------------------------------------

/// Scalar function g: R^m -> R with gradient and Hessian.
struct OuterFunction
{
  struct Jet
  {
    double value = 0.0;
    Vector grad;
    Matrix hess;
  };

  std::string name;
  int arity = 1;
  std::function<Jet(Vector const &)> eval;
};

inline OuterFunction outer_sum(int m)
{
  return OuterFunction{"sum", m, [m](Vector const &y) {
                         return OuterFunction::Jet{y.sum(), Vector::Ones(m), Matrix::Zero(m, m)};
                       }};
}

/// y^alpha for y > 0 (alpha >= 1).
inline OuterFunction outer_power(double alpha)
{
  return OuterFunction{"power", 1, [alpha](Vector const &y) {
                         if (!(y(0) > 0.0))
                           throw PreconditionError("outer_power: argument must be positive");
                         OuterFunction::Jet j;
                         j.value = std::pow(y(0), alpha);
                         j.grad = Vector::Constant(1, alpha * std::pow(y(0), alpha - 1.0));
                         j.hess = Matrix::Constant(1, 1, alpha * (alpha - 1.0) * std::pow(y(0), alpha - 2.0));
                         return j;
                       }};
}

inline OuterFunction outer_log_sum_exp(int m)
{
  return OuterFunction{"log_sum_exp", m, [](Vector const &y) {
                         double const ymax = y.maxCoeff();
                         Vector const e = (y.array() - ymax).exp().matrix();
                         double const s = e.sum();
                         Vector const w = e / s;
                         OuterFunction::Jet j;
                         j.value = ymax + std::log(s);
                         j.grad = w;
                         j.hess = Matrix(w.asDiagonal()) - w * w.transpose();
                         return j;
                       }};
}

namespace detail
{

class ComposedImpl final : public OperatorF::Impl
{
public:
  ComposedImpl(OuterFunction g, std::vector<OperatorF> fs) : g_(std::move(g)), fs_(std::move(fs)) {}

  bool analytic() const override
  {
    for (auto const &f : fs_)
      if (!f.analytic())
        return false;
    return true;
  }

  double value(State const &s) const override
  {
    Vector y(static_cast<Eigen::Index>(fs_.size()));
    for (std::size_t i = 0; i < fs_.size(); ++i)
      y(static_cast<Eigen::Index>(i)) = fs_[i](s);
    return g_.eval(y).value;
  }

  OperatorJet jet(State const &s) const override
  {
    std::vector<OperatorJet> inner;
    Vector y(static_cast<Eigen::Index>(fs_.size()));
    for (std::size_t i = 0; i < fs_.size(); ++i)
    {
      inner.push_back(fs_[i].jet(s));
      y(static_cast<Eigen::Index>(i)) = inner.back().value;
    }
    auto const gj = g_.eval(y);
    double const scale = 1.0 + gj.hess.norm();
    if (gj.grad.minCoeff() < 0.0)
      throw PreconditionError("compose: outer function is decreasing at the queried point");
    if (gj.hess.rows() > 0 && min_eigenvalue(gj.hess) < -1e-12 * scale)
      throw PreconditionError("compose: outer function is not convex at the queried point");

    OperatorJet j;
    j.layout = inner.front().layout;
    j.value = gj.value;
    j.grad = Vector::Zero(j.layout.size());
    j.hess = Matrix::Zero(j.layout.size(), j.layout.size());
    for (std::size_t i = 0; i < inner.size(); ++i)
    {
      auto const ii = static_cast<Eigen::Index>(i);
      j.grad += gj.grad(ii) * inner[i].grad;
      j.hess += gj.grad(ii) * inner[i].hess;
      for (std::size_t k = 0; k < inner.size(); ++k)
        j.hess += gj.hess(ii, static_cast<Eigen::Index>(k)) * inner[i].grad * inner[k].grad.transpose();
    }
    return j;
  }

private:
  OuterFunction g_;
  std::vector<OperatorF> fs_;
};

} // namespace detail

/// F = g(F_1, ..., F_m). Monotonicity and convexity of g are checked at every
/// queried point; a violation raises PreconditionError.
inline OperatorF compose(OuterFunction g, std::vector<OperatorF> fs)
{
  if (fs.empty() || static_cast<int>(fs.size()) != g.arity)
    throw PreconditionError("compose: operand count does not match the outer function");
  for (auto const &f : fs)
    if (f.nprime() != fs.front().nprime() || f.ndouble() != fs.front().ndouble())
      throw PreconditionError("compose: operands have different dimension splits");
  std::string name = g.name + "(";
  for (std::size_t i = 0; i < fs.size(); ++i)
    name += (i ? "," : "") + fs[i].name();
  name += ")";
  int const np = fs.front().nprime(), nd = fs.front().ndouble();
  return OperatorF(std::move(name), np, nd, std::make_shared<detail::ComposedImpl>(std::move(g), std::move(fs)));
}

// --- Ellipticity ----------------------------------------------------------

/// Smallest eigenvalue of (F^{ab}) at the state.
inline double ellipticity_margin(OperatorF const &f, State const &s)
{
  return min_eigenvalue(f.jet(s).coefficient_matrix());
}

inline bool is_elliptic(OperatorF const &f, State const &s, double delta0 = 0.0)
{
  return ellipticity_margin(f, s) > delta0;
}

/// Convenience state builder.
inline State make_state(Matrix const &a, Vector p, double u, Vector x, double t = 0.0)
{
  return State{SymMatrix(a), std::move(p), u, std::move(x), t};
}

inline State zero_state(int n)
{
  return State{SymMatrix::zero(n), Vector::Zero(n), 0.0, Vector::Zero(n), 0.0};
}

} // namespace rankgauge
