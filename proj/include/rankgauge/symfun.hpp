#pragma once

// Elementary symmetric functions of eigenvalue vectors and symmetric
// matrices, their first and second derivatives at diagonal matrices, and the
// quotient test function phi = sigma_{l+1} + sigma_{l+2} / sigma_{l+1}.

#include "rankgauge/core.hpp"
#include "rankgauge/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <string>
#include <vector>

namespace rankgauge
{

/// Eigenvalue vector, stored sorted ascending.
class Spectrum
{
public:
  Spectrum() = default;
  explicit Spectrum(std::vector<double> values) : values_(std::move(values))
  {
    std::sort(values_.begin(), values_.end());
  }
  Spectrum(std::initializer_list<double> values) : Spectrum(std::vector<double>(values)) {}
  explicit Spectrum(Vector const &values)
      : Spectrum(std::vector<double>(values.data(), values.data() + values.size()))
  {
  }

  int size() const { return static_cast<int>(values_.size()); }
  double operator[](int i) const { return values_[static_cast<std::size_t>(i)]; }
  std::vector<double> const &values() const { return values_; }

private:
  std::vector<double> values_;
};

/// All elementary symmetric functions e_0..e_n of `values` at once, as the
/// coefficients of prod_i (1 + values_i t).
inline std::vector<double> sigma_all(std::vector<double> const &values)
{
  std::vector<double> e(values.size() + 1, 0.0);
  e[0] = 1.0;
  for (std::size_t i = 0; i < values.size(); ++i)
    for (std::size_t k = i + 1; k >= 1; --k)
      e[k] += values[i] * e[k - 1];
  return e;
}

/// sigma_k; 1 for k = 0 and 0 for k < 0 or k > n.
inline double sigma(std::vector<double> const &values, int k)
{
  if (k < 0 || k > static_cast<int>(values.size()))
    return 0.0;
  if (k == 0)
    return 1.0;
  return sigma_all(values)[static_cast<std::size_t>(k)];
}

inline double sigma(Spectrum const &lambda, int k) { return sigma(lambda.values(), k); }

namespace detail
{
inline void check_index(int i, int n, char const *what)
{
  if (i < 0 || i >= n)
    throw PreconditionError(std::string(what) + ": index " + std::to_string(i) +
                            " out of range for n = " + std::to_string(n));
}

inline std::vector<double> zeroed(std::vector<double> v, int i, int j = -1)
{
  v[static_cast<std::size_t>(i)] = 0.0;
  if (j >= 0)
    v[static_cast<std::size_t>(j)] = 0.0;
  return v;
}
} // namespace detail

/// sigma_k(lambda | i): entry i set to zero.
inline double sigma_excl(Spectrum const &lambda, int k, int i)
{
  detail::check_index(i, lambda.size(), "sigma_excl");
  return sigma(detail::zeroed(lambda.values(), i), k);
}

/// sigma_k(lambda | ij): entries i and j set to zero.
inline double sigma_excl2(Spectrum const &lambda, int k, int i, int j)
{
  detail::check_index(i, lambda.size(), "sigma_excl2");
  detail::check_index(j, lambda.size(), "sigma_excl2");
  if (i == j)
    throw PreconditionError("sigma_excl2: indices must differ");
  return sigma(detail::zeroed(lambda.values(), i, j), k);
}

inline Spectrum spectrum_of(SymMatrix const &w)
{
  if (!w.all_finite())
    throw NumericalError("spectrum_of: non-finite matrix entry");
  return Spectrum(jacobi_eigen(w.matrix()).values);
}

inline double sigma_of_matrix(SymMatrix const &w, int k)
{
  if (k < 0 || k > w.size())
    return k == 0 ? 1.0 : 0.0;
  if (!w.all_finite())
    throw NumericalError("sigma_of_matrix: non-finite matrix entry");
  if (w.is_diagonal())
  {
    Vector const d = w.matrix().diagonal();
    return sigma(std::vector<double>(d.data(), d.data() + d.size()), k);
  }
  return sigma(spectrum_of(w), k);
}

/// First and second derivatives of sigma_m at a diagonal matrix with the
/// entries W_ij treated as independent variables. Only the two non-zero
/// patterns of the Hessian are stored:
///   d2/dW_ii dW_kk = sigma_{m-2}(lambda | ik)   (i != k)
///   d2/dW_ij dW_ji = -sigma_{m-2}(lambda | ij)  (i != j)
class SigmaDerivatives
{
public:
  SigmaDerivatives(int m, Matrix grad, Matrix pair_values)
      : m_(m), grad_(std::move(grad)), pair_(std::move(pair_values))
  {
  }

  int order() const { return m_; }
  int size() const { return static_cast<int>(grad_.rows()); }

  /// d sigma_m / d W_ij.
  Matrix const &grad() const { return grad_; }

  /// d^2 sigma_m / d W_ij d W_kl.
  double hess(int i, int j, int k, int l) const
  {
    if (i == j && k == l && i != k)
      return pair_(i, k);
    if (i == l && j == k && i != j)
      return -pair_(i, j);
    return 0.0;
  }

private:
  int m_;
  Matrix grad_;
  Matrix pair_; // sigma_{m-2}(lambda | ij), zero diagonal
};

/// Derivatives of sigma_m at diag(lambda). The input is a spectrum in the
/// caller's index order; rotate W to diagonal form first.
inline SigmaDerivatives sigma_derivatives(std::vector<double> const &diag, int m)
{
  int const n = static_cast<int>(diag.size());
  Matrix grad = Matrix::Zero(n, n);
  Matrix pair = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i)
  {
    grad(i, i) = sigma(detail::zeroed(diag, i), m - 1);
    for (int k = 0; k < n; ++k)
      if (k != i)
        pair(i, k) = sigma(detail::zeroed(diag, i, k), m - 2);
  }
  return SigmaDerivatives(m, std::move(grad), std::move(pair));
}

inline SigmaDerivatives sigma_derivatives(Spectrum const &lambda, int m)
{
  return sigma_derivatives(lambda.values(), m);
}

/// Scale-aware cutoff below which sigma_{l+1}(W) is treated as zero.
inline double sigma_zero_threshold(double norm_w, int l)
{
  return 1e-10 * std::pow(1.0 + norm_w, l + 1);
}

namespace detail
{
inline void check_rank_arg(int l, int n, char const *what)
{
  if (l < 0 || l > n - 1)
    throw PreconditionError(std::string(what) + ": rank l = " + std::to_string(l) +
                            " outside [0, n-1] for n = " + std::to_string(n));
}

inline double q_from_sigmas(double s1, double s2, double threshold)
{
  return s1 > threshold ? s2 / s1 : 0.0;
}
} // namespace detail

/// q = sigma_{l+2} / sigma_{l+1}, or 0 where sigma_{l+1} vanishes. The
/// spectrum variant takes the matrix norm used for the zero threshold.
inline double q_value(std::vector<double> const &lambda, int l, double norm_w)
{
  detail::check_rank_arg(l, static_cast<int>(lambda.size()), "q_value");
  auto const e = sigma_all(lambda);
  auto at = [&](int k) { return k <= static_cast<int>(lambda.size()) ? e[static_cast<std::size_t>(k)] : 0.0; };
  return detail::q_from_sigmas(at(l + 1), at(l + 2), sigma_zero_threshold(norm_w, l));
}

inline double q_value(SymMatrix const &w, int l)
{
  return q_value(spectrum_of(w).values(), l, w.norm());
}

inline double phi_value(std::vector<double> const &lambda, int l, double norm_w)
{
  detail::check_rank_arg(l, static_cast<int>(lambda.size()), "phi_value");
  return sigma(lambda, l + 1) + q_value(lambda, l, norm_w);
}

inline double phi_value(SymMatrix const &w, int l)
{
  return phi_value(spectrum_of(w).values(), l, w.norm());
}

/// W + eps I.
inline SymMatrix epsilon_regularize(SymMatrix const &w, double eps)
{
  if (!(eps > 0.0))
    throw PreconditionError("epsilon_regularize: eps must be positive");
  return SymMatrix(w.matrix() + eps * Matrix::Identity(w.size(), w.size()));
}

} // namespace rankgauge
