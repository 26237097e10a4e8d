#pragma once

// Text form of polynomials in (A, p, u, x, t), used by scenario files.
//
//   expr   := term (('+' | '-') term)*
//   term   := unary (('*' | '/') unary)*        division by constants only
//   unary  := ('+' | '-') unary | power
//   power  := atom ('^' integer)?
//   atom   := number | variable | '(' expr ')'
//
// Variables use 0-based indices: A01 (or A0_1 for N > 10), p2, x0, u, t.

#include "rankgauge/core.hpp"
#include "rankgauge/operator.hpp"

#include <cctype>
#include <optional>
#include <string>
#include <string_view>

namespace rankgauge
{

class ExpressionError : public PreconditionError
{
public:
  ExpressionError(std::string const &what, std::size_t pos)
      : PreconditionError("expression: " + what + " at offset " + std::to_string(pos)), pos_(pos)
  {
  }
  std::size_t position() const { return pos_; }

private:
  std::size_t pos_;
};

namespace detail
{

class ExpressionParser
{
public:
  explicit ExpressionParser(std::string_view text) : s_(text) {}

  Polynomial parse()
  {
    Polynomial p = expr();
    skip();
    if (i_ != s_.size())
      throw ExpressionError("unexpected '" + std::string(1, s_[i_]) + "'", i_);
    return p;
  }

private:
  void skip()
  {
    while (i_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[i_])))
      ++i_;
  }

  bool eat(char c)
  {
    skip();
    if (i_ < s_.size() && s_[i_] == c)
    {
      ++i_;
      return true;
    }
    return false;
  }

  static std::optional<double> constant_of(Polynomial const &p)
  {
    double c = 0.0;
    for (auto const &m : p.terms())
    {
      for (auto const &f : m.factors)
        if (f.power != 0)
          return std::nullopt;
      c += m.coef;
    }
    return c;
  }

  Polynomial expr()
  {
    Polynomial p = term();
    for (;;)
    {
      if (eat('+'))
        p = p + term();
      else if (eat('-'))
        p = p - term();
      else
        return p;
    }
  }

  Polynomial term()
  {
    Polynomial p = unary();
    for (;;)
    {
      if (eat('*'))
        p = p * unary();
      else if (eat('/'))
      {
        std::size_t const at = i_;
        auto const c = constant_of(unary());
        if (!c)
          throw ExpressionError("division by a non-constant", at);
        if (*c == 0.0)
          throw ExpressionError("division by zero", at);
        p = (1.0 / *c) * p;
      }
      else
        return p;
    }
  }

  Polynomial unary()
  {
    if (eat('-'))
      return -1.0 * unary();
    if (eat('+'))
      return unary();
    return power();
  }

  Polynomial power()
  {
    Polynomial base = atom();
    if (!eat('^'))
      return base;
    skip();
    std::size_t const at = i_;
    int k = integer();
    if (k > 16)
      throw ExpressionError("exponent too large", at);
    Polynomial out(1.0);
    for (int r = 0; r < k; ++r)
      out = out * base;
    return out;
  }

  int integer()
  {
    skip();
    std::size_t const start = i_;
    while (i_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[i_])))
      ++i_;
    if (start == i_)
      throw ExpressionError("expected an integer", start);
    return std::stoi(std::string(s_.substr(start, i_ - start)));
  }

  Polynomial atom()
  {
    skip();
    if (i_ >= s_.size())
      throw ExpressionError("unexpected end of input", i_);
    char const c = s_[i_];
    if (c == '(')
    {
      ++i_;
      Polynomial p = expr();
      if (!eat(')'))
        throw ExpressionError("expected ')'", i_);
      return p;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.')
    {
      std::size_t used = 0;
      double v = 0.0;
      try
      {
        v = std::stod(std::string(s_.substr(i_)), &used);
      }
      catch (std::exception const &)
      {
        throw ExpressionError("bad number", i_);
      }
      i_ += used;
      return Polynomial(v);
    }
    std::size_t const at = i_;
    ++i_;
    switch (c)
    {
    case 'u':
      return Polynomial::U();
    case 't':
      return Polynomial::T();
    case 'p':
      return Polynomial::P(integer());
    case 'x':
      return Polynomial::X(integer());
    case 'A':
    {
      // A01 means A(0,1); A10_2 means A(10,2).
      std::size_t const start = i_;
      while (i_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[i_])))
        ++i_;
      std::string const digits(s_.substr(start, i_ - start));
      if (i_ < s_.size() && s_[i_] == '_')
      {
        ++i_;
        if (digits.empty())
          throw ExpressionError("expected a row index", start);
        return Polynomial::A(std::stoi(digits), integer());
      }
      if (digits.size() != 2)
        throw ExpressionError("matrix entries are written Aij or Ai_j", start);
      return Polynomial::A(digits[0] - '0', digits[1] - '0');
    }
    default:
      throw ExpressionError("unknown symbol '" + std::string(1, c) + "'", at);
    }
  }

  std::string_view s_;
  std::size_t i_ = 0;
};

} // namespace detail

inline Polynomial parse_polynomial(std::string_view text)
{
  return detail::ExpressionParser(text).parse();
}

} // namespace rankgauge
