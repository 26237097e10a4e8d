#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace rankgauge
{

/// Base class for every error raised by the library.
class Error : public std::runtime_error
{
public:
  explicit Error(std::string const &what) : std::runtime_error(what) {}
};

/// A precondition of an operation was violated by the caller.
class PreconditionError : public Error
{
public:
  explicit PreconditionError(std::string const &what) : Error(what) {}
};

/// A numerical procedure failed (divergence, non-finite data, singular block).
class NumericalError : public Error
{
public:
  explicit NumericalError(std::string const &what) : Error(what) {}
};

enum class Verdict
{
  pass,
  fail,
  inconclusive
};

inline char const *to_string(Verdict v)
{
  switch (v)
  {
  case Verdict::pass:
    return "PASS";
  case Verdict::fail:
    return "FAIL";
  case Verdict::inconclusive:
    return "INCONCLUSIVE";
  }
  return "?";
}

/// Worst of two verdicts: FAIL dominates INCONCLUSIVE dominates PASS.
inline Verdict combine(Verdict a, Verdict b)
{
  if (a == Verdict::fail || b == Verdict::fail)
    return Verdict::fail;
  if (a == Verdict::inconclusive || b == Verdict::inconclusive)
    return Verdict::inconclusive;
  return Verdict::pass;
}

/// Worker count: RANKGAUGE_THREADS caps it, otherwise hardware concurrency.
inline unsigned worker_count()
{
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (char const *env = std::getenv("RANKGAUGE_THREADS"))
  {
    int const cap = std::atoi(env);
    if (cap >= 1)
      n = std::min<unsigned>(n, static_cast<unsigned>(cap));
  }
  return n;
}

/// Runs body(i) for i in [0, count). Each index is visited exactly once and
/// bodies must only write to index-owned storage, so results do not depend on
/// the number of workers.
template <typename Body>
void parallel_for(std::size_t count, Body &&body)
{
  unsigned const workers =
      static_cast<unsigned>(std::min<std::size_t>(worker_count(), count));
  if (workers <= 1)
  {
    for (std::size_t i = 0; i < count; ++i)
      body(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::size_t const chunk = (count + workers - 1) / workers;
  for (unsigned w = 0; w < workers; ++w)
  {
    std::size_t const begin = w * chunk;
    std::size_t const end = std::min(count, begin + chunk);
    if (begin >= end)
      break;
    pool.emplace_back([begin, end, &body] {
      for (std::size_t i = begin; i < end; ++i)
        body(i);
    });
  }
  for (auto &t : pool)
    t.join();
}

/// True when every value lies within `factor` of every other. Values whose
/// magnitude is below `floor` count as zero; a set of zeros is stable, a mix
/// of zeros and non-zeros is not.
inline bool stable_within(std::vector<double> const &values, double factor,
                          double floor)
{
  if (values.empty())
    return true;
  std::size_t zeros = 0;
  double lo = 0.0, hi = 0.0;
  bool first = true;
  for (double v : values)
  {
    double const a = std::abs(v);
    if (a <= floor)
    {
      ++zeros;
      continue;
    }
    if (first)
    {
      lo = hi = a;
      first = false;
    }
    lo = std::min(lo, a);
    hi = std::max(hi, a);
  }
  if (zeros == values.size())
    return true;
  if (zeros > 0)
    return false;
  return hi <= factor * lo;
}

/// Relative spread (max - min) / max of positive values; 0 for an all-zero set.
inline double relative_spread(std::vector<double> const &values)
{
  if (values.empty())
    return 0.0;
  auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  if (*hi == 0.0)
    return 0.0;
  return (*hi - *lo) / std::abs(*hi);
}

} // namespace rankgauge
