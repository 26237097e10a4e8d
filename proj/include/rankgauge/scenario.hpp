#pragma once

// Scenario files: parsing with field diagnostics, the per-mode pipelines,
// report emission and the run manifest.

#include "rankgauge/core.hpp"
#include "rankgauge/expression.hpp"
#include "rankgauge/field_io.hpp"
#include "rankgauge/pde_lab.hpp"
#include "rankgauge/rank_verifier.hpp"
#include "rankgauge/structure_condition.hpp"
#include "rankgauge/symfun.hpp"

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <bit>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace rankgauge
{

inline constexpr char const *tool_version = "1.0.0";
inline constexpr std::int64_t max_grid_nodes = 1000000;

/// Bad configuration; the message names the offending field or line.
class ConfigError : public Error
{
public:
  using Error::Error;
};

/// Failure inside a pipeline, labelled with the stage.
class StageError : public Error
{
public:
  StageError(std::string stage, std::string const &what)
      : Error("stage '" + stage + "': " + what), stage_(std::move(stage))
  {
  }
  std::string const &stage() const { return stage_; }

private:
  std::string stage_;
};

enum class Mode
{
  symcheck,
  structcheck,
  solve,
  verify,
  parabolic
};

inline char const *to_string(Mode m)
{
  switch (m)
  {
  case Mode::symcheck:
    return "symcheck";
  case Mode::structcheck:
    return "structcheck";
  case Mode::solve:
    return "solve";
  case Mode::verify:
    return "verify";
  case Mode::parabolic:
    return "parabolic";
  }
  return "?";
}

inline Mode mode_from_string(std::string const &s)
{
  for (Mode m : {Mode::symcheck, Mode::structcheck, Mode::solve, Mode::verify, Mode::parabolic})
    if (s == to_string(m))
      return m;
  throw ConfigError("unknown mode '" + s + "' (symcheck, structcheck, solve, verify, parabolic)");
}

struct OperatorSpec
{
  std::string kind = "laplace"; ///< laplace | polynomial | quasilinear
  std::string f = "0";          ///< source for laplace / quasilinear
  std::string expression;       ///< F for kind = polynomial
  std::vector<std::vector<std::string>> coefficients; ///< quasilinear a^{ab}
  bool operator==(OperatorSpec const &) const = default;
};

struct GridSpec
{
  std::vector<double> lo;
  std::vector<double> hi;
  std::vector<int> levels{17}; ///< nodes per axis, one entry per refinement level
  bool operator==(GridSpec const &) const = default;
};

struct FieldSpec
{
  std::string kind = "rank"; ///< rank | full | closed_form
  int l = 0;
  std::vector<std::vector<double>> vectors;
  std::string h;          ///< optional x'' part for templates
  std::string expression; ///< closed_form
  bool operator==(FieldSpec const &) const = default;
};

struct Scenario
{
  std::string name = "scenario";
  Mode mode = Mode::verify;
  int nprime = 1;
  int ndouble = 0;
  OperatorSpec op;
  GridSpec grid;
  FieldSpec field;
  std::optional<double> threshold;
  std::vector<double> eps{1e-2, 1e-3, 1e-4};
  std::string output = "rankgauge_out";
  std::uint64_t seed = 0;
  // symcheck
  int sym_n = 6;
  int sym_spectra = 200;
  // structcheck
  int basepoints = 8;
  std::vector<std::string> checks{"3_13", "G"};
  // solve
  bool require_positive_f = false;
  // verify
  std::optional<std::vector<double>> center;
  int radius = 2;
  bool solve_field = false;
  // parabolic
  double dt = 0.05;
  int steps = 4;
  double t0 = 0.0;

  int dim() const { return nprime + ndouble; }
  bool operator==(Scenario const &) const = default;
};

// --- Parsing -------------------------------------------------------------------

namespace detail
{

inline std::string describe(nlohmann::json const &j)
{
  return std::string(j.type_name());
}

inline void only_keys(nlohmann::json const &j, std::string const &path, std::set<std::string> const &allowed)
{
  if (!j.is_object())
    throw ConfigError("field '" + path + "': expected an object, got " + describe(j));
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError("field '" + (path.empty() ? "" : path + ".") + it.key() + "': unknown key");
}

inline std::string join(std::string const &path, std::string const &key)
{
  return path.empty() ? key : path + "." + key;
}

template <typename T>
T read(nlohmann::json const &j, std::string const &path);

template <>
inline double read<double>(nlohmann::json const &j, std::string const &path)
{
  if (!j.is_number())
    throw ConfigError("field '" + path + "': expected a number, got " + describe(j));
  return j.get<double>();
}

template <>
inline int read<int>(nlohmann::json const &j, std::string const &path)
{
  if (!j.is_number_integer())
    throw ConfigError("field '" + path + "': expected an integer, got " + describe(j));
  auto const v = j.get<std::int64_t>();
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
    throw ConfigError("field '" + path + "': integer out of range");
  return static_cast<int>(v);
}

template <>
inline std::uint64_t read<std::uint64_t>(nlohmann::json const &j, std::string const &path)
{
  if (!j.is_number_unsigned())
    throw ConfigError("field '" + path + "': expected a non-negative integer, got " + describe(j));
  return j.get<std::uint64_t>();
}

template <>
inline bool read<bool>(nlohmann::json const &j, std::string const &path)
{
  if (!j.is_boolean())
    throw ConfigError("field '" + path + "': expected true or false, got " + describe(j));
  return j.get<bool>();
}

template <>
inline std::string read<std::string>(nlohmann::json const &j, std::string const &path)
{
  if (!j.is_string())
    throw ConfigError("field '" + path + "': expected a string, got " + describe(j));
  return j.get<std::string>();
}

template <typename T>
std::vector<T> read_list(nlohmann::json const &j, std::string const &path)
{
  if (!j.is_array())
    throw ConfigError("field '" + path + "': expected a list, got " + describe(j));
  std::vector<T> out;
  for (std::size_t k = 0; k < j.size(); ++k)
    out.push_back(read<T>(j[k], path + "[" + std::to_string(k) + "]"));
  return out;
}

template <typename T>
void read_if(nlohmann::json const &j, std::string const &key, std::string const &path, T &into)
{
  if (j.contains(key))
    into = read<T>(j[key], join(path, key));
}

/// A scalar or a list of length `n`.
inline std::vector<double> read_bounds(nlohmann::json const &j, std::string const &path, int n)
{
  if (j.is_number())
    return std::vector<double>(static_cast<std::size_t>(n), j.get<double>());
  auto v = read_list<double>(j, path);
  if (static_cast<int>(v.size()) != n)
    throw ConfigError("field '" + path + "': expected " + std::to_string(n) + " entries, got " +
                      std::to_string(v.size()));
  return v;
}

inline Polynomial parse_field_expression(std::string const &text, std::string const &path)
{
  try
  {
    return parse_polynomial(text);
  }
  catch (ExpressionError const &e)
  {
    throw ConfigError("field '" + path + "': " + e.what());
  }
}

inline std::pair<int, int> line_column(std::string const &text, std::size_t byte)
{
  int line = 1, col = 1;
  for (std::size_t k = 0; k + 1 < byte && k < text.size(); ++k)
  {
    if (text[k] == '\n')
    {
      ++line;
      col = 1;
    }
    else
      ++col;
  }
  return {line, col};
}

} // namespace detail

inline Scenario scenario_from_json(nlohmann::json const &j)
{
  using namespace detail;
  only_keys(j, "", {"name", "mode", "dims", "operator", "grid", "field", "thresholds", "eps", "output", "seed",
                    "symcheck", "structcheck", "solve", "verify", "parabolic"});
  Scenario s;
  read_if(j, "name", "", s.name);
  if (j.contains("mode"))
    try
    {
      s.mode = mode_from_string(read<std::string>(j["mode"], "mode"));
    }
    catch (ConfigError const &e)
    {
      throw ConfigError(std::string("field 'mode': ") + e.what());
    }
  if (j.contains("dims"))
  {
    auto const &d = j["dims"];
    only_keys(d, "dims", {"nprime", "ndouble"});
    read_if(d, "nprime", "dims", s.nprime);
    read_if(d, "ndouble", "dims", s.ndouble);
  }
  if (s.nprime < 1 || s.ndouble < 0)
    throw ConfigError("field 'dims': need nprime >= 1 and ndouble >= 0");
  int const n = s.dim();

  if (j.contains("operator"))
  {
    auto const &o = j["operator"];
    only_keys(o, "operator", {"kind", "f", "F", "coefficients"});
    read_if(o, "kind", "operator", s.op.kind);
    if (s.op.kind != "laplace" && s.op.kind != "polynomial" && s.op.kind != "quasilinear")
      throw ConfigError("field 'operator.kind': expected laplace, polynomial or quasilinear");
    read_if(o, "f", "operator", s.op.f);
    read_if(o, "F", "operator", s.op.expression);
    if (o.contains("coefficients"))
    {
      auto const &c = o["coefficients"];
      if (!c.is_array())
        throw ConfigError("field 'operator.coefficients': expected a list of rows");
      for (std::size_t r = 0; r < c.size(); ++r)
        s.op.coefficients.push_back(read_list<std::string>(c[r], "operator.coefficients[" + std::to_string(r) + "]"));
    }
  }
  if (s.op.kind == "polynomial" && s.op.expression.empty())
    throw ConfigError("field 'operator.F': required for kind = polynomial");
  if (s.op.kind == "quasilinear" && static_cast<int>(s.op.coefficients.size()) != n)
    throw ConfigError("field 'operator.coefficients': expected " + std::to_string(n) + " rows");

  s.grid.lo.assign(static_cast<std::size_t>(n), -1.0);
  s.grid.hi.assign(static_cast<std::size_t>(n), 1.0);
  if (j.contains("grid"))
  {
    auto const &g = j["grid"];
    only_keys(g, "grid", {"lo", "hi", "nodes"});
    if (g.contains("lo"))
      s.grid.lo = read_bounds(g["lo"], "grid.lo", n);
    if (g.contains("hi"))
      s.grid.hi = read_bounds(g["hi"], "grid.hi", n);
    if (g.contains("nodes"))
      s.grid.levels = g["nodes"].is_array() ? read_list<int>(g["nodes"], "grid.nodes")
                                            : std::vector<int>{read<int>(g["nodes"], "grid.nodes")};
  }
  for (int a = 0; a < n; ++a)
    if (!(s.grid.hi[static_cast<std::size_t>(a)] > s.grid.lo[static_cast<std::size_t>(a)]))
      throw ConfigError("field 'grid': hi must exceed lo on axis " + std::to_string(a));
  if (s.grid.levels.empty())
    throw ConfigError("field 'grid.nodes': need at least one level");
  for (std::size_t k = 0; k < s.grid.levels.size(); ++k)
  {
    int const m = s.grid.levels[k];
    if (m < SolutionField::min_nodes_per_axis)
      throw ConfigError("field 'grid.nodes[" + std::to_string(k) + "]': need at least 5 nodes per axis");
    if (std::pow(double(m), n) > double(max_grid_nodes))
      throw ConfigError("field 'grid.nodes[" + std::to_string(k) + "]': " + std::to_string(m) + "^" +
                        std::to_string(n) + " nodes exceeds the cap of 10^6");
  }

  if (j.contains("field"))
  {
    auto const &f = j["field"];
    only_keys(f, "field", {"template", "l", "vectors", "h", "closed_form"});
    read_if(f, "template", "field", s.field.kind);
    read_if(f, "l", "field", s.field.l);
    read_if(f, "h", "field", s.field.h);
    if (f.contains("closed_form"))
    {
      s.field.expression = read<std::string>(f["closed_form"], "field.closed_form");
      if (!f.contains("template"))
        s.field.kind = "closed_form";
    }
    if (f.contains("vectors"))
    {
      auto const &v = f["vectors"];
      if (!v.is_array())
        throw ConfigError("field 'field.vectors': expected a list of rows");
      for (std::size_t r = 0; r < v.size(); ++r)
        s.field.vectors.push_back(read_list<double>(v[r], "field.vectors[" + std::to_string(r) + "]"));
    }
    if (s.field.kind != "rank" && s.field.kind != "full" && s.field.kind != "closed_form")
      throw ConfigError("field 'field.template': expected rank, full or closed_form");
    if (s.field.kind == "closed_form" && s.field.expression.empty())
      throw ConfigError("field 'field.closed_form': required for template closed_form");
    if (s.field.l < 0 || s.field.l > s.nprime)
      throw ConfigError("field 'field.l': must lie in [0, nprime]");
  }

  if (j.contains("thresholds"))
  {
    auto const &t = j["thresholds"];
    only_keys(t, "thresholds", {"rank"});
    if (t.contains("rank") && !t["rank"].is_null())
    {
      s.threshold = read<double>(t["rank"], "thresholds.rank");
      if (!(*s.threshold > 0.0))
        throw ConfigError("field 'thresholds.rank': must be positive");
    }
  }
  if (j.contains("eps"))
  {
    s.eps = read_list<double>(j["eps"], "eps");
    for (std::size_t k = 0; k < s.eps.size(); ++k)
      if (!(s.eps[k] > 0.0))
        throw ConfigError("field 'eps[" + std::to_string(k) + "]': must be positive");
  }
  read_if(j, "output", "", s.output);
  read_if(j, "seed", "", s.seed);

  if (j.contains("symcheck"))
  {
    auto const &c = j["symcheck"];
    only_keys(c, "symcheck", {"n", "spectra"});
    read_if(c, "n", "symcheck", s.sym_n);
    read_if(c, "spectra", "symcheck", s.sym_spectra);
    if (s.sym_n < 1 || s.sym_n > 8)
      throw ConfigError("field 'symcheck.n': must lie in [1, 8]");
    if (s.sym_spectra < 1)
      throw ConfigError("field 'symcheck.spectra': must be positive");
  }
  if (j.contains("structcheck"))
  {
    auto const &c = j["structcheck"];
    only_keys(c, "structcheck", {"basepoints", "checks"});
    read_if(c, "basepoints", "structcheck", s.basepoints);
    if (c.contains("checks"))
      s.checks = read_list<std::string>(c["checks"], "structcheck.checks");
    for (auto const &k : s.checks)
      if (k != "3_13" && k != "G" && k != "N1")
        throw ConfigError("field 'structcheck.checks': unknown check '" + k + "' (3_13, G, N1)");
    if (s.basepoints < 1)
      throw ConfigError("field 'structcheck.basepoints': must be positive");
  }
  if (j.contains("solve"))
  {
    auto const &c = j["solve"];
    only_keys(c, "solve", {"require_positive_f"});
    read_if(c, "require_positive_f", "solve", s.require_positive_f);
  }
  if (j.contains("verify"))
  {
    auto const &c = j["verify"];
    only_keys(c, "verify", {"center", "radius", "solve"});
    if (c.contains("center") && !c["center"].is_null())
    {
      s.center = read_list<double>(c["center"], "verify.center");
      if (static_cast<int>(s.center->size()) != n)
        throw ConfigError("field 'verify.center': expected " + std::to_string(n) + " coordinates");
    }
    read_if(c, "radius", "verify", s.radius);
    read_if(c, "solve", "verify", s.solve_field);
  }
  if (j.contains("parabolic"))
  {
    auto const &c = j["parabolic"];
    only_keys(c, "parabolic", {"dt", "steps", "t0"});
    read_if(c, "dt", "parabolic", s.dt);
    read_if(c, "steps", "parabolic", s.steps);
    read_if(c, "t0", "parabolic", s.t0);
    if (!(s.dt > 0.0) || s.steps < 1)
      throw ConfigError("field 'parabolic': need dt > 0 and steps >= 1");
  }

  // Expressions are checked here so errors carry their field.
  if (s.op.kind == "polynomial")
    parse_field_expression(s.op.expression, "operator.F");
  else
    parse_field_expression(s.op.f, "operator.f");
  for (std::size_t r = 0; r < s.op.coefficients.size(); ++r)
    for (std::size_t c = 0; c < s.op.coefficients[r].size(); ++c)
      parse_field_expression(s.op.coefficients[r][c],
                             "operator.coefficients[" + std::to_string(r) + "][" + std::to_string(c) + "]");
  if (!s.field.h.empty())
    parse_field_expression(s.field.h, "field.h");
  if (s.field.kind == "closed_form")
    parse_field_expression(s.field.expression, "field.closed_form");
  return s;
}

inline Scenario parse_scenario(std::string const &text)
{
  nlohmann::json j;
  try
  {
    j = nlohmann::json::parse(text);
  }
  catch (nlohmann::json::parse_error const &e)
  {
    auto const [line, col] = detail::line_column(text, e.byte);
    std::string msg = e.what();
    if (auto const k = msg.find(": ", msg.find("column")); k != std::string::npos)
      msg = msg.substr(k + 2);
    throw ConfigError("parse error at line " + std::to_string(line) + ", column " + std::to_string(col) + ": " + msg);
  }
  return scenario_from_json(j);
}

inline Scenario load_scenario(std::string const &path)
{
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str());
}

/// Canonical form; parses back to an equal Scenario.
inline nlohmann::json to_json(Scenario const &s)
{
  nlohmann::json j;
  j["name"] = s.name;
  j["mode"] = to_string(s.mode);
  j["dims"] = {{"nprime", s.nprime}, {"ndouble", s.ndouble}};
  nlohmann::json op{{"kind", s.op.kind}, {"f", s.op.f}};
  if (!s.op.expression.empty())
    op["F"] = s.op.expression;
  if (!s.op.coefficients.empty())
    op["coefficients"] = s.op.coefficients;
  j["operator"] = op;
  j["grid"] = {{"lo", s.grid.lo}, {"hi", s.grid.hi}, {"nodes", s.grid.levels}};
  nlohmann::json f{{"template", s.field.kind}, {"l", s.field.l}};
  if (!s.field.vectors.empty())
    f["vectors"] = s.field.vectors;
  if (!s.field.h.empty())
    f["h"] = s.field.h;
  if (!s.field.expression.empty())
    f["closed_form"] = s.field.expression;
  j["field"] = f;
  j["thresholds"] = {{"rank", s.threshold ? nlohmann::json(*s.threshold) : nlohmann::json(nullptr)}};
  j["eps"] = s.eps;
  j["output"] = s.output;
  j["seed"] = s.seed;
  j["symcheck"] = {{"n", s.sym_n}, {"spectra", s.sym_spectra}};
  j["structcheck"] = {{"basepoints", s.basepoints}, {"checks", s.checks}};
  j["solve"] = {{"require_positive_f", s.require_positive_f}};
  j["verify"] = {{"center", s.center ? nlohmann::json(*s.center) : nlohmann::json(nullptr)},
                 {"radius", s.radius},
                 {"solve", s.solve_field}};
  j["parabolic"] = {{"dt", s.dt}, {"steps", s.steps}, {"t0", s.t0}};
  return j;
}

// --- Building blocks ------------------------------------------------------------

inline OperatorF build_operator(Scenario const &s)
{
  try
  {
    if (s.op.kind == "polynomial")
      return polynomial_operator("polynomial", s.nprime, s.ndouble, parse_polynomial(s.op.expression));
    Polynomial const f = parse_polynomial(s.op.f);
    if (s.op.kind == "laplace")
      return laplace_operator(s.nprime, s.ndouble, f);
    std::vector<std::vector<Polynomial>> coef;
    for (auto const &row : s.op.coefficients)
    {
      coef.emplace_back();
      for (auto const &c : row)
        coef.back().push_back(parse_polynomial(c));
    }
    return quasilinear_operator(s.nprime, s.ndouble, coef, f);
  }
  catch (PreconditionError const &e)
  {
    throw ConfigError(std::string("field 'operator': ") + e.what());
  }
}

inline ManufacturedSpec build_field(Scenario const &s)
{
  try
  {
    std::optional<Polynomial> h;
    if (!s.field.h.empty())
      h = parse_polynomial(s.field.h);
    if (s.field.kind == "closed_form")
      return ManufacturedSpec("closed_form", s.nprime, s.ndouble, parse_polynomial(s.field.expression), s.field.l);
    if (s.field.kind == "full")
      return full_template(s.nprime, s.ndouble, h);
    std::optional<Matrix> v;
    if (!s.field.vectors.empty())
    {
      Matrix m(static_cast<Eigen::Index>(s.field.vectors.size()), s.nprime);
      for (std::size_t r = 0; r < s.field.vectors.size(); ++r)
      {
        if (static_cast<int>(s.field.vectors[r].size()) != s.nprime)
          throw PreconditionError("vector " + std::to_string(r) + " needs nprime entries");
        for (int i = 0; i < s.nprime; ++i)
          m(static_cast<Eigen::Index>(r), i) = s.field.vectors[r][static_cast<std::size_t>(i)];
      }
      v = m;
    }
    return rank_template(s.nprime, s.ndouble, s.field.l, v, h);
  }
  catch (PreconditionError const &e)
  {
    throw ConfigError(std::string("field 'field': ") + e.what());
  }
}

inline Grid build_grid(Scenario const &s, int level)
{
  std::vector<Axis> axes;
  for (int a = 0; a < s.dim(); ++a)
  {
    double const lo = s.grid.lo[static_cast<std::size_t>(a)], hi = s.grid.hi[static_cast<std::size_t>(a)];
    axes.push_back(Axis{lo, (hi - lo) / (level - 1), level});
  }
  return Grid(axes);
}

// --- Results ----------------------------------------------------------------------

struct RunResult
{
  nlohmann::json report = nlohmann::json::object();
  std::map<std::string, Verdict> verdicts;
  std::vector<std::pair<std::string, std::string>> tables; ///< file name, CSV text

  Verdict overall() const
  {
    Verdict v = Verdict::pass;
    for (auto const &[k, x] : verdicts)
      v = combine(v, x);
    return v;
  }
};

namespace detail
{

template <typename Fn>
auto staged(std::string const &stage, Fn &&fn) -> decltype(fn())
{
  try
  {
    return fn();
  }
  catch (ConfigError const &)
  {
    throw;
  }
  catch (StageError const &)
  {
    throw;
  }
  catch (std::exception const &e)
  {
    throw StageError(stage, e.what());
  }
}

inline std::string level_label(int level) { return "n=" + std::to_string(level); }
inline std::string eps_label(double eps) { return "eps=" + nlohmann::json(eps).dump(); }

/// sigma_k by summing products over all k-subsets.
inline double sigma_subsets(std::vector<double> const &v, int k)
{
  int const n = static_cast<int>(v.size());
  double s = 0.0;
  for (unsigned mask = 0; mask < (1u << n); ++mask)
  {
    if (std::popcount(mask) != k)
      continue;
    double p = 1.0;
    for (int i = 0; i < n; ++i)
      if (mask & (1u << i))
        p *= v[static_cast<std::size_t>(i)];
    s += p;
  }
  return s;
}

/// sigma_m of a general square matrix as the sum of principal m-minors.
inline double sigma_minors(Matrix const &w, int m)
{
  int const n = static_cast<int>(w.rows());
  if (m == 0)
    return 1.0;
  double s = 0.0;
  for (unsigned mask = 0; mask < (1u << n); ++mask)
  {
    if (std::popcount(mask) != m)
      continue;
    std::vector<int> idx;
    for (int i = 0; i < n; ++i)
      if (mask & (1u << i))
        idx.push_back(i);
    Matrix sub(m, m);
    for (int a = 0; a < m; ++a)
      for (int b = 0; b < m; ++b)
        sub(a, b) = w(idx[static_cast<std::size_t>(a)], idx[static_cast<std::size_t>(b)]);
    s += sub.determinant();
  }
  return s;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

inline RunResult run_symcheck(Scenario const &s)
{
  std::mt19937_64 rng(s.seed);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  int const nmax = s.sym_n;
  double err_sigma = 0.0, err_excl = 0.0, err_grad = 0.0, err_hess = 0.0;
  for (int trial = 0; trial < s.sym_spectra; ++trial)
  {
    int const n = 1 + trial % nmax;
    std::vector<double> v(static_cast<std::size_t>(n));
    for (double &x : v)
      x = u(rng);
    Spectrum const lam(v);
    for (int k = 0; k <= n; ++k)
    {
      err_sigma = std::max(err_sigma, rel_err(sigma(lam, k), sigma_subsets(lam.values(), k)));
      for (int i = 0; i < n; ++i)
      {
        double const rhs = sigma_excl(lam, k, i) + lam[i] * sigma_excl(lam, k - 1, i);
        err_excl = std::max(err_excl, rel_err(sigma(lam, k), rhs));
      }
    }
    // Derivatives at diag(lambda) against differences of principal minors,
    // which are affine in each single entry.
    int const m = 1 + trial % n;
    auto const d = sigma_derivatives(lam.values(), m);
    Matrix const w0 = Matrix(Vector(Eigen::Map<Vector const>(lam.values().data(), n)).asDiagonal());
    double const h = 1e-3;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
      {
        Matrix wp = w0, wm = w0;
        wp(i, j) += h;
        wm(i, j) -= h;
        double const fd = (sigma_minors(wp, m) - sigma_minors(wm, m)) / (2.0 * h);
        err_grad = std::max(err_grad, rel_err(d.grad()(i, j), fd));
        for (int k = 0; k < n; ++k)
          for (int l = 0; l < n; ++l)
          {
            if ((i == k && j == l) || (k * n + l) < (i * n + j))
              continue;
            auto at = [&](double si, double sk) {
              Matrix w = w0;
              w(i, j) += si * h;
              w(k, l) += sk * h;
              return sigma_minors(w, m);
            };
            double const fd2 = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / (4.0 * h * h);
            err_hess = std::max(err_hess, rel_err(d.hess(i, j, k, l), fd2));
          }
      }
  }
  RunResult r;
  auto add = [&](std::string const &key, double err, double tol) {
    Verdict const v = err <= tol ? Verdict::pass : Verdict::fail;
    r.verdicts["symcheck/" + key] = v;
    r.report["properties"][key] = {{"max_error", err}, {"tolerance", tol}, {"verdict", to_string(v)}};
  };
  add("sigma_vs_subsets", err_sigma, 1e-12);
  add("exclusion_recursion", err_excl, 1e-12);
  add("gradient_vs_differences", err_grad, 1e-7);
  add("hessian_vs_differences", err_hess, 1e-7);
  r.report["n_max"] = nmax;
  r.report["spectra"] = s.sym_spectra;
  bool all = r.overall() == Verdict::pass;
  r.report["summary"] = all ? "all sigma properties PASS" : "sigma property FAIL";
  return r;
}

inline std::vector<State> random_basepoints(int np, int nd, int count, std::uint64_t seed)
{
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-0.5, 0.5);
  int const n = np + nd;
  std::vector<State> out;
  for (int k = 0; k < count; ++k)
  {
    Matrix r(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        r(i, j) = 0.3 * d(rng);
    Matrix a = Matrix::Identity(n, n) + 0.5 * (r + r.transpose());
    Vector p(n), x(n);
    for (int i = 0; i < n; ++i)
    {
      p(i) = d(rng);
      x(i) = d(rng);
    }
    out.push_back(make_state(a, p, d(rng), x));
  }
  return out;
}

inline RunResult run_structcheck(Scenario const &s)
{
  auto const op = build_operator(s);
  auto const points = random_basepoints(s.nprime, s.ndouble, s.basepoints, s.seed);
  RunResult r;
  r.report["operator"] = op.name();
  nlohmann::json bp = nlohmann::json::array();
  for (auto const &p : points)
  {
    Vector const z = op.layout().pack(p);
    bp.push_back(std::vector<double>(z.data(), z.data() + z.size()));
  }
  r.report["basepoints"] = bp;
  for (auto const &check : s.checks)
  {
    StructureReport rep = staged("structcheck/" + check, [&]() -> StructureReport {
      if (check == "3_13")
        return check_condition_3_13(op, points);
      if (check == "G")
      {
        StructureReport all;
        all.check = "convexity_G";
        for (std::size_t k = 0; k < points.size(); ++k)
        {
          auto const one = check_convexity_G(op, points[k]);
          all.verdict = combine(all.verdict, one.verdict);
          all.min_eigenvalues.push_back(one.worst_eigenvalue);
          all.tolerance = std::max(all.tolerance, one.tolerance);
          if (k == 0 || one.worst_eigenvalue < all.worst_eigenvalue)
          {
            all.worst_eigenvalue = one.worst_eigenvalue;
            all.worst_basepoint = static_cast<int>(k);
            all.witness = one.witness;
            all.witness_space = one.witness_space;
            all.witness_value = one.witness_value;
          }
        }
        all.basepoints = static_cast<int>(points.size());
        return all;
      }
      if (s.nprime != 1)
        throw PreconditionError("check N1 requires nprime = 1");
      StructureReport all;
      all.check = "convexity_N1";
      for (std::size_t k = 0; k < points.size(); ++k)
      {
        auto const one = check_condition_N1(op, points[k]);
        all.verdict = combine(all.verdict, one.verdict);
        all.min_eigenvalues.push_back(one.worst_eigenvalue);
        if (k == 0 || one.worst_eigenvalue < all.worst_eigenvalue)
        {
          all.worst_eigenvalue = one.worst_eigenvalue;
          all.worst_basepoint = static_cast<int>(k);
          all.witness = one.witness;
          all.witness_space = one.witness_space;
          all.witness_value = one.witness_value;
          all.tolerance = one.tolerance;
        }
      }
      all.basepoints = static_cast<int>(points.size());
      return all;
    });
    r.verdicts["structcheck/" + check] = rep.verdict;
    r.report["checks"][check] = rep.to_json();
  }
  return r;
}

inline std::string rank_csv(RankReport const &rank, PhiField const *phi)
{
  std::ostringstream os;
  os.precision(17);
  os << "node";
  for (int a = 0; a < rank.grid.dim(); ++a)
    os << ",x" << a;
  os << ",rank" << (phi ? ",phi" : "") << "\n";
  for (std::size_t k = 0; k < rank.nodes.size(); ++k)
  {
    os << rank.nodes[k];
    Vector const x = rank.grid.coordinates(rank.nodes[k]);
    for (int a = 0; a < rank.grid.dim(); ++a)
      os << ',' << x(a);
    os << ',' << rank.ranks[k];
    if (phi)
      os << ',' << phi->phi[k];
    os << '\n';
  }
  return os.str();
}

inline double max_error(SolutionField const &u, ManufacturedSpec const &truth, double t)
{
  double e = 0.0;
  for (std::int64_t n = 0; n < u.grid().size(); ++n)
    e = std::max(e, std::abs(u[n] - truth.value(u.grid().coordinates(n), t)));
  return e;
}

inline nlohmann::json orders(std::vector<int> const &levels, std::vector<double> const &errors)
{
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t k = 1; k < errors.size(); ++k)
  {
    double const ratio = double(levels[k] - 1) / double(levels[k - 1] - 1);
    out.push_back(errors[k] > 0.0 && errors[k - 1] > 0.0 ? std::log(errors[k - 1] / errors[k]) / std::log(ratio)
                                                        : 0.0);
  }
  return out;
}

/// Rank check that turns a refused field into a FAIL entry.
inline std::optional<RankReport> rank_or_refusal(RunResult &r, std::string const &key, SolutionField const &u,
                                                 std::optional<double> threshold, nlohmann::json &into)
{
  try
  {
    auto rep = verify_constant_rank(u, threshold);
    into["rank"] = rep.to_json();
    r.verdicts[key] = rep.verdict();
    return rep;
  }
  catch (HypothesisError const &e)
  {
    into["rank"] = {{"verdict", "FAIL"}, {"refused", e.what()}};
    r.verdicts[key] = Verdict::fail;
    return std::nullopt;
  }
}

inline RunResult run_solve(Scenario const &s)
{
  auto const op = build_operator(s);
  auto const truth = build_field(s);
  RunResult r;
  std::vector<double> errors;
  for (std::size_t k = 0; k < s.grid.levels.size(); ++k)
  {
    int const level = s.grid.levels[k];
    std::string const lab = level_label(level);
    Grid const g = build_grid(s, level);
    EllipticProblem prob{op, truth.boundary(), s.require_positive_f};
    auto const sol = staged("solve/" + lab, [&] { return solve_elliptic(prob, g); });
    nlohmann::json lev{{"nodes", level}, {"solver", sol.report.to_json()}};
    double const err = max_error(sol.field, truth, 0.0);
    errors.push_back(err);
    lev["max_error_vs_closed_form"] = err;
    r.verdicts["solve/" + lab + "/converged"] = sol.report.converged ? Verdict::pass : Verdict::fail;
    if (s.require_positive_f)
      r.verdicts["solve/" + lab + "/positive_f"] = sol.report.positivity_ok ? Verdict::pass : Verdict::fail;
    double const thr = s.threshold.value_or(default_threshold(sol.field));
    auto const cv = check_partial_convexity(partial_hessian(sol.field), thr);
    lev["convexity"] = {{"verdict", to_string(cv.verdict)},
                        {"min_eigenvalue", cv.min_eigenvalue},
                        {"worst_node", cv.worst_node},
                        {"tolerance", cv.tolerance}};
    r.verdicts["solve/" + lab + "/convexity"] = cv.verdict;
    auto const rank = rank_or_refusal(r, "solve/" + lab + "/constant_rank", sol.field, thr, lev);
    if (k + 1 == s.grid.levels.size())
    {
      std::ostringstream fj;
      fj << to_json(sol.field).dump() << '\n';
      r.tables.emplace_back("field.json", fj.str());
      if (rank)
        r.tables.emplace_back("rank_field.csv", rank_csv(*rank, nullptr));
    }
    r.report["levels"].push_back(lev);
  }
  r.report["observed_orders"] = orders(s.grid.levels, errors);
  return r;
}

inline std::int64_t center_node(Grid const &g, std::vector<double> const &c)
{
  std::vector<int> idx(static_cast<std::size_t>(g.dim()));
  for (int a = 0; a < g.dim(); ++a)
  {
    auto const &ax = g.axis(a);
    int const i = static_cast<int>(std::lround((c[static_cast<std::size_t>(a)] - ax.lo) / ax.spacing));
    idx[static_cast<std::size_t>(a)] = std::clamp(i, 0, ax.nodes - 1);
  }
  return g.flat_index(idx);
}

inline RunResult run_verify(Scenario const &s)
{
  auto const op = build_operator(s);
  auto const truth = build_field(s);
  RunResult r;
  std::vector<std::string> level_labels;
  std::vector<double> k_by_level, c_by_level, lap_by_level;
  std::size_t const mid = s.eps.size() / 2;
  for (std::size_t li = 0; li < s.grid.levels.size(); ++li)
  {
    int const level = s.grid.levels[li];
    std::string const lab = level_label(level);
    Grid const g = build_grid(s, level);
    SolutionField u = staged("verify/" + lab + "/field", [&] {
      if (s.solve_field)
        return solve_elliptic({op, truth.boundary()}, g).field;
      return manufactured(truth, g).field;
    });
    nlohmann::json lev{{"nodes", level}};
    double const thr = s.threshold.value_or(default_threshold(u));
    lev["threshold"] = thr;
    auto const rank = rank_or_refusal(r, "verify/" + lab + "/constant_rank", u, thr, lev);
    level_labels.push_back(lab);
    if (!rank)
    {
      r.report["levels"].push_back(lev);
      continue;
    }
    int const l = rank->l_min;
    VerifyOptions opt;
    opt.threshold = thr;
    opt.radius = s.radius;
    if (s.center)
      opt.center = center_node(g, *s.center);
    bool const last = li + 1 == s.grid.levels.size();

    std::optional<PhiField> first_phi;
    if (l < s.nprime)
    {
      std::vector<double> cs;
      std::vector<std::string> labels;
      for (double eps : s.eps)
      {
        auto pf = staged("verify/" + lab + "/phi", [&] { return phi_field(u, l, eps); });
        lev["phi"].push_back(pf.to_json());
        cs.push_back(pf.fitted_c.value_or(0.0));
        labels.push_back(eps_label(eps));
        if (!first_phi)
          first_phi = std::move(pf);
      }
      auto const st = fit_study("phi fitted C over eps", labels, cs, 1.25, 0.0);
      bool const positive = std::all_of(cs.begin(), cs.end(), [](double c) { return c > 0.0; });
      lev["phi_study"] = st.to_json();
      r.verdicts["verify/" + lab + "/phi"] = st.stable && positive ? Verdict::pass : Verdict::fail;
    }
    if (last)
      r.tables.emplace_back("rank_field.csv", rank_csv(*rank, first_phi ? &*first_phi : nullptr));

    // identity
    {
      std::vector<double> ks;
      std::vector<std::string> labels;
      bool applicable = true, finite = true;
      for (double eps : s.eps)
      {
        auto const fit = staged("verify/" + lab + "/identity",
                                [&] { return identity_3_5_fit(u, op, eps, l, opt); });
        lev["identity"].push_back(fit.to_json());
        applicable = fit.applicable;
        finite = finite && fit.finite;
        ks.push_back(fit.k);
        labels.push_back(eps_label(eps));
      }
      if (applicable)
      {
        auto const st = fit_study("identity K over eps", labels, ks, 2.0, 1e-6);
        lev["identity_study"] = st.to_json();
        r.verdicts["verify/" + lab + "/identity"] = finite && st.stable ? Verdict::pass : Verdict::fail;
        k_by_level.push_back(ks[std::min(mid, ks.size() - 1)]);
      }
    }
    // inequality
    {
      std::vector<double> cs;
      std::vector<std::string> labels;
      bool applicable = true, finite = true;
      for (std::size_t e = 0; e < s.eps.size(); ++e)
      {
        double const eps = s.eps[e];
        VerifyOptions o = opt;
        o.radius.reset();
        auto const led = staged("verify/" + lab + "/inequality", [&] { return inequality_4_4(u, op, eps, l, o); });
        lev["inequality"].push_back(led.to_json());
        applicable = led.applicable;
        finite = finite && led.finite;
        cs.push_back(led.c);
        labels.push_back(eps_label(eps));
        if (last && e == 0 && applicable)
        {
          std::ostringstream os;
          led.write_csv(os);
          r.tables.emplace_back("ledger.csv", os.str());
        }
      }
      if (applicable)
      {
        auto const st = fit_study("inequality C over eps", labels, cs, 2.0, 1e-6);
        lev["inequality_study"] = st.to_json();
        r.verdicts["verify/" + lab + "/inequality"] = finite && st.stable ? Verdict::pass : Verdict::fail;
        c_by_level.push_back(cs[std::min(mid, cs.size() - 1)]);
      }
      else
        r.verdicts["verify/" + lab + "/inequality"] = Verdict::pass;
    }
    // Laplace example
    if (s.op.kind == "laplace" && l < s.nprime)
    {
      auto const rep = staged("verify/" + lab + "/laplace_phi", [&] {
        return laplace_phi_check(u, parse_polynomial(s.op.f), l, opt);
      });
      lev["laplace_phi"] = rep.to_json();
      r.verdicts["verify/" + lab + "/laplace_phi"] = rep.verdict();
      lap_by_level.push_back(rep.ledger.c);
    }
    // regularization
    {
      auto const led = staged("verify/" + lab + "/regularization", [&] { return regularization_ledger(u, op, s.eps); });
      lev["regularization"] = led.to_json();
      r.verdicts["verify/" + lab + "/regularization"] = led.verdict();
    }
    r.report["levels"].push_back(lev);
  }
  if (s.grid.levels.size() > 1)
  {
    auto level_study = [&](std::string const &key, std::string const &what, std::vector<double> const &v) {
      if (v.size() != s.grid.levels.size())
        return;
      auto const st = fit_study(what, level_labels, v, 2.0, 1e-6);
      r.report["refinement"][key] = st.to_json();
      r.verdicts["verify/refinement/" + key] = st.verdict();
    };
    level_study("identity", "identity K over grids", k_by_level);
    level_study("inequality", "inequality C over grids", c_by_level);
    level_study("laplace_phi", "laplace C over grids", lap_by_level);
  }
  return r;
}

inline RunResult run_parabolic(Scenario const &s)
{
  auto const op = build_operator(s);
  auto const truth = build_field(s);
  RunResult r;
  for (std::size_t li = 0; li < s.grid.levels.size(); ++li)
  {
    int const level = s.grid.levels[li];
    std::string const lab = level_label(level);
    Grid const g = build_grid(s, level);
    ParabolicProblem prob{op, manufactured(truth, g, s.t0).field, truth.boundary(), s.t0};
    auto const res = staged("parabolic/" + lab + "/step", [&] { return step_parabolic(prob, s.dt, s.steps); });
    nlohmann::json lev{{"nodes", level}};
    for (auto const &st : res.steps)
      lev["steps"].push_back(st.to_json());
    lev["max_error_vs_closed_form"] = max_error(res.snapshots.back(), truth, *res.snapshots.back().time());
    try
    {
      auto const trace = parabolic_rank_monotonicity(res.snapshots, s.threshold);
      lev["rank_trace"] = trace.to_json();
      r.verdicts["parabolic/" + lab + "/monotone_rank"] = trace.verdict();
      if (li + 1 == s.grid.levels.size())
      {
        std::ostringstream os;
        os << "t,l\n";
        os.precision(17);
        for (auto const &[t, l] : trace.points)
          os << t << ',' << l << '\n';
        r.tables.emplace_back("rank_trace.csv", os.str());
      }
      int lmin = std::numeric_limits<int>::max();
      for (std::size_t k = 1; k < trace.points.size(); ++k)
        lmin = std::min(lmin, trace.points[k].second);
      if (lmin < s.nprime)
      {
        std::vector<double> cs;
        std::vector<std::string> labels;
        bool finite = true;
        for (double eps : s.eps)
        {
          VerifyOptions o;
          o.threshold = trace.threshold;
          auto const led = staged("parabolic/" + lab + "/inequality",
                                  [&] { return inequality_5_1(res.snapshots, op, eps, lmin, o); });
          lev["inequality"].push_back(led.to_json());
          finite = finite && led.finite;
          cs.push_back(led.c);
          labels.push_back(eps_label(eps));
        }
        auto const st = fit_study("parabolic C over eps", labels, cs, 2.0, 1e-6);
        lev["inequality_study"] = st.to_json();
        r.verdicts["parabolic/" + lab + "/inequality"] = finite && st.stable ? Verdict::pass : Verdict::fail;
      }
    }
    catch (HypothesisError const &e)
    {
      lev["rank_trace"] = {{"verdict", "FAIL"}, {"refused", e.what()}};
      r.verdicts["parabolic/" + lab + "/monotone_rank"] = Verdict::fail;
    }
    r.report["levels"].push_back(lev);
  }
  return r;
}

} // namespace detail

inline RunResult run_pipeline(Scenario const &s)
{
  RunResult r;
  switch (s.mode)
  {
  case Mode::symcheck:
    r = detail::run_symcheck(s);
    break;
  case Mode::structcheck:
    r = detail::run_structcheck(s);
    break;
  case Mode::solve:
    r = detail::run_solve(s);
    break;
  case Mode::verify:
    r = detail::run_verify(s);
    break;
  case Mode::parabolic:
    r = detail::run_parabolic(s);
    break;
  }
  r.report["scenario"] = s.name;
  r.report["mode"] = to_string(s.mode);
  r.report["overall"] = to_string(r.overall());
  nlohmann::json v = nlohmann::json::object();
  for (auto const &[k, x] : r.verdicts)
    v[k] = to_string(x);
  r.report["verdicts"] = v;
  return r;
}

// --- Output ----------------------------------------------------------------------

inline std::string sha256_hex(std::string const &data)
{
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw NumericalError("sha256: digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i)
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

struct EmittedFile
{
  std::string path; ///< relative to the output directory
  std::string sha256;
  std::size_t bytes = 0;
};

/// Writes report.json and the CSV tables; returns the files with digests.
inline std::vector<EmittedFile> emit_report(RunResult const &r, std::string const &dir)
{
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir))
    throw Error("output directory '" + dir + "' is not writable");
  std::vector<std::pair<std::string, std::string>> files;
  files.emplace_back("report.json", r.report.dump(2) + "\n");
  for (auto const &t : r.tables)
    files.push_back(t);
  std::vector<EmittedFile> out;
  for (auto const &[name, content] : files)
  {
    std::ofstream os(fs::path(dir) / name, std::ios::binary);
    os << content;
    if (!os)
      throw Error("cannot write '" + (fs::path(dir) / name).string() + "'");
    out.push_back({name, sha256_hex(content), content.size()});
  }
  return out;
}

struct RunManifest
{
  nlohmann::json scenario;
  std::string version = tool_version;
  double wall_time_s = 0.0;
  std::map<std::string, Verdict> verdicts;
  Verdict overall = Verdict::pass;
  std::vector<EmittedFile> files;

  nlohmann::json to_json() const
  {
    nlohmann::json v = nlohmann::json::object();
    for (auto const &[k, x] : verdicts)
      v[k] = to_string(x);
    nlohmann::json f = nlohmann::json::array();
    for (auto const &e : files)
      f.push_back({{"path", e.path}, {"sha256", e.sha256}, {"bytes", e.bytes}});
    return {{"tool", "rankgauge"}, {"version", version},   {"scenario", scenario}, {"wall_time_s", wall_time_s},
            {"verdicts", v},      {"overall", to_string(overall)}, {"files", f}};
  }
};

/// Runs the scenario, writes reports into `s.output` and the manifest last.
inline RunManifest run(Scenario const &s)
{
  auto const start = std::chrono::steady_clock::now();
  RunResult const r = run_pipeline(s);
  RunManifest m;
  m.scenario = to_json(s);
  m.verdicts = r.verdicts;
  m.overall = r.overall();
  m.files = emit_report(r, s.output);
  m.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::string const text = m.to_json().dump(2) + "\n";
  std::ofstream os(std::filesystem::path(s.output) / "manifest.json", std::ios::binary);
  os << text;
  if (!os)
    throw Error("cannot write manifest.json");
  return m;
}

/// 0 all PASS, 1 any FAIL, 2 INCONCLUSIVE present.
inline int exit_code(Verdict v)
{
  switch (v)
  {
  case Verdict::pass:
    return 0;
  case Verdict::fail:
    return 1;
  case Verdict::inconclusive:
    return 2;
  }
  return 3;
}

} // namespace rankgauge
