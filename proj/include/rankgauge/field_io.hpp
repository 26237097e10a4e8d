#pragma once

// JSON container for solution fields:
//
//   {
//     "format": "rankgauge.field/1",
//     "nprime": 2, "ndouble": 1,
//     "axes": [{"lo": -1.0, "spacing": 0.125, "nodes": 17}, ...],
//     "time": 0.25,                // optional
//     "values": [...]              // row-major, last axis fastest
//   }

#include "rankgauge/grid.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <string>

namespace rankgauge
{

inline constexpr char const *field_format_tag = "rankgauge.field/1";

inline nlohmann::json to_json(Grid const &g)
{
  nlohmann::json axes = nlohmann::json::array();
  for (auto const &ax : g.axes())
    axes.push_back({{"lo", ax.lo}, {"spacing", ax.spacing}, {"nodes", ax.nodes}});
  return axes;
}

inline Grid grid_from_json(nlohmann::json const &axes)
{
  if (!axes.is_array())
    throw PreconditionError("field container: 'axes' must be an array");
  std::vector<Axis> out;
  for (auto const &a : axes)
    out.push_back(Axis{a.at("lo").get<double>(), a.at("spacing").get<double>(),
                       a.at("nodes").get<int>()});
  return Grid(std::move(out));
}

inline nlohmann::json to_json(SolutionField const &u)
{
  nlohmann::json j;
  j["format"] = field_format_tag;
  j["nprime"] = u.nprime();
  j["ndouble"] = u.ndouble();
  j["axes"] = to_json(u.grid());
  if (u.time())
    j["time"] = *u.time();
  j["values"] = u.values();
  return j;
}

inline SolutionField field_from_json(nlohmann::json const &j)
{
  if (j.value("format", std::string{}) != field_format_tag)
    throw PreconditionError("field container: missing or unknown 'format' tag");
  Grid grid = grid_from_json(j.at("axes"));
  int const nprime = j.at("nprime").get<int>();
  int const ndouble = j.at("ndouble").get<int>();
  if (nprime + ndouble != grid.dim())
    throw PreconditionError("field container: nprime + ndouble differs from axis count");
  std::optional<double> time;
  if (j.contains("time"))
    time = j.at("time").get<double>();
  return SolutionField(std::move(grid), nprime, j.at("values").get<std::vector<double>>(), time);
}

inline void write_field(SolutionField const &u, std::string const &path)
{
  std::ofstream out(path);
  if (!out)
    throw Error("write_field: cannot open " + path);
  out << to_json(u).dump() << '\n';
}

inline SolutionField read_field(std::string const &path)
{
  std::ifstream in(path);
  if (!in)
    throw Error("read_field: cannot open " + path);
  return field_from_json(nlohmann::json::parse(in));
}

} // namespace rankgauge
