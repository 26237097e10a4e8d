// rankgauge <mode> --config <file> [--out dir] [--eps list] [--grid n,...] [--seed s]

#include "rankgauge/scenario.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace
{

template <typename T>
std::vector<T> split_list(std::string const &text, char const *what)
{
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
  {
    std::size_t used = 0;
    try
    {
      if constexpr (std::is_same_v<T, int>)
        out.push_back(std::stoi(item, &used));
      else
        out.push_back(std::stod(item, &used));
    }
    catch (std::exception const &)
    {
      used = 0;
    }
    if (used == 0 || used != item.size())
      throw rankgauge::ConfigError(std::string("option --") + what + ": cannot read '" + item + "'");
  }
  if (out.empty())
    throw rankgauge::ConfigError(std::string("option --") + what + ": empty list");
  return out;
}

} // namespace

int main(int argc, char **argv)
{
  using namespace rankgauge;
  CLI::App app{"Constant-rank verification for partially convex solutions"};
  app.set_version_flag("--version", std::string(tool_version));
  app.require_subcommand(1, 1);

  std::string config, out, eps, grid;
  std::optional<std::uint64_t> seed;
  for (char const *m : {"symcheck", "structcheck", "solve", "verify", "parabolic"})
  {
    auto *sub = app.add_subcommand(m, std::string("run a ") + m + " scenario");
    sub->add_option("--config", config, "scenario JSON")->required();
    sub->add_option("--out", out, "output directory (overrides the config)");
    sub->add_option("--eps", eps, "comma-separated regularization list");
    sub->add_option("--grid", grid, "comma-separated nodes per axis, one per level");
    sub->add_option("--seed", seed, "random seed");
  }
  try
  {
    app.parse(argc, argv);
  }
  catch (CLI::ParseError const &e)
  {
    int const code = app.exit(e);
    return code == 0 ? 0 : 3;
  }
  std::string const mode = app.get_subcommands().front()->get_name();

  try
  {
    Scenario s = load_scenario(config);
    if (mode != to_string(s.mode))
      throw ConfigError("mode '" + mode + "' does not match the config mode '" + to_string(s.mode) + "'");
    // Overrides go through the same validation as the file.
    nlohmann::json j = to_json(s);
    if (!out.empty())
      j["output"] = out;
    if (!eps.empty())
      j["eps"] = split_list<double>(eps, "eps");
    if (!grid.empty())
      j["grid"]["nodes"] = split_list<int>(grid, "grid");
    if (seed)
      j["seed"] = *seed;
    s = scenario_from_json(j);

    RunManifest const m = run(s);
    for (auto const &[k, v] : m.verdicts)
      std::cout << to_string(v) << "  " << k << "\n";
    std::cout << "overall: " << to_string(m.overall) << "  (" << s.output << ")\n";
    return exit_code(m.overall);
  }
  catch (ConfigError const &e)
  {
    std::cerr << "rankgauge: config: " << e.what() << "\n";
    return 3;
  }
  catch (std::exception const &e)
  {
    std::cerr << "rankgauge: " << e.what() << "\n";
    return 3;
  }
}
