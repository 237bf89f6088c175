// perslm: personalized language model pipeline.
//
//   perslm synth         --config c.conf
//   perslm build-vocab   --config c.conf
//   perslm train-global  --config c.conf [--backend lstm|ngram]
//   perslm train-users   --config c.conf
//   perslm evaluate      --config c.conf [--strategy base,skip,backoff] [--phi p] [--grid 0:1:0.001]
//   perslm optimize-alpha --config c.conf
//   perslm report        --config c.conf
//
// Exit status 0 on success, 1 on a failed command, 2 on a usage error.

#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "perslm/perslm.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Personalized language model pipeline"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir, backend, strategy, grid;
  std::optional<double> phi;
  std::vector<std::string> settings;
  app.add_option("--config", config_path, "key=value or JSON config file");
  app.add_option("--seed", seed, "random seed (required here or in the config)");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--backend", backend, "global model backend")->check(CLI::IsMember({"lstm", "ngram"}));
  app.add_option("--strategy", strategy, "OOV strategies, comma separated (base,skip,backoff)");
  app.add_option("--phi", phi, "backoff OOV probability (default 1/V)");
  app.add_option("--grid", grid, "alpha grid start:stop:step");
  app.add_option("--set", settings, "extra config override key=value (repeatable)");

  using Command = std::function<void(const perslm::CommandContext&)>;
  const std::vector<std::pair<std::string, std::pair<std::string, Command>>> verbs = {
      {"synth", {"generate a synthetic corpus", perslm::cmd_synth}},
      {"build-vocab", {"split corpora and build the vocabulary", perslm::cmd_build_vocab}},
      {"train-global", {"train the global model", perslm::cmd_train_global}},
      {"train-users", {"train one personal n-gram model per user", perslm::cmd_train_users}},
      {"evaluate", {"perplexity curves over the alpha grid", perslm::cmd_evaluate}},
      {"optimize-alpha", {"constant, oracle and heuristic alpha selection", perslm::cmd_optimize_alpha}},
      {"report", {"lift by comment statistics", perslm::cmd_report}},
  };
  std::map<const CLI::App*, Command> handlers;
  for (const auto& [name, entry] : verbs) handlers[app.add_subcommand(name, entry.first)] = entry.second;

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    perslm::CommandContext ctx;
    if (!config_path.empty()) perslm::apply_settings(ctx.config, perslm::load_config_file(config_path));
    perslm::KeyValues overrides;
    for (const auto& s : settings) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw perslm::InvalidArgument("--set expects key=value, got " + s);
      overrides[s.substr(0, eq)] = s.substr(eq + 1);
    }
    if (seed) overrides["seed"] = std::to_string(*seed);
    if (!out_dir.empty()) overrides["out"] = out_dir;
    if (!backend.empty()) overrides["backend"] = backend;
    if (!strategy.empty()) overrides["strategies"] = strategy;
    if (phi) overrides["phi"] = perslm::detail::exact(*phi);
    if (!grid.empty()) overrides["grid"] = grid;
    perslm::apply_settings(ctx.config, overrides);
    perslm::validate(ctx.config);

    for (const auto* sub : app.get_subcommands()) handlers.at(sub)(ctx);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
