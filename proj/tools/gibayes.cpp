#include <fstream>
#include <iostream>

#include "CLI11.hpp"

#include "gibayes/harness.hpp"

using namespace gibayes;

namespace {

std::vector<ExperimentConfig> load_config_file(const std::string& path, std::uint64_t seed, bool seed_given) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  std::vector<ExperimentConfig> out;
  const Json runs = j.is_object() && j.contains("runs") ? j.at("runs") : (j.is_array() ? j : Json::array({j}));
  for (const auto& r : runs) {
    ExperimentConfig c = config_from_json(r);
    if (seed_given) c.seed = seed;
    validate(c);
    out.push_back(std::move(c));
  }
  if (out.empty()) throw ConfigError("config '" + path + "' has no runs");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Global inducing point variational inference for BNNs and deep GPs"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::string out_dir = "out", format = "json", data_dir = "data", config_path;
  std::size_t epochs = 0, splits = 5;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "master seed");
    sub->add_option("--out", out_dir, "output directory")->capture_default_str();
    sub->add_option("--format", format, "metrics stream format")
        ->check(CLI::IsMember({"json", "csv"}))
        ->capture_default_str();
    sub->add_option("--epochs", epochs, "override the training length of every run");
  };

  auto* run = app.add_subcommand("run", "run the configurations in a JSON file");
  run->add_option("--config", config_path, "JSON config (object, array, or {\"runs\": [...]})")->required();
  common(run);

  std::vector<CLI::App*> presets;
  for (const char* name : {"toy", "linear", "uci", "sweep", "compositional"}) {
    auto* sub = app.add_subcommand(name, std::string(name) + " preset");
    common(sub);
    if (std::string(name) == "uci") {
      sub->add_option("--data-dir", data_dir, "directory holding boston_style.csv")->capture_default_str();
      sub->add_option("--splits", splits, "number of train/test splits")->capture_default_str();
    }
    presets.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    std::vector<ExperimentConfig> configs;
    CLI::App* chosen = app.get_subcommands().front();
    const bool seed_given = chosen->count("--seed") > 0;
    if (chosen == run) {
      configs = load_config_file(config_path, seed, seed_given);
      if (epochs != 0)
        for (auto& c : configs) c.epochs = epochs;
    } else {
      configs = preset(chosen->get_name(), {seed, data_dir, epochs, splits});
    }
    ArtifactWriter writer(out_dir, parse_format(format));
    const RecordSink sink = writer.sink();
    const BatchResult b = run_batch(configs, [&](const MetricsRecord& r) {
      sink(r);
      std::cerr << r.run << " epoch " << r.epoch << " " << r.status;
      if (std::isfinite(r.elbo)) std::cerr << " elbo " << r.elbo;
      if (!r.error.empty()) std::cerr << ": " << r.error;
      std::cerr << '\n';
    });
    writer.finish(b);
    return exit_code(b);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
