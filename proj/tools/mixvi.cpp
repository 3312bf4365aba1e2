// Command-line front end: mixvi <subcommand> [options].

#include <cstdint>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mixvi/cli.hpp"

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data;
  std::vector<std::string> sets;
};

std::string keys_footer(const std::string& sub) {
  std::string s = "\nKeys (key=default):\n";
  for (const auto& k : mixvi::cli::schema(sub)) s += "  " + k.key + "=" + k.default_value + "  " + k.help + "\n";
  s += "\nOutputs (besides config.txt and report.json):\n" + mixvi::cli::csv_help(sub);
  return s;
}

const std::map<std::string, std::string> kDescriptions{
    {"twod", "fit a 2D mixture, ensemble, IWVI or IAF approximation to a toy target"},
    {"train", "train a mixture or ensemble VAE and write a checkpoint"},
    {"eval", "estimate test NLL, BPD and component JSD of a checkpoint"},
    {"sweep-s", "train and evaluate over a list of component counts and seeds"},
    {"probe", "linear probe and k-means clustering on latent features"},
    {"dmpmc", "deterministic-mixture population Monte Carlo on a 2D target"},
};

bool has_key(const std::string& sub, const std::string& key) {
  for (const auto& k : mixvi::cli::schema(sub)) {
    if (k.key == key) return true;
  }
  return false;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture variational inference experiments"};
  app.set_version_flag("--version", std::string(mixvi::cli::version()));
  app.require_subcommand(1);
  app.footer("Exit codes: 0 ok, 2 usage, 3 data/format, 4 numerical failure.");

  std::map<std::string, Options> options;
  for (const std::string& sub : mixvi::cli::subcommands()) {
    Options& o = options[sub];
    CLI::App* cmd = app.add_subcommand(sub, kDescriptions.at(sub));
    cmd->footer(keys_footer(sub));
    cmd->add_option("--config", o.config, "key=value file");
    cmd->add_option("--seed", o.seed, "random seed");
    cmd->add_option("--out", o.out, "output directory");
    if (has_key(sub, "data")) cmd->add_option("--data", o.data, "IDX data directory");
    cmd->add_option("--set", o.sets, "key=value override (repeatable)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const std::string sub = app.get_subcommands().front()->get_name();
    const Options& o = options.at(sub);
    mixvi::cli::RunConfig config(sub);
    if (!o.config.empty()) config.load_file(o.config);
    if (o.seed) config.set("seed", std::to_string(*o.seed));
    if (!o.out.empty()) config.set("out", o.out);
    if (!o.data.empty()) config.set("data", o.data);
    for (const std::string& s : o.sets) config.assign(s);
    const mixvi::cli::RunReport report = mixvi::cli::run(config);
    std::cout << report.json();
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "mixvi: " << e.what() << "\n";
    return mixvi::cli::exit_code(e);
  }
}
