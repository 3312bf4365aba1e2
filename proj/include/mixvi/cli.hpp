#pragma once

// Experiment runner: flat key=value run configs, subcommands and reports.

#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include "mixvi/metrics.hpp"

namespace mixvi::cli {

/// Version string baked in at configure time (git describe, or "unknown").
const char* version();

struct KeySpec {
  std::string key;
  std::string default_value;
  std::string help;
};

/// Subcommand names in help order.
const std::vector<std::string>& subcommands();

/// Known keys of a subcommand with their defaults.
const std::vector<KeySpec>& schema(const std::string& subcommand);

/// Description of every CSV file a subcommand writes.
std::string csv_help(const std::string& subcommand);

/// Resolved settings of one run. Only keys in the subcommand's schema can be
/// set; anything else is a ConfigError.
class RunConfig {
 public:
  explicit RunConfig(std::string subcommand);

  const std::string& subcommand() const noexcept { return subcommand_; }

  void set(const std::string& key, const std::string& value);
  /// "key=value".
  void assign(const std::string& assignment);
  /// One assignment per line; blank lines and lines starting with '#' are skipped.
  void load_file(const std::filesystem::path& path);

  const std::string& get(const std::string& key) const;
  std::string text(const std::string& key) const { return get(key); }
  std::size_t count(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  double real(const std::string& key) const;
  bool flag(const std::string& key) const;
  /// Comma-separated unsigned integers.
  std::vector<std::size_t> count_list(const std::string& key) const;

  /// Header line plus every key=value in schema order.
  std::string resolved() const;
  /// 16 hex digits of FNV-1a over resolved().
  std::string hash() const;

 private:
  std::size_t position(const std::string& key) const;

  std::string subcommand_;
  const std::vector<KeySpec>* schema_;
  std::vector<std::string> values_;
};

struct RunReport {
  std::string subcommand;
  std::string config_hash;
  std::string version;
  std::uint64_t seed = 0;
  std::vector<MetricRecord> metrics;
  double wall_seconds = 0.0;

  /// First record with this metric name (and S, when nonzero); ContractError if absent.
  const MetricRecord& find(const std::string& metric, std::size_t S = 0) const;
  std::string json() const;
};

RunReport cmd_twod(const RunConfig& config);
RunReport cmd_train(const RunConfig& config);
RunReport cmd_eval(const RunConfig& config);
RunReport cmd_sweep_s(const RunConfig& config);
RunReport cmd_probe(const RunConfig& config);
RunReport cmd_dmpmc(const RunConfig& config);

/// Dispatches on config.subcommand(), then writes config.txt and report.json
/// into the run's output directory.
RunReport run(const RunConfig& config);

/// 2 for usage and contract errors, 3 for data and format errors, 4 for
/// numerical failures, 1 otherwise.
int exit_code(const std::exception& e) noexcept;

}  // namespace mixvi::cli
