#pragma once

#include <concepts>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "icleq/training.hpp"

namespace icleq {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ordered key/value pairs of a flat config file.
using ConfigMap = std::vector<std::pair<std::string, std::string>>;

/// Parses `key = value` lines. Blank lines and lines starting with '#' are
/// skipped; duplicate keys are an error.
ConfigMap parse_config(std::string_view text);
ConfigMap read_config_file(const std::filesystem::path& path);
std::string format_config(const ConfigMap& map);

/// Shortest decimal text that parses back to the same binary64.
std::string format_double(double v);
double parse_double(std::string_view text);

/// Typed access to a ConfigMap that remembers which keys were used, so
/// unknown keys can be reported.
class ConfigReader {
 public:
  explicit ConfigReader(ConfigMap map);

  bool read(std::string_view key, int& out);
  template <std::unsigned_integral T>
  bool read(std::string_view key, T& out) {
    std::uint64_t v = 0;
    if (!read_unsigned(key, v)) return false;
    out = static_cast<T>(v);
    return true;
  }
  bool read(std::string_view key, double& out);
  bool read(std::string_view key, bool& out);
  bool read(std::string_view key, std::string& out);
  /// Quantizer bits: an integer or "unquantized".
  bool read_bits(std::string_view key, std::optional<int>& out);
  /// Comma-separated list of numbers.
  bool read_list(std::string_view key, std::vector<double>& out);

  /// Throws ConfigError naming every key that was never read.
  void require_all_consumed() const;

 private:
  const std::string* find(std::string_view key);
  bool read_unsigned(std::string_view key, std::uint64_t& out);

  ConfigMap map_;
  std::set<std::string, std::less<>> used_;
};

std::string format_bits(const std::optional<int>& bits);
std::optional<int> parse_bits(std::string_view text);
std::string format_list(const std::vector<double>& values);

void read_train_config(ConfigReader& reader, TrainConfig& config);
void write_train_config(ConfigMap& map, const TrainConfig& config);

ConfigMap to_config_map(const TrainConfig& config);
/// Reads every TrainConfig field present in `map` over `defaults`; unknown
/// keys are rejected.
TrainConfig train_config_from_map(const ConfigMap& map, const TrainConfig& defaults = {});

}  // namespace icleq
