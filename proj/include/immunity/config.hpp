#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "immunity/attacks.hpp"
#include "immunity/train_eval.hpp"

namespace immunity {

/// Parses a number, accepting a fraction "p/q" (so "8/255" is exactly 8.0 / 255.0).
double parse_number(std::string_view text);

/// "identity", "fresh", or "fixed:2,0,1" (0-based).
RsgMode parse_rsg_mode(const std::string& text);
std::string to_string(const RsgMode& rsg);

/// Flat `key = value` configuration. Lines may carry `#` comments; unknown keys
/// are rejected.
class RunConfig {
 public:
  /// Every recognised key.
  static const std::vector<std::string>& known_keys();

  /// Collects every malformed line and unknown key before throwing ConfigError.
  static RunConfig parse(std::string_view text, const std::string& source = "<config>");
  static RunConfig load(const std::filesystem::path& path);

  /// Command-line override; throws ConfigError for unknown keys.
  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

struct ResolvedConfig {
  std::size_t n_experts = 5;
  std::vector<std::size_t> widths{8, 16, 16};
  TrainConfig train;
  std::optional<AttackSpec> attack;  // empty for "none"
  std::size_t iscore_samples = 256;
  std::size_t eval_batch_size = 100;

  /// Every field with its resolved value, as a JSON object.
  std::string echo_json() const;
};

/// Applies `config` over the defaults. With `require_coefficients`, alpha, beta
/// and gamma must be present. All problems are reported in one ConfigError.
ResolvedConfig resolve(const RunConfig& config, bool require_coefficients);

}  // namespace immunity
