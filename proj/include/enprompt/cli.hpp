#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "enprompt/errors.hpp"
#include "json.hpp"

namespace enprompt::cli {

enum class KeyType { text, integer, real, integer_list, text_list };

struct KeySpec {
  std::string name;  // "section.key"
  KeyType type;
  std::string fallback;
  std::string help;
  bool in_digest = true;  // false for keys that cannot change results
};

// Every accepted config key, in help order.
const std::vector<KeySpec>& config_keys();

// Environment variable that overrides the configured output root.
inline constexpr const char* kOutputRootEnv = "ENPROMPT_OUTPUT_ROOT";

// Resolved configuration. Precedence: flags > environment (output root only)
// > config file > defaults.
class RunConfig {
 public:
  // `file_text` is INI text with [section] headers; `source` names it in
  // errors. Unknown keys, duplicates and malformed values raise ConfigError.
  static RunConfig resolve(const std::string& file_text, const std::string& source,
                           const std::map<std::string, std::string>& flags,
                           const std::optional<std::string>& output_root_env);
  static RunConfig defaults() { return resolve("", "<defaults>", {}, std::nullopt); }

  const std::string& text(const std::string& key) const;
  std::int64_t integer(const std::string& key) const;
  std::size_t count(const std::string& key) const;  // non-negative integer
  double real(const std::string& key) const;
  std::vector<std::uint64_t> integers(const std::string& key) const;
  std::vector<std::string> texts(const std::string& key) const;

  // Sorted keys and typed, normalized values; feeding it back through
  // resolve() as flags reproduces it.
  const nlohmann::json& canonical() const noexcept { return canonical_; }
  // Canonical values rendered as flag strings.
  std::map<std::string, std::string> as_flags() const;
  // FNV-1a of the canonical form, restricted to keys that affect results.
  std::string digest() const;

 private:
  nlohmann::json canonical_;
};

int exit_code(ErrorCategory category) noexcept;

// Runs one command line (args exclude the program name). Returns the exit status.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace enprompt::cli
