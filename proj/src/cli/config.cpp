#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cmath>
#include <set>
#include <sstream>

#include "enprompt/cli.hpp"
#include "enprompt/experiments.hpp"

namespace enprompt::cli {
namespace {

using nlohmann::json;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) out.push_back(trim(item));
  return out;
}

std::int64_t parse_integer(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  std::int64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError("key '" + key + "': expected an integer, got '" + raw + "'");
  }
  return v;
}

double parse_real(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw ConfigError("key '" + key + "': expected a finite number, got '" + raw + "'");
  }
  return v;
}

json typed_value(const KeySpec& spec, const std::string& raw) {
  switch (spec.type) {
    case KeyType::text:
      return trim(raw);
    case KeyType::integer:
      return parse_integer(spec.name, raw);
    case KeyType::real:
      return parse_real(spec.name, raw);
    case KeyType::integer_list: {
      json arr = json::array();
      for (const auto& item : split_list(raw)) {
        const std::int64_t v = parse_integer(spec.name, item);
        if (v < 0) throw ConfigError("key '" + spec.name + "': negative entry " + item);
        arr.push_back(static_cast<std::uint64_t>(v));
      }
      return arr;
    }
    case KeyType::text_list: {
      json arr = json::array();
      for (const auto& item : split_list(raw)) {
        if (item.empty()) throw ConfigError("key '" + spec.name + "': empty list entry");
        arr.push_back(item);
      }
      return arr;
    }
  }
  return nullptr;
}

std::string flag_string(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_array()) {
    std::string out;
    for (const auto& item : v) out += (out.empty() ? "" : ",") + flag_string(item);
    return out;
  }
  return v.dump();
}

const KeySpec& spec_of(const std::string& key) {
  for (const auto& k : config_keys()) {
    if (k.name == key) return k;
  }
  throw ConfigError("unknown key '" + key + "'");
}

// Flat "section.key" -> raw value. Top-level keys are rejected.
std::map<std::string, std::pair<std::string, std::string>> read_ini(const std::string& text,
                                                                    const std::string& source) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(source + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  std::map<std::string, std::pair<std::string, std::string>> out;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ConfigError(source + ": key '" + section + "' is outside a [section]");
    }
    for (const auto& [key, value] : body) {
      out[section + "." + key] = {value.get_value<std::string>(), source};
    }
  }
  return out;
}

}  // namespace

const std::vector<KeySpec>& config_keys() {
  using T = KeyType;
  static const std::vector<KeySpec> keys = {
      {"run.output", T::text, "runs", "output directory for artifacts", false},
      {"run.jobs", T::integer, "1", "concurrent (variant, seed) runs", false},
      {"run.protocol", T::text, "base_to_novel",
       "base_to_novel | few_shot | cross_world | domain_shift"},
      {"run.variants", T::text_list, "frozen_only,coop,enprompt", "method variants to run"},
      {"run.seeds", T::integer_list, "0,1,2,3,4", "training seeds"},
      {"world.universe_seed", T::integer, "7", "seed of the concept universe"},
      {"world.first_concept", T::integer, "48", "first universe concept of the task"},
      {"world.num_classes", T::integer, "8", "classes in the task world"},
      {"world.render_seed", T::integer, "1", "seed of the task renderer"},
      {"world.render_gap", T::real, "0.9", "renderer perturbation scale"},
      {"world.pixel_noise", T::real, "0.5", "pixel noise standard deviation"},
      {"world.intra_class", T::real, "0.4", "within-class latent spread"},
      {"encoder.checkpoint", T::text, "",
       "encoder checkpoint path (empty: <run.output>/encoder.json)", false},
      {"pretrain.steps", T::integer, "2000", "contrastive pretraining steps"},
      {"pretrain.batch", T::integer, "32", "pairs per pretraining batch"},
      {"pretrain.learning_rate", T::real, "0.01", "Adam learning rate"},
      {"pretrain.patch_weight", T::real, "1", "weight of the patch-to-text term"},
      {"pretrain.seed", T::integer, "0", "pretraining seed"},
      {"train.epochs", T::integer, "0", "epochs per run (0: protocol default)"},
      {"train.learning_rate", T::real, "0.0025", "SGD learning rate"},
      {"train.momentum", T::real, "0.9", "SGD momentum"},
      {"train.batch_size", T::integer, "4", "images per batch"},
      {"train.shots", T::integer, "16", "training images per class"},
      {"train.test_per_class", T::integer, "100", "test images per class"},
      {"method.prompt_length", T::integer, "4", "visual prompt tokens per layer"},
      {"method.depth", T::integer, "9", "layers that receive visual prompts"},
      {"method.enla_design", T::text, "single", "single | 32x | 16x | 8x | 4x"},
      {"method.fusion", T::text, "input", "input | deep"},
      {"method.text_side", T::text, "global", "global | token"},
      {"method.template", T::text, "photo", "photo | drawing | painting"},
      {"few_shot.shots", T::integer_list, "1,2,4,8,16", "shot counts of the few-shot curve"},
      {"cross_world.targets", T::integer, "3", "re-rendered target worlds"},
      {"ablate.axes", T::text_list, "component_stack",
       "enla_design, fusion_position, component_stack, template, epochs, prompt_length, depth"},
  };
  return keys;
}

RunConfig RunConfig::resolve(const std::string& file_text, const std::string& source,
                             const std::map<std::string, std::string>& flags,
                             const std::optional<std::string>& output_root_env) {
  std::map<std::string, std::pair<std::string, std::string>> raw;
  for (const auto& k : config_keys()) raw[k.name] = {k.fallback, "default"};
  for (const auto& [key, value] : read_ini(file_text, source)) {
    if (!raw.count(key)) throw ConfigError(value.second + ": unknown key '" + key + "'");
    raw[key] = value;
  }
  if (output_root_env && !output_root_env->empty()) {
    raw["run.output"] = {*output_root_env, kOutputRootEnv};
  }
  for (const auto& [key, value] : flags) {
    if (!raw.count(key)) throw ConfigError("unknown key '" + key + "'");
    raw[key] = {value, "flag"};
  }
  RunConfig c;
  c.canonical_ = json::object();
  for (const auto& [key, value] : raw) c.canonical_[key] = typed_value(spec_of(key), value.first);
  for (const char* key : {"run.jobs", "world.num_classes", "pretrain.steps", "pretrain.batch",
                          "train.batch_size", "train.shots", "train.test_per_class",
                          "method.prompt_length", "method.depth"}) {
    if (c.integer(key) < (std::string(key) == "run.jobs" ? 1 : 0)) {
      throw ConfigError("key '" + std::string(key) + "' out of range");
    }
  }
  return c;
}

const std::string& RunConfig::text(const std::string& key) const {
  spec_of(key);
  return canonical_.at(key).get_ref<const std::string&>();
}

std::int64_t RunConfig::integer(const std::string& key) const {
  if (spec_of(key).type != KeyType::integer) throw ConfigError("key '" + key + "' is not an integer");
  return canonical_.at(key).get<std::int64_t>();
}

std::size_t RunConfig::count(const std::string& key) const {
  const std::int64_t v = integer(key);
  if (v < 0) throw ConfigError("key '" + key + "' must be non-negative");
  return static_cast<std::size_t>(v);
}

double RunConfig::real(const std::string& key) const {
  if (spec_of(key).type != KeyType::real) throw ConfigError("key '" + key + "' is not a number");
  return canonical_.at(key).get<double>();
}

std::vector<std::uint64_t> RunConfig::integers(const std::string& key) const {
  if (spec_of(key).type != KeyType::integer_list) throw ConfigError("key '" + key + "' is not a list");
  return canonical_.at(key).get<std::vector<std::uint64_t>>();
}

std::vector<std::string> RunConfig::texts(const std::string& key) const {
  if (spec_of(key).type != KeyType::text_list) throw ConfigError("key '" + key + "' is not a list");
  return canonical_.at(key).get<std::vector<std::string>>();
}

std::map<std::string, std::string> RunConfig::as_flags() const {
  std::map<std::string, std::string> out;
  for (const auto& [key, value] : canonical_.items()) out[key] = flag_string(value);
  return out;
}

std::string RunConfig::digest() const {
  json subset = json::object();
  for (const auto& k : config_keys()) {
    if (k.in_digest) subset[k.name] = canonical_.at(k.name);
  }
  return harness::fnv1a_hex(subset.dump());
}

int exit_code(ErrorCategory category) noexcept {
  switch (category) {
    case ErrorCategory::usage: return 2;
    case ErrorCategory::config: return 3;
    case ErrorCategory::resource: return 4;
    case ErrorCategory::numeric: return 5;
  }
  return 1;
}

}  // namespace enprompt::cli
