#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "CLI11.hpp"
#include "enprompt/checkpoint.hpp"
#include "enprompt/cli.hpp"
#include "enprompt/encoder.hpp"
#include "enprompt/experiments.hpp"
#include "enprompt/method.hpp"

namespace enprompt::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path output_dir(const RunConfig& cfg) {
  const fs::path dir = cfg.text("run.output");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw ResourceError("cannot create output directory '" + dir.string() + "'");
  }
  return dir;
}

std::string encoder_path(const RunConfig& cfg) {
  const std::string& p = cfg.text("encoder.checkpoint");
  return p.empty() ? (fs::path(cfg.text("run.output")) / "encoder.json").string() : p;
}

world::Universe universe_of(const RunConfig& cfg) {
  return world::make_universe(static_cast<std::uint64_t>(cfg.integer("world.universe_seed")));
}

world::WorldConfig world_config(const RunConfig& cfg) {
  world::WorldConfig w;
  w.first_concept = cfg.count("world.first_concept");
  w.num_classes = cfg.count("world.num_classes");
  w.render_seed = static_cast<std::uint64_t>(cfg.integer("world.render_seed"));
  w.render_gap = cfg.real("world.render_gap");
  w.pixel_noise = cfg.real("world.pixel_noise");
  w.intra_class = cfg.real("world.intra_class");
  return w;
}

std::vector<harness::Variant> variants_of(const RunConfig& cfg) {
  std::vector<harness::Variant> out;
  for (const auto& name : cfg.texts("run.variants")) {
    harness::Variant v = harness::variant_of(method::method_from_string(name));
    auto& c = v.config;
    c.prompt_length = cfg.count("method.prompt_length");
    c.depth = cfg.count("method.depth");
    c.enla_design = method::enla_design_from_string(cfg.text("method.enla_design"));
    c.fusion = method::fusion_from_string(cfg.text("method.fusion"));
    c.text_side = method::text_side_from_string(cfg.text("method.text_side"));
    c.template_ids = world::template_tokens(world::template_from_string(cfg.text("method.template")));
    out.push_back(std::move(v));
  }
  if (out.empty()) throw ConfigError("key 'run.variants' is empty");
  return out;
}

harness::RunOptions run_options(const RunConfig& cfg) {
  harness::RunOptions o;
  o.shots = cfg.count("train.shots");
  o.test_per_class = cfg.count("train.test_per_class");
  o.epochs = cfg.count("train.epochs");
  o.hyper.learning_rate = cfg.real("train.learning_rate");
  o.hyper.momentum = cfg.real("train.momentum");
  o.hyper.batch_size = cfg.count("train.batch_size");
  o.jobs = cfg.count("run.jobs");
  return o;
}

std::vector<std::uint64_t> seeds_of(const RunConfig& cfg) {
  auto seeds = cfg.integers("run.seeds");
  if (seeds.empty()) throw ConfigError("key 'run.seeds' is empty");
  return seeds;
}

fs::path state_path(const fs::path& dir, const std::string& variant, std::uint64_t seed) {
  return dir / "states" / (variant + "_seed" + std::to_string(seed) + ".json");
}

void write_reports(const fs::path& dir, const std::string& stem,
                   const std::vector<harness::ExperimentReport>& reports) {
  write_file_atomic((dir / (stem + ".json")).string(), harness::reports_to_json(reports));
  std::ostringstream csv;
  harness::write_csv(csv, reports);
  write_file_atomic((dir / (stem + ".csv")).string(), csv.str());
}

json manifest(const std::string& command, const RunConfig& cfg) {
  return {{"command", command}, {"config", cfg.canonical()}, {"config_digest", cfg.digest()}};
}

int cmd_pretrain(const RunConfig& cfg, std::ostream& out) {
  const fs::path dir = output_dir(cfg);
  const auto universe = universe_of(cfg);
  encoders::PretrainConfig pc;
  pc.steps = cfg.count("pretrain.steps");
  pc.batch = cfg.count("pretrain.batch");
  pc.learning_rate = cfg.real("pretrain.learning_rate");
  pc.patch_weight = cfg.real("pretrain.patch_weight");
  pc.seed = static_cast<std::uint64_t>(cfg.integer("pretrain.seed"));
  const auto result = encoders::pretrain_contrastive(
      universe, encoders::EncoderConfig::for_world(universe.dims), pc);

  const std::string path = encoder_path(cfg);
  std::ostringstream bytes;
  encoders::save_encoder(bytes, result.encoder);
  write_file_atomic(path, bytes.str());

  json m = manifest("pretrain", cfg);
  m["checkpoint"] = path;
  m["steps"] = result.losses.size();
  m["final_loss"] = result.losses.empty() ? json(nullptr) : json(result.losses.back());
  write_file_atomic((dir / "pretrain_manifest.json").string(), m.dump(2) + "\n");
  out << "encoder written to " << path;
  if (!result.losses.empty()) out << " (final loss " << result.losses.back() << ")";
  out << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  const std::string protocol = cfg.text("run.protocol");
  if (protocol != "base_to_novel" && protocol != "few_shot" && protocol != "cross_world" &&
      protocol != "domain_shift") {
    throw UsageError("unknown protocol '" + protocol + "'");
  }
  const fs::path dir = output_dir(cfg);
  const auto enc = encoders::load_encoder(encoder_path(cfg));
  const auto universe = universe_of(cfg);
  const auto wc = world_config(cfg);
  const auto w = world::generate_world(universe, wc);
  const auto variants = variants_of(cfg);
  const auto seeds = seeds_of(cfg);

  json runs = json::array();
  harness::RunOptions options = run_options(cfg);
  options.observer = [&](const harness::RunRecord& r) {
    const auto& losses = r.result->epoch_losses;
    runs.push_back({{"variant", r.variant},
                    {"seed", r.seed},
                    {"param_count", r.result->param_count},
                    {"unconverged_solves", r.result->unconverged_solves},
                    {"final_loss", losses.empty() ? json(nullptr) : json(losses.back())}});
    if (protocol == "base_to_novel") {
      std::ostringstream bytes;
      method::save_state(bytes, r.result->state);
      const fs::path p = state_path(dir, r.variant, r.seed);
      fs::create_directories(p.parent_path());
      write_file_atomic(p.string(), bytes.str());
    }
  };

  std::vector<harness::ExperimentReport> reports;
  if (protocol == "base_to_novel") {
    reports = harness::run_base_to_novel(enc, {w}, variants, seeds, options);
  } else if (protocol == "few_shot") {
    std::vector<std::size_t> shots;
    for (auto k : cfg.integers("few_shot.shots")) shots.push_back(static_cast<std::size_t>(k));
    reports = harness::run_few_shot(enc, w, variants, shots, seeds, options);
  } else if (protocol == "cross_world") {
    const auto targets = harness::sibling_worlds(universe, wc, cfg.count("cross_world.targets"));
    reports = harness::run_cross_world(enc, w, targets, variants, seeds, options);
  } else {
    reports = harness::run_domain_shift(enc, w, harness::default_shifts(), variants, seeds, options);
  }

  write_reports(dir, "train_" + protocol, reports);
  json m = manifest("train", cfg);
  m["runs"] = runs;
  write_file_atomic((dir / ("train_" + protocol + "_manifest.json")).string(), m.dump(2) + "\n");
  out << harness::render_table(reports);
  return 0;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  const std::string protocol = cfg.text("run.protocol");
  if (protocol != "base_to_novel") {
    throw UsageError("eval scores saved base_to_novel states; protocol '" + protocol + "'");
  }
  const fs::path dir = output_dir(cfg);
  const auto enc = encoders::load_encoder(encoder_path(cfg));
  const auto w = world::generate_world(universe_of(cfg), world_config(cfg));
  const auto seeds = seeds_of(cfg);
  const std::size_t test_per_class = cfg.count("train.test_per_class");
  const auto split = world::base_novel_split(w, 1, test_per_class);
  std::vector<std::size_t> base_tokens;
  for (std::size_t c : split.base) base_tokens.push_back(w.class_token(c));

  std::vector<harness::ExperimentReport> reports;
  for (const auto& v : variants_of(cfg)) {
    std::vector<std::map<std::string, double>> per_seed;
    std::size_t params = 0;
    for (std::uint64_t seed : seeds) {
      method::PromptState state = method::init_state(v.config, enc, base_tokens, seed);
      if (state.learnable_count() > 0) {
        const fs::path p = state_path(dir, v.name, seed);
        if (!fs::exists(p)) {
          throw ResourceError("no trained state '" + p.string() + "'; run train first");
        }
        std::istringstream in(read_file(p.string()));
        state = method::load_state(in);
        if (state.config.kind != v.config.kind) {
          throw ConfigError("state '" + p.string() + "' holds a different variant");
        }
      }
      params = method::count_learnable_params(state);
      const auto s = harness::score_base_to_novel(enc, w, state, test_per_class);
      per_seed.push_back({{"base_acc", s.base_acc},
                          {"novel_acc", s.novel_acc},
                          {"hm", harness::harmonic_mean(s.base_acc, s.novel_acc)}});
    }
    auto r = harness::summarize("eval", v.name, seeds, per_seed);
    r.param_count = params;
    r.config_digest = harness::fnv1a_hex(cfg.digest() + ":" + v.name);
    reports.push_back(std::move(r));
  }
  write_reports(dir, "eval", reports);
  out << harness::render_table(reports);
  return 0;
}

int cmd_ablate(const RunConfig& cfg, std::ostream& out) {
  const fs::path dir = output_dir(cfg);
  const auto enc = encoders::load_encoder(encoder_path(cfg));
  const auto w = world::generate_world(universe_of(cfg), world_config(cfg));
  std::vector<harness::Axis> axes;
  for (const auto& name : cfg.texts("ablate.axes")) axes.push_back(harness::axis_from_string(name));
  if (axes.empty()) throw ConfigError("key 'ablate.axes' is empty");
  const auto reports = harness::run_ablation_matrix(enc, w, axes, seeds_of(cfg), run_options(cfg));
  write_reports(dir, "ablation", reports);
  out << harness::render_table(reports);
  return 0;
}

int cmd_report(const RunConfig& cfg, const std::string& dir_flag, std::ostream& out) {
  const fs::path dir = dir_flag.empty() ? fs::path(cfg.text("run.output")) : fs::path(dir_flag);
  std::vector<fs::path> files;
  std::error_code ec;
  if (fs::is_directory(dir, ec)) {
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::string text;
  for (const auto& f : files) {
    std::vector<harness::ExperimentReport> reports;
    try {
      reports = harness::reports_from_json(read_file(f.string()));
    } catch (const ConfigError&) {
      continue;  // manifests and checkpoints
    }
    text += harness::render_table(reports) + "\n";
  }
  if (text.empty()) throw ResourceError("no reports found in '" + dir.string() + "'");
  write_file_atomic((dir / "report.txt").string(), text);
  out << text;
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Prompt learning experiments on a synthetic dual encoder", "enprompt"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  struct Command {
    CLI::App* app = nullptr;
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> jobs;
    std::map<std::string, std::string> values;
    std::string report_dir;
  };
  std::map<std::string, Command> commands;
  const std::vector<std::pair<std::string, std::string>> names = {
      {"pretrain", "contrastively pretrain the encoder and write a checkpoint"},
      {"train", "train the configured variants under run.protocol"},
      {"eval", "score trained base-to-novel states (frozen_only needs none)"},
      {"ablate", "base-to-novel runs over the ablate.axes matrix"},
      {"report", "render stored reports as text tables"}};
  for (const auto& [name, about] : names) {
    Command& c = commands[name];
    c.app = app.add_subcommand(name, about);
    c.app->add_option("--config", c.config_path, "INI config file with [section] key = value");
    c.app->add_option("--seed", c.seed,
                      name == "pretrain" ? "pretraining seed (pretrain.seed)"
                                         : "run a single seed (run.seeds)");
    c.app->add_option("--jobs", c.jobs, "concurrent runs (run.jobs)");
    if (name == "report") {
      c.app->add_option("dir", c.report_dir, "directory holding reports (default run.output)");
    }
    auto* keys = c.app->add_option_group("config keys", "Any key may also be set in the file");
    for (const auto& k : config_keys()) {
      keys->add_option_function<std::string>(
          "--" + k.name, [&c, key = k.name](const std::string& v) { c.values[key] = v; },
          k.help + " [default: " + (k.fallback.empty() ? "\"\"" : k.fallback) + "]");
    }
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int status = app.exit(e, out, err);
    return status == 0 ? 0 : exit_code(ErrorCategory::usage);
  }

  std::string name;
  for (const auto& [n, c] : commands) {
    if (c.app->parsed()) name = n;
  }
  Command& c = commands.at(name);
  try {
    std::map<std::string, std::string> flags = c.values;
    if (c.seed) flags[name == "pretrain" ? "pretrain.seed" : "run.seeds"] = std::to_string(*c.seed);
    if (c.jobs) flags["run.jobs"] = std::to_string(*c.jobs);
    const std::string file_text = c.config_path.empty() ? "" : read_file(c.config_path);
    std::optional<std::string> env;
    if (const char* root = std::getenv(kOutputRootEnv)) env = root;
    const RunConfig cfg = RunConfig::resolve(
        file_text, c.config_path.empty() ? "<none>" : c.config_path, flags, env);
    if (name == "pretrain") return cmd_pretrain(cfg, out);
    if (name == "train") return cmd_train(cfg, out);
    if (name == "eval") return cmd_eval(cfg, out);
    if (name == "ablate") return cmd_ablate(cfg, out);
    return cmd_report(cfg, c.report_dir, out);
  } catch (const Error& e) {
    err << "enprompt " << name << ": " << e.what() << "\n";
    return exit_code(e.category());
  } catch (const nlohmann::json::exception& e) {
    err << "enprompt " << name << ": malformed document: " << e.what() << "\n";
    return exit_code(ErrorCategory::config);
  } catch (const fs::filesystem_error& e) {
    err << "enprompt " << name << ": " << e.what() << "\n";
    return exit_code(ErrorCategory::resource);
  }
}

}  // namespace enprompt::cli
