#include "enprompt/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include "enprompt/checkpoint.hpp"
#include "enprompt/errors.hpp"
#include "enprompt/random.hpp"

namespace enprompt::harness {
namespace {

constexpr std::size_t kBaseToNovelEpochs = 30;
constexpr std::size_t kFewShotEpochs = 50;
constexpr std::size_t kTransferEpochs = 20;

using Metrics = std::map<std::string, double>;

struct RunOutput {
  Metrics metrics;
  std::vector<method::TrainResult> results;
};

using RunFn = std::function<RunOutput(const Variant&, std::uint64_t seed)>;

std::vector<world::Sample> relabel(std::vector<world::Sample> samples,
                                   const std::vector<std::size_t>& classes) {
  for (auto& s : samples) {
    s.label = static_cast<std::size_t>(
        std::find(classes.begin(), classes.end(), s.label) - classes.begin());
  }
  return samples;
}

std::vector<std::size_t> tokens_of(const world::SyntheticWorld& w,
                                   const std::vector<std::size_t>& classes) {
  std::vector<std::size_t> out;
  for (std::size_t c : classes) out.push_back(w.class_token(c));
  return out;
}

method::TrainHyper hyper_for(const RunOptions& o, const Variant& v, std::size_t protocol_epochs,
                             std::uint64_t seed) {
  method::TrainHyper h = o.hyper;
  h.epochs = v.epochs != 0 ? v.epochs : (o.epochs != 0 ? o.epochs : protocol_epochs);
  h.seed = seed;
  return h;
}

nlohmann::json world_json(const world::SyntheticWorld& w) {
  return {{"sample_seed", w.sample_seed},
          {"concepts", w.concepts},
          {"pixel_noise", w.pixel_noise},
          {"intra_class", w.intra_class},
          {"shift", w.shift.label()},
          {"render", fnv1a_hex(matrix_to_json(w.render).dump())}};
}

nlohmann::json variant_json(const Variant& v) {
  const auto& c = v.config;
  return {{"name", v.name},
          {"kind", method::to_string(c.kind)},
          {"prompt_length", c.prompt_length},
          {"depth", c.depth},
          {"enla_design", method::to_string(c.enla_design)},
          {"fusion", method::to_string(c.fusion)},
          {"text_side", method::to_string(c.text_side)},
          {"template_ids", c.template_ids},
          {"sinkhorn_lambda", c.sinkhorn.lambda},
          {"epochs", v.epochs}};
}

// Runs every (variant, seed) pair on up to `jobs` threads and folds the
// results in (variant, seed) order.
std::vector<ExperimentReport> execute(const std::string& protocol,
                                      const std::vector<Variant>& variants,
                                      const std::vector<std::uint64_t>& seeds,
                                      const RunOptions& options, const nlohmann::json& context,
                                      const RunFn& run) {
  if (variants.empty()) throw ProtocolError(protocol + ": no variants");
  if (seeds.empty()) throw ProtocolError(protocol + ": no seeds");
  const std::size_t total = variants.size() * seeds.size();
  std::vector<RunOutput> outputs(total);
  std::vector<std::exception_ptr> errors(total);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < total; i = next++) {
      try {
        outputs[i] = run(variants[i / seeds.size()], seeds[i % seeds.size()]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t jobs = std::clamp<std::size_t>(options.jobs, 1, total);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  nlohmann::json digest_base = context;
  digest_base["protocol"] = protocol;
  digest_base["seeds"] = seeds;
  digest_base["shots"] = options.shots;
  digest_base["test_per_class"] = options.test_per_class;
  digest_base["epochs"] = options.epochs;
  digest_base["learning_rate"] = options.hyper.learning_rate;
  digest_base["momentum"] = options.hyper.momentum;
  digest_base["batch_size"] = options.hyper.batch_size;

  std::vector<ExperimentReport> reports;
  for (std::size_t v = 0; v < variants.size(); ++v) {
    std::vector<Metrics> per_seed;
    std::size_t param_count = 0;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const RunOutput& out = outputs[v * seeds.size() + s];
      per_seed.push_back(out.metrics);
      if (!out.results.empty()) param_count = out.results.front().param_count;
      if (options.observer) {
        for (const auto& res : out.results) options.observer({variants[v].name, seeds[s], &res});
      }
    }
    ExperimentReport r = summarize(protocol, variants[v].name, seeds, per_seed);
    r.axes = variants[v].axes;
    r.param_count = param_count;
    nlohmann::json d = digest_base;
    d["variant"] = variant_json(variants[v]);
    r.config_digest = fnv1a_hex(d.dump());
    reports.push_back(std::move(r));
  }
  return reports;
}

std::string encoder_digest(const encoders::DualEncoder& enc) {
  std::ostringstream out;
  encoders::save_encoder(out, enc);
  return fnv1a_hex(out.str());
}

std::string format_number(double x) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2) << x;
  return out.str();
}

// "acc@2" before "acc@16"; means after per-item columns.
bool metric_order(const std::string& a, const std::string& b) {
  auto key = [](const std::string& s) {
    const auto at = s.find_first_of("@:");
    const bool mean = s.size() >= 5 && s.compare(s.size() - 5, 5, "_mean") == 0;
    const std::string stem = mean ? s.substr(0, s.size() - 5) : s.substr(0, at);
    double num = 0.0;
    bool numeric = false;
    if (at != std::string::npos) {
      try {
        std::size_t used = 0;
        num = std::stod(s.substr(at + 1), &used);
        numeric = used == s.size() - at - 1;
      } catch (const std::exception&) {
      }
    }
    return std::make_tuple(stem, mean, !numeric, num);
  };
  return key(a) < key(b);
}

std::string join_axes(const std::map<std::string, std::string>& axes) {
  std::string out;
  for (const auto& [k, v] : axes) out += (out.empty() ? "" : ";") + k + "=" + v;
  return out;
}

}  // namespace

double harmonic_mean(double base, double novel) {
  if (!(base >= 0.0) || !(novel >= 0.0)) {
    throw ParameterError("harmonic mean of negative accuracy");
  }
  if (base + novel == 0.0) return 0.0;
  return 2.0 * base * novel / (base + novel);
}

const MetricSummary& ExperimentReport::metric(const std::string& name) const {
  auto it = metrics.find(name);
  if (it == metrics.end()) throw ProtocolError("report has no metric '" + name + "'");
  return it->second;
}

ExperimentReport summarize(const std::string& protocol, const std::string& variant,
                           const std::vector<std::uint64_t>& seeds,
                           const std::vector<std::map<std::string, double>>& per_seed) {
  if (per_seed.size() != seeds.size()) throw ProtocolError("one metric set per seed required");
  ExperimentReport r;
  r.protocol = protocol;
  r.variant = variant;
  r.seeds = seeds;
  for (const auto& metrics : per_seed) {
    for (const auto& [name, value] : metrics) r.metrics[name].values.push_back(value);
  }
  for (auto& [name, m] : r.metrics) {
    if (m.values.size() != seeds.size()) throw ProtocolError("metric '" + name + "' missing for a seed");
    double sum = 0.0;
    for (double x : m.values) sum += x;
    m.mean = sum / static_cast<double>(m.values.size());
    double sq = 0.0;
    for (double x : m.values) sq += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(sq / static_cast<double>(m.values.size()));
  }
  if (r.metrics.count("base_acc") && r.metrics.count("novel_acc")) {
    r.metrics["hm"].mean = harmonic_mean(r.metrics["base_acc"].mean, r.metrics["novel_acc"].mean);
  }
  return r;
}

BaseNovelScore score_base_to_novel(const encoders::DualEncoder& enc,
                                   const world::SyntheticWorld& w,
                                   const method::PromptState& state, std::size_t test_per_class) {
  const world::TaskSplit split = world::base_novel_split(w, 1, test_per_class);
  BaseNovelScore s;
  s.base_acc = method::evaluate(
      state, enc, relabel(world::test_samples(w, split.base, test_per_class), split.base),
      tokens_of(w, split.base));
  s.novel_acc = method::evaluate(
      state, enc, relabel(world::test_samples(w, split.novel, test_per_class), split.novel),
      tokens_of(w, split.novel));
  return s;
}

Variant variant_of(method::MethodKind kind) {
  Variant v;
  v.name = method::to_string(kind);
  v.config.kind = kind;
  return v;
}

std::vector<Variant> variants_of(const std::vector<method::MethodKind>& kinds) {
  std::vector<Variant> out;
  for (auto k : kinds) out.push_back(variant_of(k));
  return out;
}

std::vector<world::SyntheticWorld> sibling_worlds(const world::Universe& universe,
                                                  const world::WorldConfig& config,
                                                  std::size_t count) {
  std::vector<world::SyntheticWorld> out;
  for (std::size_t i = 0; i < count; ++i) {
    world::WorldConfig c = config;
    c.render_seed = config.render_seed + 1 + i;
    out.push_back(world::generate_world(universe, c));
  }
  return out;
}

std::vector<world::Shift> default_shifts() {
  std::vector<world::Shift> out(5);
  out[1].rotation = 0.3;
  out[2].noise_multiplier = 2.0;
  out[3].noise_multiplier = 4.0;
  out[4].interpolation = 0.3;
  return out;
}

std::vector<ExperimentReport> run_base_to_novel(const encoders::DualEncoder& enc,
                                                const std::vector<world::SyntheticWorld>& worlds,
                                                const std::vector<Variant>& variants,
                                                const std::vector<std::uint64_t>& seeds,
                                                RunOptions options) {
  if (worlds.empty()) throw ProtocolError("base-to-novel: no worlds");
  const std::string enc_digest = encoder_digest(enc);
  std::vector<ExperimentReport> all;
  for (std::size_t wi = 0; wi < worlds.size(); ++wi) {
    const auto& w = worlds[wi];
    const world::TaskSplit split = world::base_novel_split(w, options.shots, options.test_per_class);
    const auto base_tokens = tokens_of(w, split.base);
    const auto novel_tokens = tokens_of(w, split.novel);
    const auto base_test =
        relabel(world::test_samples(w, split.base, options.test_per_class), split.base);
    const auto novel_test =
        relabel(world::test_samples(w, split.novel, options.test_per_class), split.novel);
    auto run = [&](const Variant& v, std::uint64_t seed) {
      const auto train = relabel(world::train_samples(w, split, seed), split.base);
      RunOutput out;
      out.results.push_back(method::train(v.config, enc, train, base_tokens,
                                          hyper_for(options, v, kBaseToNovelEpochs, seed)));
      const auto& state = out.results.back().state;
      const double b = method::evaluate(state, enc, base_test, base_tokens);
      const double n = method::evaluate(state, enc, novel_test, novel_tokens);
      out.metrics = {{"base_acc", b}, {"novel_acc", n}, {"hm", harmonic_mean(b, n)}};
      return out;
    };
    const nlohmann::json context = {{"encoder", enc_digest}, {"world", world_json(w)}};
    auto reports = execute("base_to_novel", variants, seeds, options, context, run);
    for (auto& r : reports) {
      if (worlds.size() > 1) r.axes["world"] = std::to_string(wi);
      all.push_back(std::move(r));
    }
  }
  return all;
}

std::vector<ExperimentReport> run_few_shot(const encoders::DualEncoder& enc,
                                           const world::SyntheticWorld& w,
                                           const std::vector<Variant>& variants,
                                           const std::vector<std::size_t>& shots,
                                           const std::vector<std::uint64_t>& seeds,
                                           RunOptions options) {
  if (shots.empty()) throw ProtocolError("few-shot: no shot counts");
  std::vector<std::size_t> classes(w.num_classes());
  for (std::size_t c = 0; c < classes.size(); ++c) classes[c] = c;
  const auto tokens = tokens_of(w, classes);
  const auto test = world::test_samples(w, classes, options.test_per_class);
  auto run = [&](const Variant& v, std::uint64_t seed) {
    RunOutput out;
    for (std::size_t k : shots) {
      const world::TaskSplit split = world::all_class_split(w, k, options.test_per_class);
      const auto train = world::train_samples(w, split, seed);
      out.results.push_back(
          method::train(v.config, enc, train, tokens, hyper_for(options, v, kFewShotEpochs, seed)));
      out.metrics["acc@" + std::to_string(k)] =
          method::evaluate(out.results.back().state, enc, test, tokens);
    }
    return out;
  };
  nlohmann::json context = {
      {"encoder", encoder_digest(enc)}, {"world", world_json(w)}, {"shot_list", shots}};
  return execute("few_shot", variants, seeds, options, context, run);
}

std::vector<ExperimentReport> run_cross_world(const encoders::DualEncoder& enc,
                                              const world::SyntheticWorld& source,
                                              const std::vector<world::SyntheticWorld>& targets,
                                              const std::vector<Variant>& variants,
                                              const std::vector<std::uint64_t>& seeds,
                                              RunOptions options) {
  if (targets.empty()) throw ProtocolError("cross-world: no targets");
  std::vector<std::size_t> classes(source.num_classes());
  for (std::size_t c = 0; c < classes.size(); ++c) classes[c] = c;
  const auto source_tokens = tokens_of(source, classes);

  struct TargetTask {
    std::vector<std::size_t> tokens;
    std::vector<world::Sample> test;
  };
  std::vector<TargetTask> tasks;
  nlohmann::json target_json = nlohmann::json::array();
  for (std::size_t t = 0; t < targets.size(); ++t) {
    std::vector<std::size_t> shared;
    for (std::size_t c = 0; c < targets[t].num_classes(); ++c) {
      const std::size_t tok = targets[t].class_token(c);
      if (std::find(source_tokens.begin(), source_tokens.end(), tok) != source_tokens.end()) {
        shared.push_back(c);
      }
    }
    if (shared.empty()) {
      throw ProtocolError("cross-world target " + std::to_string(t) +
                          " shares no class token with the source");
    }
    tasks.push_back({tokens_of(targets[t], shared),
                     relabel(world::test_samples(targets[t], shared, options.test_per_class),
                             shared)});
    target_json.push_back(world_json(targets[t]));
  }

  auto run = [&](const Variant& v, std::uint64_t seed) {
    const world::TaskSplit split = world::all_class_split(source, options.shots, options.test_per_class);
    const auto train = world::train_samples(source, split, seed);
    RunOutput out;
    out.results.push_back(method::train(v.config, enc, train, source_tokens,
                                        hyper_for(options, v, kTransferEpochs, seed)));
    double sum = 0.0;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      const double acc =
          method::evaluate(out.results.back().state, enc, tasks[t].test, tasks[t].tokens);
      out.metrics["target:" + std::to_string(t)] = acc;
      sum += acc;
    }
    out.metrics["target_mean"] = sum / static_cast<double>(tasks.size());
    return out;
  };
  const nlohmann::json context = {
      {"encoder", encoder_digest(enc)}, {"source", world_json(source)}, {"targets", target_json}};
  return execute("cross_world", variants, seeds, options, context, run);
}

std::vector<ExperimentReport> run_domain_shift(const encoders::DualEncoder& enc,
                                               const world::SyntheticWorld& source,
                                               const std::vector<world::Shift>& shifts,
                                               const std::vector<Variant>& variants,
                                               const std::vector<std::uint64_t>& seeds,
                                               RunOptions options) {
  if (shifts.empty()) throw ProtocolError("domain shift: no shifts");
  std::vector<std::size_t> classes(source.num_classes());
  for (std::size_t c = 0; c < classes.size(); ++c) classes[c] = c;
  const auto tokens = tokens_of(source, classes);
  std::vector<std::vector<world::Sample>> tests;
  nlohmann::json shift_json = nlohmann::json::array();
  for (const auto& s : shifts) {
    tests.push_back(world::test_samples(world::with_shift(source, s), classes, options.test_per_class));
    shift_json.push_back(s.label());
  }
  auto run = [&](const Variant& v, std::uint64_t seed) {
    const world::TaskSplit split = world::all_class_split(source, options.shots, options.test_per_class);
    const auto train = world::train_samples(source, split, seed);
    RunOutput out;
    out.results.push_back(
        method::train(v.config, enc, train, tokens, hyper_for(options, v, kTransferEpochs, seed)));
    double sum = 0.0;
    for (std::size_t i = 0; i < shifts.size(); ++i) {
      const double acc = method::evaluate(out.results.back().state, enc, tests[i], tokens);
      out.metrics["shift:" + shifts[i].label()] = acc;
      sum += acc;
    }
    out.metrics["shift_mean"] = sum / static_cast<double>(shifts.size());
    return out;
  };
  const nlohmann::json context = {
      {"encoder", encoder_digest(enc)}, {"source", world_json(source)}, {"shifts", shift_json}};
  return execute("domain_shift", variants, seeds, options, context, run);
}

std::string to_string(Axis axis) {
  switch (axis) {
    case Axis::enla_design: return "enla_design";
    case Axis::fusion_position: return "fusion_position";
    case Axis::component_stack: return "component_stack";
    case Axis::template_choice: return "template";
    case Axis::epochs: return "epochs";
    case Axis::prompt_length: return "prompt_length";
    case Axis::depth: return "depth";
  }
  return "?";
}

Axis axis_from_string(const std::string& name) {
  for (Axis a : {Axis::enla_design, Axis::fusion_position, Axis::component_stack,
                 Axis::template_choice, Axis::epochs, Axis::prompt_length, Axis::depth}) {
    if (to_string(a) == name) return a;
  }
  throw ConfigError("unknown ablation axis '" + name +
                    "' (enla_design, fusion_position, component_stack, template, epochs, "
                    "prompt_length, depth)");
}

std::vector<method::MethodKind> component_stack() {
  using K = method::MethodKind;
  return {K::frozen_only, K::enla_only, K::enla_visual, K::enprompt_minus_fusion, K::enprompt};
}

std::vector<Variant> axis_variants(Axis axis) {
  std::vector<Variant> out;
  auto add = [&](const std::string& value, auto&& edit) {
    Variant v = variant_of(method::MethodKind::enprompt);
    edit(v);
    v.axes[to_string(axis)] = value;
    out.push_back(std::move(v));
  };
  switch (axis) {
    case Axis::enla_design:
      for (auto d : {method::EnlaDesign::single, method::EnlaDesign::bottleneck32,
                     method::EnlaDesign::bottleneck16, method::EnlaDesign::bottleneck8,
                     method::EnlaDesign::bottleneck4}) {
        add(method::to_string(d), [d](Variant& v) { v.config.enla_design = d; });
      }
      break;
    case Axis::fusion_position:
      for (auto p : {method::FusionPosition::deep, method::FusionPosition::input}) {
        add(method::to_string(p), [p](Variant& v) { v.config.fusion = p; });
      }
      break;
    case Axis::component_stack: {
      std::size_t row = 1;
      for (auto k : component_stack()) {
        add(std::to_string(row++), [k](Variant& v) {
          v.config.kind = k;
          v.name = method::to_string(k);
        });
      }
      break;
    }
    case Axis::template_choice:
      for (auto t : {world::Template::photo, world::Template::drawing, world::Template::painting}) {
        add(world::to_string(t), [t](Variant& v) { v.config.template_ids = world::template_tokens(t); });
      }
      break;
    case Axis::epochs:
      for (std::size_t e : {2, 30}) {
        add(std::to_string(e), [e](Variant& v) { v.epochs = e; });
      }
      break;
    case Axis::prompt_length:
      for (std::size_t l : {1, 2, 4, 8, 16}) {
        add(std::to_string(l), [l](Variant& v) { v.config.prompt_length = l; });
      }
      break;
    case Axis::depth:
      for (std::size_t d : {1, 3, 6, 9, 12}) {
        add(std::to_string(d), [d](Variant& v) { v.config.depth = d; });
      }
      break;
  }
  return out;
}

std::vector<Variant> ablation_variants(const std::vector<Axis>& axes) {
  if (axes.empty()) throw ProtocolError("ablation: no axes");
  std::set<Axis> seen;
  for (Axis a : axes) {
    if (!seen.insert(a).second) throw ProtocolError("ablation axis listed twice: " + to_string(a));
  }
  std::vector<Variant> cells{variant_of(method::MethodKind::enprompt)};
  for (Axis a : axes) {
    const auto options = axis_variants(a);
    std::vector<Variant> next;
    for (const auto& cell : cells) {
      for (const auto& opt : options) {
        // Copy the option's field for this axis onto the cell.
        Variant v = cell;
        switch (a) {
          case Axis::enla_design: v.config.enla_design = opt.config.enla_design; break;
          case Axis::fusion_position: v.config.fusion = opt.config.fusion; break;
          case Axis::component_stack:
            v.config.kind = opt.config.kind;
            v.name = opt.name;
            break;
          case Axis::template_choice: v.config.template_ids = opt.config.template_ids; break;
          case Axis::epochs: v.epochs = opt.epochs; break;
          case Axis::prompt_length: v.config.prompt_length = opt.config.prompt_length; break;
          case Axis::depth: v.config.depth = opt.config.depth; break;
        }
        v.axes.insert(opt.axes.begin(), opt.axes.end());
        next.push_back(std::move(v));
      }
    }
    cells = std::move(next);
  }
  return cells;
}

std::vector<ExperimentReport> run_ablation_matrix(const encoders::DualEncoder& enc,
                                                  const world::SyntheticWorld& w,
                                                  const std::vector<Axis>& axes,
                                                  const std::vector<std::uint64_t>& seeds,
                                                  RunOptions options) {
  auto reports = run_base_to_novel(enc, {w}, ablation_variants(axes), seeds, std::move(options));
  for (auto& r : reports) r.protocol = "ablation";
  return reports;
}

std::string fnv1a_hex(const std::string& text) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(text)));
  return buf;
}

void write_csv(std::ostream& out, const std::vector<ExperimentReport>& reports) {
  out << "protocol,variant,axes,metric,mean,std,seeds\n";
  for (const auto& r : reports) {
    std::string seeds;
    for (auto s : r.seeds) seeds += (seeds.empty() ? "" : ";") + std::to_string(s);
    for (const auto& [name, m] : r.metrics) {
      char num[64];
      std::snprintf(num, sizeof num, "%.6f,%.6f", m.mean, m.std);
      out << r.protocol << ',' << r.variant << ',' << join_axes(r.axes) << ',' << name << ','
          << num << ',' << seeds << '\n';
    }
  }
}

std::string reports_to_json(const std::vector<ExperimentReport>& reports) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports) {
    nlohmann::json metrics = nlohmann::json::object();
    for (const auto& [name, m] : r.metrics) {
      metrics[name] = {{"mean", m.mean}, {"std", m.std}, {"values", m.values}};
    }
    arr.push_back({{"protocol", r.protocol},
                   {"variant", r.variant},
                   {"axes", r.axes},
                   {"metrics", metrics},
                   {"seeds", r.seeds},
                   {"param_count", r.param_count},
                   {"config_digest", r.config_digest}});
  }
  return nlohmann::json{{"format", "enprompt-reports"}, {"reports", arr}}.dump(2) + "\n";
}

std::vector<ExperimentReport> reports_from_json(const std::string& text) {
  std::vector<ExperimentReport> out;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.value("format", "") != "enprompt-reports") throw ConfigError("not a report document");
    for (const auto& e : j.at("reports")) {
      ExperimentReport r;
      r.protocol = e.at("protocol");
      r.variant = e.at("variant");
      r.axes = e.at("axes").get<std::map<std::string, std::string>>();
      for (const auto& [name, m] : e.at("metrics").items()) {
        r.metrics[name] = {m.at("mean"), m.at("std"), m.at("values").get<std::vector<double>>()};
      }
      r.seeds = e.at("seeds").get<std::vector<std::uint64_t>>();
      r.param_count = e.at("param_count");
      r.config_digest = e.at("config_digest");
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed report document: ") + e.what());
  }
  return out;
}

std::string render_table(const std::vector<ExperimentReport>& reports) {
  std::ostringstream out;
  std::vector<std::string> protocols;
  for (const auto& r : reports) {
    if (std::find(protocols.begin(), protocols.end(), r.protocol) == protocols.end()) {
      protocols.push_back(r.protocol);
    }
  }
  for (const auto& protocol : protocols) {
    std::vector<const ExperimentReport*> rows;
    for (const auto& r : reports) {
      if (r.protocol == protocol) rows.push_back(&r);
    }
    std::vector<std::string> columns;
    const bool b2n = rows.front()->metrics.count("base_acc") > 0;
    if (b2n) {
      columns = {"base_acc", "novel_acc", "hm"};
    } else {
      for (const auto* r : rows)
        for (const auto& [name, m] : r->metrics)
          if (std::find(columns.begin(), columns.end(), name) == columns.end())
            columns.push_back(name);
      std::stable_sort(columns.begin(), columns.end(), metric_order);
    }
    std::vector<std::string> header{"Variant", "Axes"};
    for (const auto& c : columns) {
      header.push_back(c == "base_acc" ? "Base" : c == "novel_acc" ? "Novel" : c == "hm" ? "HM" : c);
    }
    header.push_back("Params");
    std::vector<std::vector<std::string>> cells{header};
    for (const auto* r : rows) {
      std::vector<std::string> line{r->variant, r->axes.empty() ? "-" : join_axes(r->axes)};
      for (const auto& c : columns) {
        auto it = r->metrics.find(c);
        line.push_back(it == r->metrics.end() ? "-" : format_number(it->second.mean));
      }
      line.push_back(std::to_string(r->param_count));
      cells.push_back(std::move(line));
    }
    std::vector<std::size_t> width(header.size(), 0);
    for (const auto& line : cells)
      for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
    out << "== " << protocol << " (seeds";
    for (auto s : rows.front()->seeds) out << ' ' << s;
    out << ")\n";
    for (std::size_t l = 0; l < cells.size(); ++l) {
      for (std::size_t i = 0; i < cells[l].size(); ++i) {
        if (i < 2) {
          out << std::left << std::setw(static_cast<int>(width[i])) << cells[l][i];
        } else {
          out << std::right << std::setw(static_cast<int>(width[i])) << cells[l][i];
        }
        out << (i + 1 < cells[l].size() ? "  " : "\n");
      }
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace enprompt::harness
