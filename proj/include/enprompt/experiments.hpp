#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "enprompt/encoder.hpp"
#include "enprompt/method.hpp"
#include "enprompt/world.hpp"

namespace enprompt::harness {

// 2ab / (a + b); 0 when both are 0. Throws ParameterError on negative input.
double harmonic_mean(double base, double novel);

inline const std::vector<std::uint64_t>& default_seeds() {
  static const std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  return seeds;
}

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;             // population std over seeds
  std::vector<double> values;   // one per seed
};

// Metric names: base_acc, novel_acc, hm, acc (few-shot per K is "acc@K"),
// "target:<i>", "target_mean", "shift:<label>", "shift_mean".
struct ExperimentReport {
  std::string protocol;
  std::string variant;
  std::map<std::string, std::string> axes;
  std::map<std::string, MetricSummary> metrics;
  std::vector<std::uint64_t> seeds;
  std::size_t param_count = 0;
  std::string config_digest;

  const MetricSummary& metric(const std::string& name) const;
};

// One (variant, seed) training run, reported to RunOptions::observer.
struct RunRecord {
  std::string variant;
  std::uint64_t seed = 0;
  const method::TrainResult* result = nullptr;
};

struct RunOptions {
  std::size_t shots = 16;
  std::size_t test_per_class = 100;
  std::size_t epochs = 0;     // 0: the protocol's default
  method::TrainHyper hyper;   // epochs and seed are set per run
  std::size_t jobs = 1;
  // Called once per run in (variant, seed) order, after all runs finish.
  std::function<void(const RunRecord&)> observer;
};

// A labelled method configuration; several can share a kind.
struct Variant {
  std::string name;
  method::MethodConfig config;
  std::map<std::string, std::string> axes;
  std::size_t epochs = 0;  // 0: the run's default
};

// Folds one metric map per seed into a report: mean and population std per
// metric; "hm" is recomputed from the base and novel means when present.
ExperimentReport summarize(const std::string& protocol, const std::string& variant,
                           const std::vector<std::uint64_t>& seeds,
                           const std::vector<std::map<std::string, double>>& per_seed);

struct BaseNovelScore {
  double base_acc = 0.0;
  double novel_acc = 0.0;
};
// Accuracy of a state on the base and novel test sets of `world`.
BaseNovelScore score_base_to_novel(const encoders::DualEncoder& enc,
                                   const world::SyntheticWorld& world,
                                   const method::PromptState& state, std::size_t test_per_class);

Variant variant_of(method::MethodKind kind);
std::vector<Variant> variants_of(const std::vector<method::MethodKind>& kinds);

// Worlds with the same concepts and re-seeded render maps.
std::vector<world::SyntheticWorld> sibling_worlds(const world::Universe& universe,
                                                  const world::WorldConfig& config,
                                                  std::size_t count = 3);
std::vector<world::Shift> default_shifts();

// Base classes are trained (30 epochs by default); base and novel test sets
// are scored separately. One report per (world, variant); "hm" is the
// harmonic mean of the seed-mean base and novel accuracies.
std::vector<ExperimentReport> run_base_to_novel(const encoders::DualEncoder& enc,
                                                const std::vector<world::SyntheticWorld>& worlds,
                                                const std::vector<Variant>& variants,
                                                const std::vector<std::uint64_t>& seeds,
                                                RunOptions options = {});

// All classes at each shot count (50 epochs by default).
std::vector<ExperimentReport> run_few_shot(const encoders::DualEncoder& enc,
                                           const world::SyntheticWorld& world,
                                           const std::vector<Variant>& variants,
                                           const std::vector<std::size_t>& shots,
                                           const std::vector<std::uint64_t>& seeds,
                                           RunOptions options = {});

// Trains on every class of `source`, evaluates on each target over the
// classes it shares with the source (20 epochs by default). A target with no
// shared class token is a ProtocolError.
std::vector<ExperimentReport> run_cross_world(const encoders::DualEncoder& enc,
                                              const world::SyntheticWorld& source,
                                              const std::vector<world::SyntheticWorld>& targets,
                                              const std::vector<Variant>& variants,
                                              const std::vector<std::uint64_t>& seeds,
                                              RunOptions options = {});

// Trains on `source` and evaluates the same classes under each shift.
std::vector<ExperimentReport> run_domain_shift(const encoders::DualEncoder& enc,
                                               const world::SyntheticWorld& source,
                                               const std::vector<world::Shift>& shifts,
                                               const std::vector<Variant>& variants,
                                               const std::vector<std::uint64_t>& seeds,
                                               RunOptions options = {});

enum class Axis { enla_design, fusion_position, component_stack, template_choice, epochs,
                  prompt_length, depth };
std::string to_string(Axis axis);
Axis axis_from_string(const std::string& name);

// Variants for one axis, starting from the default enprompt configuration.
std::vector<Variant> axis_variants(Axis axis);
// Cartesian product over the axes; later axes vary fastest.
std::vector<Variant> ablation_variants(const std::vector<Axis>& axes);
// The five cumulative rows of the component table.
std::vector<method::MethodKind> component_stack();

// Base-to-novel runs over ablation_variants(axes).
std::vector<ExperimentReport> run_ablation_matrix(const encoders::DualEncoder& enc,
                                                  const world::SyntheticWorld& world,
                                                  const std::vector<Axis>& axes,
                                                  const std::vector<std::uint64_t>& seeds,
                                                  RunOptions options = {});

// 64-bit FNV-1a as 16 hex digits.
std::string fnv1a_hex(const std::string& text);

void write_csv(std::ostream& out, const std::vector<ExperimentReport>& reports);
std::string reports_to_json(const std::vector<ExperimentReport>& reports);
std::vector<ExperimentReport> reports_from_json(const std::string& text);
// Aligned text tables; base-to-novel style reports get Base/Novel/HM columns.
std::string render_table(const std::vector<ExperimentReport>& reports);

}  // namespace enprompt::harness
