#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "enprompt/encoder.hpp"
#include "enprompt/grad_check.hpp"
#include "enprompt/tape.hpp"
#include "enprompt/transport.hpp"
#include "enprompt/world.hpp"

namespace enprompt::method {

enum class MethodKind {
  frozen_only,            // hand-crafted prompt, no learnables
  linear_probe,           // learned class weights on the image feature
  coop,                   // learned context tokens, cosine head
  enla_only,              // + EnLa over frozen text embeddings
  enla_visual,            // + learnable visual prompts
  enprompt_minus_fusion,  // + OT head
  enprompt,               // + strengthening feature fused into the prompts
  enprompt_minus_ot,      // full method with the cosine head
  visual_external,        // frozen visual prompts through a learnable map, learned context
};

std::string to_string(MethodKind kind);
MethodKind method_from_string(const std::string& name);
const std::vector<MethodKind>& all_methods();

// EnLa structure: one d x d map, or d -> d/r -> d with a rectifier.
enum class EnlaDesign { single, bottleneck32, bottleneck16, bottleneck8, bottleneck4 };
std::string to_string(EnlaDesign design);
EnlaDesign enla_design_from_string(const std::string& name);
// Reduction factor r; 1 for the single design.
std::size_t reduction(EnlaDesign design);
std::size_t enla_hidden(EnlaDesign design, std::size_t text_dim);

// Where the strengthening feature joins the visual prompts.
enum class FusionPosition { input, deep };
std::string to_string(FusionPosition position);
FusionPosition fusion_from_string(const std::string& name);

// Text-side support for OT: the sequence's global feature, or all its tokens.
enum class TextSide { global, token };
std::string to_string(TextSide side);
TextSide text_side_from_string(const std::string& name);

struct MethodConfig {
  MethodKind kind = MethodKind::enprompt;
  std::size_t prompt_length = 4;
  std::size_t depth = 9;
  EnlaDesign enla_design = EnlaDesign::single;
  FusionPosition fusion = FusionPosition::input;
  TextSide text_side = TextSide::global;
  std::vector<std::size_t> template_ids = world::template_tokens(world::Template::photo);
  ot::SinkhornConfig sinkhorn;

  bool learns_context() const noexcept;
  bool has_enla() const noexcept;
  bool has_visual_prompts() const noexcept;
  bool has_fusion() const noexcept;
  bool ot_enabled() const noexcept;
  bool is_probe() const noexcept;
  // True when image features depend on learnable parameters.
  bool visual_learnable() const noexcept;

  void validate(const encoders::EncoderConfig& enc) const;
};

// Learnable and frozen parameters of one method instance. Names:
//   context            template embeddings (frozen unless the method learns them)
//   enla | enla_down, enla_up
//   vl_map             text -> visual map for the strengthening feature
//   prompt/<j>         visual prompt tokens of layer j
//   visual_map         visual-side map of visual_external
//   probe              class weights of linear_probe (rows follow probe_tokens)
struct PromptState {
  MethodConfig config;
  ParameterRegistry params;
  std::vector<std::size_t> probe_tokens;

  std::size_t learnable_count() const noexcept { return params.learnable_count(); }
};

// `train_tokens` are the class tokens seen in training; linear_probe learns
// one randomly initialized weight row for each of them.
PromptState init_state(const MethodConfig& config, const encoders::DualEncoder& enc,
                       std::span<const std::size_t> train_tokens, std::uint64_t seed);

std::size_t count_learnable_params(const PromptState& state);

// e = P W (single) or relu(P W1) W2 (bottleneck). Row-wise.
Matrix enla_forward(const Matrix& p, EnlaDesign design, std::span<const Matrix> weights);
// (mean of the rows of e) * vl_map.
Matrix strengthening_feature(const Matrix& e, const Matrix& vl_map);
// s added to every prompt row.
Matrix fuse_visual_prompts(const Matrix& prompts, const Matrix& s);

struct Batch {
  std::vector<Matrix> images;
  std::vector<std::size_t> labels;  // positions in the class-token list
};

struct Features {
  Var text;          // (K * N) x shared: global rows (N = 1) or all tokens
  Var text_global;   // K x shared
  Var image_global;  // B x shared
  Var image_locals;  // (B * M) x shared
  std::size_t text_rows = 1;  // N
};

// Precomputed image features, aligned with the images of a batch. Only
// valid when no visual parameter is learnable.
struct ImageCache {
  Matrix global;  // one row per image
  Matrix locals;  // M rows per image
};

// Forward pass up to encoder features. With no images only the text side
// is computed.
Features encode(Tape& tape, const PromptState& state, const encoders::DualEncoder& enc,
                std::span<const Matrix> images, std::span<const std::size_t> class_tokens,
                const ImageCache* cache = nullptr);

// Stage one: per (image, class) transport plans from feature values. Plans
// are indexed [b * K + k] and are N x M.
struct PlanSet {
  std::vector<Matrix> plans;
  std::size_t unconverged = 0;
};
PlanSet solve_plans(const Tape& tape, const Features& f, const MethodConfig& config,
                    std::size_t num_images, std::size_t num_classes);

// B x K logits. For the OT head they are (1 - d) / tau with plans held fixed.
Var logits(Tape& tape, const Features& f, const PromptState& state,
           const encoders::DualEncoder& enc, const PlanSet* plans,
           std::span<const std::size_t> class_tokens);

struct LossAndGrads {
  double loss = 0.0;
  GradientMap grads;
  PlanSet plans;
};

// Two-stage step: solve and detach plans, then cross-entropy and its
// gradient with the plans constant. Throws TrainingError(batch_index) if the
// loss is not finite.
LossAndGrads loss_and_grads(const Batch& batch, std::span<const std::size_t> class_tokens,
                            const PromptState& state, const encoders::DualEncoder& enc,
                            std::size_t batch_index = 0, const ImageCache* cache = nullptr);

// The stage-two loss as a function of the parameters, with `plans` fixed.
TapedLoss fixed_plan_loss(const Batch& batch, std::span<const std::size_t> class_tokens,
                          const PromptState& state, const encoders::DualEncoder& enc,
                          PlanSet plans);

// Class probabilities for each image; identical bits to forward() per image.
std::vector<std::vector<double>> predict_batch(std::span<const Matrix> images,
                                              std::span<const std::size_t> class_tokens,
                                              const PromptState& state,
                                              const encoders::DualEncoder& enc);

// Class probabilities for one image.
std::vector<double> forward(const Matrix& image, std::span<const std::size_t> class_tokens,
                            const PromptState& state, const encoders::DualEncoder& enc);

struct TrainHyper {
  double learning_rate = 0.0025;
  double momentum = 0.9;
  std::size_t epochs = 30;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
};

struct TrainResult {
  PromptState state;
  std::vector<double> epoch_losses;
  std::size_t param_count = 0;
  std::size_t unconverged_solves = 0;
};

// SGD with momentum over shuffled mini-batches. `class_tokens` lists the
// training classes; sample labels are positions in it.
TrainResult train(const MethodConfig& config, const encoders::DualEncoder& enc,
                  const std::vector<world::Sample>& samples,
                  std::span<const std::size_t> class_tokens, const TrainHyper& hyper);

TrainResult coop_baseline_train(const encoders::DualEncoder& enc,
                                const std::vector<world::Sample>& samples,
                                std::span<const std::size_t> class_tokens,
                                const TrainHyper& hyper, MethodConfig config = {});

// Top-1 accuracy in percent; labels are positions in `class_tokens`.
double evaluate(const PromptState& state, const encoders::DualEncoder& enc,
                const std::vector<world::Sample>& samples,
                std::span<const std::size_t> class_tokens);

void save_state(std::ostream& out, const PromptState& state);
PromptState load_state(std::istream& in);

}  // namespace enprompt::method
