#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "enprompt/matrix.hpp"
#include "enprompt/optimizer.hpp"
#include "enprompt/tape.hpp"
#include "enprompt/world.hpp"

namespace enprompt::encoders {

struct EncoderConfig {
  std::size_t text_dim = 32;
  std::size_t vis_dim = 48;
  std::size_t shared_dim = 32;
  std::size_t text_blocks = 2;
  std::size_t vis_blocks = 12;
  std::size_t grid_h = 4;
  std::size_t grid_w = 4;
  std::size_t input_dim = 24;
  std::size_t vocab_size = world::WorldDims{}.vocab_size();
  std::size_t max_prompt_len = 8;
  std::size_t text_hidden = 32;
  std::size_t vis_hidden = 32;
  double tau = 0.01;

  std::size_t patches() const noexcept { return grid_h * grid_w; }
  // Throws ParameterError on an inconsistent configuration.
  void validate() const;
  static EncoderConfig for_world(const world::WorldDims& dims);
};

// Frozen stand-in for a pretrained text/image encoder pair.
//
// Every block is a token mixer followed by a per-token feed-forward layer,
// both residual:
//   x_i += tanh(a W_mix + b_mix)          a = aggregate over the sequence
//   x_i += tanh(x_i W_1 + b_1) W_2
// Text blocks aggregate by the row mean. Image blocks aggregate the M patch
// tokens, the global token and any prompt tokens by their sum over M + 1, so
// all-zero prompts leave every output bit-identical. Prompt tokens only feed
// the aggregate; their own block outputs are discarded and the next layer
// supplies fresh ones.
struct DualEncoder {
  EncoderConfig config;
  ParameterRegistry weights;
  bool frozen = false;

  const Matrix& token_table() const { return weights.at("text/tokens").value; }
};

// Random weights. Template-word rows of the token table are random; class
// rows are a fixed linear image of the concept prototype plus noise. The
// token table is a given lexicon and stays frozen in pretraining.
DualEncoder init_encoder(const EncoderConfig& config, const world::Universe& universe,
                         std::uint64_t seed);

// Rows of the template tokens followed by the class token.
Matrix embed_prompt(std::span<const std::size_t> template_ids, std::size_t class_id,
                    const Matrix& token_table);

struct TextFeatures {
  Var global;  // n x shared_dim, one row per sequence (last token)
  Var tokens;  // (n * len) x shared_dim
};

// Encodes n sequences of equal length stacked as (n * len) x text_dim.
TextFeatures text_encode(Tape& tape, const DualEncoder& enc, Var sequences,
                         std::size_t len);

struct ImageFeatures {
  Var global;  // B x shared_dim
  Var locals;  // (B * M) x shared_dim, image-major
};

// prompts[j] holds the L x vis_dim prompt tokens for layer j; an invalid
// Var (or a short list) means no prompts at that layer.
ImageFeatures image_encode(Tape& tape, const DualEncoder& enc,
                           std::span<const Matrix> images, std::span<const Var> prompts);

struct TextOutput {
  Matrix global;
  Matrix tokens;
};
struct ImageOutput {
  Matrix global;
  Matrix locals;
};

TextOutput text_encode(const Matrix& sequence, const DualEncoder& enc);
// Absent layers are empty matrices.
ImageOutput image_encode(const Matrix& image, std::span<const Matrix> prompts,
                         const DualEncoder& enc);

// softmax(cos(image, class_k) / tau), shared by every cosine-head prediction.
std::vector<double> cosine_prediction(const Matrix& image_global,
                                      const Matrix& class_globals, double tau);

std::vector<double> clip_zero_shot_predict(const Matrix& image,
                                           std::span<const Matrix> class_prompts,
                                           const DualEncoder& enc);

// Text features of `template` + class token for each class of a world.
Matrix class_text_globals(const DualEncoder& enc, const world::SyntheticWorld& world,
                          std::span<const std::size_t> classes, world::Template tmpl);

// Concepts 0..47 rendered with the reference renderer.
inline world::WorldConfig pretraining_world() {
  world::WorldConfig w;
  w.first_concept = 0;
  w.num_classes = 48;
  w.render_gap = 0.0;
  return w;
}

struct PretrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 32;
  double learning_rate = 1e-2;
  std::uint64_t seed = 0;
  // Weight of the patch-to-text contrastive term.
  double patch_weight = 1.0;
  world::WorldConfig world = pretraining_world();
};

struct PretrainResult {
  DualEncoder encoder;
  std::vector<double> losses;  // one per step
};

using PretrainObserver = std::function<void(std::size_t step, double loss)>;

// Symmetric batch contrastive training with Adam and cosine decay. Each batch
// holds distinct classes. The result is frozen. A non-finite loss raises
// TrainingError carrying the step index.
PretrainResult pretrain_contrastive(const world::Universe& universe,
                                    const EncoderConfig& config,
                                    const PretrainConfig& pretrain,
                                    const PretrainObserver& observer = {});

// One contrastive step; exposed for tests.
double contrastive_step(DualEncoder& enc, const std::vector<Matrix>& images,
                        const Matrix& sequences, std::size_t len, double learning_rate,
                        Adam& optimizer, double patch_weight = 0.0);

double contrastive_loss_value(const DualEncoder& enc, const std::vector<Matrix>& images,
                              const Matrix& sequences, std::size_t len,
                              double patch_weight = 0.0);

void save_encoder(std::ostream& out, const DualEncoder& enc);
DualEncoder load_encoder(std::istream& in);
void save_encoder(const std::string& path, const DualEncoder& enc);
DualEncoder load_encoder(const std::string& path);

}  // namespace enprompt::encoders
