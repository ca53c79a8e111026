#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "enprompt/matrix.hpp"

namespace enprompt::world {

// Token ids [0, kTemplateTokens) are template words; class tokens follow.
inline constexpr std::size_t kTemplateTokens = 16;

struct WorldDims {
  std::size_t latent_dim = 16;
  std::size_t input_dim = 24;  // values per patch
  std::size_t grid_h = 4;
  std::size_t grid_w = 4;
  std::size_t num_concepts = 64;

  std::size_t patches() const noexcept { return grid_h * grid_w; }
  std::size_t vocab_size() const noexcept { return kTemplateTokens + num_concepts; }
};

// Distribution shift applied at render time. The default is the identity.
struct Shift {
  double rotation = 0.0;          // radians, applied to latent plane pairs
  double noise_multiplier = 1.0;  // scales pixel noise
  double interpolation = 0.0;     // pulls each class toward the next one

  bool is_identity() const noexcept;
  std::string label() const;
};

// Concept space shared by every world built from it.
struct Universe {
  std::uint64_t seed = 0;
  WorldDims dims;
  Matrix prototypes;  // num_concepts x latent_dim
  Matrix render;      // latent_dim x input_dim, reference object renderer
  Matrix background;  // latent_dim x input_dim
};

Universe make_universe(std::uint64_t seed, const WorldDims& dims = {});

struct WorldConfig {
  std::size_t first_concept = 48;
  std::size_t num_classes = 8;
  std::uint64_t render_seed = 1;
  double render_gap = 0.9;  // scale of the renderer perturbation
  double pixel_noise = 0.5;
  double intra_class = 0.4;
  Shift shift;
};

struct SyntheticWorld {
  std::uint64_t sample_seed = 0;  // independent of the shift
  WorldDims dims;
  std::vector<std::size_t> concepts;  // universe concept per class
  Matrix prototypes;                  // num_classes x latent_dim, unshifted
  Matrix render;
  Matrix background;
  double pixel_noise = 0.0;
  double intra_class = 0.0;
  Shift shift;

  std::size_t num_classes() const noexcept { return concepts.size(); }
  std::size_t class_token(std::size_t cls) const;
};

// Throws ProtocolError for fewer than two classes or concepts out of range.
SyntheticWorld generate_world(const Universe& universe, const WorldConfig& config);

// Same prototypes, tokens and sample streams; only the rendering shift differs.
SyntheticWorld with_shift(const SyntheticWorld& world, const Shift& shift);

std::size_t class_token_id(std::size_t concept_id);

// Pure function of (world, class, index, seed).
Matrix render_image(const SyntheticWorld& world, std::size_t cls,
                    std::size_t index, std::uint64_t seed);

enum class Template { photo, drawing, painting };

const std::vector<std::size_t>& template_tokens(Template t);
std::string to_string(Template t);
Template template_from_string(const std::string& name);

struct Sample {
  Matrix image;
  std::size_t label = 0;  // class index within the world
};

struct TaskSplit {
  std::vector<std::size_t> base;
  std::vector<std::size_t> novel;
  std::size_t shots = 16;
  std::size_t test_per_class = 100;
};

// First half of the classes are base, the rest novel. Needs K >= 4.
TaskSplit base_novel_split(const SyntheticWorld& world, std::size_t shots,
                           std::size_t test_per_class);
// Every class is trained and tested; no novel set.
TaskSplit all_class_split(const SyntheticWorld& world, std::size_t shots,
                          std::size_t test_per_class);

std::vector<Sample> train_samples(const SyntheticWorld& world,
                                  const TaskSplit& split, std::uint64_t seed);
// Test images do not depend on the training seed.
std::vector<Sample> test_samples(const SyntheticWorld& world,
                                 const std::vector<std::size_t>& classes,
                                 std::size_t per_class);

}  // namespace enprompt::world
