#include "enprompt/world.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <sstream>

#include "enprompt/errors.hpp"
#include "enprompt/random.hpp"

namespace enprompt::world {
namespace {

constexpr double kMaxPrototypeCosine = 0.95;
constexpr std::uint64_t kTestSeed = 0x7e57;

double row_cosine(const Matrix& a, std::size_t i, const Matrix& b, std::size_t j) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t c = 0; c < a.cols(); ++c) {
    dot += a(i, c) * b(j, c);
    na += a(i, c) * a(i, c);
    nb += b(j, c) * b(j, c);
  }
  return dot / std::sqrt(na * nb);
}

void add_scaled_row(std::span<const double> z, const Matrix& map,
                    std::span<double> out) {
  for (std::size_t l = 0; l < map.rows(); ++l) {
    const double zl = z[l];
    for (std::size_t p = 0; p < map.cols(); ++p) out[p] += zl * map(l, p);
  }
}

}  // namespace

bool Shift::is_identity() const noexcept {
  return rotation == 0.0 && noise_multiplier == 1.0 && interpolation == 0.0;
}

std::string Shift::label() const {
  if (is_identity()) return "none";
  std::ostringstream out;
  const char* sep = "";
  if (rotation != 0.0) {
    out << sep << "rotation=" << rotation;
    sep = ",";
  }
  if (noise_multiplier != 1.0) {
    out << sep << "noise=" << noise_multiplier;
    sep = ",";
  }
  if (interpolation != 0.0) out << sep << "interpolation=" << interpolation;
  return out.str();
}

Universe make_universe(std::uint64_t seed, const WorldDims& dims) {
  if (dims.latent_dim < 2 || dims.input_dim < 1 || dims.patches() < 2 ||
      dims.num_concepts < 2) {
    throw ParameterError("world dimensions too small");
  }
  Universe u;
  u.seed = seed;
  u.dims = dims;
  Rng rng(derive_seed(seed, "prototypes"));
  u.prototypes = Matrix(dims.num_concepts, dims.latent_dim, 0.0, Role::embedding);
  for (std::size_t k = 0; k < dims.num_concepts; ++k) {
    // Rejection keeps every pair of classes apart.
    for (int attempt = 0;; ++attempt) {
      if (attempt > 1000) throw NumericError("could not place separated prototypes");
      for (double& v : u.prototypes.row(k)) v = rng.normal();
      bool ok = true;
      for (std::size_t j = 0; j < k && ok; ++j) {
        ok = row_cosine(u.prototypes, k, u.prototypes, j) < kMaxPrototypeCosine;
      }
      if (ok) break;
    }
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(dims.latent_dim));
  Rng maps(derive_seed(seed, "render"));
  u.render = maps.normal_matrix(dims.latent_dim, dims.input_dim, scale);
  u.background = maps.normal_matrix(dims.latent_dim, dims.input_dim, scale);
  return u;
}

std::size_t class_token_id(std::size_t concept_id) { return kTemplateTokens + concept_id; }

std::size_t SyntheticWorld::class_token(std::size_t cls) const {
  if (cls >= concepts.size()) throw ParameterError("class index out of range");
  return class_token_id(concepts[cls]);
}

SyntheticWorld generate_world(const Universe& universe, const WorldConfig& config) {
  if (config.num_classes < 2) throw ProtocolError("a world needs at least 2 classes");
  if (config.first_concept + config.num_classes > universe.dims.num_concepts) {
    throw ProtocolError("world concepts exceed the universe");
  }
  if (config.pixel_noise < 0.0 || config.intra_class < 0.0 || config.render_gap < 0.0 ||
      config.shift.noise_multiplier < 0.0) {
    throw ParameterError("world noise scales must be non-negative");
  }
  SyntheticWorld w;
  w.sample_seed = derive_seed(universe.seed, "samples", config.render_seed);
  w.dims = universe.dims;
  w.prototypes = Matrix(config.num_classes, universe.dims.latent_dim, 0.0, Role::embedding);
  for (std::size_t k = 0; k < config.num_classes; ++k) {
    const std::size_t concept_id = config.first_concept + k;
    w.concepts.push_back(concept_id);
    auto src = universe.prototypes.row(concept_id);
    std::copy(src.begin(), src.end(), w.prototypes.row(k).begin());
  }
  w.render = universe.render;
  if (config.render_gap > 0.0) {
    Rng rng(derive_seed(universe.seed, "render-gap", config.render_seed));
    const double scale =
        config.render_gap / std::sqrt(static_cast<double>(universe.dims.latent_dim));
    const Matrix delta = rng.normal_matrix(w.render.rows(), w.render.cols(), scale);
    for (std::size_t i = 0; i < delta.size(); ++i) w.render.values()[i] += delta.values()[i];
  }
  w.background = universe.background;
  w.pixel_noise = config.pixel_noise;
  w.intra_class = config.intra_class;
  w.shift = config.shift;
  return w;
}

SyntheticWorld with_shift(const SyntheticWorld& world, const Shift& shift) {
  SyntheticWorld out = world;
  out.shift = shift;
  return out;
}

Matrix render_image(const SyntheticWorld& world, std::size_t cls, std::size_t index,
                    std::uint64_t seed) {
  const std::size_t k = world.num_classes();
  if (cls >= k) throw ParameterError("class index out of range");
  const WorldDims& d = world.dims;
  Rng rng(derive_seed(world.sample_seed ^ seed, "image", world.concepts[cls], index));

  std::vector<double> z(d.latent_dim);
  const Shift& s = world.shift;
  for (std::size_t l = 0; l < d.latent_dim; ++l) {
    double proto = world.prototypes(cls, l);
    if (s.interpolation != 0.0) {
      proto = (1.0 - s.interpolation) * proto +
              s.interpolation * world.prototypes((cls + 1) % k, l);
    }
    z[l] = proto;
  }
  if (s.rotation != 0.0) {
    const double c = std::cos(s.rotation), sn = std::sin(s.rotation);
    for (std::size_t l = 0; l + 1 < d.latent_dim; l += 2) {
      const double a = z[l], b = z[l + 1];
      z[l] = c * a - sn * b;
      z[l + 1] = sn * a + c * b;
    }
  }
  for (double& v : z) v += world.intra_class * rng.normal();

  // Square object of side 2 or 3 at a random position on the grid.
  const std::size_t side = std::min<std::size_t>({2 + rng.index(2), d.grid_h, d.grid_w});
  const std::size_t top = rng.index(d.grid_h - side + 1);
  const std::size_t left = rng.index(d.grid_w - side + 1);

  Matrix image(d.patches(), d.input_dim, 0.0, Role::feature);
  std::vector<double> bg(d.latent_dim);
  const double noise = world.pixel_noise * s.noise_multiplier;
  for (std::size_t r = 0; r < d.grid_h; ++r) {
    for (std::size_t c = 0; c < d.grid_w; ++c) {
      auto px = image.row(r * d.grid_w + c);
      const bool object = r >= top && r < top + side && c >= left && c < left + side;
      if (object) {
        add_scaled_row(z, world.render, px);
      } else {
        for (double& v : bg) v = rng.normal();
        add_scaled_row(bg, world.background, px);
      }
      for (double& v : px) v += noise * rng.normal();
    }
  }
  return image;
}

const std::vector<std::size_t>& template_tokens(Template t) {
  // Word ids: a=0 photo=1 of=2 drawing=3 painting=4 the=5.
  static const std::vector<std::size_t> photo{0, 1, 2, 0};
  static const std::vector<std::size_t> drawing{0, 3, 2, 0};
  static const std::vector<std::size_t> painting{0, 4, 2, 5};
  switch (t) {
    case Template::photo: return photo;
    case Template::drawing: return drawing;
    case Template::painting: return painting;
  }
  return photo;
}

std::string to_string(Template t) {
  switch (t) {
    case Template::photo: return "a photo of a";
    case Template::drawing: return "a drawing of a";
    case Template::painting: return "a painting of the";
  }
  return "?";
}

Template template_from_string(const std::string& name) {
  if (name == "photo" || name == to_string(Template::photo)) return Template::photo;
  if (name == "drawing" || name == to_string(Template::drawing)) return Template::drawing;
  if (name == "painting" || name == to_string(Template::painting)) return Template::painting;
  throw ConfigError("unknown template '" + name + "' (photo, drawing, painting)");
}

TaskSplit base_novel_split(const SyntheticWorld& world, std::size_t shots,
                           std::size_t test_per_class) {
  const std::size_t k = world.num_classes();
  if (k < 4) {
    throw ProtocolError("base-to-novel split needs at least 4 classes, got " +
                        std::to_string(k));
  }
  TaskSplit split;
  split.shots = shots;
  split.test_per_class = test_per_class;
  for (std::size_t c = 0; c < k; ++c) (c < k / 2 ? split.base : split.novel).push_back(c);
  return split;
}

TaskSplit all_class_split(const SyntheticWorld& world, std::size_t shots,
                          std::size_t test_per_class) {
  TaskSplit split;
  split.shots = shots;
  split.test_per_class = test_per_class;
  for (std::size_t c = 0; c < world.num_classes(); ++c) split.base.push_back(c);
  return split;
}

std::vector<Sample> train_samples(const SyntheticWorld& world, const TaskSplit& split,
                                  std::uint64_t seed) {
  std::vector<Sample> out;
  const std::uint64_t stream = derive_seed(seed, "train-samples");
  for (std::size_t cls : split.base) {
    for (std::size_t i = 0; i < split.shots; ++i) {
      out.push_back({render_image(world, cls, i, stream), cls});
    }
  }
  return out;
}

std::vector<Sample> test_samples(const SyntheticWorld& world,
                                 const std::vector<std::size_t>& classes,
                                 std::size_t per_class) {
  std::vector<Sample> out;
  for (std::size_t cls : classes) {
    for (std::size_t i = 0; i < per_class; ++i) {
      out.push_back({render_image(world, cls, i, kTestSeed), cls});
    }
  }
  return out;
}

}  // namespace enprompt::world
