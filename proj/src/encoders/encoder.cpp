#include "enprompt/encoder.hpp"

#include <cmath>
#include <numeric>

#include "enprompt/errors.hpp"
#include "enprompt/random.hpp"

namespace enprompt::encoders {
namespace {

constexpr double kLexiconNoise = 0.1;

std::string block_name(const char* tower, std::size_t b, const char* what) {
  return std::string(tower) + "/b" + std::to_string(b) + "/" + what;
}

void add_block(ParameterRegistry& reg, Rng& rng, const char* tower, std::size_t b,
               std::size_t dim, std::size_t hidden) {
  const double s_dim = 1.0 / std::sqrt(static_cast<double>(dim));
  const double s_hidden = 1.0 / std::sqrt(static_cast<double>(hidden));
  reg.add(block_name(tower, b, "mix"), rng.normal_matrix(dim, dim, 0.5 * s_dim));
  reg.add(block_name(tower, b, "mix_bias"), Matrix(1, dim, 0.0, Role::weight));
  reg.add(block_name(tower, b, "w1"), rng.normal_matrix(dim, hidden, s_dim));
  reg.add(block_name(tower, b, "b1"), Matrix(1, hidden, 0.0, Role::weight));
  reg.add(block_name(tower, b, "w2"), rng.normal_matrix(hidden, dim, 0.5 * s_hidden));
}

// One mixer + feed-forward block. `agg` is the per-sequence aggregate
// (one row per sequence); rows of x are grouped `group` per sequence.
Var run_block(Tape& t, const ParameterRegistry& w, const char* tower, std::size_t b,
              Var x, Var agg, std::size_t group) {
  const Var mix = t.tanh(t.add_row(t.matmul(agg, t.parameter(w, block_name(tower, b, "mix"))),
                                   t.parameter(w, block_name(tower, b, "mix_bias"))));
  const std::size_t n = t.value(agg).rows();
  std::vector<std::size_t> spread(n * group);
  for (std::size_t i = 0; i < spread.size(); ++i) spread[i] = i / group;
  x = t.add(x, t.gather_rows(mix, std::move(spread)));
  const Var h = t.tanh(t.add_row(t.matmul(x, t.parameter(w, block_name(tower, b, "w1"))),
                                 t.parameter(w, block_name(tower, b, "b1"))));
  return t.add(x, t.matmul(h, t.parameter(w, block_name(tower, b, "w2"))));
}

}  // namespace

void EncoderConfig::validate() const {
  if (text_dim == 0 || vis_dim == 0 || shared_dim == 0 || input_dim == 0 ||
      text_hidden == 0 || vis_hidden == 0 || text_blocks == 0) {
    throw ParameterError("encoder dimensions must be positive");
  }
  if (patches() < 2) throw ParameterError("patch grid must hold at least 2 patches");
  if (vis_blocks < 10) throw ParameterError("image encoder needs at least 10 blocks");
  if (!(tau > 0.0)) throw ParameterError("temperature must be > 0");
  if (max_prompt_len == 0) throw ParameterError("max_prompt_len must be positive");
  if (vocab_size <= world::kTemplateTokens) {
    throw ParameterError("vocabulary must extend past the template words");
  }
}

EncoderConfig EncoderConfig::for_world(const world::WorldDims& dims) {
  EncoderConfig c;
  c.grid_h = dims.grid_h;
  c.grid_w = dims.grid_w;
  c.input_dim = dims.input_dim;
  c.vocab_size = dims.vocab_size();
  return c;
}

DualEncoder init_encoder(const EncoderConfig& config, const world::Universe& universe,
                         std::uint64_t seed) {
  config.validate();
  if (universe.dims.patches() != config.patches() ||
      universe.dims.input_dim != config.input_dim) {
    throw DimensionError("encoder patch layout does not match the world");
  }
  if (world::kTemplateTokens + universe.dims.num_concepts > config.vocab_size) {
    throw DimensionError("vocabulary smaller than the concept lexicon");
  }
  DualEncoder enc;
  enc.config = config;
  auto& reg = enc.weights;

  Rng lex(derive_seed(seed, "lexicon"));
  Matrix table(config.vocab_size, config.text_dim, 0.0, Role::embedding);
  const Matrix to_text = lex.normal_matrix(
      universe.dims.latent_dim, config.text_dim,
      1.0 / std::sqrt(static_cast<double>(universe.dims.latent_dim)));
  for (std::size_t id = 0; id < config.vocab_size; ++id) {
    auto row = table.row(id);
    if (id >= world::kTemplateTokens &&
        id - world::kTemplateTokens < universe.dims.num_concepts) {
      const auto z = universe.prototypes.row(id - world::kTemplateTokens);
      for (std::size_t l = 0; l < z.size(); ++l)
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += z[l] * to_text(l, c);
      for (double& v : row) v += kLexiconNoise * lex.normal();
    } else {
      for (double& v : row) v = lex.normal();
    }
  }
  reg.add("text/tokens", std::move(table), /*frozen=*/true);

  Rng rng(derive_seed(seed, "encoder-init"));
  reg.add("text/pos", rng.normal_matrix(config.max_prompt_len, config.text_dim, 0.1));
  for (std::size_t b = 0; b < config.text_blocks; ++b) {
    add_block(reg, rng, "text", b, config.text_dim, config.text_hidden);
  }
  reg.add("text/proj", rng.normal_matrix(config.text_dim, config.shared_dim,
                                         1.0 / std::sqrt(double(config.text_dim))));

  reg.add("vis/patch", rng.normal_matrix(config.input_dim, config.vis_dim,
                                         1.0 / std::sqrt(double(config.input_dim))));
  reg.add("vis/pos", rng.normal_matrix(config.patches(), config.vis_dim, 0.1));
  reg.add("vis/global", rng.normal_matrix(1, config.vis_dim, 0.5));
  for (std::size_t b = 0; b < config.vis_blocks; ++b) {
    add_block(reg, rng, "vis", b, config.vis_dim, config.vis_hidden);
  }
  reg.add("vis/proj", rng.normal_matrix(config.vis_dim, config.shared_dim,
                                        1.0 / std::sqrt(double(config.vis_dim))));
  return enc;
}

Matrix embed_prompt(std::span<const std::size_t> template_ids, std::size_t class_id,
                    const Matrix& token_table) {
  Matrix out(template_ids.size() + 1, token_table.cols(), 0.0, Role::embedding);
  auto copy_row = [&](std::size_t dst, std::size_t id) {
    if (id >= token_table.rows()) {
      throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(token_table.rows()));
    }
    auto src = token_table.row(id);
    std::copy(src.begin(), src.end(), out.row(dst).begin());
  };
  for (std::size_t i = 0; i < template_ids.size(); ++i) copy_row(i, template_ids[i]);
  copy_row(template_ids.size(), class_id);
  return out;
}

TextFeatures text_encode(Tape& t, const DualEncoder& enc, Var sequences, std::size_t len) {
  const auto& cfg = enc.config;
  const Matrix& seq = t.value(sequences);
  if (len == 0 || seq.rows() % len != 0) {
    throw DimensionError("text batch " + seq.shape_string() + " is not a multiple of length " +
                         std::to_string(len));
  }
  if (len > cfg.max_prompt_len) {
    throw LengthError("sequence of " + std::to_string(len) + " tokens exceeds " +
                      std::to_string(cfg.max_prompt_len));
  }
  if (seq.cols() != cfg.text_dim) {
    throw DimensionError("text embeddings of width " + std::to_string(seq.cols()) +
                         ", encoder expects " + std::to_string(cfg.text_dim));
  }
  const std::size_t n = seq.rows() / len;
  const auto& w = enc.weights;

  std::vector<std::size_t> positions(n * len);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i % len;
  Var x = t.add(sequences, t.gather_rows(t.parameter(w, "text/pos"), std::move(positions)));
  const double inv_len = 1.0 / static_cast<double>(len);
  for (std::size_t b = 0; b < cfg.text_blocks; ++b) {
    const Var agg = t.scale(t.group_sum_rows(x, len), inv_len);
    x = run_block(t, w, "text", b, x, agg, len);
  }
  TextFeatures out;
  out.tokens = t.l2_normalize_rows(t.matmul(x, t.parameter(w, "text/proj")));
  std::vector<std::size_t> last(n);
  for (std::size_t i = 0; i < n; ++i) last[i] = i * len + len - 1;
  out.global = t.gather_rows(out.tokens, std::move(last));
  return out;
}

ImageFeatures image_encode(Tape& t, const DualEncoder& enc, std::span<const Matrix> images,
                           std::span<const Var> prompts) {
  const auto& cfg = enc.config;
  const std::size_t m = cfg.patches();
  const std::size_t bsz = images.size();
  if (bsz == 0) throw DimensionError("image batch is empty");
  if (prompts.size() > cfg.vis_blocks) {
    throw DimensionError(std::to_string(prompts.size()) + " prompt layers for " +
                         std::to_string(cfg.vis_blocks) + " blocks");
  }
  for (Var p : prompts) {
    if (p.valid() && t.value(p).cols() != cfg.vis_dim) {
      throw DimensionError("prompt tokens of width " + std::to_string(t.value(p).cols()) +
                           ", image encoder width is " + std::to_string(cfg.vis_dim));
    }
  }
  std::vector<double> pixels;
  pixels.reserve(bsz * m * cfg.input_dim);
  for (const Matrix& img : images) {
    if (img.rows() != m || img.cols() != cfg.input_dim) {
      throw DimensionError("image " + img.shape_string() + ", expected " + std::to_string(m) +
                           "x" + std::to_string(cfg.input_dim));
    }
    pixels.insert(pixels.end(), img.values().begin(), img.values().end());
  }
  const auto& w = enc.weights;
  const Var raw = t.constant(Matrix(bsz * m, cfg.input_dim, std::move(pixels)));

  std::vector<std::size_t> tile(bsz * m);
  for (std::size_t i = 0; i < tile.size(); ++i) tile[i] = i % m;
  const Var patches = t.add(t.matmul(raw, t.parameter(w, "vis/patch")),
                            t.gather_rows(t.parameter(w, "vis/pos"), std::move(tile)));
  // Carried rows per image: M patch tokens, then the global token.
  const Var pool[] = {patches, t.parameter(w, "vis/global")};
  std::vector<std::size_t> layout;
  layout.reserve(bsz * (m + 1));
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t i = 0; i < m; ++i) layout.push_back(b * m + i);
    layout.push_back(bsz * m);
  }
  Var x = t.gather_rows(t.concat_rows(pool), std::move(layout));

  const double inv = 1.0 / static_cast<double>(m + 1);
  for (std::size_t b = 0; b < cfg.vis_blocks; ++b) {
    Var sum = t.group_sum_rows(x, m + 1);
    if (b < prompts.size() && prompts[b].valid()) {
      sum = t.add_row(sum, t.column_sums(prompts[b]));
    }
    x = run_block(t, w, "vis", b, x, t.scale(sum, inv), m + 1);
  }

  const Var y = t.l2_normalize_rows(t.matmul(x, t.parameter(w, "vis/proj")));
  std::vector<std::size_t> globals, locals;
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t i = 0; i < m; ++i) locals.push_back(b * (m + 1) + i);
    globals.push_back(b * (m + 1) + m);
  }
  return {t.gather_rows(y, std::move(globals)), t.gather_rows(y, std::move(locals))};
}

TextOutput text_encode(const Matrix& sequence, const DualEncoder& enc) {
  Tape t;
  const TextFeatures f = text_encode(t, enc, t.constant(sequence), sequence.rows());
  return {t.value(f.global), t.value(f.tokens)};
}

ImageOutput image_encode(const Matrix& image, std::span<const Matrix> prompts,
                         const DualEncoder& enc) {
  Tape t;
  std::vector<Var> vars;
  for (const Matrix& p : prompts) vars.push_back(p.empty() ? Var{} : t.constant(p));
  const Matrix images[] = {image};
  const ImageFeatures f = image_encode(t, enc, images, vars);
  return {t.value(f.global), t.value(f.locals)};
}

std::vector<double> cosine_prediction(const Matrix& image_global, const Matrix& class_globals,
                                      double tau) {
  if (class_globals.rows() < 2) throw ParameterError("prediction needs at least 2 classes");
  const Matrix cos = cosine_similarity_matrix(image_global, class_globals);
  return softmax_with_temperature(cos.row(0), tau);
}

std::vector<double> clip_zero_shot_predict(const Matrix& image,
                                           std::span<const Matrix> class_prompts,
                                           const DualEncoder& enc) {
  if (class_prompts.size() < 2) throw ParameterError("prediction needs at least 2 classes");
  Matrix globals(class_prompts.size(), enc.config.shared_dim);
  for (std::size_t k = 0; k < class_prompts.size(); ++k) {
    const Matrix g = text_encode(class_prompts[k], enc).global;
    std::copy(g.values().begin(), g.values().end(), globals.row(k).begin());
  }
  return cosine_prediction(image_encode(image, {}, enc).global, globals, enc.config.tau);
}

Matrix class_text_globals(const DualEncoder& enc, const world::SyntheticWorld& world,
                          std::span<const std::size_t> classes, world::Template tmpl) {
  const auto& ids = world::template_tokens(tmpl);
  const std::size_t len = ids.size() + 1;
  Matrix seqs(classes.size() * len, enc.config.text_dim, 0.0, Role::embedding);
  for (std::size_t k = 0; k < classes.size(); ++k) {
    const Matrix p = embed_prompt(ids, world.class_token(classes[k]), enc.token_table());
    std::copy(p.values().begin(), p.values().end(), seqs.row(k * len).begin());
  }
  Tape t;
  return t.value(text_encode(t, enc, t.constant(std::move(seqs)), len).global);
}

}  // namespace enprompt::encoders
