#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "enprompt/checkpoint.hpp"
#include "enprompt/encoder.hpp"
#include "enprompt/errors.hpp"
#include "enprompt/random.hpp"

namespace enprompt::encoders {
namespace {

constexpr int kCheckpointVersion = 1;

Var symmetric_cross_entropy(Tape& t, Var logits, std::size_t n) {
  std::vector<std::size_t> labels(n);
  std::iota(labels.begin(), labels.end(), std::size_t{0});
  const Var both = t.add(t.cross_entropy(logits, labels),
                         t.cross_entropy(t.transpose(logits), labels));
  return t.scale(both, 0.5);
}

// Global term on the global token; patch term on the mean patch-to-text
// cosine, so that local features are usable as transport supports.
Var contrastive_loss(Tape& t, const DualEncoder& enc, const std::vector<Matrix>& images,
                     const Matrix& sequences, std::size_t len, double patch_weight) {
  const ImageFeatures img = image_encode(t, enc, images, {});
  const TextFeatures txt = text_encode(t, enc, t.constant(sequences), len);
  const double inv_tau = 1.0 / enc.config.tau;
  Var loss = symmetric_cross_entropy(
      t, t.scale(t.matmul_transposed(img.global, txt.global), inv_tau), images.size());
  if (patch_weight > 0.0) {
    const std::size_t m = enc.config.patches();
    const Var local = t.scale(t.group_sum_rows(t.matmul_transposed(img.locals, txt.global), m),
                              inv_tau / static_cast<double>(m));
    loss = t.add(loss, t.scale(symmetric_cross_entropy(t, local, images.size()), patch_weight));
  }
  return loss;
}

nlohmann::json config_to_json(const EncoderConfig& c) {
  return {{"text_dim", c.text_dim},         {"vis_dim", c.vis_dim},
          {"shared_dim", c.shared_dim},     {"text_blocks", c.text_blocks},
          {"vis_blocks", c.vis_blocks},     {"grid_h", c.grid_h},
          {"grid_w", c.grid_w},             {"input_dim", c.input_dim},
          {"vocab_size", c.vocab_size},     {"max_prompt_len", c.max_prompt_len},
          {"text_hidden", c.text_hidden},   {"vis_hidden", c.vis_hidden},
          {"tau", c.tau}};
}

EncoderConfig config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.text_dim = j.at("text_dim");
  c.vis_dim = j.at("vis_dim");
  c.shared_dim = j.at("shared_dim");
  c.text_blocks = j.at("text_blocks");
  c.vis_blocks = j.at("vis_blocks");
  c.grid_h = j.at("grid_h");
  c.grid_w = j.at("grid_w");
  c.input_dim = j.at("input_dim");
  c.vocab_size = j.at("vocab_size");
  c.max_prompt_len = j.at("max_prompt_len");
  c.text_hidden = j.at("text_hidden");
  c.vis_hidden = j.at("vis_hidden");
  c.tau = j.at("tau");
  return c;
}

}  // namespace

double contrastive_loss_value(const DualEncoder& enc, const std::vector<Matrix>& images,
                              const Matrix& sequences, std::size_t len, double patch_weight) {
  Tape t;
  return t.value(contrastive_loss(t, enc, images, sequences, len, patch_weight))(0, 0);
}

double contrastive_step(DualEncoder& enc, const std::vector<Matrix>& images,
                        const Matrix& sequences, std::size_t len, double learning_rate,
                        Adam& optimizer, double patch_weight) {
  Tape t;
  const Var loss = contrastive_loss(t, enc, images, sequences, len, patch_weight);
  const double value = t.value(loss)(0, 0);
  if (!std::isfinite(value)) return value;
  t.backward(loss);
  optimizer.set_learning_rate(learning_rate);
  optimizer.step(enc.weights, t.parameter_gradients(enc.weights));
  return value;
}

PretrainResult pretrain_contrastive(const world::Universe& universe,
                                    const EncoderConfig& config,
                                    const PretrainConfig& pretrain,
                                    const PretrainObserver& observer) {
  const world::SyntheticWorld w = world::generate_world(universe, pretrain.world);
  const std::size_t k = w.num_classes();
  if (pretrain.batch < 2 || pretrain.batch > k) {
    throw ParameterError("pretraining batch must hold 2.." + std::to_string(k) +
                         " distinct classes");
  }
  if (!(pretrain.learning_rate >= 0.0) || !(pretrain.patch_weight >= 0.0)) {
    throw ParameterError("learning rate and patch weight must be non-negative");
  }
  PretrainResult out{init_encoder(config, universe, pretrain.seed), {}};
  DualEncoder& enc = out.encoder;

  Rng rng(derive_seed(pretrain.seed, "pretrain-batches"));
  const std::uint64_t image_seed = derive_seed(pretrain.seed, "pretrain-images");
  const world::Template templates[] = {world::Template::photo, world::Template::drawing,
                                       world::Template::painting};
  const std::size_t len = world::template_tokens(templates[0]).size() + 1;
  Adam optimizer(pretrain.learning_rate);
  std::vector<std::size_t> classes(k);

  for (std::size_t step = 0; step < pretrain.steps; ++step) {
    std::iota(classes.begin(), classes.end(), std::size_t{0});
    rng.shuffle(classes);
    std::vector<Matrix> images;
    Matrix seqs(pretrain.batch * len, config.text_dim, 0.0, Role::embedding);
    for (std::size_t i = 0; i < pretrain.batch; ++i) {
      const std::size_t cls = classes[i];
      images.push_back(world::render_image(w, cls, step * pretrain.batch + i, image_seed));
      const auto& ids = world::template_tokens(templates[rng.index(3)]);
      const Matrix p = embed_prompt(ids, w.class_token(cls), enc.token_table());
      std::copy(p.values().begin(), p.values().end(), seqs.row(i * len).begin());
    }
    const double lr = cosine_decay(pretrain.learning_rate, step, pretrain.steps);
    const double loss = contrastive_step(enc, images, seqs, len, lr, optimizer, pretrain.patch_weight);
    if (!std::isfinite(loss)) throw TrainingError(step, "contrastive loss is not finite");
    out.losses.push_back(loss);
    if (observer) observer(step, loss);
  }
  enc.weights.freeze_all();
  enc.frozen = true;
  return out;
}

void save_encoder(std::ostream& out, const DualEncoder& enc) {
  nlohmann::json j = {{"format", "enprompt-encoder"},
                      {"version", kCheckpointVersion},
                      {"config", config_to_json(enc.config)},
                      {"frozen", enc.frozen},
                      {"weights", registry_to_json(enc.weights)}};
  out << j.dump() << '\n';
}

DualEncoder load_encoder(std::istream& in) {
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("encoder checkpoint is not valid JSON: ") + e.what());
  }
  if (j.value("format", "") != "enprompt-encoder") {
    throw ConfigError("not an encoder checkpoint");
  }
  if (j.value("version", 0) != kCheckpointVersion) {
    throw ConfigError("unsupported encoder checkpoint version");
  }
  DualEncoder enc;
  try {
    enc.config = config_from_json(j.at("config"));
    enc.frozen = j.at("frozen").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed encoder config: ") + e.what());
  }
  enc.config.validate();
  enc.weights = registry_from_json(j.at("weights"));
  return enc;
}

void save_encoder(const std::string& path, const DualEncoder& enc) {
  std::ostringstream out;
  save_encoder(out, enc);
  write_file_atomic(path, out.str());
}

DualEncoder load_encoder(const std::string& path) {
  std::istringstream in(read_file(path));
  return load_encoder(in);
}

}  // namespace enprompt::encoders
