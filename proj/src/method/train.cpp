#include <cmath>
#include <numeric>

#include "enprompt/checkpoint.hpp"
#include "enprompt/errors.hpp"
#include "enprompt/method.hpp"
#include "enprompt/optimizer.hpp"
#include "enprompt/random.hpp"

namespace enprompt::method {
namespace {

constexpr int kStateVersion = 1;
constexpr std::size_t kEvalChunk = 64;

// Image features for every sample, computed once for methods whose visual
// side has nothing to learn.
ImageCache cache_images(const std::vector<world::Sample>& samples,
                        const encoders::DualEncoder& enc) {
  ImageCache cache;
  const std::size_t m = enc.config.patches();
  cache.global = Matrix(samples.size(), enc.config.shared_dim);
  cache.locals = Matrix(samples.size() * m, enc.config.shared_dim);
  for (std::size_t start = 0; start < samples.size(); start += kEvalChunk) {
    const std::size_t end = std::min(samples.size(), start + kEvalChunk);
    std::vector<Matrix> images;
    for (std::size_t i = start; i < end; ++i) images.push_back(samples[i].image);
    Tape t;
    const auto f = encoders::image_encode(t, enc, images, {});
    const Matrix& g = t.value(f.global);
    const Matrix& l = t.value(f.locals);
    std::copy(g.values().begin(), g.values().end(), cache.global.row(start).begin());
    std::copy(l.values().begin(), l.values().end(), cache.locals.row(start * m).begin());
  }
  return cache;
}

ImageCache cache_rows(const ImageCache& all, std::span<const std::size_t> rows,
                      std::size_t m) {
  ImageCache out;
  out.global = Matrix(rows.size(), all.global.cols());
  out.locals = Matrix(rows.size() * m, all.locals.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto g = all.global.row(rows[i]);
    std::copy(g.begin(), g.end(), out.global.row(i).begin());
    auto l = all.locals.values().subspan(rows[i] * m * all.locals.cols(), m * all.locals.cols());
    std::copy(l.begin(), l.end(), out.locals.row(i * m).begin());
  }
  return out;
}

nlohmann::json config_to_json(const MethodConfig& c) {
  return {{"kind", to_string(c.kind)},
          {"prompt_length", c.prompt_length},
          {"depth", c.depth},
          {"enla_design", to_string(c.enla_design)},
          {"fusion", to_string(c.fusion)},
          {"text_side", to_string(c.text_side)},
          {"template_ids", c.template_ids},
          {"sinkhorn",
           {{"lambda", c.sinkhorn.lambda},
            {"max_iterations", c.sinkhorn.max_iterations},
            {"marginal_tolerance", c.sinkhorn.marginal_tolerance},
            {"log_domain", c.sinkhorn.log_domain},
            {"epsilon_scaling", c.sinkhorn.epsilon_scaling}}}};
}

MethodConfig config_from_json(const nlohmann::json& j) {
  MethodConfig c;
  c.kind = method_from_string(j.at("kind"));
  c.prompt_length = j.at("prompt_length");
  c.depth = j.at("depth");
  c.enla_design = enla_design_from_string(j.at("enla_design"));
  c.fusion = fusion_from_string(j.at("fusion"));
  c.text_side = text_side_from_string(j.at("text_side"));
  c.template_ids = j.at("template_ids").get<std::vector<std::size_t>>();
  const auto& s = j.at("sinkhorn");
  c.sinkhorn.lambda = s.at("lambda");
  c.sinkhorn.max_iterations = s.at("max_iterations");
  c.sinkhorn.marginal_tolerance = s.at("marginal_tolerance");
  c.sinkhorn.log_domain = s.at("log_domain");
  c.sinkhorn.epsilon_scaling = s.at("epsilon_scaling");
  return c;
}

}  // namespace

TrainResult train(const MethodConfig& config, const encoders::DualEncoder& enc,
                  const std::vector<world::Sample>& samples,
                  std::span<const std::size_t> class_tokens, const TrainHyper& hyper) {
  if (!(hyper.learning_rate >= 0.0) || !(hyper.momentum >= 0.0) || hyper.batch_size == 0) {
    throw ParameterError("learning rate and momentum must be >= 0, batch size > 0");
  }
  if (class_tokens.size() < 2) throw ProtocolError("training needs at least 2 classes");
  for (const auto& s : samples) {
    if (s.label >= class_tokens.size()) throw DimensionError("sample label outside class list");
  }
  TrainResult out;
  out.state = init_state(config, enc, class_tokens, hyper.seed);
  out.param_count = count_learnable_params(out.state);
  if (hyper.epochs == 0 || out.param_count == 0 || samples.empty()) return out;

  const bool cached = !config.visual_learnable();
  ImageCache all;
  if (cached) all = cache_images(samples, enc);
  const std::size_t m = enc.config.patches();

  SgdMomentum optimizer(hyper.learning_rate, hyper.momentum);
  Rng rng(derive_seed(hyper.seed, "batching"));
  std::vector<std::size_t> order(samples.size());
  std::size_t batch_index = 0;
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
      const std::size_t end = std::min(order.size(), start + hyper.batch_size);
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      Batch batch;
      for (std::size_t r : rows) {
        batch.images.push_back(samples[r].image);
        batch.labels.push_back(samples[r].label);
      }
      ImageCache sub;
      if (cached) sub = cache_rows(all, rows, m);
      LossAndGrads step = loss_and_grads(batch, class_tokens, out.state, enc, batch_index,
                                         cached ? &sub : nullptr);
      optimizer.step(out.state.params, step.grads);
      out.unconverged_solves += step.plans.unconverged;
      total += step.loss * static_cast<double>(rows.size());
      ++batch_index;
    }
    out.epoch_losses.push_back(total / static_cast<double>(samples.size()));
  }
  return out;
}

TrainResult coop_baseline_train(const encoders::DualEncoder& enc,
                                const std::vector<world::Sample>& samples,
                                std::span<const std::size_t> class_tokens,
                                const TrainHyper& hyper, MethodConfig config) {
  config.kind = MethodKind::coop;
  return train(config, enc, samples, class_tokens, hyper);
}

double evaluate(const PromptState& state, const encoders::DualEncoder& enc,
                const std::vector<world::Sample>& samples,
                std::span<const std::size_t> class_tokens) {
  if (samples.empty()) throw ParameterError("no samples to evaluate");
  std::size_t correct = 0;
  for (std::size_t start = 0; start < samples.size(); start += kEvalChunk) {
    const std::size_t end = std::min(samples.size(), start + kEvalChunk);
    std::vector<Matrix> images;
    for (std::size_t i = start; i < end; ++i) images.push_back(samples[i].image);
    const auto probs = predict_batch(images, class_tokens, state, enc);
    for (std::size_t i = start; i < end; ++i) {
      if (argmax(probs[i - start]) == samples[i].label) ++correct;
    }
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(samples.size());
}

void save_state(std::ostream& out, const PromptState& state) {
  const nlohmann::json j = {{"format", "enprompt-prompt-state"},
                            {"version", kStateVersion},
                            {"config", config_to_json(state.config)},
                            {"probe_tokens", state.probe_tokens},
                            {"params", registry_to_json(state.params)}};
  out << j.dump() << '\n';
}

PromptState load_state(std::istream& in) {
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("prompt state is not valid JSON: ") + e.what());
  }
  if (j.value("format", "") != "enprompt-prompt-state") throw ConfigError("not a prompt state");
  if (j.value("version", 0) != kStateVersion) {
    throw ConfigError("unsupported prompt state version");
  }
  PromptState s;
  try {
    s.config = config_from_json(j.at("config"));
    s.probe_tokens = j.at("probe_tokens").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed prompt state: ") + e.what());
  }
  s.params = registry_from_json(j.at("params"));
  return s;
}

}  // namespace enprompt::method
