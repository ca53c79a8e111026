#include "enprompt/method.hpp"

#include <algorithm>
#include <cmath>

#include "enprompt/errors.hpp"
#include "enprompt/random.hpp"

namespace enprompt::method {
namespace {

constexpr double kEnlaInitNoise = 1e-3;
constexpr double kPromptInitStd = 0.02;

std::string prompt_name(std::size_t layer) { return "prompt/" + std::to_string(layer); }

template <typename E>
E parse_enum(const std::string& name, std::initializer_list<E> values, const char* what) {
  std::string known;
  for (E v : values) {
    if (to_string(v) == name) return v;
    known += (known.empty() ? "" : ", ") + to_string(v);
  }
  throw ConfigError("unknown " + std::string(what) + " '" + name + "' (" + known + ")");
}

// Shared by the single-image and batched prediction paths so both produce
// identical bits.
std::vector<double> head_probabilities(const PromptState& state, const Matrix& image_global,
                                       const Matrix& image_locals, const Matrix& text,
                                       const Matrix& head_weights, std::size_t n, double tau) {
  if (state.config.ot_enabled()) {
    std::vector<Matrix> sets;
    for (std::size_t k = 0; k * n < text.rows(); ++k) sets.push_back(slice_rows(text, k * n, n));
    const auto d = ot::ot_class_distances(image_locals, sets, state.config.sinkhorn);
    return ot::ot_prediction(d.distances, tau);
  }
  return encoders::cosine_prediction(image_global, head_weights, tau);
}

Var enla_on_tape(Tape& t, const PromptState& state, Var p) {
  const auto& reg = state.params;
  if (state.config.enla_design == EnlaDesign::single) {
    return t.matmul(p, t.parameter(reg, "enla"));
  }
  return t.matmul(t.relu(t.matmul(p, t.parameter(reg, "enla_down"))),
                  t.parameter(reg, "enla_up"));
}

}  // namespace

std::string to_string(MethodKind kind) {
  switch (kind) {
    case MethodKind::frozen_only: return "frozen_only";
    case MethodKind::linear_probe: return "linear_probe";
    case MethodKind::coop: return "coop";
    case MethodKind::enla_only: return "enla_only";
    case MethodKind::enla_visual: return "enla_visual";
    case MethodKind::enprompt_minus_fusion: return "enprompt_minus_fusion";
    case MethodKind::enprompt: return "enprompt";
    case MethodKind::enprompt_minus_ot: return "enprompt_minus_ot";
    case MethodKind::visual_external: return "visual_external";
  }
  return "?";
}

const std::vector<MethodKind>& all_methods() {
  static const std::vector<MethodKind> all{
      MethodKind::frozen_only,  MethodKind::linear_probe,          MethodKind::coop,
      MethodKind::enla_only,    MethodKind::enla_visual,           MethodKind::enprompt_minus_fusion,
      MethodKind::enprompt,     MethodKind::enprompt_minus_ot,     MethodKind::visual_external};
  return all;
}

MethodKind method_from_string(const std::string& name) {
  for (MethodKind k : all_methods()) {
    if (to_string(k) == name) return k;
  }
  std::string known;
  for (MethodKind k : all_methods()) known += (known.empty() ? "" : ", ") + to_string(k);
  throw ConfigError("unknown variant '" + name + "' (" + known + ")");
}

std::string to_string(EnlaDesign design) {
  switch (design) {
    case EnlaDesign::single: return "single";
    case EnlaDesign::bottleneck32: return "32x";
    case EnlaDesign::bottleneck16: return "16x";
    case EnlaDesign::bottleneck8: return "8x";
    case EnlaDesign::bottleneck4: return "4x";
  }
  return "?";
}

EnlaDesign enla_design_from_string(const std::string& name) {
  return parse_enum(name,
                    {EnlaDesign::single, EnlaDesign::bottleneck32, EnlaDesign::bottleneck16,
                     EnlaDesign::bottleneck8, EnlaDesign::bottleneck4},
                    "EnLa design");
}

std::size_t reduction(EnlaDesign design) {
  switch (design) {
    case EnlaDesign::single: return 1;
    case EnlaDesign::bottleneck32: return 32;
    case EnlaDesign::bottleneck16: return 16;
    case EnlaDesign::bottleneck8: return 8;
    case EnlaDesign::bottleneck4: return 4;
  }
  return 1;
}

std::size_t enla_hidden(EnlaDesign design, std::size_t text_dim) {
  return std::max<std::size_t>(1, text_dim / reduction(design));
}

std::string to_string(FusionPosition position) {
  return position == FusionPosition::input ? "input" : "deep";
}

FusionPosition fusion_from_string(const std::string& name) {
  return parse_enum(name, {FusionPosition::input, FusionPosition::deep}, "fusion position");
}

std::string to_string(TextSide side) { return side == TextSide::global ? "global" : "token"; }

TextSide text_side_from_string(const std::string& name) {
  return parse_enum(name, {TextSide::global, TextSide::token}, "text side");
}

bool MethodConfig::learns_context() const noexcept {
  return kind == MethodKind::coop || kind == MethodKind::visual_external;
}

bool MethodConfig::has_enla() const noexcept {
  switch (kind) {
    case MethodKind::enla_only:
    case MethodKind::enla_visual:
    case MethodKind::enprompt_minus_fusion:
    case MethodKind::enprompt:
    case MethodKind::enprompt_minus_ot: return true;
    default: return false;
  }
}

bool MethodConfig::has_visual_prompts() const noexcept {
  switch (kind) {
    case MethodKind::enla_visual:
    case MethodKind::enprompt_minus_fusion:
    case MethodKind::enprompt:
    case MethodKind::enprompt_minus_ot:
    case MethodKind::visual_external: return true;
    default: return false;
  }
}

bool MethodConfig::has_fusion() const noexcept {
  return kind == MethodKind::enprompt || kind == MethodKind::enprompt_minus_ot;
}

bool MethodConfig::ot_enabled() const noexcept {
  return kind == MethodKind::enprompt_minus_fusion || kind == MethodKind::enprompt ||
         kind == MethodKind::visual_external;
}

bool MethodConfig::is_probe() const noexcept { return kind == MethodKind::linear_probe; }

bool MethodConfig::visual_learnable() const noexcept { return has_visual_prompts(); }

void MethodConfig::validate(const encoders::EncoderConfig& enc) const {
  if (template_ids.size() + 1 > enc.max_prompt_len) {
    throw ConfigError("template of " + std::to_string(template_ids.size()) +
                      " tokens does not fit max_prompt_len " +
                      std::to_string(enc.max_prompt_len));
  }
  for (std::size_t id : template_ids) {
    if (id >= enc.vocab_size) {
      throw VocabularyError("template token " + std::to_string(id) + " outside vocabulary");
    }
  }
  if (has_visual_prompts()) {
    if (prompt_length < 1) throw ConfigError("prompt_length must be >= 1");
    if (depth < 1 || depth > enc.vis_blocks) {
      throw ConfigError("depth must lie in [1, " + std::to_string(enc.vis_blocks) + "]");
    }
  }
  if (has_fusion() && fusion == FusionPosition::deep && depth < 2) {
    throw ConfigError("deep fusion position needs depth >= 2");
  }
  if (learns_context() && template_ids.empty()) {
    throw ConfigError("learned context needs a non-empty template");
  }
  sinkhorn.validate();
}

PromptState init_state(const MethodConfig& config, const encoders::DualEncoder& enc,
                       std::span<const std::size_t> train_tokens, std::uint64_t seed) {
  config.validate(enc.config);
  const auto& ec = enc.config;
  PromptState s;
  s.config = config;
  Rng rng(derive_seed(seed, "init"));

  if (!config.template_ids.empty()) {
    Matrix ctx(config.template_ids.size(), ec.text_dim, 0.0, Role::embedding);
    for (std::size_t i = 0; i < config.template_ids.size(); ++i) {
      auto src = enc.token_table().row(config.template_ids[i]);
      std::copy(src.begin(), src.end(), ctx.row(i).begin());
    }
    s.params.add("context", std::move(ctx), !config.learns_context());
  }
  if (config.has_enla()) {
    if (config.enla_design == EnlaDesign::single) {
      Matrix w = Matrix::identity(ec.text_dim);
      for (double& v : w.values()) v += kEnlaInitNoise * rng.normal();
      s.params.add("enla", std::move(w));
    } else {
      const std::size_t h = enla_hidden(config.enla_design, ec.text_dim);
      s.params.add("enla_down",
                   rng.normal_matrix(ec.text_dim, h, 1.0 / std::sqrt(double(ec.text_dim))));
      s.params.add("enla_up", rng.normal_matrix(h, ec.text_dim, 1.0 / std::sqrt(double(h))));
    }
  }
  if (config.has_fusion()) {
    s.params.add("vl_map", Matrix(ec.text_dim, ec.vis_dim, 0.0, Role::weight));
  }
  if (config.has_visual_prompts()) {
    const bool frozen = config.kind == MethodKind::visual_external;
    for (std::size_t j = 0; j < config.depth; ++j) {
      s.params.add(prompt_name(j),
                   rng.normal_matrix(config.prompt_length, ec.vis_dim, kPromptInitStd,
                                     Role::embedding),
                   frozen);
    }
    if (frozen) s.params.add("visual_map", Matrix::identity(ec.vis_dim));
  }
  if (config.is_probe()) {
    s.probe_tokens.assign(train_tokens.begin(), train_tokens.end());
    s.params.add("probe", rng.normal_matrix(train_tokens.size(), ec.shared_dim,
                                            1.0 / std::sqrt(double(ec.shared_dim))));
  }
  return s;
}

std::size_t count_learnable_params(const PromptState& state) {
  return state.params.learnable_count();
}

Matrix enla_forward(const Matrix& p, EnlaDesign design, std::span<const Matrix> weights) {
  const std::size_t d = p.cols();
  if (design == EnlaDesign::single) {
    if (weights.size() != 1 || weights[0].rows() != d || weights[0].cols() != d) {
      throw ConfigError("single EnLa design needs one " + std::to_string(d) + "x" +
                        std::to_string(d) + " weight");
    }
    return matmul(p, weights[0]);
  }
  if (weights.size() != 2 || weights[0].rows() != d || weights[1].cols() != d ||
      weights[0].cols() != weights[1].rows()) {
    throw ConfigError("bottleneck EnLa design needs d x h and h x d weights");
  }
  Matrix h = matmul(p, weights[0]);
  for (double& v : h.values()) v = std::max(v, 0.0);
  return matmul(h, weights[1]);
}

Matrix strengthening_feature(const Matrix& e, const Matrix& vl_map) {
  if (e.rows() == 0) throw DimensionError("strengthening feature of an empty sequence");
  return matmul(mean_rows(e), vl_map);
}

Matrix fuse_visual_prompts(const Matrix& prompts, const Matrix& s) {
  if (s.rows() != 1 || s.cols() != prompts.cols()) {
    throw DimensionError("fusion of " + s.shape_string() + " into prompts " +
                         prompts.shape_string());
  }
  Matrix out = prompts;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += s(0, c);
  return out;
}

Features encode(Tape& t, const PromptState& state, const encoders::DualEncoder& enc,
                std::span<const Matrix> images, std::span<const std::size_t> class_tokens,
                const ImageCache* cache) {
  const MethodConfig& cfg = state.config;
  const auto& ec = enc.config;
  const auto& reg = state.params;
  const std::size_t k = class_tokens.size();
  const std::size_t tlen = cfg.template_ids.size();
  const std::size_t len = tlen + 1;
  if (k == 0) throw DimensionError("no classes to encode");

  // Class token rows followed by the context rows, gathered into K sequences
  // of [context, class token].
  Matrix class_rows(k, ec.text_dim, 0.0, Role::embedding);
  for (std::size_t i = 0; i < k; ++i) {
    if (class_tokens[i] >= ec.vocab_size) {
      throw VocabularyError("class token " + std::to_string(class_tokens[i]) +
                            " outside vocabulary");
    }
    auto src = enc.token_table().row(class_tokens[i]);
    std::copy(src.begin(), src.end(), class_rows.row(i).begin());
  }
  std::vector<Var> pool{t.constant(std::move(class_rows))};
  if (tlen > 0) pool.push_back(t.parameter(reg, "context"));
  std::vector<std::size_t> layout;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < tlen; ++j) layout.push_back(k + j);
    layout.push_back(i);
  }
  Var seqs = t.gather_rows(t.concat_rows(pool), std::move(layout));
  if (cfg.has_enla()) seqs = enla_on_tape(t, state, seqs);
  const encoders::TextFeatures text = encoders::text_encode(t, enc, seqs, len);

  Features f;
  f.text_global = text.global;
  if (cfg.text_side == TextSide::token) {
    f.text = text.tokens;
    f.text_rows = len;
  } else {
    f.text = text.global;
    f.text_rows = 1;
  }
  if (images.empty()) return f;

  if (cache != nullptr) {
    if (cfg.visual_learnable()) throw ConfigError("cached image features with learnable prompts");
    f.image_global = t.constant(cache->global);
    f.image_locals = t.constant(cache->locals);
    return f;
  }

  std::vector<Var> prompts;
  if (cfg.has_visual_prompts()) {
    for (std::size_t j = 0; j < cfg.depth; ++j) {
      Var p = t.parameter(reg, prompt_name(j));
      if (cfg.kind == MethodKind::visual_external) p = t.matmul(p, t.parameter(reg, "visual_map"));
      prompts.push_back(p);
    }
    // The strengthening feature comes from the template rows of e, which are
    // shared by every class, so one image pass serves all classes.
    if (cfg.has_fusion() && tlen > 0) {
      const Var ctx = t.slice_rows(seqs, 0, tlen);
      const Var s = t.matmul(t.mean_rows(ctx), t.parameter(reg, "vl_map"));
      const std::size_t at = cfg.fusion == FusionPosition::input ? 0 : 1;
      prompts[at] = t.add_row(prompts[at], s);
    }
  }
  const encoders::ImageFeatures img = encoders::image_encode(t, enc, images, prompts);
  f.image_global = img.global;
  f.image_locals = img.locals;
  return f;
}

PlanSet solve_plans(const Tape& t, const Features& f, const MethodConfig& config,
                    std::size_t num_images, std::size_t num_classes) {
  PlanSet out;
  const Matrix& locals = t.value(f.image_locals);
  const Matrix& text = t.value(f.text);
  const std::size_t m = locals.rows() / num_images;
  const std::size_t n = f.text_rows;
  out.plans.reserve(num_images * num_classes);
  for (std::size_t b = 0; b < num_images; ++b) {
    const Matrix v = slice_rows(locals, b * m, m);
    for (std::size_t k = 0; k < num_classes; ++k) {
      const Matrix cost = ot::build_cost_matrix(v, slice_rows(text, k * n, n));
      ot::TransportPlan plan =
          ot::sinkhorn(cost, ot::Marginals::uniform(n, m), config.sinkhorn);
      if (!plan.converged) ++out.unconverged;
      out.plans.push_back(std::move(plan.plan));
    }
  }
  return out;
}

Var logits(Tape& t, const Features& f, const PromptState& state,
           const encoders::DualEncoder& enc, const PlanSet* plans,
           std::span<const std::size_t> class_tokens) {
  const MethodConfig& cfg = state.config;
  const double inv_tau = 1.0 / enc.config.tau;
  const std::size_t k = class_tokens.size();
  if (cfg.is_probe()) {
    // Trained classes use their probe rows; others keep zero-shot features.
    const Var pool[] = {t.parameter(state.params, "probe"), f.text_global};
    std::vector<std::size_t> pick(k);
    for (std::size_t i = 0; i < k; ++i) {
      auto it = std::find(state.probe_tokens.begin(), state.probe_tokens.end(), class_tokens[i]);
      pick[i] = it != state.probe_tokens.end()
                    ? static_cast<std::size_t>(it - state.probe_tokens.begin())
                    : state.probe_tokens.size() + i;
    }
    const Var w = t.gather_rows(t.concat_rows(pool), std::move(pick));
    return t.scale(t.cosine_similarity(f.image_global, w), inv_tau);
  }
  if (!cfg.ot_enabled()) {
    return t.scale(t.cosine_similarity(f.image_global, f.text_global), inv_tau);
  }
  if (plans == nullptr) throw ConfigError("OT head needs transport plans");
  const Matrix& locals = t.value(f.image_locals);
  const std::size_t bsz = t.value(f.image_global).rows();
  const std::size_t m = locals.rows() / bsz;
  const std::size_t n = f.text_rows;
  if (plans->plans.size() != bsz * k) throw DimensionError("plan count does not match batch");

  // weights[(b, m), (k, n)] = T_bk[n, m]; summing weight * cost over each
  // image's rows and each class's columns gives <T_bk, C_bk>.
  Matrix weights(bsz * m, k * n, 0.0, Role::plan);
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t c = 0; c < k; ++c) {
      const Matrix& plan = plans->plans[b * k + c];
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) weights(b * m + j, c * n + i) = plan(i, j);
    }
  const Var cost = t.affine(t.cosine_similarity(f.image_locals, f.text), -1.0, 1.0);
  const Var weighted = t.hadamard(cost, t.constant(std::move(weights)));
  Var d = t.group_sum_rows(weighted, m);
  if (n > 1) d = t.transpose(t.group_sum_rows(t.transpose(d), n));
  return t.affine(d, -inv_tau, inv_tau);
}

namespace {

Var batch_loss(Tape& t, const Batch& batch, std::span<const std::size_t> class_tokens,
               const PromptState& state, const encoders::DualEncoder& enc,
               const ImageCache* cache, PlanSet* plans_out, const PlanSet* fixed) {
  const Features f = encode(t, state, enc, batch.images, class_tokens, cache);
  const PlanSet* plans = nullptr;
  PlanSet solved;
  if (state.config.ot_enabled() && !state.config.is_probe()) {
    if (fixed != nullptr) {
      plans = fixed;
    } else {
      solved = solve_plans(t, f, state.config, batch.images.size(), class_tokens.size());
      plans = &solved;
    }
  }
  const Var lg = logits(t, f, state, enc, plans, class_tokens);
  if (plans_out != nullptr) *plans_out = std::move(solved);
  return t.cross_entropy(lg, batch.labels);
}

}  // namespace

LossAndGrads loss_and_grads(const Batch& batch, std::span<const std::size_t> class_tokens,
                            const PromptState& state, const encoders::DualEncoder& enc,
                            std::size_t batch_index, const ImageCache* cache) {
  if (batch.images.empty() || batch.images.size() != batch.labels.size()) {
    throw DimensionError("batch needs matching, nonempty images and labels");
  }
  for (std::size_t y : batch.labels) {
    if (y >= class_tokens.size()) throw DimensionError("label outside the class list");
  }
  LossAndGrads out;
  Tape t;
  const Var loss = batch_loss(t, batch, class_tokens, state, enc, cache, &out.plans, nullptr);
  out.loss = t.value(loss)(0, 0);
  if (!std::isfinite(out.loss)) throw TrainingError(batch_index, "loss is not finite");
  t.backward(loss);
  out.grads = t.parameter_gradients(state.params);
  return out;
}

TapedLoss fixed_plan_loss(const Batch& batch, std::span<const std::size_t> class_tokens,
                          const PromptState& state, const encoders::DualEncoder& enc,
                          PlanSet plans) {
  std::vector<std::size_t> tokens(class_tokens.begin(), class_tokens.end());
  return [batch, tokens = std::move(tokens), config = state.config,
          probe_tokens = state.probe_tokens, &enc,
          plans = std::move(plans)](Tape& t, const ParameterRegistry& params) {
    PromptState view{config, params, probe_tokens};
    return batch_loss(t, batch, tokens, view, enc, nullptr, nullptr, &plans);
  };
}

std::vector<std::vector<double>> predict_batch(std::span<const Matrix> images,
                                              std::span<const std::size_t> class_tokens,
                                              const PromptState& state,
                                              const encoders::DualEncoder& enc) {
  // Constant copy of the parameters: prediction records no gradients.
  PromptState frozen = state;
  frozen.params.freeze_all();
  Tape t;
  const Features f = encode(t, frozen, enc, images, class_tokens);
  const Matrix& global = t.value(f.image_global);
  const Matrix& locals = t.value(f.image_locals);
  const Matrix& text = t.value(f.text);
  Matrix head = t.value(f.text_global);
  if (state.config.is_probe()) {
    // Trained classes read their probe rows, as in logits().
    const Matrix& probe = state.params.at("probe").value;
    for (std::size_t i = 0; i < class_tokens.size(); ++i) {
      auto it = std::find(state.probe_tokens.begin(), state.probe_tokens.end(), class_tokens[i]);
      if (it == state.probe_tokens.end()) continue;
      auto src = probe.row(static_cast<std::size_t>(it - state.probe_tokens.begin()));
      std::copy(src.begin(), src.end(), head.row(i).begin());
    }
  }
  const std::size_t m = locals.rows() / images.size();
  std::vector<std::vector<double>> out;
  out.reserve(images.size());
  for (std::size_t b = 0; b < images.size(); ++b) {
    out.push_back(head_probabilities(state, slice_rows(global, b, 1),
                                     slice_rows(locals, b * m, m), text, head, f.text_rows,
                                     enc.config.tau));
  }
  return out;
}

std::vector<double> forward(const Matrix& image, std::span<const std::size_t> class_tokens,
                            const PromptState& state, const encoders::DualEncoder& enc) {
  if (class_tokens.size() < 2) throw ParameterError("prediction needs at least 2 classes");
  const Matrix images[] = {image};
  return predict_batch(images, class_tokens, state, enc).front();
}

}  // namespace enprompt::method
