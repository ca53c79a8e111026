#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "enprompt/errors.hpp"
#include "enprompt/method.hpp"
#include "enprompt/optimizer.hpp"
#include "gtest/gtest.h"
#include "toy.hpp"

namespace enprompt::method {
namespace {

using toy::toy;

constexpr double kFiniteDifferenceStep = 1e-4;
constexpr double kGradientTolerance = 1e-4;

// Full-size encoder with random weights; enough for shape and identity checks.
const encoders::DualEncoder& full_encoder() {
  static const encoders::DualEncoder enc = [] {
    const auto u = world::make_universe(7);
    auto e = encoders::init_encoder(encoders::EncoderConfig::for_world(u.dims), u, 1);
    e.weights.freeze_all();
    e.frozen = true;
    return e;
  }();
  return enc;
}

const world::SyntheticWorld& full_world() {
  static const world::SyntheticWorld w = world::generate_world(world::make_universe(7), {});
  return w;
}

std::vector<std::size_t> full_tokens() {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < full_world().num_classes(); ++c) out.push_back(full_world().class_token(c));
  return out;
}

// Sets EnLa to the exact identity, zeroes vl_map and every prompt.
void make_neutral(PromptState& s) {
  for (auto& p : s.params.entries()) {
    if (p.name == "enla") p.value = Matrix::identity(p.value.rows());
    if (p.name == "vl_map" || p.name.rfind("prompt/", 0) == 0) {
      for (double& v : p.value.values()) v = 0.0;
    }
  }
}

MethodConfig config_of(MethodKind kind) {
  MethodConfig c;
  c.kind = kind;
  return c;
}

std::vector<world::Sample> toy_samples(std::size_t per_class, std::uint64_t seed) {
  world::TaskSplit split = world::all_class_split(toy().world, per_class, 1);
  return world::train_samples(toy().world, split, seed);
}

TEST(Names, RoundTrip) {
  for (MethodKind k : all_methods()) EXPECT_EQ(method_from_string(to_string(k)), k);
  for (auto d : {EnlaDesign::single, EnlaDesign::bottleneck32, EnlaDesign::bottleneck16,
                 EnlaDesign::bottleneck8, EnlaDesign::bottleneck4}) {
    EXPECT_EQ(enla_design_from_string(to_string(d)), d);
  }
  EXPECT_EQ(fusion_from_string("deep"), FusionPosition::deep);
  EXPECT_EQ(text_side_from_string("token"), TextSide::token);
  EXPECT_THROW(method_from_string("maple"), ConfigError);
  EXPECT_THROW(enla_design_from_string("2x"), ConfigError);
}

TEST(Config, ValidationErrors) {
  const auto& ec = full_encoder().config;
  MethodConfig c;
  c.depth = 0;
  EXPECT_THROW(c.validate(ec), ConfigError);
  c.depth = 13;
  EXPECT_THROW(c.validate(ec), ConfigError);
  c = {};
  c.fusion = FusionPosition::deep;
  c.depth = 1;
  EXPECT_THROW(c.validate(ec), ConfigError);
  c = {};
  c.template_ids = {0, 1, 2, 3, 4, 5, 6, 7};
  EXPECT_THROW(c.validate(ec), ConfigError);
  c = {};
  c.template_ids = {0, 999};
  EXPECT_THROW(c.validate(ec), VocabularyError);
  c = {};
  c.kind = MethodKind::coop;
  c.template_ids = {};
  EXPECT_THROW(c.validate(ec), ConfigError);
}

TEST(ParamCount, FrozenOnlyHasNone) {
  const auto s = init_state(config_of(MethodKind::frozen_only), full_encoder(), full_tokens(), 0);
  EXPECT_EQ(count_learnable_params(s), 0u);
}

TEST(ParamCount, CoopIsContextTokensTimesWidth) {
  const auto s = init_state(config_of(MethodKind::coop), full_encoder(), full_tokens(), 0);
  EXPECT_EQ(count_learnable_params(s), 128u);
}

TEST(ParamCount, EnpromptMatchesShapeWalk) {
  const auto& ec = full_encoder().config;
  const MethodConfig c;
  const std::size_t walk = ec.text_dim * ec.text_dim + ec.text_dim * ec.vis_dim +
                           c.depth * c.prompt_length * ec.vis_dim;
  const auto s = init_state(c, full_encoder(), full_tokens(), 0);
  EXPECT_EQ(count_learnable_params(s), walk);
  EXPECT_EQ(walk, 4288u);
}

TEST(ParamCount, EnlaDesignsAreStrictlyOrdered) {
  for (std::size_t d : {32u, 64u}) {
    std::vector<std::size_t> counts;
    for (auto design : {EnlaDesign::bottleneck32, EnlaDesign::bottleneck16,
                        EnlaDesign::bottleneck8, EnlaDesign::bottleneck4, EnlaDesign::single}) {
      const std::size_t h = enla_hidden(design, d);
      counts.push_back(design == EnlaDesign::single ? d * d : 2 * d * h);
    }
    for (std::size_t i = 1; i < counts.size(); ++i) EXPECT_LT(counts[i - 1], counts[i]) << d;
  }
  for (auto design : {EnlaDesign::bottleneck32, EnlaDesign::bottleneck4}) {
    MethodConfig c = config_of(MethodKind::enla_only);
    c.enla_design = design;
    const auto s = init_state(c, full_encoder(), full_tokens(), 0);
    EXPECT_EQ(count_learnable_params(s), 2 * 32 * enla_hidden(design, 32));
  }
}

TEST(EnlaForward, IdentityReturnsInput) {
  Rng rng(1);
  const Matrix p = rng.normal_matrix(5, 8, 1.0);
  const Matrix id = Matrix::identity(8);
  EXPECT_EQ(enla_forward(p, EnlaDesign::single, std::span(&id, 1)), p);
}

TEST(EnlaForward, BottleneckMatchesLoopOracle) {
  Rng rng(2);
  const Matrix p = rng.normal_matrix(3, 8, 1.0);
  const Matrix w[] = {rng.normal_matrix(8, 2, 1.0), rng.normal_matrix(2, 8, 1.0)};
  const Matrix out = enla_forward(p, EnlaDesign::bottleneck4, w);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 8; ++c) {
      double acc = 0.0;
      for (std::size_t h = 0; h < 2; ++h) {
        double z = 0.0;
        for (std::size_t k = 0; k < 8; ++k) z += p(r, k) * w[0](k, h);
        acc += std::max(z, 0.0) * w[1](h, c);
      }
      EXPECT_NEAR(out(r, c), acc, 1e-12);
    }
  EXPECT_THROW(enla_forward(p, EnlaDesign::single, w), ConfigError);
}

TEST(EnlaForward, ZeroSecondMatrixAnnihilates) {
  Rng rng(5);
  const Matrix p = rng.normal_matrix(3, 8, 1.0);
  const Matrix w[] = {rng.normal_matrix(8, 2, 1.0), Matrix(2, 8)};
  EXPECT_EQ(enla_forward(p, EnlaDesign::bottleneck4, w), Matrix(3, 8));
}

TEST(Strengthening, SingleRowThroughIdentityLikeMap) {
  const Matrix e{{{1.0, -2.0, 3.0}}};
  Matrix widen(3, 5), narrow(3, 2);
  for (std::size_t i = 0; i < 3; ++i) widen(i, i) = 1.0;
  for (std::size_t i = 0; i < 2; ++i) narrow(i, i) = 1.0;
  EXPECT_EQ(strengthening_feature(e, widen), (Matrix({{1.0, -2.0, 3.0, 0.0, 0.0}})));
  EXPECT_EQ(strengthening_feature(e, narrow), (Matrix({{1.0, -2.0}})));
}

TEST(Strengthening, MeanThenMap) {
  Rng rng(3);
  const Matrix e = rng.normal_matrix(4, 6, 1.0);
  const Matrix map = rng.normal_matrix(6, 5, 1.0);
  const Matrix s = strengthening_feature(e, map);
  ASSERT_EQ(s.rows(), 1u);
  for (std::size_t c = 0; c < 5; ++c) {
    double acc = 0.0;
    for (std::size_t k = 0; k < 6; ++k) {
      double mean = 0.0;
      for (std::size_t r = 0; r < 4; ++r) mean += e(r, k);
      acc += mean / 4.0 * map(k, c);
    }
    EXPECT_NEAR(s(0, c), acc, 1e-12);
  }
  EXPECT_EQ(strengthening_feature(e, Matrix(6, 5)), Matrix(1, 5));
}

TEST(Fusion, BroadcastAddsToEveryRow) {
  Rng rng(4);
  const Matrix p = rng.normal_matrix(3, 5, 1.0);
  const Matrix s = rng.normal_matrix(1, 5, 1.0);
  EXPECT_EQ(fuse_visual_prompts(p, Matrix(1, 5)), p);
  const Matrix only_s = fuse_visual_prompts(Matrix(3, 5), s);
  for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(slice_rows(only_s, r, 1), s);
  const Matrix both = fuse_visual_prompts(p, s);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(both(r, c), p(r, c) + s(0, c));
  EXPECT_THROW(fuse_visual_prompts(p, Matrix(1, 4)), DimensionError);
}

TEST(Forward, FrozenOnlyIsZeroShot) {
  const auto tokens = full_tokens();
  const auto s = init_state(config_of(MethodKind::frozen_only), full_encoder(), tokens, 0);
  std::vector<Matrix> prompts;
  for (std::size_t t : tokens) {
    prompts.push_back(encoders::embed_prompt(s.config.template_ids, t, full_encoder().token_table()));
  }
  for (std::size_t i = 0; i < 10; ++i) {
    const Matrix img = world::render_image(full_world(), i % 8, i, 0);
    EXPECT_EQ(forward(img, tokens, s, full_encoder()),
              encoders::clip_zero_shot_predict(img, prompts, full_encoder()));
  }
}

TEST(Forward, NeutralFullMethodWithoutOtIsZeroShot) {
  const auto tokens = full_tokens();
  auto s = init_state(config_of(MethodKind::enprompt_minus_ot), full_encoder(), tokens, 9);
  make_neutral(s);
  std::vector<Matrix> prompts;
  for (std::size_t t : tokens) {
    prompts.push_back(encoders::embed_prompt(s.config.template_ids, t, full_encoder().token_table()));
  }
  for (std::size_t i = 0; i < 20; ++i) {
    const Matrix img = world::render_image(full_world(), i % 8, i, 1);
    EXPECT_EQ(forward(img, tokens, s, full_encoder()),
              encoders::clip_zero_shot_predict(img, prompts, full_encoder()));
  }
}

TEST(Forward, DuplicateClassesAreUniform) {
  const std::size_t t = full_tokens()[2];
  const std::vector<std::size_t> dup{t, t, t};
  for (MethodKind k : {MethodKind::coop, MethodKind::enprompt}) {
    const auto s = init_state(config_of(k), full_encoder(), dup, 0);
    const auto p = forward(world::render_image(full_world(), 0, 0, 0), dup, s, full_encoder());
    for (double v : p) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15) << to_string(k);
  }
}

TEST(Forward, TextSideIrrelevantWithEmptyTemplate) {
  const auto tokens = full_tokens();
  MethodConfig global = config_of(MethodKind::enprompt);
  global.template_ids = {};
  MethodConfig token = global;
  token.text_side = TextSide::token;
  const auto a = init_state(global, full_encoder(), tokens, 4);
  const auto b = init_state(token, full_encoder(), tokens, 4);
  const Matrix img = world::render_image(full_world(), 1, 1, 1);
  EXPECT_EQ(forward(img, tokens, a, full_encoder()), forward(img, tokens, b, full_encoder()));
}

TEST(Forward, OtArgmaxIsNearestClass) {
  const auto tokens = full_tokens();
  for (TextSide side : {TextSide::global, TextSide::token}) {
    MethodConfig c = config_of(MethodKind::enprompt);
    c.text_side = side;
    const auto s = init_state(c, full_encoder(), tokens, 2);
    for (std::size_t i = 0; i < 8; ++i) {
      const Matrix img = world::render_image(full_world(), i, i, 2);
      Tape t;
      const Matrix imgs[] = {img};
      const Features f = encode(t, s, full_encoder(), imgs, tokens);
      const PlanSet plans = solve_plans(t, f, c, 1, tokens.size());
      const Matrix d = t.value(logits(t, f, s, full_encoder(), &plans, tokens));
      const auto p = forward(img, tokens, s, full_encoder());
      // Logits are (1 - d) / tau, so the largest logit is the smallest distance.
      EXPECT_EQ(argmax(p), argmax(d.row(0)));
    }
  }
}

TEST(Forward, BatchMatchesSingleBitExactly) {
  const auto tokens = full_tokens();
  for (MethodKind k : {MethodKind::linear_probe, MethodKind::enprompt, MethodKind::visual_external}) {
    const auto s = init_state(config_of(k), full_encoder(), tokens, 3);
    std::vector<Matrix> imgs;
    for (std::size_t i = 0; i < 6; ++i) imgs.push_back(world::render_image(full_world(), i, i, 3));
    const auto batch = predict_batch(imgs, tokens, s, full_encoder());
    for (std::size_t i = 0; i < imgs.size(); ++i) {
      EXPECT_EQ(batch[i], forward(imgs[i], tokens, s, full_encoder())) << to_string(k);
    }
  }
}

TEST(Forward, NeedsTwoClasses) {
  const std::vector<std::size_t> one{full_tokens()[0]};
  const auto s = init_state(config_of(MethodKind::coop), full_encoder(), one, 0);
  EXPECT_THROW(forward(world::render_image(full_world(), 0, 0, 0), one, s, full_encoder()),
               ParameterError);
}

TEST(Loss, FrozenContextGetsNoGradient) {
  const auto s = toy::perturbed_state(MethodKind::enprompt, 1);
  const auto r = loss_and_grads(toy::toy_batch(1, 3), toy().tokens, s, toy().enc);
  for (double g : r.grads.at("context").values()) EXPECT_EQ(g, 0.0);
  const auto enla = r.grads.at("enla").values();
  EXPECT_TRUE(std::any_of(enla.begin(), enla.end(), [](double g) { return g != 0.0; }));
  EXPECT_EQ(r.plans.plans.size(), 3u * toy().tokens.size());
  EXPECT_EQ(r.plans.unconverged, 0u);
}

TEST(Loss, NonFiniteLossReportsBatchIndex) {
  auto s = toy::perturbed_state(MethodKind::enla_only, 1);
  s.params.at("enla").value(0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    loss_and_grads(toy::toy_batch(1, 2), toy().tokens, s, toy().enc, 7);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.step(), 7u);
  }
}

TEST(Loss, RejectsBadLabels) {
  const auto s = toy::perturbed_state(MethodKind::coop, 1);
  Batch b = toy::toy_batch(1, 2);
  b.labels[0] = 9;
  EXPECT_THROW(loss_and_grads(b, toy().tokens, s, toy().enc), DimensionError);
}

TEST(Loss, OverfitsOneSeparableBatch) {
  const std::vector<std::size_t> two{toy().tokens[0], toy().tokens[1]};
  Batch b;
  for (std::size_t i = 0; i < 4; ++i) {
    b.images.push_back(world::render_image(toy().world, i % 2, i, 0));
    b.labels.push_back(i % 2);
  }
  PromptState s = init_state(toy::toy_method(MethodKind::enprompt), toy().enc, two, 0);
  SgdMomentum opt(0.1, 0.9);
  double loss = 0.0;
  for (int step = 0; step < 3000; ++step) {
    const auto r = loss_and_grads(b, two, s, toy().enc);
    loss = r.loss;
    opt.step(s.params, r.grads);
  }
  EXPECT_LT(loss, 0.01);
}

class GradientCheck : public ::testing::TestWithParam<MethodKind> {};

TEST_P(GradientCheck, FixedPlanLossMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto s = toy::perturbed_state(GetParam(), seed);
    const Batch b = toy::toy_batch(seed, 3);
    const auto r = loss_and_grads(b, toy().tokens, s, toy().enc);
    const auto fn = fixed_plan_loss(b, toy().tokens, s, toy().enc, r.plans);
    const auto check = gradient_check(fn, s.params, kFiniteDifferenceStep);
    EXPECT_GT(check.entries_checked, 0u);
    EXPECT_LT(check.max_relative_error, kGradientTolerance)
        << check.worst_parameter << "[" << check.worst_index << "]";
    for (const auto& [name, g] : r.grads) EXPECT_EQ(g, check.analytic.at(name)) << name;
  }
}

INSTANTIATE_TEST_SUITE_P(
    Variants, GradientCheck,
    ::testing::Values(MethodKind::linear_probe, MethodKind::coop, MethodKind::enla_only,
                      MethodKind::enla_visual, MethodKind::enprompt_minus_fusion,
                      MethodKind::enprompt, MethodKind::enprompt_minus_ot,
                      MethodKind::visual_external),
    [](const auto& info) { return to_string(info.param); });

TEST(GradientCheckToken, TokenTextSideAndBottleneck) {
  MethodConfig c = toy::toy_method(MethodKind::enprompt);
  c.text_side = TextSide::token;
  c.enla_design = EnlaDesign::bottleneck4;
  c.fusion = FusionPosition::deep;
  PromptState s = init_state(c, toy().enc, toy().tokens, 5);
  Rng rng(6);
  for (auto& p : s.params.entries()) {
    if (p.frozen) continue;
    for (double& v : p.value.values()) v += 0.1 * rng.normal();
  }
  const Batch b = toy::toy_batch(5, 2);
  const auto r = loss_and_grads(b, toy().tokens, s, toy().enc);
  const auto fn = fixed_plan_loss(b, toy().tokens, s, toy().enc, r.plans);
  EXPECT_LT(gradient_check(fn, s.params, kFiniteDifferenceStep).max_relative_error,
            kGradientTolerance);
}

TEST(Train, ZeroEpochsReturnsInitialization) {
  TrainHyper h;
  h.epochs = 0;
  h.seed = 3;
  const auto samples = toy_samples(2, 0);
  for (MethodKind k : {MethodKind::coop, MethodKind::enprompt}) {
    const auto r = train(toy::toy_method(k), toy().enc, samples, toy().tokens, h);
    const auto init = init_state(toy::toy_method(k), toy().enc, toy().tokens, 3);
    EXPECT_EQ(r.state.params, init.params);
    EXPECT_TRUE(r.epoch_losses.empty());
  }
}

TEST(Train, CoopStartsFromThePhotoTemplate) {
  TrainHyper h;
  h.epochs = 0;
  const auto r = coop_baseline_train(toy().enc, toy_samples(1, 0), toy().tokens, h);
  const Matrix expected = encoders::embed_prompt(world::template_tokens(world::Template::photo),
                                                 toy().tokens[0], toy().enc.token_table());
  EXPECT_EQ(r.state.params.at("context").value, slice_rows(expected, 0, 4));
  EXPECT_FALSE(r.state.params.at("context").frozen);
}

TEST(Train, SameSeedSameHistoryAndParameters) {
  TrainHyper h;
  h.epochs = 3;
  h.seed = 11;
  const auto samples = toy_samples(2, 1);
  const auto a = train(toy::toy_method(MethodKind::enprompt), toy().enc, samples, toy().tokens, h);
  const auto b = train(toy::toy_method(MethodKind::enprompt), toy().enc, samples, toy().tokens, h);
  EXPECT_EQ(a.epoch_losses, b.epoch_losses);
  EXPECT_EQ(a.state.params, b.state.params);
  h.seed = 12;
  const auto c = train(toy::toy_method(MethodKind::enprompt), toy().enc, samples, toy().tokens, h);
  EXPECT_NE(a.state.params, c.state.params);
  for (double l : a.epoch_losses) EXPECT_TRUE(std::isfinite(l));
}

TEST(Train, FrozenEmbeddingsAndEncoderUntouched) {
  TrainHyper h;
  h.epochs = 2;
  const auto samples = toy_samples(2, 2);
  const encoders::DualEncoder before = toy().enc;
  for (MethodKind k : all_methods()) {
    const auto r = train(toy::toy_method(k), toy().enc, samples, toy().tokens, h);
    const auto init = init_state(toy::toy_method(k), toy().enc, toy().tokens, h.seed);
    if (!r.state.config.learns_context()) {
      EXPECT_EQ(r.state.params.at("context").value, init.params.at("context").value)
          << to_string(k);
    }
    for (const auto& p : r.state.params.entries()) {
      if (!p.frozen) continue;
      EXPECT_EQ(p.value, init.params.at(p.name).value) << to_string(k) << p.name;
    }
  }
  EXPECT_EQ(toy().enc.weights, before.weights);
}

TEST(Train, CoopMovesItsContext) {
  TrainHyper h;
  h.epochs = 2;
  const auto r = coop_baseline_train(toy().enc, toy_samples(2, 2), toy().tokens, h);
  const auto init = init_state(toy::toy_method(MethodKind::coop), toy().enc, toy().tokens, 0);
  EXPECT_NE(r.state.params.at("context").value, init.params.at("context").value);
}

TEST(Train, RejectsBadHyperparameters) {
  TrainHyper h;
  h.batch_size = 0;
  EXPECT_THROW(train({}, toy().enc, toy_samples(1, 0), toy().tokens, h), ParameterError);
  h = {};
  h.learning_rate = -1.0;
  EXPECT_THROW(train({}, toy().enc, toy_samples(1, 0), toy().tokens, h), ParameterError);
}

TEST(Evaluate, FrozenOnlyMatchesDirectZeroShot) {
  const auto tokens = full_tokens();
  std::vector<std::size_t> classes(8);
  for (std::size_t c = 0; c < 8; ++c) classes[c] = c;
  const auto test = world::test_samples(full_world(), classes, 5);
  const auto s = init_state(config_of(MethodKind::frozen_only), full_encoder(), tokens, 0);
  const Matrix text =
      encoders::class_text_globals(full_encoder(), full_world(), classes, world::Template::photo);
  std::size_t correct = 0;
  for (const auto& x : test) {
    const auto p = encoders::cosine_prediction(
        encoders::image_encode(x.image, {}, full_encoder()).global, text, full_encoder().config.tau);
    correct += argmax(p) == x.label;
  }
  EXPECT_DOUBLE_EQ(evaluate(s, full_encoder(), test, tokens),
                   100.0 * static_cast<double>(correct) / static_cast<double>(test.size()));
}

TEST(StateIo, RoundTripIsBitExact) {
  TrainHyper h;
  h.epochs = 1;
  MethodConfig c = toy::toy_method(MethodKind::linear_probe);
  const auto r = train(c, toy().enc, toy_samples(1, 0), toy().tokens, h);
  for (const PromptState& s : {r.state, toy::perturbed_state(MethodKind::enprompt, 4)}) {
    std::stringstream buf;
    save_state(buf, s);
    const PromptState back = load_state(buf);
    EXPECT_EQ(back.params, s.params);
    EXPECT_EQ(back.probe_tokens, s.probe_tokens);
    EXPECT_EQ(back.config.kind, s.config.kind);
    EXPECT_EQ(back.config.depth, s.config.depth);
    EXPECT_EQ(back.config.template_ids, s.config.template_ids);
  }
  std::stringstream junk("{\"format\": \"enprompt-encoder\"}");
  EXPECT_THROW(load_state(junk), ConfigError);
}

}  // namespace
}  // namespace enprompt::method
