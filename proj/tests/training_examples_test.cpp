// Training-run examples on the pretrained encoder produced by the
// acceptance fixture.

#include "enprompt/encoder.hpp"
#include "enprompt/errors.hpp"
#include "enprompt/experiments.hpp"
#include "gtest/gtest.h"

namespace enprompt::harness {
namespace {

using method::MethodKind;

const encoders::DualEncoder& encoder() {
  static const encoders::DualEncoder enc = encoders::load_encoder(ENPROMPT_PRETRAINED_ENCODER);
  return enc;
}

const world::Universe& universe() {
  static const world::Universe u = world::make_universe(7);
  return u;
}

const ExperimentReport& find(const std::vector<ExperimentReport>& reports, const std::string& v) {
  for (const auto& r : reports) {
    if (r.variant == v) return r;
  }
  throw ProtocolError("missing variant " + v);
}

TEST(Coop, OverfitsTwoClassTask) {
  world::WorldConfig wc;
  wc.num_classes = 2;
  const auto w = world::generate_world(universe(), wc);
  const auto split = world::all_class_split(w, 16, 100);
  const std::vector<std::size_t> tokens{w.class_token(0), w.class_token(1)};
  method::TrainHyper h;
  double total = 0.0;
  for (std::uint64_t seed : default_seeds()) {
    h.seed = seed;
    const auto r = method::coop_baseline_train(encoder(), world::train_samples(w, split, seed),
                                               tokens, h);
    total += method::evaluate(r.state, encoder(), world::test_samples(w, split.base, 100), tokens);
  }
  EXPECT_GT(total / 5.0, 95.0);
}

TEST(Coop, NovelAccuracyNotAboveFrozenText) {
  const auto reports =
      run_base_to_novel(encoder(), {world::generate_world(universe(), {})},
                        variants_of({MethodKind::frozen_only, MethodKind::coop}), default_seeds());
  EXPECT_LE(find(reports, "coop").metric("novel_acc").mean,
            find(reports, "frozen_only").metric("novel_acc").mean);
}

TEST(Enprompt, BaseAccuracyFivePointsAboveLinearProbe) {
  const auto reports =
      run_base_to_novel(encoder(), {world::generate_world(universe(), {})},
                        variants_of({MethodKind::linear_probe, MethodKind::enprompt}),
                        default_seeds());
  EXPECT_GE(find(reports, "enprompt").metric("base_acc").mean,
            find(reports, "linear_probe").metric("base_acc").mean + 5.0);
}

TEST(EnlaDesigns, AllFiveTrainAndReport) {
  RunOptions o;
  o.epochs = 5;
  const auto reports =
      run_ablation_matrix(encoder(), world::generate_world(universe(), {}), {Axis::enla_design},
                          {0}, o);
  ASSERT_EQ(reports.size(), 5u);
  std::map<std::string, std::size_t> params;
  for (const auto& r : reports) params[r.axes.at("enla_design")] = r.param_count;
  EXPECT_LT(params.at("32x"), params.at("16x"));
  EXPECT_LT(params.at("16x"), params.at("8x"));
  EXPECT_LT(params.at("8x"), params.at("4x"));
  EXPECT_LT(params.at("4x"), params.at("single"));
  for (const auto& r : reports) EXPECT_GT(r.metric("hm").mean, 0.0) << r.variant;
}

}  // namespace
}  // namespace enprompt::harness
