// Copyright 2026 The CBP Grounding Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "support.hpp"

namespace cbp {
namespace {

using testing::random_matrix;
using testing::toy_samples;

ModelConfig tiny_config(bool use_context) {
  ModelConfig c;
  c.query_dim = 3;
  c.video_dim = 4;
  c.hidden_size = 4;
  c.attention_size = 3;
  c.context_size = 3;
  c.use_context = use_context;
  c.anchors = AnchorSet({1, 3});
  return c;
}

TrainConfig toy_train_config() {
  TrainConfig c;
  c.hidden_size = 6;
  c.anchors = {2, 4};
  c.batch_size = 2;
  c.learning_rate = 1e-2;
  c.epochs = 1;
  c.seed = 5;
  return c;
}

std::vector<Sample> toy_set(std::size_t n, std::uint64_t seed = 21) {
  Rng rng(seed);
  return toy_samples(n, 10, 4, 3, rng);
}

class ModelGradient : public ::testing::TestWithParam<bool> {};

TEST_P(ModelGradient, MatchesFiniteDifferences) {
  const CbpModel model = CbpModel::create(tiny_config(GetParam()), 8, false);
  Rng rng(9);
  const Matrix video = random_matrix(5, 4, rng);
  const Matrix query = random_matrix(3, 3, rng);
  const IndexSegment gt{1, 3};
  const AnchorLabels y = build_anchor_labels(gt, model.config().anchors, 5, 0.5);
  const Matrix z = build_boundary_labels(gt, 5, 0);
  const ClassWeights w = ClassWeights::uniform(2);
  ParamStore params = model.params();
  const ad::LossFn f = [&](ad::Tape& tape, const ParamStore& p) {
    const ForwardPass fp = model.forward(tape, p, video, query);
    return ad::add(anchor_loss(fp.heads.anchor, y, w),
                   ad::scale(boundary_loss(fp.heads.boundary, z, w), 0.7));
  };
  const ad::GradCheckReport r = ad::finite_diff_check(params, f, 1e-5, 1e-4);
  EXPECT_TRUE(r.passed) << r.worst_param << "[" << r.worst_index
                        << "] analytic " << r.worst_analytic << " numeric "
                        << r.worst_numeric;
  EXPECT_EQ(r.entries_checked, params.num_scalars());
}

INSTANTIATE_TEST_SUITE_P(Context, ModelGradient, ::testing::Bool());

TEST(Model, ForwardShapesAndDimensionChecks) {
  const CbpModel model = CbpModel::create(tiny_config(true), 1);
  Rng rng(2);
  ad::Tape tape;
  const ForwardPass fp = model.forward(tape, random_matrix(7, 4, rng), random_matrix(2, 3, rng));
  EXPECT_EQ(fp.heads.anchor.value().rows(), 7u);
  EXPECT_EQ(fp.heads.anchor.value().cols(), 2u);
  EXPECT_EQ(fp.heads.boundary.value().cols(), 1u);
  EXPECT_EQ(fp.integrated.value().cols(), 8u);
  EXPECT_TRUE(fp.context.has_value());
  EXPECT_THROW(model.score(random_matrix(7, 5, rng), random_matrix(2, 3, rng)),
               DimensionError);
  EXPECT_THROW(model.score(random_matrix(7, 4, rng), random_matrix(2, 2, rng)),
               DimensionError);
}

TEST(Model, SameSeedSameParameters) {
  EXPECT_EQ(CbpModel::create(tiny_config(true), 4).params(),
            CbpModel::create(tiny_config(true), 4).params());
  EXPECT_NE(CbpModel::create(tiny_config(true), 4).params(),
            CbpModel::create(tiny_config(true), 5).params());
}

TEST(Optimizer, FirstAdamStepIsSignedLearningRate) {
  ParamStore p;
  p.add("w", Matrix(1, 3, {1.0, 2.0, 3.0}));
  AdamState st;
  adam_update(p, {Matrix(1, 3, {0.5, -4.0, 0.0})}, st, {0.1});
  EXPECT_NEAR(p.value(0)[0], 0.9, 1e-7);
  EXPECT_NEAR(p.value(0)[1], 2.1, 1e-7);
  EXPECT_EQ(p.value(0)[2], 3.0);
  EXPECT_EQ(st.step, 1u);
}

TEST(Optimizer, ClipRescalesOnlyAboveThreshold) {
  GradTable g{Matrix(1, 2, {3.0, 4.0}), Matrix(1, 1, {0.0})};
  GradTable same = g;
  EXPECT_EQ(clip_global_norm(same, 1e12), 5.0);
  EXPECT_EQ(same, g);
  EXPECT_EQ(clip_global_norm(g, 1.0), 5.0);
  EXPECT_NEAR(global_norm(g), 1.0, 1e-15);
  EXPECT_NEAR(g[0][0], 0.6, 1e-15);
}

TEST(TrainConfigJson, RoundTripAndValidation) {
  TrainConfig c = toy_train_config();
  c.use_context = false;
  c.lambda = 0.25;
  const TrainConfig back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(train_config_from_json({{"hiden_size", 3}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"lambda", "x"}}), ConfigError);
  TrainConfig unseeded = c;
  unseeded.seed.reset();
  EXPECT_THROW(unseeded.validate(), ConfigError);
  TrainConfig bad = c;
  bad.lambda = -1;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_THROW(Trainer(unseeded, toy_set(2)), ConfigError);
}

TEST(Trainer, OneEpochReducesTrainingLoss) {
  TrainConfig c = toy_train_config();
  c.batch_size = 1;
  Trainer t(c, toy_set(4));
  const double before = t.mean_loss().total;
  const auto log = t.train(1);
  ASSERT_EQ(log.size(), 1u);
  EXPECT_EQ(log[0].epoch, 1u);
  EXPECT_LT(t.mean_loss().total, before);
  EXPECT_GT(log[0].max_grad_norm, 0.0);
}

TEST(Trainer, SameSeedIsBitIdentical) {
  Trainer a(toy_train_config(), toy_set(5));
  Trainer b(toy_train_config(), toy_set(5));
  const auto la = a.train(2);
  const auto lb = b.train(2);
  EXPECT_EQ(la[0].loss, lb[0].loss);
  EXPECT_EQ(la[1].loss, lb[1].loss);
  EXPECT_EQ(serialize_checkpoint(a.checkpoint()), serialize_checkpoint(b.checkpoint()));
}

TEST(Trainer, WorkersAccumulateLikeSequential) {
  TrainConfig c = toy_train_config();
  Trainer seq(c, toy_set(6));
  c.workers = 3;
  Trainer par(c, toy_set(6));
  const std::vector<std::size_t> batch{4, 0, 2, 5, 1};
  std::vector<SampleLoss> ps, pp;
  const GradTable gs = seq.batch_gradient(batch, ps);
  const GradTable gp = par.batch_gradient(batch, pp);
  EXPECT_EQ(gs, gp);
  for (std::size_t k = 0; k < batch.size(); ++k) EXPECT_EQ(ps[k].total, pp[k].total);
}

TEST(Trainer, HugeClipNormMatchesUnclippedUpdate) {
  TrainConfig c = toy_train_config();
  c.clip_norm = 1e300;
  const auto samples = toy_set(4);
  Trainer t(c, samples);
  t.train(1);

  // Same run without the trainer: shuffled batches, raw gradients, Adam.
  Trainer ref(c, samples);
  CbpModel model = ref.checkpoint().model;
  AdamState st;
  std::vector<std::size_t> order{0, 1, 2, 3};
  Rng shuffle_rng(*c.seed * 0x9E3779B97F4A7C15ULL + 1);
  std::shuffle(order.begin(), order.end(), shuffle_rng);
  for (std::size_t b = 0; b < order.size(); b += c.batch_size) {
    GradTable g = zero_grads(model.params());
    for (std::size_t k = b; k < b + c.batch_size; ++k) {
      ad::Tape tape;
      const ad::Var loss =
          sample_loss(tape, model, model.params(), samples[order[k]],
                      ref.labels()[order[k]], ref.class_weights(), c.lambda,
                      1.0 / static_cast<double>(c.batch_size), nullptr);
      const GradTable gk = tape.backward(loss, model.params());
      for (std::size_t p = 0; p < g.size(); ++p)
        for (std::size_t i = 0; i < g[p].size(); ++i) g[p][i] += gk[p][i];
    }
    adam_update(model.params(), g, st, {c.learning_rate});
  }
  EXPECT_EQ(t.checkpoint().model.params(), model.params());
}

GradTable single_gradient(const TrainConfig& c) {
  Trainer t(c, toy_set(3));
  std::vector<SampleLoss> parts;
  const std::vector<std::size_t> batch{0, 1, 2};
  return t.batch_gradient(batch, parts);
}

bool all_zero(const Matrix& m) {
  return std::all_of(m.data().begin(), m.data().end(), [](double v) { return v == 0.0; });
}

TEST(Trainer, LambdaZeroLeavesBoundaryHeadUntouched) {
  TrainConfig c = toy_train_config();
  c.lambda = 0.0;
  const GradTable g = single_gradient(c);
  const ParamStore p = Trainer(c, toy_set(3)).checkpoint().model.params();
  EXPECT_TRUE(all_zero(g[p.find("heads.w_boundary")]));
  EXPECT_TRUE(all_zero(g[p.find("heads.b_boundary")]));
  EXPECT_FALSE(all_zero(g[p.find("heads.w_anchor")]));
}

TEST(Trainer, DisabledContextHasNoProjectionGradient) {
  TrainConfig c = toy_train_config();
  c.use_context = false;
  const GradTable g = single_gradient(c);
  const ParamStore p = Trainer(c, toy_set(3)).checkpoint().model.params();
  EXPECT_TRUE(all_zero(g[p.find("context.projection")]));
  c.use_context = true;
  EXPECT_FALSE(all_zero(single_gradient(c)[p.find("context.projection")]));
}

TEST(Trainer, NonFiniteLossNamesTheBatch) {
  auto samples = toy_set(3);
  Matrix f = *samples[1].features;
  f(2, 0) = std::numeric_limits<double>::quiet_NaN();
  samples[1].features = std::make_shared<const Matrix>(f);
  TrainConfig c = toy_train_config();
  c.batch_size = 3;
  Trainer t(c, samples);
  try {
    t.train(1);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("q1"), std::string::npos) << e.what();
  }
}

TEST(Trainer, ResumeContinuesLikeUninterruptedRun) {
  const auto samples = toy_set(5);
  Trainer full(toy_train_config(), samples);
  full.train(3);

  testing::TempDir dir("resume");
  Trainer first(toy_train_config(), samples);
  first.train(2);
  save_checkpoint(first.checkpoint(), dir / "c.cbpc");
  Trainer resumed(load_checkpoint(dir / "c.cbpc"), samples);
  const auto log = resumed.train(1);
  EXPECT_EQ(log.at(0).epoch, 3u);
  EXPECT_EQ(resumed.checkpoint().epoch, 3u);
  EXPECT_EQ(serialize_checkpoint(resumed.checkpoint()),
            serialize_checkpoint(full.checkpoint()));
}

TEST(Trainer, ValidationMetricIsLogged) {
  TrainConfig c = toy_train_config();
  c.eval_every = 2;
  Trainer t(c, toy_set(4), toy_set(3, 99));
  std::vector<EpochLog> seen;
  t.train(3, [&](const EpochLog& e) { seen.push_back(e); });
  ASSERT_EQ(seen.size(), 3u);
  EXPECT_FALSE(seen[0].val_r1_07.has_value());
  EXPECT_TRUE(seen[1].val_r1_07.has_value());
  EXPECT_TRUE(seen[2].val_r1_07.has_value());  // final epoch
  EXPECT_TRUE(to_json(seen[1]).contains("val_r1_iou0.7"));
}

class CheckpointFile : public ::testing::Test {
 protected:
  void SetUp() override {
    trainer_ = std::make_unique<Trainer>(toy_train_config(), toy_set(4));
    trainer_->train(1);
    bytes_ = serialize_checkpoint(trainer_->checkpoint());
  }
  std::unique_ptr<Trainer> trainer_;
  std::string bytes_;
};

TEST_F(CheckpointFile, RoundTripIsBitExact) {
  const Checkpoint back = deserialize_checkpoint(bytes_, "mem");
  EXPECT_EQ(serialize_checkpoint(back), bytes_);
  EXPECT_EQ(back.model.params(), trainer_->checkpoint().model.params());
  EXPECT_EQ(back.optimizer, trainer_->checkpoint().optimizer);
  EXPECT_EQ(back.epoch, 1u);
  Rng rng(30);
  const Matrix v = random_matrix(10, 4, rng), q = random_matrix(3, 3, rng);
  const ScoreGrid a = back.model.score(v, q);
  const ScoreGrid b = trainer_->checkpoint().model.score(v, q);
  EXPECT_EQ(a.anchor_scores, b.anchor_scores);
  EXPECT_EQ(a.boundary, b.boundary);
}

TEST_F(CheckpointFile, FlippedByteIsChecksumError) {
  for (std::size_t pos : {bytes_.size() / 2, bytes_.size() - 20, bytes_.size() - 1}) {
    std::string bad = bytes_;
    bad[pos] ^= 0x10;
    EXPECT_THROW(deserialize_checkpoint(bad, "mem"), ChecksumError) << pos;
  }
}

TEST_F(CheckpointFile, VersionAndMagicAreChecked) {
  std::string ver = bytes_;
  ver[4] = 2;
  EXPECT_THROW(deserialize_checkpoint(ver, "mem"), VersionError);
  std::string magic = bytes_;
  magic[1] = 'X';
  EXPECT_THROW(deserialize_checkpoint(magic, "mem"), DataError);
  EXPECT_THROW(deserialize_checkpoint(bytes_.substr(0, 12), "mem"), ChecksumError);
  EXPECT_THROW(load_checkpoint("/nonexistent/c.cbpc"), DataError);
}

TEST(Inference, ModelOutputsFeedRanking) {
  Trainer t(toy_train_config(), toy_set(4));
  const auto samples = toy_set(3, 50);
  const InferenceOutput out = run_inference(t.checkpoint().model, samples,
                                            predict_options(t.checkpoint().config, 5));
  ASSERT_EQ(out.grids.size(), 3u);
  std::size_t total = 0;
  for (const auto& s : samples) {
    const std::size_t n = out.predictions.at(s.query_id).size();
    EXPECT_GE(n, 1u);
    EXPECT_LE(n, 5u);
    total += n;
  }
  EXPECT_EQ(out.results.size(), total);
  EXPECT_EQ(out.results.front().rank, 1u);
  const InferenceOutput fused = run_fusion(out.grids, predict_options(t.checkpoint().config, 5));
  EXPECT_EQ(fused.predictions, out.predictions);
}

}  // namespace
}  // namespace cbp
