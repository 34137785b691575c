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

#include <sstream>

#include <gtest/gtest.h>

#include "support.hpp"

namespace cbp {
namespace {

using testing::oracle_argmax;
using testing::oracle_fuse;
using testing::oracle_nms;
using testing::random_grid;

ScoreGrid flat_grid(std::size_t steps, const AnchorSet& a, double c, double b) {
  ScoreGrid g;
  g.anchors = a;
  g.anchor_scores = Matrix(steps, a.size(), c);
  g.boundary.assign(steps, b);
  return g;
}

TEST(Fuse, Example) {
  ScoreGrid g = flat_grid(4, AnchorSet({2}), 0.0, 0.0);
  g.anchor_scores(3, 0) = 0.2;
  g.boundary[1] = 0.3;
  g.boundary[3] = 0.5;
  EXPECT_NEAR(fuse_scores(g)(3, 0), 0.6, 1e-15);
}

TEST(Fuse, ZeroBoundaryGivesRawScoresOnValidCells) {
  Rng rng(1);
  ScoreGrid g = random_grid(rng, 12, AnchorSet({1, 4, 7}));
  g.boundary.assign(12, 0.0);
  const Matrix f = fuse_scores(g);
  for (std::size_t t = 0; t < 12; ++t)
    for (std::size_t i = 0; i < 3; ++i)
      EXPECT_EQ(f(t, i), g.valid(t, i) ? g.anchor_scores(t, i) : 0.0);
}

TEST(Fuse, MatchesDoubleLoopAndBounds) {
  Rng rng(2);
  for (int rep = 0; rep < 200; ++rep) {
    const AnchorSet a = testing::random_anchor_set(rng, 5, 10);
    const ScoreGrid g = random_grid(rng, 1 + rep % 30, a);
    const Matrix f = fuse_scores(g);
    const Matrix o = oracle_fuse(g);
    ASSERT_EQ(f, o);
    for (std::size_t t = 0; t < g.steps(); ++t) {
      for (std::size_t i = 0; i < a.size(); ++i) {
        if (!g.valid(t, i)) continue;
        EXPECT_GT(f(t, i), 0.0);
        EXPECT_LT(f(t, i), 2.0);
      }
    }
  }
}

TEST(Fuse, MonotoneInBoundary) {
  Rng rng(3);
  const AnchorSet a({2, 3});
  const ScoreGrid g = random_grid(rng, 10, a);
  const Matrix base = fuse_scores(g);
  for (std::size_t t = 0; t < 10; ++t) {
    ScoreGrid h = g;
    h.boundary[t] += 0.1;
    const Matrix up = fuse_scores(h);
    for (std::size_t u = 0; u < 10; ++u)
      for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_GE(up(u, i), base(u, i));
        const bool touches = g.valid(u, i) &&
                             (u == t || u - static_cast<std::size_t>(a.length(i)) == t);
        if (touches) {
          EXPECT_GT(up(u, i), base(u, i));
        }
      }
  }
}

TEST(Nms, Examples) {
  const Candidate a{2, 6, 0.9, 0.9, 0, 6};
  const Candidate b{2, 6, 0.8, 0.8, 1, 6};
  const auto kept = nms({b, a}, 0.5);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].score, 0.9);

  const Candidate c{0, 2, 0.5, 0.5, 0, 2};
  const Candidate d{5, 9, 0.7, 0.7, 0, 9};
  for (double th : {0.0, 0.3, 1.0}) EXPECT_EQ(nms({c, d}, th).size(), 2u);

  EXPECT_THROW(nms({c}, -0.1), ContractError);
  EXPECT_THROW(nms({c}, 1.1), ContractError);
  EXPECT_TRUE(nms({}, 0.5).empty());
}

TEST(Nms, MatchesQuadraticReference) {
  Rng rng(4);
  std::uniform_real_distribution<double> th(0.0, 1.0);
  for (int rep = 0; rep < 300; ++rep) {
    const auto cands = testing::random_candidates(rng, 50, 30, rep % 2 == 0);
    const double t = rep % 5 == 0 ? 0.5 : th(rng);
    EXPECT_EQ(nms(cands, t), oracle_nms(cands, t)) << "rep " << rep;
  }
}

TEST(Nms, SurvivorsPairwiseBelowThreshold) {
  Rng rng(5);
  for (int rep = 0; rep < 50; ++rep) {
    const auto kept = nms(testing::random_candidates(rng, 60, 40, false), 0.3);
    for (std::size_t i = 0; i < kept.size(); ++i) {
      if (i > 0) {
        EXPECT_GE(kept[i - 1].score, kept[i].score);
      }
      for (std::size_t j = i + 1; j < kept.size(); ++j)
        EXPECT_LE(temporal_iou(kept[i].interval(), kept[j].interval()), 0.3);
    }
  }
}

TEST(Ranking, TieBreakOrder) {
  ScoreGrid g = flat_grid(6, AnchorSet({1, 2}), 0.5, 0.0);
  const auto ranked = ranked_candidates(g, fuse_scores(g));
  ASSERT_EQ(ranked.size(), 9u);
  // Equal scores: earlier end step first, then smaller anchor index.
  EXPECT_EQ(ranked[0].step, 1u);
  EXPECT_EQ(ranked[1].step, 2u);
  EXPECT_EQ(ranked[1].anchor, 0u);
  EXPECT_EQ(ranked[2].step, 2u);
  EXPECT_EQ(ranked[2].anchor, 1u);
  for (const auto& c : ranked) {
    EXPECT_EQ(c.end - c.start, g.anchors.length(c.anchor));
    EXPECT_GE(c.start, 0);
  }
}

TEST(Predict, SingleValidCell) {
  ScoreGrid g = flat_grid(3, AnchorSet({2}), 0.0, 0.0);
  g.anchor_scores(2, 0) = 0.4;
  g.boundary = {0.2, 0.9, 0.6};
  const GroundingResult r = predict_segments(g, {100, 0.3, 1});
  ASSERT_EQ(r.ranked.size(), 1u);
  EXPECT_EQ(r.ranked[0].start, 0);
  EXPECT_EQ(r.ranked[0].end, 2);
  EXPECT_DOUBLE_EQ(r.ranked[0].score, 0.4 + 0.5 * (0.2 + 0.6));
  EXPECT_DOUBLE_EQ(r.ranked[0].raw_score, 0.4);
  EXPECT_FALSE(r.shortfall);
}

TEST(Predict, ShortfallReturnsAllSurvivors) {
  ScoreGrid g = flat_grid(3, AnchorSet({2}), 0.5, 0.0);
  const GroundingResult r = predict_segments(g, {100, 0.3, 5});
  EXPECT_EQ(r.ranked.size(), 1u);
  EXPECT_TRUE(r.shortfall);
}

TEST(Predict, RequiresMAtLeastN) {
  ScoreGrid g = flat_grid(3, AnchorSet({1}), 0.5, 0.0);
  EXPECT_THROW(predict_segments(g, {2, 0.3, 3}), ConfigError);
  EXPECT_THROW(predict_segments(g, {2, 0.3, 0}), ConfigError);
}

TEST(Predict, TopOneIsGridArgmax) {
  Rng rng(6);
  std::uniform_real_distribution<double> th(0.0, 1.0);
  for (int rep = 0; rep < 300; ++rep) {
    const AnchorSet a = testing::random_anchor_set(rng, 5, 12);
    const std::size_t steps = static_cast<std::size_t>(a.lengths().front()) + 1 + rep % 20;
    const ScoreGrid g = random_grid(rng, steps, a, rep % 3 == 0);
    const GroundingResult r = predict_segments(g, {100, th(rng), 1});
    ASSERT_FALSE(r.ranked.empty());
    EXPECT_EQ(r.ranked[0], oracle_argmax(g)) << "rep " << rep;
  }
}

TEST(Predict, TopMThenNmsThenTopN) {
  Rng rng(7);
  for (int rep = 0; rep < 100; ++rep) {
    const AnchorSet a = testing::random_anchor_set(rng, 4, 8);
    const ScoreGrid g = random_grid(rng, 25, a);
    std::vector<Candidate> all;
    const Matrix f = oracle_fuse(g);
    for (std::size_t t = 0; t < 25; ++t)
      for (std::size_t i = 0; i < a.size(); ++i)
        if (static_cast<int>(t) >= a.length(i))
          all.push_back({static_cast<int>(t) - a.length(i), static_cast<int>(t), f(t, i),
                         g.anchor_scores(t, i), i, t});
    std::sort(all.begin(), all.end(), testing::oracle_better);
    if (all.size() > 12) all.resize(12);
    auto expect = oracle_nms(all, 0.4);
    const bool short_ = expect.size() < 4;
    if (!short_) expect.resize(4);
    const GroundingResult r = predict_segments(g, {12, 0.4, 4});
    EXPECT_EQ(r.ranked, expect);
    EXPECT_EQ(r.shortfall, short_);
  }
}

TEST(Predict, BoundarySpikesLiftMidScoringAnchor) {
  // [5,9] has the highest anchor score but flat boundaries; [4,6] scores
  // lower but sits on two boundary spikes.
  ScoreGrid g = flat_grid(10, AnchorSet({2, 4}), 0.1, 0.1);
  g.anchor_scores(9, 1) = 0.9;
  g.anchor_scores(6, 0) = 0.5;
  ScoreGrid flat = g;
  g.boundary[4] = 0.9;
  g.boundary[6] = 0.9;

  const auto before = predict_segments(flat, {100, 0.3, 1}).ranked.front();
  EXPECT_EQ(before.start, 5);
  EXPECT_EQ(before.end, 9);
  const auto after = predict_segments(g, {100, 0.3, 1}).ranked.front();
  EXPECT_EQ(after.start, 4);
  EXPECT_EQ(after.end, 6);
  EXPECT_EQ(after, oracle_argmax(g));
}

TEST(Predict, Deterministic) {
  Rng rng(8);
  const ScoreGrid g = random_grid(rng, 30, AnchorSet({2, 5, 8}), true);
  const auto a = predict_segments(g, {100, 0.3, 5});
  const auto b = predict_segments(g, {100, 0.3, 5});
  EXPECT_EQ(a.ranked, b.ranked);
}

TEST(Results, RecordsInSecondsAndRoundTrip) {
  ScoreGrid g = flat_grid(5, AnchorSet({1, 3}), 0.2, 0.0);
  g.anchor_scores(4, 1) = 0.9;
  const GroundingResult r = predict_segments(g, {100, 0.3, 2});
  const auto recs = to_records(r, "v", "q", 8.0, 5);
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].rank, 1u);
  EXPECT_EQ(recs[0].start, 2.0);  // index 1 of 5 over 8 s
  EXPECT_EQ(recs[0].end, 8.0);
  EXPECT_EQ(recs[1].rank, 2u);

  std::stringstream ss;
  write_results(ss, recs);
  const auto back = read_results(ss);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(back[k].start, recs[k].start);
    EXPECT_EQ(back[k].end, recs[k].end);
    EXPECT_EQ(back[k].score, recs[k].score);
    EXPECT_EQ(back[k].query_id, "q");
  }
  std::istringstream bad("{\"video_id\":\"v\"}\n");
  EXPECT_THROW(read_results(bad), DataError);
}

TEST(Results, GroupedByRank) {
  const std::vector<ResultRecord> recs{{"v", "a", 2, 3, 4, 0.1},
                                       {"v", "b", 1, 0, 1, 0.5},
                                       {"v", "a", 1, 1, 2, 0.9}};
  const PredictionMap p = predictions_from_records(recs);
  ASSERT_EQ(p.at("a").size(), 2u);
  EXPECT_EQ(p.at("a")[0], (Interval{1, 2}));
  EXPECT_EQ(p.at("a")[1], (Interval{3, 4}));
  EXPECT_EQ(p.at("b").size(), 1u);
}

}  // namespace
}  // namespace cbp
