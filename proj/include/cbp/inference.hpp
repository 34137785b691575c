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

// Boundary-modulated anchor prediction: local score fusion, global ranking
// and greedy non-maximum suppression.

#pragma once

#include <algorithm>
#include <cstddef>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbp/errors.hpp"
#include "cbp/heads.hpp"
#include "cbp/metrics.hpp"
#include "cbp/supervision.hpp"

namespace cbp {

struct Candidate {
  int start = 0;
  int end = 0;
  double score = 0.0;      // fused
  double raw_score = 0.0;  // anchor classifier only
  std::size_t anchor = 0;
  std::size_t step = 0;

  Interval interval() const {
    return {static_cast<double>(start), static_cast<double>(end)};
  }
  friend bool operator==(const Candidate&, const Candidate&) = default;
};

// Total order: higher score first, then earlier end step, then smaller
// anchor index.
inline bool ranks_before(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.step != b.step) return a.step < b.step;
  return a.anchor < b.anchor;
}

// c + 0.5 * (B[t - l] + B[t]) on valid cells. Masked cells are left at 0.
inline Matrix fuse_scores(const ScoreGrid& grid) {
  grid.check();
  Matrix fused(grid.steps(), grid.num_anchors());
  for (std::size_t t = 0; t < grid.steps(); ++t) {
    for (std::size_t i = 0; i < grid.num_anchors(); ++i) {
      if (!grid.valid(t, i)) continue;
      const std::size_t s = t - static_cast<std::size_t>(grid.anchors.length(i));
      fused(t, i) =
          grid.anchor_scores(t, i) + 0.5 * (grid.boundary[s] + grid.boundary[t]);
    }
  }
  return fused;
}

// Every valid cell as a candidate, in ranking order.
inline std::vector<Candidate> ranked_candidates(const ScoreGrid& grid,
                                                const Matrix& fused) {
  std::vector<Candidate> out;
  for (std::size_t t = 0; t < grid.steps(); ++t) {
    for (std::size_t i = 0; i < grid.num_anchors(); ++i) {
      if (!grid.valid(t, i)) continue;
      const int len = grid.anchors.length(i);
      out.push_back({static_cast<int>(t) - len, static_cast<int>(t),
                     fused(t, i), grid.anchor_scores(t, i), i, t});
    }
  }
  std::sort(out.begin(), out.end(), ranks_before);
  return out;
}

// Greedy NMS: keep the best remaining candidate, drop those overlapping it
// with IoU > threshold, repeat.
inline std::vector<Candidate> nms(std::vector<Candidate> candidates,
                                  double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) {
    throw ContractError("nms: threshold must be in [0, 1]");
  }
  std::sort(candidates.begin(), candidates.end(), ranks_before);
  std::vector<Candidate> kept;
  std::vector<bool> removed(candidates.size(), false);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (removed[i]) continue;
    kept.push_back(candidates[i]);
    const Interval best = candidates[i].interval();
    for (std::size_t j = i + 1; j < candidates.size(); ++j) {
      if (!removed[j] &&
          temporal_iou(best, candidates[j].interval()) > threshold) {
        removed[j] = true;
      }
    }
  }
  return kept;
}

struct GroundingResult {
  std::vector<Candidate> ranked;  // best first, post-NMS
  bool shortfall = false;         // fewer than N survivors
};

struct PredictOptions {
  std::size_t top_m = 100;
  double nms_threshold = 0.3;
  std::size_t top_n = 5;
};

inline GroundingResult predict_segments(const ScoreGrid& grid,
                                        const PredictOptions& opts) {
  if (opts.top_n < 1 || opts.top_m < opts.top_n) {
    throw ConfigError("predict_segments: need M >= N >= 1");
  }
  std::vector<Candidate> cands = ranked_candidates(grid, fuse_scores(grid));
  if (cands.size() > opts.top_m) cands.resize(opts.top_m);
  GroundingResult result;
  result.ranked = nms(std::move(cands), opts.nms_threshold);
  if (result.ranked.size() < opts.top_n) {
    result.shortfall = true;
  } else {
    result.ranked.resize(opts.top_n);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Result records, one JSON object per line, times in seconds.

struct ResultRecord {
  std::string video_id;
  std::string query_id;
  std::size_t rank = 0;  // 1-based
  double start = 0.0;
  double end = 0.0;
  double score = 0.0;
};

inline std::vector<ResultRecord> to_records(const GroundingResult& result,
                                            const std::string& video_id,
                                            const std::string& query_id,
                                            double duration,
                                            std::size_t steps) {
  std::vector<ResultRecord> out;
  for (std::size_t r = 0; r < result.ranked.size(); ++r) {
    const Candidate& c = result.ranked[r];
    out.push_back({video_id, query_id, r + 1,
                   index_to_seconds(c.start, duration, steps),
                   index_to_seconds(c.end, duration, steps), c.score});
  }
  return out;
}

inline void write_results(std::ostream& os,
                          const std::vector<ResultRecord>& records) {
  for (const auto& r : records) {
    nlohmann::json j = {{"video_id", r.video_id}, {"query_id", r.query_id},
                        {"rank", r.rank},         {"start", r.start},
                        {"end", r.end},           {"score", r.score}};
    os << j.dump() << '\n';
  }
}

inline std::vector<ResultRecord> read_results(std::istream& is) {
  std::vector<ResultRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("video_id").get<std::string>(),
                     j.at("query_id").get<std::string>(),
                     j.at("rank").get<std::size_t>(), j.at("start").get<double>(),
                     j.at("end").get<double>(), j.at("score").get<double>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError("results line " + std::to_string(line_no) + ": " +
                      e.what());
    }
  }
  return out;
}

// Groups records by query, ordered by rank.
inline PredictionMap predictions_from_records(
    const std::vector<ResultRecord>& records) {
  std::map<std::string, std::vector<const ResultRecord*>> grouped;
  for (const auto& r : records) grouped[r.query_id].push_back(&r);
  PredictionMap out;
  for (auto& [id, rs] : grouped) {
    std::sort(rs.begin(), rs.end(),
              [](const ResultRecord* a, const ResultRecord* b) {
                return a->rank < b->rank;
              });
    auto& list = out[id];
    for (const ResultRecord* r : rs) list.push_back({r->start, r->end});
  }
  return out;
}

}  // namespace cbp
