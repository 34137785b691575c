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

// Anchor and boundary classifier heads, and the score grid they produce.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbp/errors.hpp"
#include "cbp/numerics.hpp"

namespace cbp {

// Anchor lengths in feature steps; strictly increasing, all >= 1. Anchor i
// ending at step t covers steps [t - length(i), t].
class AnchorSet {
 public:
  AnchorSet() = default;
  explicit AnchorSet(std::vector<int> lengths) : lengths_(std::move(lengths)) {
    if (lengths_.empty()) throw ContractError("anchor set is empty");
    for (std::size_t i = 0; i < lengths_.size(); ++i) {
      if (lengths_[i] < 1) {
        throw ContractError("anchor length must be >= 1, got " +
                            std::to_string(lengths_[i]));
      }
      if (i > 0 && lengths_[i] <= lengths_[i - 1]) {
        throw ContractError("anchor lengths must be strictly increasing");
      }
    }
  }
  std::size_t size() const { return lengths_.size(); }
  int length(std::size_t i) const { return lengths_.at(i); }
  const std::vector<int>& lengths() const { return lengths_; }
  bool valid(std::size_t t, std::size_t i) const {
    return static_cast<long>(t) - lengths_[i] >= 0;
  }
  friend bool operator==(const AnchorSet&, const AnchorSet&) = default;

 private:
  std::vector<int> lengths_;
};

struct ScoreGrid {
  AnchorSet anchors;
  Matrix anchor_scores;          // T x K
  std::vector<double> boundary;  // T

  std::size_t steps() const { return boundary.size(); }
  std::size_t num_anchors() const { return anchors.size(); }
  bool valid(std::size_t t, std::size_t i) const { return anchors.valid(t, i); }

  // T x K validity mask as 0/1.
  Matrix mask() const {
    Matrix m(steps(), num_anchors());
    for (std::size_t t = 0; t < steps(); ++t)
      for (std::size_t i = 0; i < num_anchors(); ++i)
        m(t, i) = valid(t, i) ? 1.0 : 0.0;
    return m;
  }

  void check() const {
    if (anchor_scores.rows() != boundary.size() ||
        anchor_scores.cols() != anchors.size()) {
      throw DimensionError("score grid: anchor scores " +
                           anchor_scores.shape_string() + " vs T=" +
                           std::to_string(boundary.size()) + ", K=" +
                           std::to_string(anchors.size()));
    }
  }
  friend bool operator==(const ScoreGrid&, const ScoreGrid&) = default;
};

struct HeadParams {
  int w_anchor = -1;    // 2D x K
  int b_anchor = -1;    // 1 x K
  int w_boundary = -1;  // 2D x 1
  int b_boundary = -1;  // 1 x 1
};

inline HeadParams add_heads(ParamStore& store, const std::string& prefix,
                            std::size_t input_size, std::size_t num_anchors,
                            Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(input_size));
  HeadParams p;
  p.w_anchor = store.add(prefix + ".w_anchor",
                         uniform_matrix(input_size, num_anchors, bound, rng));
  p.b_anchor = store.add(prefix + ".b_anchor", Matrix(1, num_anchors));
  p.w_boundary = store.add(prefix + ".w_boundary",
                           uniform_matrix(input_size, 1, bound, rng));
  p.b_boundary = store.add(prefix + ".b_boundary", Matrix(1, 1));
  return p;
}

struct HeadOutput {
  ad::Var anchor;    // T x K probabilities
  ad::Var boundary;  // T x 1 probabilities
};

// Weights are shared across time steps: each row of `integrated` is scored
// with the same affine map.
inline HeadOutput localization_scores(const ad::Var& w_anchor,
                                      const ad::Var& b_anchor,
                                      const ad::Var& w_boundary,
                                      const ad::Var& b_boundary,
                                      const ad::Var& integrated) {
  if (integrated.rows() == 0) {
    throw ContractError("localization_scores: empty input");
  }
  return {ad::sigmoid(ad::matmul_bias(integrated, w_anchor, b_anchor)),
          ad::sigmoid(ad::matmul_bias(integrated, w_boundary, b_boundary))};
}

inline ScoreGrid to_grid(const HeadOutput& out, const AnchorSet& anchors) {
  ScoreGrid grid;
  grid.anchors = anchors;
  grid.anchor_scores = out.anchor.value();
  const Matrix& b = out.boundary.value();
  grid.boundary.assign(b.data().begin(), b.data().end());
  grid.check();
  return grid;
}

// ---------------------------------------------------------------------------
// Interchange format: one JSON object per line.

struct ScoreGridRecord {
  std::string video_id;
  std::string query_id;
  double duration = 0.0;
  ScoreGrid grid;
};

inline nlohmann::json to_json(const ScoreGridRecord& r) {
  const ScoreGrid& g = r.grid;
  return {{"video_id", r.video_id},
          {"query_id", r.query_id},
          {"duration", r.duration},
          {"T", g.steps()},
          {"K", g.num_anchors()},
          {"anchors", g.anchors.lengths()},
          {"anchor_scores", g.anchor_scores.values()},
          {"boundary_scores", g.boundary}};
}

inline ScoreGridRecord score_grid_from_json(const nlohmann::json& j) {
  ScoreGridRecord r;
  try {
    r.video_id = j.at("video_id").get<std::string>();
    r.query_id = j.at("query_id").get<std::string>();
    r.duration = j.at("duration").get<double>();
    const auto steps = j.at("T").get<std::size_t>();
    const auto k = j.at("K").get<std::size_t>();
    r.grid.anchors = AnchorSet(j.at("anchors").get<std::vector<int>>());
    auto scores = j.at("anchor_scores").get<std::vector<double>>();
    r.grid.boundary = j.at("boundary_scores").get<std::vector<double>>();
    if (r.grid.anchors.size() != k || scores.size() != steps * k ||
        r.grid.boundary.size() != steps) {
      throw DataError("score grid " + r.query_id +
                      ": array lengths do not match T and K");
    }
    r.grid.anchor_scores = Matrix(steps, k, std::move(scores));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("score grid record: ") + e.what());
  } catch (const ContractError& e) {
    throw DataError(std::string("score grid record: ") + e.what());
  }
  for (double v : r.grid.anchor_scores.data()) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw DataError("score grid " + r.query_id + ": score outside [0, 1]");
    }
  }
  for (double v : r.grid.boundary) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw DataError("score grid " + r.query_id +
                      ": boundary score outside [0, 1]");
    }
  }
  return r;
}

inline void write_score_grids(std::ostream& os,
                              const std::vector<ScoreGridRecord>& records) {
  for (const auto& r : records) os << to_json(r).dump() << '\n';
}

inline std::vector<ScoreGridRecord> read_score_grids(std::istream& is) {
  std::vector<ScoreGridRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("score grids line " + std::to_string(line_no) + ": " +
                      e.what());
    }
    out.push_back(score_grid_from_json(j));
  }
  return out;
}

}  // namespace cbp
