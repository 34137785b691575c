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

// Ground-truth labels, class weights, losses, and anchor-set selection.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "cbp/errors.hpp"
#include "cbp/heads.hpp"
#include "cbp/metrics.hpp"
#include "cbp/numerics.hpp"

namespace cbp {

// Inclusive range of feature steps.
struct IndexSegment {
  int start = 0;
  int end = 0;
  int length() const { return end - start; }
  friend bool operator==(const IndexSegment&, const IndexSegment&) = default;
};

// round(t / duration * (T - 1)), clamped to [0, T - 1].
inline int discretize_time(double seconds, double duration, std::size_t steps,
                           const std::string& what = "annotation") {
  if (steps < 1) throw ContractError("discretize_time: T must be >= 1");
  if (!(seconds >= 0.0 && seconds <= duration)) {
    throw DataError(what + ": time " + std::to_string(seconds) +
                    " outside [0, " + std::to_string(duration) + "]");
  }
  if (steps == 1 || duration <= 0.0) return 0;
  const double idx =
      std::round(seconds / duration * static_cast<double>(steps - 1));
  return std::clamp(static_cast<int>(idx), 0, static_cast<int>(steps) - 1);
}

// Inverse of discretize_time on grid points.
inline double index_to_seconds(int index, double duration, std::size_t steps) {
  if (steps <= 1) return 0.0;
  return static_cast<double>(index) * duration /
         static_cast<double>(steps - 1);
}

inline IndexSegment discretize_segment(double start, double end,
                                       double duration, std::size_t steps,
                                       const std::string& what = "annotation") {
  if (start > end) throw DataError(what + ": start after end");
  return {discretize_time(start, duration, steps, what),
          discretize_time(end, duration, steps, what)};
}

inline Interval to_interval(const IndexSegment& s) {
  return {static_cast<double>(s.start), static_cast<double>(s.end)};
}

// Segment covered by anchor i ending at step t.
inline Interval anchor_interval(std::size_t t, int length) {
  return {static_cast<double>(t) - length, static_cast<double>(t)};
}

struct AnchorLabels {
  Matrix targets;  // T x K, 1 where IoU with the ground truth >= theta
  Matrix mask;     // T x K, 1 on valid cells
};

inline AnchorLabels build_anchor_labels(const IndexSegment& gt,
                                        const AnchorSet& anchors,
                                        std::size_t steps, double theta) {
  if (gt.start < 0 || gt.start > gt.end ||
      gt.end > static_cast<int>(steps) - 1) {
    throw ContractError("build_anchor_labels: segment [" +
                        std::to_string(gt.start) + ", " +
                        std::to_string(gt.end) + "] outside [0, T-1]");
  }
  AnchorLabels labels{Matrix(steps, anchors.size()),
                      Matrix(steps, anchors.size())};
  const Interval truth = to_interval(gt);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      if (!anchors.valid(t, i)) continue;
      labels.mask(t, i) = 1.0;
      const Interval cand = anchor_interval(t, anchors.length(i));
      if (temporal_iou(cand, truth) >= theta) labels.targets(t, i) = 1.0;
    }
  }
  return labels;
}

// T x 1; 1 within `radius` steps of the start or the end.
inline Matrix build_boundary_labels(const IndexSegment& gt, std::size_t steps,
                                    int radius) {
  if (radius < 0) throw ContractError("boundary tolerance radius must be >= 0");
  Matrix z(steps, 1);
  for (std::size_t t = 0; t < steps; ++t) {
    const int ti = static_cast<int>(t);
    if (std::abs(ti - gt.start) <= radius || std::abs(ti - gt.end) <= radius)
      z[t] = 1.0;
  }
  return z;
}

// Positive/negative counts over a training set, per anchor index and for the
// boundary classifier.
struct LabelCounts {
  std::vector<double> anchor_pos;
  std::vector<double> anchor_neg;
  double boundary_pos = 0.0;
  double boundary_neg = 0.0;

  void add(const AnchorLabels& y, const Matrix& z) {
    if (anchor_pos.empty()) {
      anchor_pos.assign(y.targets.cols(), 0.0);
      anchor_neg.assign(y.targets.cols(), 0.0);
    }
    if (y.targets.cols() != anchor_pos.size()) {
      throw DimensionError("label counts: K changed between samples");
    }
    for (std::size_t t = 0; t < y.targets.rows(); ++t) {
      for (std::size_t i = 0; i < y.targets.cols(); ++i) {
        if (y.mask(t, i) == 0.0) continue;
        (y.targets(t, i) > 0.5 ? anchor_pos[i] : anchor_neg[i]) += 1.0;
      }
    }
    for (double v : z.data()) (v > 0.5 ? boundary_pos : boundary_neg) += 1.0;
  }
};

struct ClassWeights {
  std::vector<double> anchor_pos;  // w0 per anchor, multiplies y log c
  std::vector<double> anchor_neg;  // w1 per anchor
  double boundary_pos = 1.0;
  double boundary_neg = 1.0;
  std::vector<std::string> warnings;

  static ClassWeights uniform(std::size_t k) {
    return {std::vector<double>(k, 1.0), std::vector<double>(k, 1.0), 1.0, 1.0,
            {}};
  }
};

namespace detail {

// Inverse frequency: (pos + neg) / (2 pos) and (pos + neg) / (2 neg).
inline void balance(double pos, double neg, double& w_pos, double& w_neg,
                    const std::string& name,
                    std::vector<std::string>& warnings) {
  if (pos <= 0.0 || neg <= 0.0) {
    warnings.push_back(name + " has " + (pos <= 0.0 ? "no positive" : "no negative") +
                       " samples; using weight 1.0");
    w_pos = 1.0;
    w_neg = 1.0;
    return;
  }
  w_pos = (pos + neg) / (2.0 * pos);
  w_neg = (pos + neg) / (2.0 * neg);
}

}  // namespace detail

inline ClassWeights compute_class_weights(const LabelCounts& counts) {
  ClassWeights w;
  const std::size_t k = counts.anchor_pos.size();
  w.anchor_pos.resize(k);
  w.anchor_neg.resize(k);
  for (std::size_t i = 0; i < k; ++i) {
    detail::balance(counts.anchor_pos[i], counts.anchor_neg[i], w.anchor_pos[i],
                    w.anchor_neg[i], "anchor " + std::to_string(i), w.warnings);
  }
  detail::balance(counts.boundary_pos, counts.boundary_neg, w.boundary_pos,
                  w.boundary_neg, "boundary classifier", w.warnings);
  return w;
}

// Per-cell weight matrices for the anchor loss; masked cells get 0.
inline std::pair<Matrix, Matrix> anchor_loss_weights(const AnchorLabels& y,
                                                     const ClassWeights& w) {
  if (w.anchor_pos.size() != y.targets.cols()) {
    throw DimensionError("class weights for " +
                         std::to_string(w.anchor_pos.size()) +
                         " anchors vs labels with K=" +
                         std::to_string(y.targets.cols()));
  }
  Matrix pos(y.targets.rows(), y.targets.cols());
  Matrix neg(y.targets.rows(), y.targets.cols());
  for (std::size_t t = 0; t < pos.rows(); ++t) {
    for (std::size_t i = 0; i < pos.cols(); ++i) {
      pos(t, i) = w.anchor_pos[i] * y.mask(t, i);
      neg(t, i) = w.anchor_neg[i] * y.mask(t, i);
    }
  }
  return {std::move(pos), std::move(neg)};
}

// Anchor loss on the tape: weighted multi-label cross-entropy over valid cells.
inline ad::Var anchor_loss(const ad::Var& probs, const AnchorLabels& y,
                           const ClassWeights& w) {
  auto [pos, neg] = anchor_loss_weights(y, w);
  return ad::weighted_bce(probs, y.targets, std::move(pos), std::move(neg));
}

// Boundary loss on the tape: negated weighted binary cross-entropy.
inline ad::Var boundary_loss(const ad::Var& probs, const Matrix& z,
                             const ClassWeights& w) {
  return ad::weighted_bce(probs, z, Matrix(z.rows(), z.cols(), w.boundary_pos),
                          Matrix(z.rows(), z.cols(), w.boundary_neg));
}

struct LossBreakdown {
  double anchor = 0.0;
  double boundary = 0.0;
  double total = 0.0;
};

// L = L_a + lambda * L_b evaluated on a score grid.
inline LossBreakdown compute_losses(const ScoreGrid& grid, const AnchorLabels& y,
                                    const Matrix& z, const ClassWeights& w,
                                    double lambda) {
  grid.check();
  if (lambda < 0.0) throw ContractError("compute_losses: lambda must be >= 0");
  detail::require_same_shape(grid.anchor_scores, y.targets, "anchor labels");
  if (z.size() != grid.steps()) {
    throw DimensionError("boundary labels length " + std::to_string(z.size()) +
                         " vs T=" + std::to_string(grid.steps()));
  }
  auto [pos, neg] = anchor_loss_weights(y, w);
  LossBreakdown out;
  out.anchor = ad::weighted_bce_value(grid.anchor_scores, y.targets, pos, neg);
  const Matrix b(grid.steps(), 1, grid.boundary);
  out.boundary = ad::weighted_bce_value(
      b, z, Matrix(z.rows(), z.cols(), w.boundary_pos),
      Matrix(z.rows(), z.cols(), w.boundary_neg));
  out.total = out.anchor + lambda * out.boundary;
  return out;
}

struct AnchorSelection {
  AnchorSet anchors;
  double coverage = 0.0;  // fraction of segments matched post hoc
  std::vector<std::string> warnings;
};

// IoU of two segments of the given lengths that share an end point.
inline double aligned_length_iou(int a, int b) {
  const int lo = std::min(a, b);
  const int hi = std::max(a, b);
  if (hi == 0) return 1.0;
  return static_cast<double>(lo) / static_cast<double>(hi);
}

// Fraction of `lengths` that have some anchor with aligned IoU >= 0.5.
inline double anchor_coverage(const std::vector<int>& lengths,
                              const AnchorSet& anchors) {
  if (lengths.empty()) return 1.0;
  std::size_t covered = 0;
  for (int l : lengths) {
    for (int a : anchors.lengths()) {
      if (aligned_length_iou(l, a) >= 0.5) {
        ++covered;
        break;
      }
    }
  }
  return static_cast<double>(covered) / static_cast<double>(lengths.size());
}

// Anchor lengths at the quantiles coverage * k / K (k = 1..K) of the
// training length distribution, using nearest-rank quantiles. Duplicates are
// merged, so fewer than K anchors may come back.
inline AnchorSelection select_anchor_set(std::vector<int> lengths,
                                         std::size_t k, double coverage) {
  if (k < 1) throw ConfigError("select_anchor_set: K must be >= 1");
  if (!(coverage > 0.0 && coverage <= 1.0)) {
    throw ConfigError("select_anchor_set: coverage must be in (0, 1]");
  }
  if (lengths.empty()) {
    throw DataError("select_anchor_set: no training segments");
  }
  std::sort(lengths.begin(), lengths.end());
  const double n = static_cast<double>(lengths.size());
  std::vector<int> chosen;
  for (std::size_t q = 1; q <= k; ++q) {
    const double level = coverage * static_cast<double>(q) /
                         static_cast<double>(k);
    const double rank = std::ceil(level * n - 1e-9);
    const auto idx = static_cast<std::size_t>(
        std::clamp(rank - 1.0, 0.0, n - 1.0));
    chosen.push_back(std::max(1, lengths[idx]));
  }
  std::sort(chosen.begin(), chosen.end());
  chosen.erase(std::unique(chosen.begin(), chosen.end()), chosen.end());

  AnchorSelection sel;
  sel.anchors = AnchorSet(std::move(chosen));
  if (sel.anchors.size() < k) {
    sel.warnings.push_back("only " + std::to_string(sel.anchors.size()) +
                           " distinct anchor lengths available for K=" +
                           std::to_string(k));
  }
  sel.coverage = anchor_coverage(lengths, sel.anchors);
  if (sel.coverage < coverage) {
    sel.warnings.push_back("anchor coverage " + std::to_string(sel.coverage) +
                           " below target " + std::to_string(coverage));
  }
  return sel;
}

}  // namespace cbp
