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

// Temporal IoU, recall at IoU thresholds, mean IoU, and the random anchor
// baseline.

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <map>
#include <ostream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cbp/errors.hpp"
#include "cbp/heads.hpp"

namespace cbp {

struct Interval {
  double start = 0.0;
  double end = 0.0;
  friend bool operator==(const Interval&, const Interval&) = default;
};

// |a n b| / |a u b|. Two identical zero-length intervals have IoU 1.
inline double temporal_iou(const Interval& a, const Interval& b) {
  if (a.start > a.end || b.start > b.end) {
    throw ContractError("temporal_iou: inverted interval");
  }
  const double inter =
      std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
  const double uni = (a.end - a.start) + (b.end - b.start) - inter;
  if (uni <= 0.0) return a == b ? 1.0 : 0.0;
  return inter / uni;
}

struct EvalReport {
  std::vector<int> top_ns;
  std::vector<double> thresholds;
  std::map<std::pair<int, double>, double> recall;  // percent
  double miou = 0.0;                                // percent
  std::size_t num_queries = 0;

  double at(int n, double theta) const { return recall.at({n, theta}); }
};

// Ranked predictions per query id, best first.
using PredictionMap = std::map<std::string, std::vector<Interval>>;
using GroundTruthMap = std::map<std::string, Interval>;

// R@N,theta = percent of queries whose top-N predictions contain one with
// IoU >= theta. mIoU uses the top-1 prediction; queries without predictions
// count as IoU 0.
inline EvalReport evaluate(const PredictionMap& predictions,
                           const GroundTruthMap& ground_truth,
                           const std::vector<int>& top_ns,
                           const std::vector<double>& thresholds) {
  std::string missing;
  for (const auto& [id, _] : ground_truth)
    if (!predictions.contains(id)) missing += (missing.empty() ? "" : ", ") + id;
  std::string extra;
  for (const auto& [id, _] : predictions)
    if (!ground_truth.contains(id)) extra += (extra.empty() ? "" : ", ") + id;
  if (!missing.empty() || !extra.empty()) {
    std::string msg = "evaluate: query sets differ;";
    if (!missing.empty()) msg += " missing predictions for: " + missing + ";";
    if (!extra.empty()) msg += " no ground truth for: " + extra + ";";
    throw DataError(msg);
  }
  for (int n : top_ns)
    if (n < 1) throw ConfigError("evaluate: top-N must be >= 1");

  EvalReport report;
  report.top_ns = top_ns;
  report.thresholds = thresholds;
  report.num_queries = ground_truth.size();
  std::map<std::pair<int, double>, std::size_t> hits;
  for (int n : top_ns)
    for (double th : thresholds) hits[{n, th}] = 0;
  double iou_sum = 0.0;
  for (const auto& [id, gt] : ground_truth) {
    const auto& ranked = predictions.at(id);
    std::vector<double> ious;
    ious.reserve(ranked.size());
    for (const auto& p : ranked) ious.push_back(temporal_iou(p, gt));
    if (!ious.empty()) iou_sum += ious.front();
    for (int n : top_ns) {
      const std::size_t upto = std::min<std::size_t>(ious.size(), n);
      const double best =
          upto == 0 ? -1.0
                    : *std::max_element(ious.begin(),
                                        ious.begin() +
                                            static_cast<std::ptrdiff_t>(upto));
      for (double th : thresholds)
        if (best >= th) ++hits[{n, th}];
    }
  }
  const double denom = static_cast<double>(report.num_queries);
  for (const auto& [key, count] : hits) {
    report.recall[key] =
        denom > 0 ? 100.0 * static_cast<double>(count) / denom : 0.0;
  }
  report.miou = denom > 0 ? 100.0 * iou_sum / denom : 0.0;
  return report;
}

namespace detail {

inline std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

// Columns ordered by N ascending, then threshold descending.
inline std::vector<std::pair<int, double>> report_columns(const EvalReport& r) {
  std::vector<int> ns = r.top_ns;
  std::sort(ns.begin(), ns.end());
  std::vector<double> ths = r.thresholds;
  std::sort(ths.rbegin(), ths.rend());
  std::vector<std::pair<int, double>> cols;
  for (int n : ns)
    for (double th : ths) cols.emplace_back(n, th);
  return cols;
}

inline std::string theta_label(double th) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", th);
  return buf;
}

}  // namespace detail

// Aligned text table with one row for `method`.
inline void write_report_table(std::ostream& os, const EvalReport& r,
                               const std::string& method = "CBP") {
  const auto cols = detail::report_columns(r);
  const std::size_t name_w = std::max<std::size_t>(method.size(), 6);
  auto pad = [](std::string s, std::size_t w) {
    if (s.size() < w) s.insert(0, w - s.size(), ' ');
    return s;
  };
  std::string h1 = std::string(name_w, ' ');
  std::string h2 = std::string(name_w, ' ');
  h1.replace(0, 6, "Method");
  for (const auto& [n, th] : cols) {
    h1 += pad("R@" + std::to_string(n), 10);
    h2 += pad("IoU=" + detail::theta_label(th), 10);
  }
  h1 += pad("mIoU", 10);
  os << h1 << '\n' << h2 << '\n';
  std::string line = method + std::string(name_w - method.size(), ' ');
  for (const auto& key : cols) line += pad(detail::fixed2(r.recall.at(key)), 10);
  line += pad(detail::fixed2(r.miou), 10);
  os << line << '\n';
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [n, th] : detail::report_columns(r)) {
    rows.push_back({{"metric", "recall"},
                    {"top_n", n},
                    {"iou", th},
                    {"value", r.recall.at({n, th})}});
  }
  return {{"num_queries", r.num_queries}, {"miou", r.miou}, {"recall", rows}};
}

inline void write_report_csv(std::ostream& os, const EvalReport& r) {
  os << "metric,top_n,iou,value\n";
  for (const auto& [n, th] : detail::report_columns(r)) {
    os << "recall," << n << ',' << detail::theta_label(th) << ','
       << detail::fixed2(r.recall.at({n, th})) << '\n';
  }
  os << "miou,,," << detail::fixed2(r.miou) << '\n';
}

// Anchor scores i.i.d. uniform(0, 1) on valid cells, 0 elsewhere; boundary
// scores all 0.
inline ScoreGrid random_anchor_baseline(const AnchorSet& anchors,
                                        std::size_t steps,
                                        std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  ScoreGrid grid;
  grid.anchors = anchors;
  grid.anchor_scores = Matrix(steps, anchors.size());
  grid.boundary.assign(steps, 0.0);
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t i = 0; i < anchors.size(); ++i)
      if (anchors.valid(t, i)) grid.anchor_scores(t, i) = dist(rng);
  return grid;
}

}  // namespace cbp
