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

// Ten-query evaluation fixture. Every ground truth is [0, 10] seconds, so the
// IoU of a prediction [0, x] is x / 10. Expected values were tallied by hand:
//
//   query  top-1 IoU  best IoU in top 5
//   q0     1.0        1.0
//   q1     0.8        0.8
//   q2     0.6        0.6
//   q3     0.4        0.9   (rank 2)
//   q4     0.2        0.7   (rank 3)
//   q5     0.0        0.5   (rank 5)
//   q6     0.3        0.3   (ties the 0.3 threshold)
//   q7     none       none
//   q8     0.7        0.7   (ties the 0.7 threshold)
//   q9     1/3        1/3   (exact hit only at rank 6)
//
//   R@1: 70.00 / 40.00 / 30.00 at IoU 0.3 / 0.5 / 0.7
//   R@5: 90.00 / 70.00 / 50.00
//   mIoU: (1 + .8 + .6 + .4 + .2 + 0 + .3 + 0 + .7 + 1/3) / 10 = 43.33

#pragma once

#include <map>
#include <string>
#include <utility>

#include "cbp/metrics.hpp"

namespace cbp::testing {

struct MetricFixture {
  PredictionMap predictions;
  GroundTruthMap truth;
  std::map<std::pair<int, double>, std::string> recall;
  std::string miou;
};

inline MetricFixture ten_query_fixture() {
  MetricFixture f;
  const Interval miss{20, 30};
  f.predictions = {
      {"q0", {{0, 10}}},
      {"q1", {{0, 8}, miss}},
      {"q2", {{0, 6}}},
      {"q3", {{0, 4}, {0, 9}}},
      {"q4", {{0, 2}, miss, {0, 7}}},
      {"q5", {miss, {25, 35}, {40, 50}, {60, 70}, {0, 5}}},
      {"q6", {{0, 3}}},
      {"q7", {}},
      {"q8", {{0, 7}, {0, 3}}},
      {"q9", {{5, 15}, miss, miss, miss, miss, {0, 10}}},
  };
  for (const auto& [id, _] : f.predictions) f.truth[id] = {0, 10};
  f.recall = {{{1, 0.3}, "70.00"}, {{1, 0.5}, "40.00"}, {{1, 0.7}, "30.00"},
              {{5, 0.3}, "90.00"}, {{5, 0.5}, "70.00"}, {{5, 0.7}, "50.00"}};
  f.miou = "43.33";
  return f;
}

}  // namespace cbp::testing
