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

// Independent reference implementations and fixtures shared by the tests.
// None of these call the library routine they are compared against.

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "cbp/cbp.hpp"

namespace cbp {

inline void PrintTo(const Candidate& c, std::ostream* os) {
  *os << "[" << c.start << "," << c.end << "] score " << c.score << " (t=" << c.step
      << ", i=" << c.anchor << ")";
}

}  // namespace cbp

namespace cbp::testing {

namespace fs = std::filesystem;

inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng,
                            double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = dist(rng);
  return m;
}

inline Matrix triple_loop_matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t l = 0; l < a.cols(); ++l) s += a(i, l) * b(l, j);
      out(i, j) = s;
    }
  return out;
}

// Union computed from the outer hull when the intervals touch or overlap.
inline double oracle_iou(double s1, double e1, double s2, double e2) {
  if (s1 == s2 && e1 == e2) return 1.0;
  const double lo = std::max(s1, s2);
  const double hi = std::min(e1, e2);
  if (hi <= lo) return 0.0;
  const double hull = std::max(e1, e2) - std::min(s1, s2);
  return (hi - lo) / hull;
}

inline Matrix oracle_anchor_labels(int gs, int ge, const std::vector<int>& lens,
                                   std::size_t steps, double theta) {
  Matrix y(steps, lens.size());
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t i = 0; i < lens.size(); ++i) {
      const int s = static_cast<int>(t) - lens[i];
      if (s < 0) continue;
      if (oracle_iou(s, static_cast<double>(t), gs, ge) >= theta) y(t, i) = 1.0;
    }
  return y;
}

inline Matrix oracle_fuse(const ScoreGrid& g) {
  Matrix out(g.anchor_scores.rows(), g.anchor_scores.cols());
  const auto& lens = g.anchors.lengths();
  for (std::size_t i = 0; i < lens.size(); ++i)
    for (std::size_t t = 0; t < g.boundary.size(); ++t) {
      const long s = static_cast<long>(t) - lens[i];
      if (s < 0) continue;
      const double bs = g.boundary[static_cast<std::size_t>(s)];
      out(t, i) = g.anchor_scores(t, i) + 0.5 * (bs + g.boundary[t]);
    }
  return out;
}

inline bool oracle_better(const Candidate& a, const Candidate& b) {
  if (a.score > b.score) return true;
  if (a.score < b.score) return false;
  if (a.step != b.step) return a.step < b.step;
  return a.anchor < b.anchor;
}

// Repeated linear scan for the best survivor, then a sweep of suppression.
inline std::vector<Candidate> oracle_nms(std::vector<Candidate> pool,
                                         double threshold) {
  std::vector<Candidate> kept;
  while (!pool.empty()) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < pool.size(); ++j)
      if (oracle_better(pool[j], pool[best])) best = j;
    const Candidate top = pool[best];
    kept.push_back(top);
    std::vector<Candidate> rest;
    for (std::size_t j = 0; j < pool.size(); ++j) {
      if (j == best) continue;
      if (oracle_iou(top.start, top.end, pool[j].start, pool[j].end) <= threshold)
        rest.push_back(pool[j]);
    }
    pool = std::move(rest);
  }
  return kept;
}

// Best valid cell of the fused grid under the ranking tie rule.
inline Candidate oracle_argmax(const ScoreGrid& g) {
  const Matrix fused = oracle_fuse(g);
  Candidate best;
  bool have = false;
  for (std::size_t t = 0; t < g.boundary.size(); ++t)
    for (std::size_t i = 0; i < g.anchors.size(); ++i) {
      const int len = g.anchors.length(i);
      if (static_cast<int>(t) < len) continue;
      Candidate c{static_cast<int>(t) - len, static_cast<int>(t), fused(t, i),
                  g.anchor_scores(t, i), i, t};
      if (!have || oracle_better(c, best)) {
        best = c;
        have = true;
      }
    }
  return best;
}

inline AnchorSet random_anchor_set(Rng& rng, std::size_t max_k, int max_len) {
  std::uniform_int_distribution<std::size_t> kd(1, max_k);
  std::uniform_int_distribution<int> ld(1, max_len);
  std::vector<int> lens;
  const std::size_t k = kd(rng);
  while (lens.size() < k) {
    const int l = ld(rng);
    if (std::find(lens.begin(), lens.end(), l) == lens.end()) lens.push_back(l);
    if (static_cast<int>(lens.size()) == max_len) break;
  }
  std::sort(lens.begin(), lens.end());
  return AnchorSet(lens);
}

// Scores are drawn from a small lattice when `ties` is set so that equal
// scores actually occur.
inline ScoreGrid random_grid(Rng& rng, std::size_t steps, const AnchorSet& a,
                             bool ties = false) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> lattice(0, 4);
  auto draw = [&] { return ties ? lattice(rng) / 4.0 : u(rng); };
  ScoreGrid g;
  g.anchors = a;
  g.anchor_scores = Matrix(steps, a.size());
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t i = 0; i < a.size(); ++i) g.anchor_scores(t, i) = draw();
  g.boundary.resize(steps);
  for (double& b : g.boundary) b = draw();
  return g;
}

inline std::vector<Candidate> random_candidates(Rng& rng, std::size_t n,
                                                int max_t, bool ties) {
  std::uniform_int_distribution<int> td(1, max_t);
  std::uniform_int_distribution<int> lattice(0, 5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Candidate> out;
  for (std::size_t k = 0; k < n; ++k) {
    const int end = td(rng);
    std::uniform_int_distribution<int> ld(1, end);
    const int len = ld(rng);
    const double s = ties ? lattice(rng) / 5.0 : u(rng);
    out.push_back({end - len, end, s, s, k, static_cast<std::size_t>(end)});
  }
  return out;
}

// Pairs whose features carry a bump inside the segment so the model has
// something to fit. Segment lengths are drawn in [2, steps / 2].
inline std::vector<Sample> toy_samples(std::size_t n, std::size_t steps,
                                       std::size_t dv, std::size_t dq, Rng& rng) {
  std::vector<Sample> out;
  std::uniform_int_distribution<int> len(2, static_cast<int>(steps / 2));
  for (std::size_t k = 0; k < n; ++k) {
    Sample s;
    s.video_id = "v" + std::to_string(k);
    s.query_id = "q" + std::to_string(k);
    Matrix f = random_matrix(steps, dv, rng, -0.5, 0.5);
    const int l = len(rng);
    std::uniform_int_distribution<int> start(0, static_cast<int>(steps) - l);
    const int a = start(rng);
    s.segment = {a, a + l - 1};
    for (int t = s.segment.start; t <= s.segment.end; ++t) f(t, k % dv) += 2.0;
    s.features = std::make_shared<const Matrix>(std::move(f));
    s.query = random_matrix(3, dq, rng);
    s.query(1, k % dq) += 2.0;
    s.duration = static_cast<double>(steps - 1);
    s.seconds = {static_cast<double>(s.segment.start),
                 static_cast<double>(s.segment.end)};
    out.push_back(std::move(s));
  }
  return out;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = fs::temp_directory_path() /
            ("cbp_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

inline std::string read_bytes(const fs::path& p) {
  return detail::read_file_bytes(p);
}

}  // namespace cbp::testing
