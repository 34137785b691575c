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

// Dataset files: binary feature sequences, line-delimited JSON manifests,
// GloVe-style text embeddings, and a planted-motif synthetic generator.
//
// Feature file (.cbpf), all integers little-endian:
//   bytes 0..3   magic "CBPF"
//   bytes 4..7   uint32 format version (1)
//   bytes 8..11  uint32 T (number of steps)
//   bytes 12..15 uint32 Dv (feature dimension)
//   then T * Dv IEEE-754 float32 values, row-major.
//
// Manifest (.jsonl), one object per line:
//   {"kind":"dataset","split":"train","embeddings":"embeddings.txt"}
//   {"kind":"video","video_id":"v0","features":"features/v0.cbpf",
//    "duration":31.5,"T":64}
//   {"kind":"query","query_id":"q0","video_id":"v0","tokens":["a","b"],
//    "start":2.5,"end":9.0}
// The dataset line comes first. Paths are relative to the manifest.
//
// Embeddings: one token per line followed by its space-separated values.

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbp/errors.hpp"
#include "cbp/metrics.hpp"
#include "cbp/numerics.hpp"
#include "cbp/supervision.hpp"

namespace cbp {

namespace fs = std::filesystem;

inline constexpr std::array<char, 4> kFeatureMagic = {'C', 'B', 'P', 'F'};
inline constexpr std::uint32_t kFeatureVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 16;

// Environment variable consulted when a relative dataset path does not exist.
inline constexpr const char* kDataRootEnv = "CBP_DATA_ROOT";

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::string read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

// Values are stored as float32; the written matrix is the float-rounded one.
inline void write_features(const fs::path& path, const Matrix& features) {
  std::string out(kFeatureMagic.begin(), kFeatureMagic.end());
  detail::put_u32(out, kFeatureVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(features.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(features.cols()));
  for (double v : features.data()) {
    detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

inline Matrix read_features(const fs::path& path) {
  const std::string bytes = detail::read_file_bytes(path);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < kFeatureHeaderBytes) {
    throw DataError(path.string() + ": truncated header, expected " +
                    std::to_string(kFeatureHeaderBytes) + " bytes, found " +
                    std::to_string(bytes.size()));
  }
  if (!std::equal(kFeatureMagic.begin(), kFeatureMagic.end(), bytes.begin())) {
    throw DataError(path.string() + ": bad magic");
  }
  const std::uint32_t version = detail::get_u32(p + 4);
  if (version != kFeatureVersion) {
    throw DataError(path.string() + ": unsupported feature version " +
                    std::to_string(version));
  }
  const std::size_t steps = detail::get_u32(p + 8);
  const std::size_t dim = detail::get_u32(p + 12);
  const std::size_t expected = kFeatureHeaderBytes + 4 * steps * dim;
  if (bytes.size() != expected) {
    throw DataError(path.string() + ": expected " + std::to_string(expected) +
                    " bytes, found " + std::to_string(bytes.size()));
  }
  Matrix m(steps, dim);
  for (std::size_t k = 0; k < steps * dim; ++k) {
    const float f =
        std::bit_cast<float>(detail::get_u32(p + kFeatureHeaderBytes + 4 * k));
    if (!std::isfinite(f)) {
      throw DataError(path.string() + ": non-finite value at step " +
                      std::to_string(k / std::max<std::size_t>(dim, 1)));
    }
    m[k] = static_cast<double>(f);
  }
  return m;
}

// ---------------------------------------------------------------------------

class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  explicit EmbeddingTable(std::size_t dim) : dim_(dim) {}

  void add(const std::string& token, std::vector<double> v) {
    if (dim_ == 0) dim_ = v.size();
    if (v.size() != dim_) {
      throw DataError("embedding for '" + token + "' has " +
                      std::to_string(v.size()) + " values, expected " +
                      std::to_string(dim_));
    }
    table_[token] = std::move(v);
  }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return table_.size(); }
  bool contains(const std::string& token) const {
    return table_.contains(token);
  }

  // N x D; out-of-vocabulary tokens become zero rows and are recorded in
  // `oov` when given.
  Matrix embed(const std::vector<std::string>& tokens,
               std::set<std::string>* oov = nullptr) const {
    Matrix out(tokens.size(), dim_);
    for (std::size_t j = 0; j < tokens.size(); ++j) {
      const auto it = table_.find(tokens[j]);
      if (it == table_.end()) {
        if (oov) oov->insert(tokens[j]);
        continue;
      }
      std::copy(it->second.begin(), it->second.end(), out.row(j).begin());
    }
    return out;
  }

  const std::map<std::string, std::vector<double>>& entries() const {
    return table_;
  }

 private:
  std::size_t dim_ = 0;
  std::map<std::string, std::vector<double>> table_;
};

inline EmbeddingTable read_embeddings(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open embeddings " + path.string());
  EmbeddingTable table;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::string token;
    if (!(ss >> token)) continue;
    std::vector<double> v;
    std::string num;
    while (ss >> num) {
      char* end = nullptr;
      const double d = std::strtod(num.c_str(), &end);
      if (end == num.c_str() || *end != '\0' || !std::isfinite(d)) {
        throw DataError(path.string() + " line " + std::to_string(line_no) +
                        ": bad value '" + num + "'");
      }
      v.push_back(d);
    }
    if (v.empty()) {
      throw DataError(path.string() + " line " + std::to_string(line_no) +
                      ": token without values");
    }
    table.add(token, std::move(v));
  }
  return table;
}

inline void write_embeddings(const fs::path& path, const EmbeddingTable& table) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(17);
  for (const auto& [token, v] : table.entries()) {
    out << token;
    for (double x : v) out << ' ' << x;
    out << '\n';
  }
}

// ---------------------------------------------------------------------------

struct VideoEntry {
  std::string video_id;
  std::string features;  // relative to the manifest
  double duration = 0.0;
  std::size_t steps = 0;
};

struct QueryEntry {
  std::string query_id;
  std::string video_id;
  std::vector<std::string> tokens;
  double start = 0.0;
  double end = 0.0;
};

struct DatasetManifest {
  std::string split;
  std::string embeddings;  // relative to the manifest
  std::vector<VideoEntry> videos;
  std::vector<QueryEntry> queries;
  fs::path root;  // directory of the manifest file

  const VideoEntry& video(const std::string& id) const {
    for (const auto& v : videos)
      if (v.video_id == id) return v;
    throw DataError("unknown video id " + id);
  }
};

inline nlohmann::json to_json(const VideoEntry& v) {
  return {{"kind", "video"},
          {"video_id", v.video_id},
          {"features", v.features},
          {"duration", v.duration},
          {"T", v.steps}};
}

inline nlohmann::json to_json(const QueryEntry& q) {
  return {{"kind", "query"}, {"query_id", q.query_id},
          {"video_id", q.video_id}, {"tokens", q.tokens},
          {"start", q.start},     {"end", q.end}};
}

inline void write_manifest(const fs::path& path, const DatasetManifest& m) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << nlohmann::json{{"kind", "dataset"},
                        {"split", m.split},
                        {"embeddings", m.embeddings}}
             .dump()
      << '\n';
  for (const auto& v : m.videos) out << to_json(v).dump() << '\n';
  for (const auto& q : m.queries) out << to_json(q).dump() << '\n';
}

// Resolves a dataset path, falling back to $CBP_DATA_ROOT for relative paths
// that do not exist as given.
inline fs::path resolve_dataset_path(const fs::path& path) {
  if (path.is_relative() && !fs::exists(path)) {
    if (const char* root = std::getenv(kDataRootEnv)) {
      const fs::path alt = fs::path(root) / path;
      if (fs::exists(alt)) return alt;
    }
  }
  return path;
}

// Parses and validates the manifest. Feature files are not opened here.
inline DatasetManifest read_manifest(const fs::path& given) {
  const fs::path path = resolve_dataset_path(given);
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + given.string());
  DatasetManifest m;
  m.root = path.parent_path();
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  std::set<std::string> query_ids;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + " line " + std::to_string(line_no);
    try {
      const auto j = nlohmann::json::parse(line);
      const auto kind = j.at("kind").get<std::string>();
      if (kind == "dataset") {
        m.split = j.at("split").get<std::string>();
        m.embeddings = j.value("embeddings", std::string());
        have_header = true;
      } else if (kind == "video") {
        VideoEntry v{j.at("video_id").get<std::string>(),
                     j.at("features").get<std::string>(),
                     j.at("duration").get<double>(),
                     j.at("T").get<std::size_t>()};
        if (v.steps < 1) throw DataError(where + ": video " + v.video_id + " has T < 1");
        if (!(v.duration >= 0.0)) {
          throw DataError(where + ": video " + v.video_id + " has negative duration");
        }
        m.videos.push_back(std::move(v));
      } else if (kind == "query") {
        QueryEntry q{j.at("query_id").get<std::string>(),
                     j.at("video_id").get<std::string>(),
                     j.at("tokens").get<std::vector<std::string>>(),
                     j.at("start").get<double>(), j.at("end").get<double>()};
        if (!query_ids.insert(q.query_id).second) {
          throw DataError(where + ": duplicate query id " + q.query_id);
        }
        m.queries.push_back(std::move(q));
      } else {
        throw DataError(where + ": unknown record kind '" + kind + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  if (!have_header) throw DataError(path.string() + ": missing dataset record");
  std::map<std::string, const VideoEntry*> by_id;
  for (const auto& v : m.videos) {
    if (!by_id.emplace(v.video_id, &v).second) {
      throw DataError(path.string() + ": duplicate video id " + v.video_id);
    }
  }
  for (const auto& q : m.queries) {
    const auto it = by_id.find(q.video_id);
    if (it == by_id.end()) {
      throw DataError("query " + q.query_id + ": unknown video id " + q.video_id);
    }
    if (q.tokens.empty()) throw DataError("query " + q.query_id + ": no tokens");
    if (!(q.start >= 0.0 && q.start <= q.end && q.end <= it->second->duration)) {
      throw DataError("query " + q.query_id + ": annotation [" +
                      std::to_string(q.start) + ", " + std::to_string(q.end) +
                      "] outside video duration " +
                      std::to_string(it->second->duration));
    }
  }
  return m;
}

// Manifest plus lazily loaded, validated feature matrices.
class Dataset {
 public:
  explicit Dataset(DatasetManifest manifest) : manifest_(std::move(manifest)) {}

  static Dataset load(const fs::path& manifest_path) {
    return Dataset(read_manifest(manifest_path));
  }

  const DatasetManifest& manifest() const { return manifest_; }

  // Loads on first access; checks T, Dv consistency and finiteness.
  const Matrix& features(const std::string& video_id) const {
    const auto it = cache_.find(video_id);
    if (it != cache_.end()) return *it->second;
    const VideoEntry& v = manifest_.video(video_id);
    auto m = std::make_shared<Matrix>(read_features(manifest_.root / v.features));
    if (m->rows() != v.steps) {
      throw DataError("video " + video_id + ": feature file has T=" +
                      std::to_string(m->rows()) + ", manifest says " +
                      std::to_string(v.steps));
    }
    if (feature_dim_ == 0) feature_dim_ = m->cols();
    if (m->cols() != feature_dim_) {
      throw DataError("video " + video_id + ": feature dimension " +
                      std::to_string(m->cols()) + " vs " +
                      std::to_string(feature_dim_));
    }
    return *cache_.emplace(video_id, std::move(m)).first->second;
  }

  std::size_t feature_dim() const {
    if (feature_dim_ == 0 && !manifest_.videos.empty())
      features(manifest_.videos.front().video_id);
    return feature_dim_;
  }

  void preload() const {
    for (const auto& v : manifest_.videos) features(v.video_id);
  }

  EmbeddingTable embeddings() const {
    if (manifest_.embeddings.empty()) {
      throw DataError("manifest names no embeddings file");
    }
    return read_embeddings(manifest_.root / manifest_.embeddings);
  }

 private:
  DatasetManifest manifest_;
  mutable std::map<std::string, std::shared_ptr<const Matrix>> cache_;
  mutable std::size_t feature_dim_ = 0;
};

// One (video, query) pair ready for the model.
struct Sample {
  std::string video_id;
  std::string query_id;
  std::shared_ptr<const Matrix> features;  // T x Dv
  Matrix query;                            // N x Dq
  IndexSegment segment;                    // discretized ground truth
  Interval seconds;                        // annotated ground truth
  double duration = 0.0;

  std::size_t steps() const { return features->rows(); }
};

// Materializes every query of the dataset. OOV tokens map to zero vectors
// and are listed in `oov`.
inline std::vector<Sample> make_samples(const Dataset& data,
                                        const EmbeddingTable& embeddings,
                                        std::set<std::string>* oov = nullptr) {
  std::vector<Sample> out;
  out.reserve(data.manifest().queries.size());
  std::map<std::string, std::shared_ptr<const Matrix>> shared;
  for (const auto& q : data.manifest().queries) {
    const VideoEntry& v = data.manifest().video(q.video_id);
    auto& feats = shared[v.video_id];
    if (!feats) feats = std::make_shared<const Matrix>(data.features(v.video_id));
    Sample s;
    s.video_id = q.video_id;
    s.query_id = q.query_id;
    s.features = feats;
    s.query = embeddings.embed(q.tokens, oov);
    s.segment = discretize_segment(q.start, q.end, v.duration, v.steps,
                                   "query " + q.query_id);
    s.seconds = {q.start, q.end};
    s.duration = v.duration;
    out.push_back(std::move(s));
  }
  return out;
}

inline GroundTruthMap ground_truth(const DatasetManifest& m) {
  GroundTruthMap out;
  for (const auto& q : m.queries) out[q.query_id] = {q.start, q.end};
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic planted-motif datasets.

struct SynthConfig {
  std::size_t train_queries = 200;
  std::size_t test_queries = 50;
  std::size_t val_queries = 0;
  std::size_t steps = 64;
  std::size_t feature_dim = 16;
  std::size_t embed_dim = 8;
  std::size_t num_classes = 8;       // distinct (query pattern, motif) pairs
  std::size_t filler_words = 6;      // tokens shared by all classes
  std::size_t motifs_per_video = 2;  // each planted motif gets one query
  int min_length = 6;                // segment length in steps
  int max_length = 24;
  double snr = 8.0;                  // motif RMS over noise std; inf = no noise
  double step_seconds = 0.5;
  std::uint64_t seed = 1;
};

inline nlohmann::json to_json(const SynthConfig& c) {
  return {{"train_queries", c.train_queries}, {"test_queries", c.test_queries},
          {"val_queries", c.val_queries},     {"steps", c.steps},
          {"feature_dim", c.feature_dim},     {"embed_dim", c.embed_dim},
          {"num_classes", c.num_classes},     {"filler_words", c.filler_words},
          {"motifs_per_video", c.motifs_per_video},
          {"min_length", c.min_length},       {"max_length", c.max_length},
          {"snr", std::isfinite(c.snr) ? nlohmann::json(c.snr)
                                       : nlohmann::json("inf")},
          {"step_seconds", c.step_seconds},   {"seed", c.seed}};
}

// What the generator planted, for oracles and tests.
struct SynthTruth {
  Matrix motifs;  // num_classes x Dv, unit RMS per row
  std::map<std::string, std::size_t> query_class;
  std::map<std::string, std::size_t> token_class;
};

namespace detail {

inline std::string class_word(std::size_t c) { return "act" + std::to_string(c); }
inline std::string filler_word(std::size_t f) { return "w" + std::to_string(f); }

}  // namespace detail

// Writes embeddings.txt, train.jsonl, test.jsonl (and val.jsonl when
// requested) plus features/*.cbpf under `dir`. Fully determined by the seed.
inline SynthTruth generate_synthetic(const SynthConfig& cfg, const fs::path& dir) {
  const std::size_t per_video = std::max<std::size_t>(cfg.motifs_per_video, 1);
  if (cfg.min_length < 1 || cfg.max_length < cfg.min_length) {
    throw ConfigError("synthetic: need 1 <= min_length <= max_length");
  }
  if (static_cast<std::size_t>(cfg.max_length + 1) * per_video + per_video >
      cfg.steps) {
    throw ConfigError("synthetic: T=" + std::to_string(cfg.steps) +
                      " too small for " + std::to_string(per_video) +
                      " segments of length up to " +
                      std::to_string(cfg.max_length));
  }
  if (cfg.num_classes < per_video) {
    throw ConfigError("synthetic: need at least motifs_per_video classes");
  }
  if (cfg.feature_dim == 0 || cfg.embed_dim == 0) {
    throw ConfigError("synthetic: dimensions must be positive");
  }

  Rng rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  SynthTruth truth;

  // Motif directions with unit RMS per dimension.
  truth.motifs = Matrix(cfg.num_classes, cfg.feature_dim);
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    double ss = 0.0;
    for (double& v : truth.motifs.row(c)) {
      v = normal(rng);
      ss += v * v;
    }
    const double rms = std::sqrt(ss / static_cast<double>(cfg.feature_dim));
    for (double& v : truth.motifs.row(c)) v /= rms;
  }

  EmbeddingTable table(cfg.embed_dim);
  auto random_vec = [&] {
    std::vector<double> v(cfg.embed_dim);
    for (double& x : v) x = normal(rng);
    return v;
  };
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    table.add(detail::class_word(c), random_vec());
    truth.token_class[detail::class_word(c)] = c;
  }
  for (std::size_t f = 0; f < cfg.filler_words; ++f) {
    table.add(detail::filler_word(f), random_vec());
  }
  write_embeddings(dir / "embeddings.txt", table);

  const double noise_std = std::isfinite(cfg.snr) && cfg.snr > 0.0 ? 1.0 / cfg.snr
                           : std::isfinite(cfg.snr)                ? 1.0
                                                                   : 0.0;
  const double duration =
      static_cast<double>(cfg.steps - 1) * cfg.step_seconds;

  std::uniform_int_distribution<int> length_dist(cfg.min_length, cfg.max_length);
  std::size_t video_counter = 0;

  auto make_split = [&](const std::string& split, std::size_t num_queries) {
    DatasetManifest m;
    m.split = split;
    m.embeddings = "embeddings.txt";
    std::size_t made = 0;
    while (made < num_queries) {
      const std::size_t here = std::min(per_video, num_queries - made);
      const std::string vid = split + "_v" + std::to_string(video_counter++);

      // Distinct classes for the motifs of this video.
      std::vector<std::size_t> classes(cfg.num_classes);
      for (std::size_t c = 0; c < cfg.num_classes; ++c) classes[c] = c;
      std::shuffle(classes.begin(), classes.end(), rng);
      classes.resize(here);

      // Non-overlapping placements: lay segments out left to right with
      // random gaps drawn from the remaining slack.
      std::vector<int> lengths(here);
      int used = 0;
      for (auto& l : lengths) {
        l = length_dist(rng);
        used += l + 1;
      }
      const int slack = static_cast<int>(cfg.steps) - used -
                        static_cast<int>(here - 1);
      std::vector<int> cuts(here + 1);
      std::uniform_int_distribution<int> cut_dist(0, std::max(slack, 0));
      for (auto& c : cuts) c = cut_dist(rng);
      std::sort(cuts.begin(), cuts.end());
      std::vector<std::size_t> order(here);
      for (std::size_t k = 0; k < here; ++k) order[k] = k;
      std::shuffle(order.begin(), order.end(), rng);

      Matrix feats(cfg.steps, cfg.feature_dim);
      for (double& v : feats.data()) v = noise_std * normal(rng);

      int cursor = 0;
      int prev_cut = 0;
      for (std::size_t k = 0; k < here; ++k) {
        const std::size_t slot = order[k];
        cursor += cuts[k] - prev_cut;
        prev_cut = cuts[k];
        const int start = cursor;
        const int end = start + lengths[slot];
        cursor = end + 2;
        const std::size_t cls = classes[slot];
        for (int t = start; t <= end; ++t)
          for (std::size_t d = 0; d < cfg.feature_dim; ++d)
            feats(static_cast<std::size_t>(t), d) += truth.motifs(cls, d);

        QueryEntry q;
        q.query_id = split + "_q" + std::to_string(m.queries.size());
        q.video_id = vid;
        std::uniform_int_distribution<std::size_t> filler(
            0, std::max<std::size_t>(cfg.filler_words, 1) - 1);
        if (cfg.filler_words > 0) q.tokens.push_back(detail::filler_word(filler(rng)));
        q.tokens.push_back(detail::class_word(cls));
        if (cfg.filler_words > 0) q.tokens.push_back(detail::filler_word(filler(rng)));
        q.start = static_cast<double>(start) * cfg.step_seconds;
        q.end = static_cast<double>(end) * cfg.step_seconds;
        truth.query_class[q.query_id] = cls;
        m.queries.push_back(std::move(q));
      }
      VideoEntry v{vid, "features/" + vid + ".cbpf", duration, cfg.steps};
      write_features(dir / v.features, feats);
      m.videos.push_back(std::move(v));
      made += here;
    }
    write_manifest(dir / (split + ".jsonl"), m);
  };

  fs::create_directories(dir);
  make_split("train", cfg.train_queries);
  make_split("test", cfg.test_queries);
  if (cfg.val_queries > 0) make_split("val", cfg.val_queries);
  return truth;
}

}  // namespace cbp
