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

// Training configuration, Adam with global-norm clipping, the epoch loop,
// batch inference helpers, and versioned checkpoints.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "cbp/dataio.hpp"
#include "cbp/errors.hpp"
#include "cbp/inference.hpp"
#include "cbp/metrics.hpp"
#include "cbp/model.hpp"
#include "cbp/supervision.hpp"

namespace cbp {

struct TrainConfig {
  std::size_t hidden_size = 512;
  std::size_t attention_size = 0;  // 0 means hidden_size
  std::size_t context_size = 0;    // 0 means hidden_size
  bool use_context = true;
  std::size_t num_anchors = 32;
  std::vector<int> anchors;  // empty: select from training lengths
  double anchor_coverage = 0.95;
  double iou_threshold = 0.5;
  double lambda = 1.0;
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::size_t epochs = 50;
  double clip_norm = 5.0;
  std::optional<std::uint64_t> seed;
  double nms_threshold = 0.3;
  std::size_t top_m = 100;
  int tol_radius = 0;
  std::size_t workers = 1;
  std::size_t eval_every = 1;  // epochs between validation passes

  std::uint64_t require_seed() const {
    if (!seed) throw ConfigError("a seed is required (config key 'seed' or --seed)");
    return *seed;
  }

  void validate() const {
    require_seed();
    if (hidden_size == 0) throw ConfigError("hidden_size must be positive");
    if (num_anchors == 0 && anchors.empty()) {
      throw ConfigError("num_anchors must be positive");
    }
    if (!(anchor_coverage > 0.0 && anchor_coverage <= 1.0)) {
      throw ConfigError("anchor_coverage must be in (0, 1]");
    }
    if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) {
      throw ConfigError("iou_threshold must be in (0, 1]");
    }
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be > 0");
    if (!(nms_threshold >= 0.0 && nms_threshold <= 1.0)) {
      throw ConfigError("nms_threshold must be in [0, 1]");
    }
    if (top_m == 0) throw ConfigError("top_m must be positive");
    if (tol_radius < 0) throw ConfigError("tol_radius must be >= 0");
    if (workers == 0) throw ConfigError("workers must be positive");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j = {{"hidden_size", c.hidden_size},
                      {"attention_size", c.attention_size},
                      {"context_size", c.context_size},
                      {"use_context", c.use_context},
                      {"num_anchors", c.num_anchors},
                      {"anchors", c.anchors},
                      {"anchor_coverage", c.anchor_coverage},
                      {"iou_threshold", c.iou_threshold},
                      {"lambda", c.lambda},
                      {"learning_rate", c.learning_rate},
                      {"batch_size", c.batch_size},
                      {"epochs", c.epochs},
                      {"clip_norm", c.clip_norm},
                      {"nms_threshold", c.nms_threshold},
                      {"top_m", c.top_m},
                      {"tol_radius", c.tol_radius},
                      {"workers", c.workers},
                      {"eval_every", c.eval_every}};
  j["seed"] = c.seed ? nlohmann::json(*c.seed) : nlohmann::json(nullptr);
  return j;
}

// Unknown keys are rejected so typos do not silently fall back to defaults.
inline TrainConfig train_config_from_json(const nlohmann::json& j,
                                          TrainConfig c = {}) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "hidden_size") c.hidden_size = v.get<std::size_t>();
      else if (key == "attention_size") c.attention_size = v.get<std::size_t>();
      else if (key == "context_size") c.context_size = v.get<std::size_t>();
      else if (key == "use_context") c.use_context = v.get<bool>();
      else if (key == "num_anchors") c.num_anchors = v.get<std::size_t>();
      else if (key == "anchors") c.anchors = v.get<std::vector<int>>();
      else if (key == "anchor_coverage") c.anchor_coverage = v.get<double>();
      else if (key == "iou_threshold") c.iou_threshold = v.get<double>();
      else if (key == "lambda") c.lambda = v.get<double>();
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "clip_norm") c.clip_norm = v.get<double>();
      else if (key == "seed") {
        if (v.is_null()) c.seed.reset();
        else c.seed = v.get<std::uint64_t>();
      } else if (key == "nms_threshold") c.nms_threshold = v.get<double>();
      else if (key == "top_m") c.top_m = v.get<std::size_t>();
      else if (key == "tol_radius") c.tol_radius = v.get<int>();
      else if (key == "workers") c.workers = v.get<std::size_t>();
      else if (key == "eval_every") c.eval_every = v.get<std::size_t>();
      else throw ConfigError("unknown config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

inline TrainConfig read_train_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return train_config_from_json(j);
}

// ---------------------------------------------------------------------------

struct AdamState {
  GradTable first;
  GradTable second;
  std::uint64_t step = 0;
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

inline void adam_update(ParamStore& params, const GradTable& grads,
                        AdamState& state, const AdamOptions& opt) {
  if (state.first.empty()) {
    state.first = zero_grads(params);
    state.second = zero_grads(params);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  for (std::size_t p = 0; p < params.size(); ++p) {
    Matrix& w = params.value(static_cast<int>(p));
    const Matrix& g = grads[p];
    Matrix& m = state.first[p];
    Matrix& v = state.second[p];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * g[k];
      v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * g[k] * g[k];
      w[k] -= opt.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + opt.epsilon);
    }
  }
}

inline double global_norm(const GradTable& grads) {
  double ss = 0.0;
  for (const auto& g : grads)
    for (double v : g.data()) ss += v * v;
  return std::sqrt(ss);
}

// Rescales to `max_norm` when the global norm exceeds it. Returns the norm
// before clipping.
inline double clip_global_norm(GradTable& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads)
      for (double& v : g.data()) v *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------

// Labels for one training pair.
struct SampleLabels {
  AnchorLabels anchor;
  Matrix boundary;
};

inline SampleLabels build_labels(const Sample& s, const AnchorSet& anchors,
                                 double theta, int tol_radius) {
  return {build_anchor_labels(s.segment, anchors, s.steps(), theta),
          build_boundary_labels(s.segment, s.steps(), tol_radius)};
}

struct SampleLoss {
  double anchor = 0.0;
  double boundary = 0.0;
  double total = 0.0;
};

// Records L = L_a + lambda * L_b for one pair on `tape` and returns the loss
// node scaled by `scale`.
inline ad::Var sample_loss(ad::Tape& tape, const CbpModel& model,
                           const ParamStore& params, const Sample& s,
                           const SampleLabels& labels, const ClassWeights& w,
                           double lambda, double scale, SampleLoss* parts) {
  const ForwardPass fp = model.forward(tape, params, *s.features, s.query);
  const ad::Var la = anchor_loss(fp.heads.anchor, labels.anchor, w);
  ad::Var total = la;
  double lb_value = 0.0;
  if (lambda != 0.0) {
    const ad::Var lb = boundary_loss(fp.heads.boundary, labels.boundary, w);
    lb_value = lb.item();
    total = ad::add(la, ad::scale(lb, lambda));
  } else {
    lb_value = ad::weighted_bce_value(
        fp.heads.boundary.value(), labels.boundary,
        Matrix(labels.boundary.rows(), 1, w.boundary_pos),
        Matrix(labels.boundary.rows(), 1, w.boundary_neg));
  }
  if (parts) *parts = {la.item(), lb_value, total.item()};
  return scale == 1.0 ? total : ad::scale(total, scale);
}

struct EpochLog {
  std::size_t epoch = 0;  // 1-based, cumulative across resumes
  double anchor_loss = 0.0;
  double boundary_loss = 0.0;
  double loss = 0.0;
  double max_grad_norm = 0.0;
  std::optional<double> val_r1_07;
};

inline nlohmann::json to_json(const EpochLog& e) {
  nlohmann::json j = {{"epoch", e.epoch},
                      {"anchor_loss", e.anchor_loss},
                      {"boundary_loss", e.boundary_loss},
                      {"loss", e.loss},
                      {"max_grad_norm", e.max_grad_norm}};
  if (e.val_r1_07) j["val_r1_iou0.7"] = *e.val_r1_07;
  return j;
}

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  TrainConfig config;
  CbpModel model;
  AdamState optimizer;
  ClassWeights weights;
  std::size_t epoch = 0;
};

// Score grids and ranked results for every sample.
struct InferenceOutput {
  std::vector<ScoreGridRecord> grids;
  std::vector<ResultRecord> results;
  PredictionMap predictions;
};

inline PredictOptions predict_options(const TrainConfig& c, std::size_t top_n) {
  return {std::max(c.top_m, top_n), c.nms_threshold, top_n};
}

inline InferenceOutput run_inference(const CbpModel& model,
                                     const std::vector<Sample>& samples,
                                     const PredictOptions& opts) {
  InferenceOutput out;
  for (const Sample& s : samples) {
    ScoreGridRecord rec{s.video_id, s.query_id, s.duration,
                        model.score(*s.features, s.query)};
    const GroundingResult res = predict_segments(rec.grid, opts);
    auto recs = to_records(res, s.video_id, s.query_id, s.duration, s.steps());
    auto& preds = out.predictions[s.query_id];
    for (const auto& r : recs) {
      preds.push_back({r.start, r.end});
      out.results.push_back(r);
    }
    out.grids.push_back(std::move(rec));
  }
  return out;
}

// Ranking from already computed score grids (no model).
inline InferenceOutput run_fusion(const std::vector<ScoreGridRecord>& grids,
                                  const PredictOptions& opts) {
  InferenceOutput out;
  for (const auto& g : grids) {
    const GroundingResult res = predict_segments(g.grid, opts);
    auto recs = to_records(res, g.video_id, g.query_id, g.duration, g.grid.steps());
    auto& preds = out.predictions[g.query_id];
    for (const auto& r : recs) {
      preds.push_back({r.start, r.end});
      out.results.push_back(r);
    }
    out.grids.push_back(g);
  }
  return out;
}

inline GroundTruthMap ground_truth(const std::vector<Sample>& samples) {
  GroundTruthMap out;
  for (const auto& s : samples) out[s.query_id] = s.seconds;
  return out;
}

inline const std::vector<int>& default_top_ns() {
  static const std::vector<int> v{1, 5};
  return v;
}
inline const std::vector<double>& default_thresholds() {
  static const std::vector<double> v{0.3, 0.5, 0.7};
  return v;
}

inline EvalReport evaluate_model(const CbpModel& model,
                                 const std::vector<Sample>& samples,
                                 const TrainConfig& config,
                                 const std::vector<int>& top_ns = default_top_ns(),
                                 const std::vector<double>& thresholds =
                                     default_thresholds()) {
  const int max_n = *std::max_element(top_ns.begin(), top_ns.end());
  const InferenceOutput out = run_inference(
      model, samples, predict_options(config, static_cast<std::size_t>(max_n)));
  return evaluate(out.predictions, ground_truth(samples), top_ns, thresholds);
}

// ---------------------------------------------------------------------------

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
  AnchorSelection anchor_selection;
};

using EpochCallback = std::function<void(const EpochLog&)>;

class Trainer {
 public:
  // Prepares anchors, the model, labels, and class weights.
  Trainer(TrainConfig config, std::vector<Sample> train,
          std::vector<Sample> validation = {})
      : train_(std::move(train)), validation_(std::move(validation)) {
    config.validate();
    if (train_.empty()) throw DataError("training set is empty");
    ckpt_.config = config;
    std::vector<int> lengths;
    lengths.reserve(train_.size());
    for (const auto& s : train_) lengths.push_back(s.segment.length());
    if (config.anchors.empty()) {
      selection_ = select_anchor_set(lengths, config.num_anchors,
                                     config.anchor_coverage);
    } else {
      selection_.anchors = AnchorSet(config.anchors);
      selection_.coverage = anchor_coverage(lengths, selection_.anchors);
    }
    ModelConfig mc;
    mc.query_dim = train_.front().query.cols();
    mc.video_dim = train_.front().features->cols();
    mc.hidden_size = config.hidden_size;
    mc.attention_size = config.attention_size;
    mc.context_size = config.context_size;
    mc.use_context = config.use_context;
    mc.anchors = selection_.anchors;
    ckpt_.model = CbpModel::create(mc, config.require_seed());
    prepare_labels();
  }

  // Continues from a checkpoint; the epoch counter carries on.
  Trainer(Checkpoint ckpt, std::vector<Sample> train,
          std::vector<Sample> validation = {})
      : ckpt_(std::move(ckpt)),
        train_(std::move(train)),
        validation_(std::move(validation)) {
    ckpt_.config.validate();
    if (train_.empty()) throw DataError("training set is empty");
    selection_.anchors = ckpt_.model.config().anchors;
    std::vector<int> lengths;
    for (const auto& s : train_) lengths.push_back(s.segment.length());
    selection_.coverage = anchor_coverage(lengths, selection_.anchors);
    prepare_labels();
  }

  const AnchorSelection& anchor_selection() const { return selection_; }
  const Checkpoint& checkpoint() const { return ckpt_; }
  const ClassWeights& class_weights() const { return ckpt_.weights; }
  const std::vector<SampleLabels>& labels() const { return labels_; }

  // Mean per-pair losses over the training set at the current parameters.
  SampleLoss mean_loss() const {
    SampleLoss acc;
    for (std::size_t k = 0; k < train_.size(); ++k) {
      ad::Tape tape;
      SampleLoss parts;
      sample_loss(tape, ckpt_.model, ckpt_.model.params(), train_[k], labels_[k],
                  ckpt_.weights, ckpt_.config.lambda, 1.0, &parts);
      acc.anchor += parts.anchor;
      acc.boundary += parts.boundary;
      acc.total += parts.total;
    }
    const double n = static_cast<double>(train_.size());
    return {acc.anchor / n, acc.boundary / n, acc.total / n};
  }

  // Runs `epochs` more epochs (config.epochs when 0).
  std::vector<EpochLog> train(std::size_t epochs = 0,
                              const EpochCallback& on_epoch = {}) {
    const TrainConfig& cfg = ckpt_.config;
    if (epochs == 0) epochs = cfg.epochs;
    std::vector<EpochLog> log;
    const AdamOptions adam{cfg.learning_rate};
    for (std::size_t e = 0; e < epochs; ++e) {
      const std::size_t epoch = ckpt_.epoch + 1;
      std::vector<std::size_t> order(train_.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng shuffle_rng(cfg.require_seed() * 0x9E3779B97F4A7C15ULL + epoch);
      std::shuffle(order.begin(), order.end(), shuffle_rng);

      EpochLog entry;
      entry.epoch = epoch;
      for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), b + cfg.batch_size);
        const std::span<const std::size_t> batch(order.data() + b, end - b);
        std::vector<SampleLoss> parts;
        GradTable grads = batch_gradient(batch, parts);
        for (std::size_t k = 0; k < parts.size(); ++k) {
          if (!std::isfinite(parts[k].total)) {
            std::string ids;
            for (std::size_t idx : batch)
              ids += (ids.empty() ? "" : ", ") + train_[idx].query_id;
            throw NumericError("non-finite loss in epoch " +
                               std::to_string(epoch) + ", batch: " + ids);
          }
          entry.anchor_loss += parts[k].anchor;
          entry.boundary_loss += parts[k].boundary;
          entry.loss += parts[k].total;
        }
        entry.max_grad_norm =
            std::max(entry.max_grad_norm, clip_global_norm(grads, cfg.clip_norm));
        adam_update(ckpt_.model.params(), grads, ckpt_.optimizer, adam);
      }
      const double n = static_cast<double>(train_.size());
      entry.anchor_loss /= n;
      entry.boundary_loss /= n;
      entry.loss /= n;
      ckpt_.epoch = epoch;
      if (!validation_.empty() && cfg.eval_every > 0 &&
          (epoch % cfg.eval_every == 0 || e + 1 == epochs)) {
        entry.val_r1_07 =
            evaluate_model(ckpt_.model, validation_, cfg, {1}, {0.7}).at(1, 0.7);
      }
      if (on_epoch) on_epoch(entry);
      log.push_back(entry);
    }
    return log;
  }

  // Sum over the batch of per-pair gradients of L / |batch|, accumulated in
  // batch order regardless of the number of workers.
  GradTable batch_gradient(std::span<const std::size_t> batch,
                           std::vector<SampleLoss>& parts) const {
    const ParamStore& params = ckpt_.model.params();
    const double scale = 1.0 / static_cast<double>(batch.size());
    std::vector<GradTable> per_sample(batch.size());
    parts.assign(batch.size(), {});
    auto work = [&](std::size_t k) {
      ad::Tape tape;
      const std::size_t idx = batch[k];
      const ad::Var loss =
          sample_loss(tape, ckpt_.model, params, train_[idx], labels_[idx],
                      ckpt_.weights, ckpt_.config.lambda, scale, &parts[k]);
      per_sample[k] = tape.backward(loss, params);
    };
    const std::size_t workers = std::min(ckpt_.config.workers, batch.size());
    if (workers <= 1) {
      for (std::size_t k = 0; k < batch.size(); ++k) work(k);
    } else {
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          for (std::size_t k = w; k < batch.size(); k += workers) work(k);
        });
      }
      for (auto& th : pool) th.join();
    }
    GradTable total = zero_grads(params);
    for (const auto& g : per_sample)
      for (std::size_t p = 0; p < total.size(); ++p)
        for (std::size_t k = 0; k < total[p].size(); ++k) total[p][k] += g[p][k];
    return total;
  }

 private:
  void prepare_labels() {
    LabelCounts counts;
    labels_.clear();
    labels_.reserve(train_.size());
    for (const auto& s : train_) {
      labels_.push_back(build_labels(s, selection_.anchors,
                                     ckpt_.config.iou_threshold,
                                     ckpt_.config.tol_radius));
      counts.add(labels_.back().anchor, labels_.back().boundary);
    }
    // Class weights are fixed by the first trainer; resumed runs keep them.
    if (ckpt_.weights.anchor_pos.empty()) {
      ckpt_.weights = compute_class_weights(counts);
    }
  }

  Checkpoint ckpt_;
  std::vector<Sample> train_;
  std::vector<Sample> validation_;
  AnchorSelection selection_;
  std::vector<SampleLabels> labels_;
};

// ---------------------------------------------------------------------------
// Checkpoint file, little-endian:
//   "CBPC" | u32 version | u64 header length | header JSON
//   | u32 block count | blocks | u64 FNV-1a of everything before it
// Each block: u32 name length | name | u32 rows | u32 cols | f64 values
//   | u64 FNV-1a of the block bytes.
// Blocks are "param/<name>", "adam_m/<name>", "adam_v/<name>".

namespace detail {

inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(std::string_view data, std::string what)
      : data_(data), what_(std::move(what)) {}
  std::string_view take(std::size_t n) {
    if (pos_ + n > data_.size()) throw DataError(what_ + ": truncated");
    const auto out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::uint32_t u32() {
    const auto b = take(4);
    return get_u32(reinterpret_cast<const unsigned char*>(b.data()));
  }
  std::uint64_t u64() {
    const auto b = take(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i)
      v = (v << 8) | static_cast<unsigned char>(b[static_cast<std::size_t>(i)]);
    return v;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string_view data_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline void put_block(std::string& out, const std::string& name,
                      const Matrix& m) {
  std::string block;
  put_u32(block, static_cast<std::uint32_t>(name.size()));
  block += name;
  put_u32(block, static_cast<std::uint32_t>(m.rows()));
  put_u32(block, static_cast<std::uint32_t>(m.cols()));
  for (double v : m.data()) put_u64(block, std::bit_cast<std::uint64_t>(v));
  const std::uint64_t sum = fnv1a(block);
  out += block;
  put_u64(out, sum);
}

}  // namespace detail

inline nlohmann::json to_json(const ClassWeights& w) {
  return {{"anchor_pos", w.anchor_pos},
          {"anchor_neg", w.anchor_neg},
          {"boundary_pos", w.boundary_pos},
          {"boundary_neg", w.boundary_neg}};
}

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  const ParamStore& params = ckpt.model.params();
  nlohmann::json header = {{"train_config", to_json(ckpt.config)},
                           {"model_config", to_json(ckpt.model.config())},
                           {"class_weights", to_json(ckpt.weights)},
                           {"epoch", ckpt.epoch},
                           {"adam_step", ckpt.optimizer.step}};
  const std::string header_text = header.dump();
  std::string out = "CBPC";
  detail::put_u32(out, Checkpoint::kVersion);
  detail::put_u64(out, header_text.size());
  out += header_text;
  const bool has_adam = !ckpt.optimizer.first.empty();
  const std::size_t blocks = params.size() * (has_adam ? 3 : 1);
  detail::put_u32(out, static_cast<std::uint32_t>(blocks));
  for (std::size_t p = 0; p < params.size(); ++p) {
    const int id = static_cast<int>(p);
    detail::put_block(out, "param/" + params.name(id), params.value(id));
  }
  if (has_adam) {
    for (std::size_t p = 0; p < params.size(); ++p)
      detail::put_block(out, "adam_m/" + params.name(static_cast<int>(p)),
                        ckpt.optimizer.first[p]);
    for (std::size_t p = 0; p < params.size(); ++p)
      detail::put_block(out, "adam_v/" + params.name(static_cast<int>(p)),
                        ckpt.optimizer.second[p]);
  }
  detail::put_u64(out, detail::fnv1a(out));
  return out;
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes,
                                         const std::string& what = "checkpoint") {
  if (bytes.size() < 8 || bytes.substr(0, 4) != "CBPC") {
    throw DataError(what + ": not a checkpoint file");
  }
  detail::ByteReader head(bytes, what);
  head.take(4);
  const std::uint32_t version = head.u32();
  if (version != Checkpoint::kVersion) {
    throw VersionError(what + ": checkpoint version " + std::to_string(version) +
                       ", this build reads version " +
                       std::to_string(Checkpoint::kVersion));
  }
  if (bytes.size() < 16) throw ChecksumError(what + ": truncated");
  const std::string_view body = bytes.substr(0, bytes.size() - 8);
  detail::ByteReader tail(bytes.substr(bytes.size() - 8), what);
  if (tail.u64() != detail::fnv1a(body)) {
    throw ChecksumError(what + ": checksum mismatch");
  }

  detail::ByteReader r(body, what);
  r.take(8);
  const std::uint64_t header_len = r.u64();
  nlohmann::json header;
  TrainConfig config;
  ModelConfig mc;
  Checkpoint ckpt;
  try {
    header = nlohmann::json::parse(r.take(header_len));
    config = train_config_from_json(header.at("train_config"));
    mc = model_config_from_json(header.at("model_config"));
    const auto& w = header.at("class_weights");
    ckpt.weights.anchor_pos = w.at("anchor_pos").get<std::vector<double>>();
    ckpt.weights.anchor_neg = w.at("anchor_neg").get<std::vector<double>>();
    ckpt.weights.boundary_pos = w.at("boundary_pos").get<double>();
    ckpt.weights.boundary_neg = w.at("boundary_neg").get<double>();
    ckpt.epoch = header.at("epoch").get<std::size_t>();
    ckpt.optimizer.step = header.at("adam_step").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(what + ": bad header: " + e.what());
  }
  ckpt.config = config;
  // Shapes and names come from a fresh model; values are overwritten below.
  ckpt.model = CbpModel::create(mc, 0);
  ParamStore params = ckpt.model.params();
  const std::uint32_t blocks = r.u32();
  const std::size_t np = params.size();
  if (blocks != np && blocks != 3 * np) {
    throw DataError(what + ": unexpected block count " + std::to_string(blocks));
  }
  GradTable first, second;
  if (blocks == 3 * np) {
    first = zero_grads(params);
    second = zero_grads(params);
  }
  for (std::uint32_t b = 0; b < blocks; ++b) {
    const std::size_t begin = r.pos();
    const std::uint32_t name_len = r.u32();
    const std::string name(r.take(name_len));
    const std::size_t rows = r.u32();
    const std::size_t cols = r.u32();
    const std::size_t p = b % np;
    const std::string prefix = b < np ? "param/" : b < 2 * np ? "adam_m/" : "adam_v/";
    const int id = static_cast<int>(p);
    if (name != prefix + params.name(id)) {
      throw DataError(what + ": block '" + name + "', expected '" + prefix +
                      params.name(id) + "'");
    }
    Matrix& dst = b < np ? params.value(id) : b < 2 * np ? first[p] : second[p];
    if (rows != dst.rows() || cols != dst.cols()) {
      throw DataError(what + ": block '" + name + "' has shape " +
                      std::to_string(rows) + "x" + std::to_string(cols) +
                      ", expected " + dst.shape_string());
    }
    for (std::size_t k = 0; k < rows * cols; ++k)
      dst[k] = std::bit_cast<double>(r.u64());
    const std::string_view block = body.substr(begin, r.pos() - begin);
    if (r.u64() != detail::fnv1a(block)) {
      throw ChecksumError(what + ": checksum mismatch in block '" + name + "'");
    }
  }
  if (!r.done()) throw DataError(what + ": trailing bytes");
  ckpt.model.set_params(std::move(params));
  ckpt.optimizer.first = std::move(first);
  ckpt.optimizer.second = std::move(second);
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  return deserialize_checkpoint(detail::read_file_bytes(path), path.string());
}

}  // namespace cbp
