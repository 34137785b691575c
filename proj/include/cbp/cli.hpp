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

// Command-line driver: gen-synth, anchors, train, infer, eval, fuse.
//
// Fixed output names under --out:
//   gen-synth  train.jsonl test.jsonl [val.jsonl] embeddings.txt features/
//              synth_config.json
//   anchors    anchors.json
//   train      checkpoint.cbpc train_log.jsonl config.json anchors.json
//              [validation_report.txt validation_report.json]
//   infer      score_grids.jsonl results.jsonl [attention/<query>.word.tsv
//              attention/<query>.context.tsv]
//   eval       eval.txt eval.json [eval.csv]
//   fuse       results.jsonl

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cbp/dataio.hpp"
#include "cbp/errors.hpp"
#include "cbp/inference.hpp"
#include "cbp/metrics.hpp"
#include "cbp/supervision.hpp"
#include "cbp/trainer.hpp"

namespace cbp::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kBadConfig = 3,
  kVersionMismatch = 4,
  kChecksumMismatch = 5,
  kBadData = 6,
  kNumeric = 7,
};

namespace detail {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string dataset;
  std::string validation;
  std::string checkpoint;
  std::string out;
  std::string results;
  std::string grids;
  std::optional<double> nms_threshold;
  std::optional<double> lambda;
  std::optional<std::size_t> epochs;
  std::optional<double> snr;
  std::string top_n;
  std::string iou_thresholds;
  bool dump_attention = false;
  bool random_anchor = false;
  bool csv = false;
};

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::vector<int> parse_top_ns(const std::string& s) {
  if (s.empty()) return default_top_ns();
  std::vector<int> out;
  for (const auto& item : split_list(s)) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || v < 1) {
      throw ConfigError("--top-n: bad value '" + item + "'");
    }
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("--top-n: empty list");
  return out;
}

inline std::vector<double> parse_thresholds(const std::string& s) {
  if (s.empty()) return default_thresholds();
  std::vector<double> out;
  for (const auto& item : split_list(s)) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || !(v >= 0.0 && v <= 1.0)) {
      throw ConfigError("--iou-thresholds: bad value '" + item + "'");
    }
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("--iou-thresholds: empty list");
  return out;
}

inline fs::path require_out(const Options& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  fs::create_directories(o.out);
  return o.out;
}

inline std::ofstream open_out(const fs::path& path,
                              std::ios::openmode mode = std::ios::trunc) {
  std::ofstream f(path, mode);
  if (!f) throw DataError("cannot write " + path.string());
  return f;
}

inline TrainConfig load_config(const Options& o) {
  TrainConfig c = o.config.empty() ? TrainConfig{} : read_train_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.lambda) c.lambda = *o.lambda;
  if (o.nms_threshold) c.nms_threshold = *o.nms_threshold;
  if (o.epochs) c.epochs = *o.epochs;
  return c;
}

inline std::vector<Sample> load_samples(const std::string& manifest,
                                        std::ostream& err) {
  const Dataset data = Dataset::load(manifest);
  std::set<std::string> oov;
  auto samples = make_samples(data, data.embeddings(), &oov);
  for (const auto& t : oov)
    err << "warning: token '" << t << "' not in embeddings, using zero vector\n";
  return samples;
}

inline void print_report(std::ostream& os, const EvalReport& r,
                         const std::string& method) {
  write_report_table(os, r, method);
  std::vector<int> ns = r.top_ns;
  std::sort(ns.begin(), ns.end());
  std::vector<double> ths = r.thresholds;
  std::sort(ths.rbegin(), ths.rend());
  for (int n : ns)
    for (double th : ths)
      os << "R@" << n << ",IoU=" << ::cbp::detail::theta_label(th) << " = "
         << ::cbp::detail::fixed2(r.at(n, th)) << '\n';
  os << "mIoU = " << ::cbp::detail::fixed2(r.miou) << '\n';
}

inline void write_report_files(const fs::path& dir, const std::string& stem,
                               const EvalReport& r, const std::string& method,
                               bool csv) {
  {
    auto f = open_out(dir / (stem + ".txt"));
    write_report_table(f, r, method);
  }
  {
    auto f = open_out(dir / (stem + ".json"));
    f << to_json(r).dump(2) << '\n';
  }
  if (csv) {
    auto f = open_out(dir / (stem + ".csv"));
    write_report_csv(f, r);
  }
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "train_queries") c.train_queries = v.get<std::size_t>();
      else if (key == "test_queries") c.test_queries = v.get<std::size_t>();
      else if (key == "val_queries") c.val_queries = v.get<std::size_t>();
      else if (key == "steps") c.steps = v.get<std::size_t>();
      else if (key == "feature_dim") c.feature_dim = v.get<std::size_t>();
      else if (key == "embed_dim") c.embed_dim = v.get<std::size_t>();
      else if (key == "num_classes") c.num_classes = v.get<std::size_t>();
      else if (key == "filler_words") c.filler_words = v.get<std::size_t>();
      else if (key == "motifs_per_video") c.motifs_per_video = v.get<std::size_t>();
      else if (key == "min_length") c.min_length = v.get<int>();
      else if (key == "max_length") c.max_length = v.get<int>();
      else if (key == "snr") {
        c.snr = v.is_string() ? std::stod(v.get<std::string>()) : v.get<double>();
      } else if (key == "step_seconds") c.step_seconds = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else throw ConfigError("unknown synthetic config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synthetic config: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw ConfigError("synthetic config: bad snr value");
  }
  return c;
}

// ---------------------------------------------------------------------------

inline int gen_synth(const Options& o, std::ostream& out, std::ostream&) {
  const fs::path dir = require_out(o);
  SynthConfig c;
  bool have_seed = false;
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw ConfigError("cannot read config " + o.config);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(o.config + ": " + e.what());
    }
    c = synth_config_from_json(j);
    have_seed = j.contains("seed");
  }
  if (o.seed) {
    c.seed = *o.seed;
    have_seed = true;
  }
  if (!have_seed) throw ConfigError("a seed is required (--seed)");
  if (o.snr) c.snr = *o.snr;
  generate_synthetic(c, dir);
  auto f = open_out(dir / "synth_config.json");
  f << to_json(c).dump(2) << '\n';
  out << "wrote synthetic dataset to " << dir.string() << '\n';
  return kOk;
}

inline int anchors(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.dataset.empty()) throw ConfigError("--dataset is required");
  const TrainConfig c = load_config(o);
  const auto samples = load_samples(o.dataset, err);
  std::vector<int> lengths;
  for (const auto& s : samples) lengths.push_back(s.segment.length());
  const AnchorSelection sel =
      select_anchor_set(lengths, c.num_anchors, c.anchor_coverage);
  for (const auto& w : sel.warnings) err << "warning: " << w << '\n';
  out << "anchors:";
  for (int l : sel.anchors.lengths()) out << ' ' << l;
  out << "\ncoverage: " << ::cbp::detail::fixed2(100.0 * sel.coverage) << "%\n";
  if (!o.out.empty()) {
    auto f = open_out(require_out(o) / "anchors.json");
    f << nlohmann::json{{"anchors", sel.anchors.lengths()},
                        {"coverage", sel.coverage}}
             .dump(2)
      << '\n';
  }
  return kOk;
}

inline int train(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.dataset.empty()) throw ConfigError("--dataset is required");
  const fs::path dir = require_out(o);
  auto train_samples = load_samples(o.dataset, err);
  std::vector<Sample> val_samples;
  if (!o.validation.empty()) val_samples = load_samples(o.validation, err);

  std::optional<Trainer> trainer;
  if (!o.checkpoint.empty()) {
    Checkpoint ckpt = load_checkpoint(o.checkpoint);
    if (o.lambda) ckpt.config.lambda = *o.lambda;
    if (o.nms_threshold) ckpt.config.nms_threshold = *o.nms_threshold;
    if (o.epochs) ckpt.config.epochs = *o.epochs;
    trainer.emplace(std::move(ckpt), std::move(train_samples), val_samples);
  } else {
    TrainConfig c = load_config(o);
    c.validate();
    trainer.emplace(c, std::move(train_samples), val_samples);
  }
  const TrainConfig& cfg = trainer->checkpoint().config;
  for (const auto& w : trainer->anchor_selection().warnings)
    err << "warning: " << w << '\n';
  for (const auto& w : trainer->class_weights().warnings)
    err << "warning: " << w << '\n';
  {
    auto f = open_out(dir / "config.json");
    f << to_json(cfg).dump(2) << '\n';
  }
  {
    auto f = open_out(dir / "anchors.json");
    f << nlohmann::json{{"anchors", trainer->anchor_selection().anchors.lengths()},
                        {"coverage", trainer->anchor_selection().coverage}}
             .dump(2)
      << '\n';
  }
  auto log = open_out(dir / "train_log.jsonl", std::ios::app);
  trainer->train(0, [&](const EpochLog& e) {
    log << to_json(e).dump() << '\n';
    log.flush();
    out << "epoch " << e.epoch << " loss " << e.loss << " (anchor "
        << e.anchor_loss << ", boundary " << e.boundary_loss << ")";
    if (e.val_r1_07) out << " val R@1,IoU=0.7 " << ::cbp::detail::fixed2(*e.val_r1_07);
    out << '\n';
  });
  save_checkpoint(trainer->checkpoint(), dir / "checkpoint.cbpc");
  if (!val_samples.empty()) {
    const EvalReport r =
        evaluate_model(trainer->checkpoint().model, val_samples, cfg,
                       parse_top_ns(o.top_n), parse_thresholds(o.iou_thresholds));
    write_report_files(dir, "validation_report", r, "CBP", false);
    print_report(out, r, "CBP");
  }
  return kOk;
}

inline int infer(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  if (o.dataset.empty()) throw ConfigError("--dataset is required");
  const fs::path dir = require_out(o);
  Checkpoint ckpt = load_checkpoint(o.checkpoint);
  if (o.nms_threshold) ckpt.config.nms_threshold = *o.nms_threshold;
  const auto ns = parse_top_ns(o.top_n);
  const auto top_n = static_cast<std::size_t>(*std::max_element(ns.begin(), ns.end()));
  const PredictOptions opts = predict_options(ckpt.config, top_n);
  const auto samples = load_samples(o.dataset, err);

  InferenceOutput result;
  if (o.random_anchor) {
    const std::uint64_t seed = o.seed ? *o.seed : ckpt.config.require_seed();
    std::vector<ScoreGridRecord> grids;
    for (std::size_t k = 0; k < samples.size(); ++k) {
      grids.push_back({samples[k].video_id, samples[k].query_id,
                       samples[k].duration,
                       random_anchor_baseline(ckpt.model.config().anchors,
                                              samples[k].steps(), seed + k)});
    }
    result = run_fusion(grids, opts);
  } else {
    result = run_inference(ckpt.model, samples, opts);
  }
  if (o.dump_attention && !o.random_anchor) {
    fs::create_directories(dir / "attention");
    for (const auto& s : samples) {
      ad::Tape tape;
      const ForwardPass fp = ckpt.model.forward(tape, *s.features, s.query);
      auto w = open_out(dir / "attention" / (s.query_id + ".word.tsv"));
      write_tsv(w, fp.interaction.attention_matrix());
      if (fp.context) {
        auto c = open_out(dir / "attention" / (s.query_id + ".context.tsv"));
        write_tsv(c, fp.context->weights.value());
      }
    }
  }
  {
    auto f = open_out(dir / "score_grids.jsonl");
    write_score_grids(f, result.grids);
  }
  {
    auto f = open_out(dir / "results.jsonl");
    write_results(f, result.results);
  }
  out << "wrote " << result.results.size() << " results for " << samples.size()
      << " queries to " << dir.string() << '\n';
  return kOk;
}

inline int eval(const Options& o, std::ostream& out, std::ostream&) {
  if (o.dataset.empty()) throw ConfigError("--dataset is required");
  std::string results = o.results;
  if (results.empty()) {
    if (o.out.empty()) throw ConfigError("--results or --out is required");
    results = (fs::path(o.out) / "results.jsonl").string();
  }
  const DatasetManifest manifest = read_manifest(o.dataset);
  std::ifstream in(results);
  if (!in) throw DataError("cannot open results " + results);
  const auto records = read_results(in);
  PredictionMap preds = predictions_from_records(records);
  const GroundTruthMap gts = ground_truth(manifest);
  // Queries the predictor produced nothing for count as misses.
  for (const auto& [id, _] : gts) preds.try_emplace(id);
  const EvalReport r = evaluate(preds, gts, parse_top_ns(o.top_n),
                                parse_thresholds(o.iou_thresholds));
  print_report(out, r, "CBP");
  if (!o.out.empty()) write_report_files(require_out(o), "eval", r, "CBP", o.csv);
  return kOk;
}

inline int fuse(const Options& o, std::ostream& out, std::ostream&) {
  const fs::path dir = require_out(o);
  const std::string grids_path =
      o.grids.empty() ? (dir / "score_grids.jsonl").string() : o.grids;
  std::ifstream in(grids_path);
  if (!in) throw DataError("cannot open score grids " + grids_path);
  const auto grids = read_score_grids(in);
  TrainConfig c = o.config.empty() ? TrainConfig{} : read_train_config(o.config);
  if (o.nms_threshold) c.nms_threshold = *o.nms_threshold;
  const auto ns = parse_top_ns(o.top_n);
  const auto top_n = static_cast<std::size_t>(*std::max_element(ns.begin(), ns.end()));
  const InferenceOutput result = run_fusion(grids, predict_options(c, top_n));
  auto f = open_out(dir / "results.jsonl");
  write_results(f, result.results);
  out << "wrote " << result.results.size() << " results for " << grids.size()
      << " queries to " << dir.string() << '\n';
  return kOk;
}

}  // namespace detail

// Runs one subcommand. `args` excludes the program name.
inline int run_command(const std::vector<std::string>& args, std::ostream& out,
                       std::ostream& err) {
  CLI::App app{"Temporal grounding with boundary-aware anchor prediction", "cbp"};
  app.require_subcommand(1, 1);
  detail::Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Config file (JSON)");
    sub->add_option("--seed", o.seed, "Random seed");
    sub->add_option("--out", o.out, "Output directory");
  };
  auto* gen = app.add_subcommand("gen-synth", "Write a synthetic dataset");
  common(gen);
  gen->add_option("--snr", o.snr, "Motif RMS over noise std (inf for none)");

  auto* anc = app.add_subcommand("anchors", "Select an anchor set and report coverage");
  common(anc);
  anc->add_option("--dataset", o.dataset, "Training manifest");

  auto* tr = app.add_subcommand("train", "Train a model");
  common(tr);
  tr->add_option("--dataset", o.dataset, "Training manifest");
  tr->add_option("--validation", o.validation, "Validation manifest");
  tr->add_option("--checkpoint", o.checkpoint, "Resume from this checkpoint");
  tr->add_option("--lambda", o.lambda, "Boundary loss weight");
  tr->add_option("--epochs", o.epochs, "Number of epochs");
  tr->add_option("--nms-threshold", o.nms_threshold, "NMS IoU threshold");
  tr->add_option("--top-n", o.top_n, "Comma-separated N for R@N");
  tr->add_option("--iou-thresholds", o.iou_thresholds, "Comma-separated IoU thresholds");

  auto* inf = app.add_subcommand("infer", "Score a dataset with a checkpoint");
  common(inf);
  inf->add_option("--dataset", o.dataset, "Manifest to score");
  inf->add_option("--checkpoint", o.checkpoint, "Checkpoint file");
  inf->add_option("--nms-threshold", o.nms_threshold, "NMS IoU threshold");
  inf->add_option("--top-n", o.top_n, "Results kept per query (max of list)");
  inf->add_flag("--dump-attention", o.dump_attention, "Write attention matrices");
  inf->add_flag("--random-anchor", o.random_anchor,
                "Replace model scores with the random anchor baseline");

  auto* ev = app.add_subcommand("eval", "Evaluate results against a manifest");
  common(ev);
  ev->add_option("--dataset", o.dataset, "Manifest with ground truth");
  ev->add_option("--results", o.results, "Results file (default <out>/results.jsonl)");
  ev->add_option("--top-n", o.top_n, "Comma-separated N for R@N");
  ev->add_option("--iou-thresholds", o.iou_thresholds, "Comma-separated IoU thresholds");
  ev->add_flag("--csv", o.csv, "Also write eval.csv");

  auto* fu = app.add_subcommand("fuse", "Rank saved score grids");
  common(fu);
  fu->add_option("--grids", o.grids, "Score grids (default <out>/score_grids.jsonl)");
  fu->add_option("--nms-threshold", o.nms_threshold, "NMS IoU threshold");
  fu->add_option("--top-n", o.top_n, "Results kept per query (max of list)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (gen->parsed()) return detail::gen_synth(o, out, err);
    if (anc->parsed()) return detail::anchors(o, out, err);
    if (tr->parsed()) return detail::train(o, out, err);
    if (inf->parsed()) return detail::infer(o, out, err);
    if (ev->parsed()) return detail::eval(o, out, err);
    if (fu->parsed()) return detail::fuse(o, out, err);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kBadConfig;
  } catch (const VersionError& e) {
    err << "error: " << e.what() << '\n';
    return kVersionMismatch;
  } catch (const ChecksumError& e) {
    err << "error: " << e.what() << '\n';
    return kChecksumMismatch;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return kBadData;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}

}  // namespace cbp::cli
