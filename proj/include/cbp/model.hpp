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

// The full grounding network: query and video encoders, Match-LSTM
// interaction, contextual integration, and the two classifier heads.

#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <json.hpp>

#include "cbp/context.hpp"
#include "cbp/heads.hpp"
#include "cbp/interaction.hpp"
#include "cbp/numerics.hpp"
#include "cbp/recurrent.hpp"

namespace cbp {

struct ModelConfig {
  std::size_t query_dim = 0;
  std::size_t video_dim = 0;
  std::size_t hidden_size = 512;
  std::size_t attention_size = 0;  // 0 means hidden_size
  std::size_t context_size = 0;    // 0 means hidden_size
  bool use_context = true;
  AnchorSet anchors;

  std::size_t resolved_attention() const {
    return attention_size ? attention_size : hidden_size;
  }
  std::size_t resolved_context() const {
    return context_size ? context_size : hidden_size;
  }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"query_dim", c.query_dim},
          {"video_dim", c.video_dim},
          {"hidden_size", c.hidden_size},
          {"attention_size", c.attention_size},
          {"context_size", c.context_size},
          {"use_context", c.use_context},
          {"anchors", c.anchors.lengths()}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.query_dim = j.at("query_dim").get<std::size_t>();
  c.video_dim = j.at("video_dim").get<std::size_t>();
  c.hidden_size = j.at("hidden_size").get<std::size_t>();
  c.attention_size = j.at("attention_size").get<std::size_t>();
  c.context_size = j.at("context_size").get<std::size_t>();
  c.use_context = j.at("use_context").get<bool>();
  c.anchors = AnchorSet(j.at("anchors").get<std::vector<int>>());
  return c;
}

// Everything one forward pass produces.
struct ForwardPass {
  ad::Var query_states;  // N x H
  ad::Var video_states;  // T x H
  InteractionTrace interaction;
  std::optional<ContextOutput> context;
  ad::Var integrated;  // T x 2H
  HeadOutput heads;
};

class CbpModel {
 public:
  CbpModel() = default;

  // Uniform fan-in initialisation; LSTM forget biases at 1; the word
  // attention scoring vector at 0 unless `zero_attention_score` is false.
  static CbpModel create(const ModelConfig& config, std::uint64_t seed,
                         bool zero_attention_score = true) {
    if (config.hidden_size == 0 || config.query_dim == 0 ||
        config.video_dim == 0) {
      throw ConfigError("model dimensions must be positive");
    }
    if (config.anchors.size() == 0) throw ConfigError("model has no anchors");
    CbpModel m;
    m.config_ = config;
    Rng rng(seed);
    const std::size_t h = config.hidden_size;
    m.query_lstm_ = add_lstm(m.params_, "query_lstm", config.query_dim, h, rng);
    m.video_lstm_ = add_lstm(m.params_, "video_lstm", config.video_dim, h, rng);
    m.interaction_lstm_ = add_lstm(m.params_, "interaction_lstm", 2 * h, h, rng);
    m.attention_ = add_attention(m.params_, "word_attention", h,
                                 config.resolved_attention(), rng,
                                 zero_attention_score);
    m.context_ = add_context(m.params_, "context", h,
                             config.resolved_context(), rng);
    m.heads_ = add_heads(m.params_, "heads", 2 * h, config.anchors.size(), rng);
    return m;
  }

  const ModelConfig& config() const { return config_; }
  const ParamStore& params() const { return params_; }
  ParamStore& params() { return params_; }

  // Builds the graph on `tape` using parameters from `params`, which must be
  // shaped like this model's store (the finite-difference oracle passes a
  // perturbed copy).
  ForwardPass forward(ad::Tape& tape, const ParamStore& params,
                      const Matrix& video, const Matrix& query) const {
    if (video.cols() != config_.video_dim) {
      throw DimensionError("video features " + video.shape_string() +
                           " vs Dv=" + std::to_string(config_.video_dim));
    }
    if (query.cols() != config_.query_dim) {
      throw DimensionError("query embedding " + query.shape_string() +
                           " vs Dq=" + std::to_string(config_.query_dim));
    }
    const std::size_t h = config_.hidden_size;
    ForwardPass out;
    const BoundLstm qlstm = bind(tape, params, query_lstm_);
    const BoundLstm vlstm = bind(tape, params, video_lstm_);
    const BoundLstm mlstm = bind(tape, params, interaction_lstm_);
    const BoundAttention attn = bind(tape, params, attention_);

    out.query_states = stack_hidden(
        encode_sequence(qlstm, tape.constant(query), zero_state(tape, h)));
    out.video_states = stack_hidden(
        encode_sequence(vlstm, tape.constant(video), zero_state(tape, h)));
    out.interaction =
        match_lstm_forward(mlstm, attn, out.query_states, out.video_states);
    if (config_.use_context) {
      out.context = integrate_context(tape.param(params, context_.projection),
                                      out.interaction.memory);
      out.integrated = out.context->integrated;
    } else {
      out.integrated = identity_context(out.interaction.memory);
    }
    out.heads = localization_scores(
        tape.param(params, heads_.w_anchor), tape.param(params, heads_.b_anchor),
        tape.param(params, heads_.w_boundary),
        tape.param(params, heads_.b_boundary), out.integrated);
    return out;
  }

  ForwardPass forward(ad::Tape& tape, const Matrix& video,
                      const Matrix& query) const {
    return forward(tape, params_, video, query);
  }

  ScoreGrid score(const Matrix& video, const Matrix& query) const {
    ad::Tape tape;
    return to_grid(forward(tape, video, query).heads, config_.anchors);
  }

  // Replaces all parameter values; shapes must match.
  void set_params(ParamStore params) {
    if (params.size() != params_.size()) {
      throw DimensionError("parameter count " + std::to_string(params.size()) +
                           " vs " + std::to_string(params_.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      const int id = static_cast<int>(i);
      if (params.name(id) != params_.name(id)) {
        throw DataError("parameter " + std::to_string(i) + " is '" +
                        params.name(id) + "', expected '" + params_.name(id) + "'");
      }
      detail::require_same_shape(params.value(id), params_.value(id),
                                 params_.name(id));
    }
    params_ = std::move(params);
  }

 private:
  ModelConfig config_;
  ParamStore params_;
  LstmParams query_lstm_;
  LstmParams video_lstm_;
  LstmParams interaction_lstm_;
  AttentionParams attention_;
  ContextParams context_;
  HeadParams heads_;
};

}  // namespace cbp
