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

// Match-LSTM interaction between query word states and video states.

#pragma once

#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "cbp/numerics.hpp"
#include "cbp/recurrent.hpp"

namespace cbp {

struct AttentionParams {
  int w_query = -1;   // H x da, applied to query word states
  int w_video = -1;   // H x da, applied to the video state
  int w_memory = -1;  // H x da, applied to the interaction state
  int w_score = -1;   // 1 x da scoring vector
  int bias = -1;      // 1 x da, inside the tanh
  std::size_t hidden_size = 0;
  std::size_t attention_size = 0;
};

// Projections uniform in [-1/sqrt(H), 1/sqrt(H)]. The scoring vector starts
// at zero unless `zero_score` is false, so training begins from uniform word
// attention.
inline AttentionParams add_attention(ParamStore& store,
                                     const std::string& prefix,
                                     std::size_t hidden_size,
                                     std::size_t attention_size, Rng& rng,
                                     bool zero_score = true) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_size));
  AttentionParams p;
  p.hidden_size = hidden_size;
  p.attention_size = attention_size;
  p.w_query = store.add(prefix + ".w_query",
                        uniform_matrix(hidden_size, attention_size, bound, rng));
  p.w_video = store.add(prefix + ".w_video",
                        uniform_matrix(hidden_size, attention_size, bound, rng));
  p.w_memory = store.add(
      prefix + ".w_memory",
      uniform_matrix(hidden_size, attention_size, bound, rng));
  const double score_bound =
      1.0 / std::sqrt(static_cast<double>(attention_size));
  p.w_score = store.add(prefix + ".w_score",
                        zero_score ? Matrix(1, attention_size)
                                   : uniform_matrix(1, attention_size,
                                                    score_bound, rng));
  p.bias = store.add(prefix + ".bias", Matrix(1, attention_size));
  return p;
}

struct BoundAttention {
  ad::Var w_query;
  ad::Var w_video;
  ad::Var w_memory;
  ad::Var w_score;
  ad::Var bias;
};

inline BoundAttention bind(ad::Tape& tape, const ParamStore& store,
                           const AttentionParams& p) {
  return {tape.param(store, p.w_query), tape.param(store, p.w_video),
          tape.param(store, p.w_memory), tape.param(store, p.w_score),
          tape.param(store, p.bias)};
}

struct WordAttention {
  ad::Var weights;   // 1 x N, sums to 1
  ad::Var attended;  // 1 x H, weighted sum of query states
};

namespace detail {

// query_proj = Hq * W_s (N x da) and video_term = h_v * W_v + b_r (1 x da)
// are hoisted out of the time loop by the caller.
inline WordAttention attend(const BoundAttention& attn,
                            const ad::Var& query_states,
                            const ad::Var& query_proj,
                            const ad::Var& video_term,
                            const ad::Var& memory) {
  const ad::Var shift = ad::add(video_term, ad::matmul(memory, attn.w_memory));
  const ad::Var hidden = ad::tanh(ad::add_row_broadcast(query_proj, shift));
  const ad::Var logits = ad::matmul_nt(attn.w_score, hidden);  // 1 x N
  const ad::Var weights = ad::row_softmax(logits);
  return {weights, ad::matmul(weights, query_states)};
}

}  // namespace detail

// Attention of one video step over the N query word states (N x H).
inline WordAttention word_attention(const BoundAttention& attn,
                                    const ad::Var& query_states,
                                    const ad::Var& video_state,
                                    const ad::Var& memory) {
  if (query_states.rows() == 0) {
    throw ContractError("word_attention: query has no words");
  }
  return detail::attend(attn, query_states,
                        ad::matmul(query_states, attn.w_query),
                        ad::matmul_bias(video_state, attn.w_video, attn.bias),
                        memory);
}

struct InteractionTrace {
  std::vector<LstmState> states;     // one per video step
  ad::Var memory;                    // T x H hidden states
  std::vector<ad::Var> attention;    // T rows of 1 x N weights

  // T x N matrix of the word-attention weights.
  Matrix attention_matrix() const {
    if (attention.empty()) return {};
    Matrix out(attention.size(), attention.front().cols());
    for (std::size_t t = 0; t < attention.size(); ++t) {
      const Matrix& w = attention[t].value();
      std::copy(w.data().begin(), w.data().end(), out.row(t).begin());
    }
    return out;
  }
};

// Position t is represented by the interaction state after consuming video
// step t. The attention at step t is conditioned on the previous interaction
// state (zero before the first step).
inline InteractionTrace match_lstm_forward(const BoundLstm& lstm,
                                           const BoundAttention& attn,
                                           const ad::Var& query_states,
                                           const ad::Var& video_states) {
  if (video_states.rows() == 0) {
    throw ContractError("match_lstm_forward: empty video");
  }
  if (query_states.rows() == 0) {
    throw ContractError("match_lstm_forward: query has no words");
  }
  ad::Tape& tape = *video_states.tape();
  const ad::Var query_proj = ad::matmul(query_states, attn.w_query);
  const ad::Var video_terms =
      ad::matmul_bias(video_states, attn.w_video, attn.bias);

  InteractionTrace trace;
  trace.states.reserve(video_states.rows());
  trace.attention.reserve(video_states.rows());
  LstmState state = zero_state(tape, lstm.hidden_size);
  for (std::size_t t = 0; t < video_states.rows(); ++t) {
    const ad::Var video_t = ad::row(video_states, t);
    const WordAttention wa = detail::attend(
        attn, query_states, query_proj, ad::row(video_terms, t), state.h);
    state = lstm_step(lstm, ad::concat_cols(wa.attended, video_t), state);
    trace.states.push_back(state);
    trace.attention.push_back(wa.weights);
  }
  trace.memory = stack_hidden(trace.states);
  return trace;
}

// One line per row, tab-separated, shortest round-trip formatting.
inline void write_tsv(std::ostream& os, const Matrix& m) {
  const auto old_precision = os.precision(17);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (j) os << '\t';
      os << m(i, j);
    }
    os << '\n';
  }
  os.precision(old_precision);
}

}  // namespace cbp
