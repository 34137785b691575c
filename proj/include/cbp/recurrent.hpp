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

#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "cbp/numerics.hpp"

namespace cbp {

// Parameter ids of one LSTM layer. Weights are stored input-major so that a
// row input x (1 x in) maps to gates via x * w_input (in x 4H). Gate blocks
// are ordered input, forget, candidate, output.
struct LstmParams {
  int w_input = -1;
  int w_hidden = -1;
  int bias = -1;
  std::size_t input_size = 0;
  std::size_t hidden_size = 0;
};

// Weights uniform in [-1/sqrt(H), 1/sqrt(H)]; biases zero except the forget
// block, which starts at 1.
inline LstmParams add_lstm(ParamStore& store, const std::string& prefix,
                           std::size_t input_size, std::size_t hidden_size,
                           Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_size));
  LstmParams p;
  p.input_size = input_size;
  p.hidden_size = hidden_size;
  p.w_input = store.add(prefix + ".w_input",
                        uniform_matrix(input_size, 4 * hidden_size, bound, rng));
  p.w_hidden = store.add(
      prefix + ".w_hidden",
      uniform_matrix(hidden_size, 4 * hidden_size, bound, rng));
  Matrix bias(1, 4 * hidden_size);
  for (std::size_t j = hidden_size; j < 2 * hidden_size; ++j) bias[j] = 1.0;
  p.bias = store.add(prefix + ".bias", std::move(bias));
  return p;
}

struct LstmState {
  ad::Var h;
  ad::Var c;
};

// LstmParams bound to tape leaves for one forward pass.
struct BoundLstm {
  ad::Var w_input;
  ad::Var w_hidden;
  ad::Var bias;
  std::size_t input_size = 0;
  std::size_t hidden_size = 0;
};

inline BoundLstm bind(ad::Tape& tape, const ParamStore& store,
                      const LstmParams& p) {
  return {tape.param(store, p.w_input), tape.param(store, p.w_hidden),
          tape.param(store, p.bias), p.input_size, p.hidden_size};
}

inline LstmState zero_state(ad::Tape& tape, std::size_t hidden_size) {
  return {tape.constant(Matrix(1, hidden_size)),
          tape.constant(Matrix(1, hidden_size))};
}

namespace detail {

// Completes one step given x * w_input + bias already computed.
inline LstmState lstm_from_projection(const BoundLstm& lstm,
                                      const ad::Var& projected,
                                      const LstmState& state) {
  const std::size_t h = lstm.hidden_size;
  const ad::Var gates = ad::add(projected, ad::matmul(state.h, lstm.w_hidden));
  const ad::Var in_gate = ad::sigmoid(ad::slice_cols(gates, 0, h));
  const ad::Var forget_gate = ad::sigmoid(ad::slice_cols(gates, h, h));
  const ad::Var candidate = ad::tanh(ad::slice_cols(gates, 2 * h, h));
  const ad::Var out_gate = ad::sigmoid(ad::slice_cols(gates, 3 * h, h));
  const ad::Var c = ad::add(ad::mul(forget_gate, state.c),
                            ad::mul(in_gate, candidate));
  const ad::Var hidden = ad::mul(out_gate, ad::tanh(c));
  return {hidden, c};
}

inline void check_state(const BoundLstm& lstm, const LstmState& state) {
  if (state.h.cols() != lstm.hidden_size || state.c.cols() != lstm.hidden_size ||
      state.h.rows() != 1 || state.c.rows() != 1) {
    throw DimensionError("lstm: state shape " + state.h.value().shape_string() +
                         " vs hidden size " + std::to_string(lstm.hidden_size));
  }
}

}  // namespace detail

inline LstmState lstm_step(const BoundLstm& lstm, const ad::Var& x,
                           const LstmState& state) {
  if (x.rows() != 1 || x.cols() != lstm.input_size) {
    throw DimensionError("lstm_step: input shape " + x.value().shape_string() +
                         " vs 1x" + std::to_string(lstm.input_size));
  }
  detail::check_state(lstm, state);
  return detail::lstm_from_projection(
      lstm, ad::matmul_bias(x, lstm.w_input, lstm.bias), state);
}

// Runs the layer over every row of `inputs` (T x in) and returns all T
// states in order. The input projection is computed once for the whole
// sequence; results are bit-identical to chained lstm_step calls.
inline std::vector<LstmState> encode_sequence(const BoundLstm& lstm,
                                              const ad::Var& inputs,
                                              const LstmState& init) {
  if (inputs.rows() == 0) throw ContractError("encode_sequence: empty sequence");
  if (inputs.cols() != lstm.input_size) {
    throw DimensionError("encode_sequence: input shape " +
                         inputs.value().shape_string() + " vs Tx" +
                         std::to_string(lstm.input_size));
  }
  detail::check_state(lstm, init);
  const ad::Var projected = ad::matmul_bias(inputs, lstm.w_input, lstm.bias);
  std::vector<LstmState> states;
  states.reserve(inputs.rows());
  LstmState state = init;
  for (std::size_t t = 0; t < inputs.rows(); ++t) {
    state = detail::lstm_from_projection(lstm, ad::row(projected, t), state);
    states.push_back(state);
  }
  return states;
}

inline std::vector<LstmState> encode_sequence(const BoundLstm& lstm,
                                              std::span<const ad::Var> inputs,
                                              const LstmState& init) {
  if (inputs.empty()) throw ContractError("encode_sequence: empty sequence");
  return encode_sequence(lstm, ad::stack_rows(inputs), init);
}

// T x H matrix of the hidden vectors.
inline ad::Var stack_hidden(std::span<const LstmState> states) {
  std::vector<ad::Var> hs;
  hs.reserve(states.size());
  for (const auto& s : states) hs.push_back(s.h);
  return ad::stack_rows(hs);
}

}  // namespace cbp
