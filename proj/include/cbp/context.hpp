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

// Scaled dot-product self-attention over the interaction states with a
// single projection shared between the query and key roles.

#pragma once

#include <cmath>
#include <string>

#include "cbp/numerics.hpp"

namespace cbp {

struct ContextParams {
  int projection = -1;  // D x d
  std::size_t input_size = 0;
  std::size_t projection_size = 0;
};

inline ContextParams add_context(ParamStore& store, const std::string& prefix,
                                 std::size_t input_size,
                                 std::size_t projection_size, Rng& rng) {
  if (projection_size == 0) {
    throw ConfigError("context projection size must be positive");
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(input_size));
  ContextParams p;
  p.input_size = input_size;
  p.projection_size = projection_size;
  p.projection = store.add(
      prefix + ".projection",
      uniform_matrix(input_size, projection_size, bound, rng));
  return p;
}

struct ContextOutput {
  ad::Var weights;     // T x T, row-stochastic
  ad::Var aggregated;  // T x D, weights * Hm
  ad::Var integrated;  // T x 2D, [aggregated | Hm]
};

// Z = (Hm W)(Hm W)^T / sqrt(d). Symmetric because the projection is shared.
inline ad::Var relevance_matrix(const ad::Var& projection,
                                const ad::Var& memory) {
  const std::size_t d = projection.cols();
  if (d == 0) throw ConfigError("context projection size must be positive");
  if (memory.rows() == 0) throw ContractError("relevance_matrix: empty input");
  const ad::Var projected = ad::matmul(memory, projection);
  return ad::scale(ad::matmul_nt(projected, projected),
                   1.0 / std::sqrt(static_cast<double>(d)));
}

inline ContextOutput integrate_context(const ad::Var& projection,
                                       const ad::Var& memory) {
  const ad::Var weights = ad::row_softmax(relevance_matrix(projection, memory));
  const ad::Var aggregated = ad::matmul(weights, memory);
  return {weights, aggregated, ad::concat_cols(aggregated, memory)};
}

// Ablation pass-through: [Hm | Hm] with no attention.
inline ad::Var identity_context(const ad::Var& memory) {
  return ad::concat_cols(memory, memory);
}

}  // namespace cbp
