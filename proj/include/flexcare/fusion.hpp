// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "flexcare/autodiff.hpp"
#include "flexcare/encoder.hpp"

namespace flexcare {

struct FusionVars {
  Var w1;        // 2d x d
  Var w2;        // d x 1
  Var ln_gain;   // 1 x d
  Var ln_bias;   // 1 x d
  double epsilon = 1.0;
};

/// tanh([z_task || s_c] W1) W2 as a 1x1 node.
template <typename T>
Var score_combination(Tape<T>& t, Var z_task, Var s_c, const FusionVars& p) {
  const std::size_t d = t.value(z_task).cols();
  if (t.value(s_c).cols() != d || t.value(p.w1).rows() != 2 * d)
    throw ShapeError("score_combination: width mismatch");
  const Var both[] = {z_task, s_c};
  Var joint = ad::hstack(t, std::span<const Var>(both));
  return ad::matmul(t, ad::tanh(t, ad::matmul(t, joint, p.w1)), p.w2);
}

struct FusionOutput {
  Var patient;  // 1 x 2d: [z_task || LN(sum_c alpha_c s_c)]
  Var alpha;    // 1 x n_comb
};

/// Temperature softmax over combination scores, weighted sum of refined
/// combination vectors, layer norm, then concatenation after z_task.
template <typename T>
FusionOutput fuse(Tape<T>& t, Var z_task, std::span<const Var> refined, const FusionVars& p) {
  if (refined.empty()) throw std::invalid_argument("fuse: no combination representations");
  if (!(p.epsilon > 0.0)) throw std::invalid_argument("fuse: temperature must be positive");
  std::vector<Var> scores;
  scores.reserve(refined.size());
  for (Var s : refined) scores.push_back(score_combination(t, z_task, s, p));
  Var row = scores.size() == 1 ? scores[0] : ad::hstack(t, std::span<const Var>(scores));
  FusionOutput out;
  out.alpha = ad::softmax_rows(t, ad::scale(t, row, static_cast<T>(1.0 / p.epsilon)));
  Var stacked = refined.size() == 1 ? refined[0] : ad::vstack(t, refined);
  Var pooled = ad::matmul(t, out.alpha, stacked);
  Var normed = ad::layer_norm(t, pooled, p.ln_gain, p.ln_bias);
  const Var both[] = {z_task, normed};
  out.patient = ad::hstack(t, std::span<const Var>(both));
  return out;
}

}  // namespace flexcare
