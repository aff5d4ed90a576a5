// SPDX-License-Identifier: Apache-2.0
//
// Task/modality-aware mixture of experts. The router scores experts from
// the combination token and the task token jointly; the k best experts are
// mixed with softmax weights over their logits.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "flexcare/autodiff.hpp"
#include "flexcare/encoder.hpp"
#include "flexcare/seqlayout.hpp"
#include "flexcare/tensor.hpp"

namespace flexcare {

struct ExpertVars {
  Var w1, b1, w2, b2;
};

struct MoEVars {
  std::vector<ExpertVars> experts;
  Var router_w1;  // d x N^e, applied to the combination token
  Var router_w2;  // d x N^e, applied to the task token
  std::size_t k = 1;
};

struct GateRecord {
  std::vector<std::size_t> expert_ids;  // descending gate order
  std::vector<double> gate_weights;
};

/// Indices of the k largest entries; ties go to the lower index.
template <typename T>
std::vector<std::size_t> topk_indices(std::span<const T> v, std::size_t k) {
  if (k < 1 || k > v.size()) throw std::invalid_argument("topk: k out of range");
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  idx.resize(k);
  return idx;
}

/// Keeps the top-k entries and replaces the rest with kMaskNegative.
template <typename T>
std::vector<T> topk_mask(std::span<const T> v, std::size_t k) {
  const auto keep = topk_indices(v, k);
  std::vector<T> out(v.size(), static_cast<T>(kMaskNegative));
  for (std::size_t i : keep) out[i] = v[i];
  return out;
}

/// Softmax over the top-k logits. Gate weights are listed for the selected
/// experts only, in the same order as `expert_ids`.
template <typename T>
GateRecord gate(std::span<const T> logits, std::size_t k) {
  GateRecord g;
  g.expert_ids = topk_indices(logits, k);
  const double mx = static_cast<double>(logits[g.expert_ids.front()]);
  double sum = 0.0;
  for (std::size_t i : g.expert_ids) {
    g.gate_weights.push_back(std::exp(static_cast<double>(logits[i]) - mx));
    sum += g.gate_weights.back();
  }
  for (double& w : g.gate_weights) w /= sum;
  return g;
}

/// z_c W1 + z_task W2 as a 1 x N^e node.
template <typename T>
Var router_logits(Tape<T>& t, Var z_c, Var z_task, Var w1, Var w2) {
  const std::size_t d = t.value(w1).rows();
  if (t.value(z_c).cols() != d || t.value(z_task).cols() != d || t.value(w2).rows() != d)
    throw ShapeError("router_logits: width mismatch");
  return ad::add(t, ad::matmul(t, z_c, w1), ad::matmul(t, z_task, w2));
}

template <typename T>
Var expert_forward(Tape<T>& t, Var x, const ExpertVars& e) {
  return feed_forward(t, x, e.w1, e.b1, e.w2, e.b2);
}

struct MoEOutput {
  Var refined;   // 1 x d
  Var gates;     // 1 x N^e dense gate vector, zero off the selected set
  GateRecord record;
};

/// s_c = sum over selected experts of gate_i * E_i(z_c). Unselected experts
/// are never evaluated. Selection is treated as constant for gradients.
/// `noise`, when non-null, adds the given perturbation to the logits used
/// for both selection and gating.
template <typename T>
MoEOutput moe_forward(Tape<T>& t, Var z_c, Var z_task, const MoEVars& p,
                      const std::vector<T>* noise = nullptr) {
  const std::size_t ne = p.experts.size();
  if (ne == 0) throw std::invalid_argument("moe_forward: no experts");
  if (p.k < 1 || p.k > ne) throw std::invalid_argument("moe_forward: k out of range");
  Var logits = router_logits(t, z_c, z_task, p.router_w1, p.router_w2);
  if (noise) {
    if (noise->size() != ne) throw ShapeError("moe_forward: noise width mismatch");
    logits = ad::add(t, logits, t.constant(Matrix<T>(1, ne, *noise)));
  }
  const Matrix<T>& lv = t.value(logits);
  MoEOutput out;
  out.record = gate(std::span<const T>(lv.data(), ne), p.k);
  Matrix<T> mask(1, ne, static_cast<T>(kMaskNegative));
  for (std::size_t i : out.record.expert_ids) mask[i] = T{};
  out.gates = ad::softmax_rows(t, logits, &mask);
  std::vector<Var> terms;
  terms.reserve(p.k);
  for (std::size_t i : out.record.expert_ids) {
    Var gi = ad::element(t, out.gates, 0, i);
    terms.push_back(ad::mul_scalar(t, expert_forward(t, z_c, p.experts[i]), gi));
  }
  out.refined = terms.size() == 1 ? terms[0] : ad::add_n(t, std::span<const Var>(terms));
  return out;
}

/// Importance loss: squared coefficient of variation of per-expert summed
/// gate mass, times `weight`. `gates` has one routed token per row.
template <typename T>
T balance_loss(const Matrix<T>& gates, T weight = T(1)) {
  if (gates.rows() == 0 || gates.cols() == 0) throw std::invalid_argument("balance_loss: no routed tokens");
  const std::size_t ne = gates.cols();
  std::vector<double> imp(ne, 0.0);
  for (std::size_t r = 0; r < gates.rows(); ++r)
    for (std::size_t e = 0; e < ne; ++e) imp[e] += static_cast<double>(gates(r, e));
  const double mean = std::accumulate(imp.begin(), imp.end(), 0.0) / double(ne);
  if (mean <= 0.0) return T{};
  double var = 0.0;
  for (double v : imp) var += (v - mean) * (v - mean);
  var /= double(ne);
  return static_cast<T>(double(weight) * var / (mean * mean));
}

/// d balance_loss / d gates, same shape as `gates`.
template <typename T>
Matrix<T> balance_loss_grad(const Matrix<T>& gates, T weight = T(1)) {
  if (gates.rows() == 0 || gates.cols() == 0) throw std::invalid_argument("balance_loss: no routed tokens");
  const std::size_t ne = gates.cols();
  std::vector<double> imp(ne, 0.0);
  for (std::size_t r = 0; r < gates.rows(); ++r)
    for (std::size_t e = 0; e < ne; ++e) imp[e] += static_cast<double>(gates(r, e));
  const double n = double(ne);
  const double mean = std::accumulate(imp.begin(), imp.end(), 0.0) / n;
  Matrix<T> g(gates.rows(), ne);
  if (mean <= 0.0) return g;
  double var = 0.0;
  for (double v : imp) var += (v - mean) * (v - mean);
  var /= n;
  // cv2 = var / mean^2; d var/d I_e = 2 (I_e - mean) / n; d mean/d I_e = 1 / n.
  std::vector<double> d_imp(ne);
  for (std::size_t e = 0; e < ne; ++e)
    d_imp[e] = double(weight) * (2.0 * (imp[e] - mean) / n / (mean * mean) - 2.0 * var / (mean * mean * mean) / n);
  for (std::size_t r = 0; r < gates.rows(); ++r)
    for (std::size_t e = 0; e < ne; ++e) g(r, e) = static_cast<T>(d_imp[e]);
  return g;
}

}  // namespace flexcare
