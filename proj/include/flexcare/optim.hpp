// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "flexcare/params.hpp"

namespace flexcare {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

/// Adam with per-tensor step counters. Tensors not marked used in the
/// gradient set are skipped entirely, moments included.
template <typename T>
class Adam {
 public:
  Adam(const ParamStore<T>& store, AdamConfig cfg) : cfg_(cfg) { resize(store); }

  void resize(const ParamStore<T>& store) {
    for (std::size_t i = m_.size(); i < store.size(); ++i) {
      m_.emplace_back(store.value(i).rows(), store.value(i).cols());
      v_.emplace_back(store.value(i).rows(), store.value(i).cols());
      steps_.push_back(0);
    }
  }

  void step(ParamStore<T>& store, const Gradients<T>& grads) {
    resize(store);
    for (std::size_t i = 0; i < store.size(); ++i) {
      if (i >= grads.size() || !grads.used(i)) continue;
      Matrix<T>& p = store.value(i);
      const Matrix<T>& g = grads.grad(i);
      Matrix<T>& m = m_[i];
      Matrix<T>& v = v_[i];
      const std::size_t t = ++steps_[i];
      const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t));
      const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t));
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = static_cast<double>(g[k]);
        const double mk = cfg_.beta1 * double(m[k]) + (1.0 - cfg_.beta1) * gk;
        const double vk = cfg_.beta2 * double(v[k]) + (1.0 - cfg_.beta2) * gk * gk;
        m[k] = static_cast<T>(mk);
        v[k] = static_cast<T>(vk);
        const double mhat = mk / bc1;
        const double vhat = vk / bc2;
        double pk = static_cast<double>(p[k]);
        if (cfg_.weight_decay != 0.0) pk -= cfg_.lr * cfg_.weight_decay * pk;
        pk -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        p[k] = static_cast<T>(pk);
      }
    }
  }

  std::size_t steps(std::size_t i) const { return steps_.at(i); }
  AdamConfig& config() { return cfg_; }

 private:
  AdamConfig cfg_;
  std::vector<Matrix<T>> m_, v_;
  std::vector<std::size_t> steps_;
};

}  // namespace flexcare
