// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "flexcare/autodiff.hpp"
#include "flexcare/tensor.hpp"

namespace flexcare {

/// Ordered collection of named trainable tensors.
template <typename T>
class ParamStore {
 public:
  std::size_t add(std::string name, Matrix<T> value) {
    if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate tensor " + name);
    index_.emplace(name, values_.size());
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
    return values_.size() - 1;
  }

  bool contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

  std::size_t index(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw std::out_of_range("ParamStore: no tensor named " + std::string(name));
    return it->second;
  }

  std::size_t size() const noexcept { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const std::vector<std::string>& names() const noexcept { return names_; }

  Matrix<T>& value(std::size_t i) { return values_.at(i); }
  const Matrix<T>& value(std::size_t i) const { return values_.at(i); }
  Matrix<T>& value(std::string_view n) { return values_[index(n)]; }
  const Matrix<T>& value(std::string_view n) const { return values_[index(n)]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (std::size_t i = 0; i < values_.size(); ++i) out.add(names_[i], values_[i].template cast<U>());
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Matrix<T>> values_;
  std::map<std::string, std::size_t> index_;
};

/// Gradient accumulators shaped like a ParamStore, with a per-tensor flag
/// recording which tensors took part in the current step.
template <typename T>
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(const ParamStore<T>& store) { reset(store); }

  void reset(const ParamStore<T>& store) {
    grads_.clear();
    used_.assign(store.size(), false);
    for (std::size_t i = 0; i < store.size(); ++i)
      grads_.emplace_back(store.value(i).rows(), store.value(i).cols());
  }
  void zero() {
    for (auto& g : grads_) g.fill(T{});
    std::fill(used_.begin(), used_.end(), false);
  }
  std::size_t size() const noexcept { return grads_.size(); }
  Matrix<T>& grad(std::size_t i) { return grads_.at(i); }
  const Matrix<T>& grad(std::size_t i) const { return grads_.at(i); }
  bool used(std::size_t i) const { return used_.at(i); }
  void mark_used(std::size_t i) { used_.at(i) = true; }

 private:
  std::vector<Matrix<T>> grads_;
  std::vector<bool> used_;
};

/// Creates tape leaves for parameters, one leaf per tensor per tape.
template <typename T>
class ParamBinder {
 public:
  ParamBinder(ad::Tape<T>& tape, const ParamStore<T>& store, Gradients<T>* grads = nullptr)
      : tape_(tape), store_(store), grads_(grads), cache_(store.size()) {}

  ad::Var operator()(std::string_view name) { return get(store_.index(name)); }

  ad::Var get(std::size_t i) {
    if (!cache_[i].valid()) {
      Matrix<T>* sink = nullptr;
      if (grads_) {
        grads_->mark_used(i);
        sink = &grads_->grad(i);
      }
      cache_[i] = tape_.param(store_.value(i), sink);
    }
    return cache_[i];
  }

  ad::Tape<T>& tape() { return tape_; }
  const ParamStore<T>& store() const { return store_; }

 private:
  ad::Tape<T>& tape_;
  const ParamStore<T>& store_;
  Gradients<T>* grads_;
  std::vector<ad::Var> cache_;
};

namespace init {

template <typename T, typename Rng>
Matrix<T> xavier_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-a, a);
  Matrix<T> m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<T>(dist(rng));
  return m;
}

template <typename T, typename Rng>
Matrix<T> normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix<T> m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<T>(dist(rng));
  return m;
}

}  // namespace init

}  // namespace flexcare
