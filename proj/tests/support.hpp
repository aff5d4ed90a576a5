// SPDX-License-Identifier: Apache-2.0
// Small fixtures shared by the test binaries.
#pragma once

#include <random>

#include "flexcare/model.hpp"

namespace fx {

using namespace flexcare;

/// A compact model with small inputs so tests stay fast.
inline ModelConfig tiny_config(std::size_t d = 8, std::size_t layers = 1, std::size_t experts = 3,
                               std::size_t k = 2) {
  ModelConfig c;
  c.d = d;
  c.layers = layers;
  c.heads = 2;
  c.experts = experts;
  c.top_k = k;
  c.ts_features = 5;
  c.ts_max_steps = 4;
  c.image_height = 4;
  c.image_width = 4;
  c.image_channels = 1;
  c.patch = 2;
  c.note_features = 3;
  c.note_max_tokens = 3;
  return c;
}

/// Random input with the given presence bits (t = 1, i = 2, n = 4).
template <typename T = double>
SampleInput<T> random_input(const ModelConfig& c, unsigned present, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> steps(1, c.ts_max_steps), notes(1, c.note_max_tokens);
  const auto fill = [&](std::size_t r, std::size_t cols) {
    Matrix<T> m(r, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<T>(nd(rng));
    return m;
  };
  SampleInput<T> x;
  if (present & 1) x.modality[0] = fill(steps(rng), c.ts_features);
  if (present & 2) x.modality[1] = fill(c.image_height, c.image_width * c.image_channels);
  if (present & 4) x.modality[2] = fill(notes(rng), c.note_features);
  return x;
}

inline TaskRegistry two_tasks() {
  TaskRegistry r;
  r.add({0, "A", HeadKind::binary, 1, 0.5});
  r.add({0, "B", HeadKind::multilabel, 3, 1.0});
  return r;
}

}  // namespace fx
