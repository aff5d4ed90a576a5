// SPDX-License-Identifier: Apache-2.0
//
// Unimodal embedders, sequence assembly and the masked post-norm
// transformer encoder.
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "flexcare/autodiff.hpp"
#include "flexcare/seqlayout.hpp"
#include "flexcare/tensor.hpp"

namespace flexcare {

using ad::Tape;
using ad::Var;

/// A linear map with bias plus a learned positional table.
struct EmbedderVars {
  Var weight;
  Var bias;
  Var positions;
};

struct EncoderLayerVars {
  Var wq, wk, wv;
  Var ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Var ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

struct EncodedSample {
  Var hidden;                          // N^h x d, final layer output
  Var z_task;                          // 1 x d
  std::optional<Var> z_comb;           // n_comb x d, rows in layout order
  std::vector<std::optional<Var>> modality_outputs;  // per modality span
};

namespace detail {
template <typename T>
Var project_with_positions(Tape<T>& t, Var x, const EmbedderVars& e, const char* what) {
  const Matrix<T>& xv = t.value(x);
  const Matrix<T>& pos = t.value(e.positions);
  if (xv.cols() != t.value(e.weight).rows())
    throw ShapeError(std::string(what) + ": feature width " + std::to_string(xv.cols()) +
                     " does not match projection input " + std::to_string(t.value(e.weight).rows()));
  if (xv.rows() == 0) throw ShapeError(std::string(what) + ": no tokens");
  if (xv.rows() > pos.rows())
    throw ShapeError(std::string(what) + ": " + std::to_string(xv.rows()) +
                     " tokens exceed positional table of " + std::to_string(pos.rows()));
  Var proj = ad::add_row(t, ad::matmul(t, x, e.weight), e.bias);
  return ad::add(t, proj, ad::slice_rows(t, e.positions, 0, xv.rows()));
}
}  // namespace detail

/// One token per time step: x_s W + b + p_s.
template <typename T>
Var embed_timeseries(Tape<T>& t, const Matrix<T>& x, const EmbedderVars& e) {
  return detail::project_with_positions(t, t.constant(x), e, "embed_timeseries");
}

/// Flatten non-overlapping patch x patch tiles in raster order. `image` is
/// H x (W * channels) with channel values interleaved per pixel; each output
/// row lists a tile's pixels row-major, channels innermost.
template <typename T>
Matrix<T> image_patches(const Matrix<T>& image, std::size_t channels, std::size_t patch) {
  if (channels == 0 || patch == 0) throw ShapeError("image_patches: channels and patch must be positive");
  if (image.cols() % channels != 0) throw ShapeError("image_patches: width not a multiple of channels");
  const std::size_t h = image.rows(), w = image.cols() / channels;
  if (h % patch != 0 || w % patch != 0)
    throw ShapeError("image_patches: image " + shape_str(h, w) + " not divisible by patch " +
                     std::to_string(patch));
  const std::size_t ph = h / patch, pw = w / patch;
  Matrix<T> out(ph * pw, patch * patch * channels);
  for (std::size_t py = 0; py < ph; ++py)
    for (std::size_t px = 0; px < pw; ++px) {
      auto dst = out.row(py * pw + px);
      std::size_t k = 0;
      for (std::size_t dy = 0; dy < patch; ++dy)
        for (std::size_t dx = 0; dx < patch; ++dx)
          for (std::size_t c = 0; c < channels; ++c)
            dst[k++] = image(py * patch + dy, (px * patch + dx) * channels + c);
    }
  return out;
}

template <typename T>
Var embed_image(Tape<T>& t, const Matrix<T>& image, std::size_t channels, std::size_t patch,
                const EmbedderVars& e) {
  return detail::project_with_positions(t, t.constant(image_patches(image, channels, patch)), e,
                                        "embed_image");
}

/// Projects precomputed note embedding vectors (one per row).
template <typename T>
Var embed_note(Tape<T>& t, const Matrix<T>& v, const EmbedderVars& e) {
  return detail::project_with_positions(t, t.constant(v), e, "embed_note");
}

/// H^0 = [task token; combination tokens in layout order; modality spans].
/// `comb_tokens` holds one row per combination in canonical order.
template <typename T>
Var assemble_sequence(Tape<T>& t, const SequenceLayout& layout, Var task_token, Var comb_tokens,
                      const std::vector<std::optional<Var>>& modality_tokens) {
  std::vector<Var> parts;
  parts.push_back(task_token);
  for (ModalityCombination c : layout.combinations)
    parts.push_back(ad::slice_rows(t, comb_tokens, canonical_index(c, layout.n_modalities), 1));
  for (std::size_t m = 0; m < layout.n_modalities; ++m) {
    const auto& span = layout.spans[m];
    const bool have = m < modality_tokens.size() && modality_tokens[m].has_value();
    if (span.has_value() != have)
      throw ShapeError("assemble_sequence: modality presence does not match layout");
    if (!span) continue;
    if (t.value(*modality_tokens[m]).rows() != span->length)
      throw ShapeError("assemble_sequence: span length mismatch for modality " + std::to_string(m));
    parts.push_back(*modality_tokens[m]);
  }
  Var h0 = ad::vstack(t, std::span<const Var>(parts));
  if (t.value(h0).rows() != layout.total_len) throw ShapeError("assemble_sequence: length mismatch");
  return h0;
}

/// Multi-head attention with an additive mask; each head scores with
/// 1/sqrt(d/heads) and head outputs are concatenated.
template <typename T>
Var masked_mhsa(Tape<T>& t, Var h, const Matrix<T>& mask, const EncoderLayerVars& p, std::size_t heads) {
  const Matrix<T>& hv = t.value(h);
  const std::size_t n = hv.rows(), d = hv.cols();
  if (mask.rows() != n || mask.cols() != n)
    throw ShapeError("masked_mhsa: mask " + shape_str(mask.rows(), mask.cols()) + " for " +
                     std::to_string(n) + " tokens");
  if (heads == 0 || d % heads != 0) throw ShapeError("masked_mhsa: width not divisible by heads");
  if (t.value(p.wq).rows() != d) throw ShapeError("masked_mhsa: projection width mismatch");
  const std::size_t dh = d / heads;
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));
  Var q = ad::matmul(t, h, p.wq);
  Var k = ad::matmul(t, h, p.wk);
  Var v = ad::matmul(t, h, p.wv);
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t i = 0; i < heads; ++i) {
    Var qh = heads == 1 ? q : ad::slice_cols(t, q, i * dh, dh);
    Var kh = heads == 1 ? k : ad::slice_cols(t, k, i * dh, dh);
    Var vh = heads == 1 ? v : ad::slice_cols(t, v, i * dh, dh);
    Var logits = ad::scale(t, ad::matmul_nt(t, qh, kh), inv_scale);
    Var attn = ad::softmax_rows(t, logits, &mask);
    outs.push_back(ad::matmul(t, attn, vh));
  }
  return heads == 1 ? outs[0] : ad::hstack(t, std::span<const Var>(outs));
}

template <typename T>
Var feed_forward(Tape<T>& t, Var x, Var w1, Var b1, Var w2, Var b2) {
  Var hdn = ad::gelu(t, ad::add_row(t, ad::matmul(t, x, w1), b1));
  return ad::add_row(t, ad::matmul(t, hdn, w2), b2);
}

/// Post-norm layer: H~ = LN(H + MHSA(H)); out = LN(H~ + FFN(H~)).
template <typename T>
Var encoder_layer(Tape<T>& t, Var h, const Matrix<T>& mask, const EncoderLayerVars& p, std::size_t heads) {
  Var attn = masked_mhsa(t, h, mask, p, heads);
  Var mid = ad::layer_norm(t, ad::add(t, h, attn), p.ln1_gain, p.ln1_bias);
  Var ffn = feed_forward(t, mid, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2);
  return ad::layer_norm(t, ad::add(t, mid, ffn), p.ln2_gain, p.ln2_bias);
}

/// Runs the layer stack and slices out task, combination and modality rows.
template <typename T>
EncodedSample encode(Tape<T>& t, Var h0, const Matrix<T>& mask, const SequenceLayout& layout,
                     const std::vector<EncoderLayerVars>& layers, std::size_t heads) {
  if (layers.empty()) throw ShapeError("encode: at least one layer required");
  Var h = h0;
  for (const auto& l : layers) h = encoder_layer(t, h, mask, l, heads);
  EncodedSample out;
  out.hidden = h;
  out.z_task = ad::slice_rows(t, h, 0, 1);
  if (layout.n_comb() > 0) out.z_comb = ad::slice_rows(t, h, 1, layout.n_comb());
  out.modality_outputs.assign(layout.n_modalities, std::nullopt);
  for (std::size_t m = 0; m < layout.n_modalities; ++m)
    if (const auto& s = layout.spans[m]) out.modality_outputs[m] = ad::slice_rows(t, h, s->start, s->length);
  return out;
}

}  // namespace flexcare
