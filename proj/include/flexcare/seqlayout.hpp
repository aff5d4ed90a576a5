// SPDX-License-Identifier: Apache-2.0
//
// Modality combinations, token sequence layout and the additive attention
// mask that routes information between task, combination and modality
// tokens.
#pragma once

#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "flexcare/tensor.hpp"

namespace flexcare {

enum class Modality : std::uint8_t { timeseries = 0, image = 1, note = 2 };

inline constexpr std::size_t kNumModalities = 3;
inline constexpr std::size_t kMaxModalities = 8;
inline constexpr std::array<Modality, kNumModalities> kModalities = {
    Modality::timeseries, Modality::image, Modality::note};

/// Finite stand-in for -inf in additive masks.
inline constexpr double kMaskNegative = -1e9;

inline constexpr std::size_t index_of(Modality m) { return static_cast<std::size_t>(m); }

inline const char* modality_code(Modality m) {
  switch (m) {
    case Modality::timeseries: return "t";
    case Modality::image: return "i";
    case Modality::note: return "n";
  }
  return "?";
}

/// A set of modality indices stored as a bitmask. Indices are positions in
/// the canonical modality order.
class ModalitySet {
 public:
  constexpr ModalitySet() = default;
  constexpr explicit ModalitySet(std::uint32_t bits) : bits_(bits) {}
  constexpr ModalitySet(std::initializer_list<Modality> ms) {
    for (Modality m : ms) bits_ |= 1u << index_of(m);
  }
  static constexpr ModalitySet all(std::size_t n) { return ModalitySet((1u << n) - 1u); }

  constexpr bool contains(std::size_t idx) const { return (bits_ >> idx) & 1u; }
  constexpr bool contains(Modality m) const { return contains(index_of(m)); }
  constexpr bool is_subset_of(ModalitySet o) const { return (bits_ & ~o.bits_) == 0; }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr std::size_t size() const { return static_cast<std::size_t>(std::popcount(bits_)); }
  constexpr std::uint32_t bits() const { return bits_; }
  void insert(std::size_t idx) { bits_ |= 1u << idx; }
  void insert(Modality m) { insert(index_of(m)); }

  /// Member indices in ascending (canonical) order.
  std::vector<std::size_t> members() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < 32; ++i)
      if (contains(i)) out.push_back(i);
    return out;
  }

  friend constexpr bool operator==(ModalitySet a, ModalitySet b) { return a.bits_ == b.bits_; }

 private:
  std::uint32_t bits_ = 0;
};

/// A nonempty subset of modalities; one learnable token per combination.
using ModalityCombination = ModalitySet;

/// Human readable name such as "t+i" (canonical three-modality naming).
inline std::string combination_name(ModalityCombination c) {
  std::string s;
  for (std::size_t idx : c.members()) {
    if (!s.empty()) s += '+';
    s += idx < kNumModalities ? modality_code(kModalities[idx]) : std::to_string(idx);
  }
  return s;
}

/// All nonempty subsets ordered by cardinality, then lexicographically by
/// member index.
inline std::vector<ModalityCombination> enumerate_combinations(ModalitySet modalities) {
  if (modalities.empty()) throw std::invalid_argument("enumerate_combinations: empty modality set");
  const std::vector<std::size_t> idx = modalities.members();
  const std::size_t n = idx.size();
  std::vector<ModalityCombination> out;
  out.reserve((std::size_t{1} << n) - 1);
  for (std::size_t card = 1; card <= n; ++card) {
    // Lexicographic k-combinations of positions 0..n-1.
    std::vector<std::size_t> pick(card);
    for (std::size_t k = 0; k < card; ++k) pick[k] = k;
    while (true) {
      ModalitySet c;
      for (std::size_t p : pick) c.insert(idx[p]);
      out.push_back(c);
      std::size_t k = card;
      while (k > 0 && pick[k - 1] == n - card + k - 1) --k;
      if (k == 0) break;
      ++pick[k - 1];
      for (std::size_t q = k; q < card; ++q) pick[q] = pick[q - 1] + 1;
    }
  }
  return out;
}

/// Position of `c` in the canonical enumeration of all `n_modalities`
/// combinations; this is the row of its learnable token.
inline std::size_t canonical_index(ModalityCombination c, std::size_t n_modalities = kNumModalities) {
  const auto all = enumerate_combinations(ModalitySet::all(n_modalities));
  for (std::size_t i = 0; i < all.size(); ++i)
    if (all[i] == c) return i;
  throw std::invalid_argument("canonical_index: combination outside modality set");
}

struct TokenSpan {
  std::size_t start = 0;
  std::size_t length = 0;
};

enum class SlotKind { task, combination, modality };

struct SlotOwner {
  SlotKind kind;
  ModalityCombination combination;  // valid for combination slots
  std::size_t modality = 0;         // valid for modality slots
};

/// Index map of one assembled sequence: task token at 0, then one slot per
/// instantiated combination, then each present modality's token span.
struct SequenceLayout {
  std::size_t n_modalities = kNumModalities;
  ModalitySet present;
  std::vector<ModalityCombination> combinations;  // slot i+1 holds combinations[i]
  std::vector<std::optional<TokenSpan>> spans;    // indexed by modality
  std::size_t total_len = 0;

  std::size_t task_slot() const { return 0; }
  std::size_t comb_slot(std::size_t i) const { return 1 + i; }
  std::size_t n_comb() const { return combinations.size(); }

  std::optional<std::size_t> comb_slot_of(ModalityCombination c) const {
    for (std::size_t i = 0; i < combinations.size(); ++i)
      if (combinations[i] == c) return comb_slot(i);
    return std::nullopt;
  }

  SlotOwner owner(std::size_t idx) const {
    if (idx >= total_len) throw std::out_of_range("SequenceLayout::owner: index out of range");
    if (idx == 0) return {SlotKind::task, {}, 0};
    if (idx <= combinations.size()) return {SlotKind::combination, combinations[idx - 1], 0};
    for (std::size_t m = 0; m < spans.size(); ++m) {
      const auto& s = spans[m];
      if (s && idx >= s->start && idx < s->start + s->length) return {SlotKind::modality, {}, m};
    }
    throw std::logic_error("SequenceLayout::owner: unmapped index");
  }
};

/// Lay out the sequence for the present modalities. Combinations that are
/// not subsets of `present` are dropped. `with_combinations = false` omits
/// combination slots altogether.
inline SequenceLayout build_layout(ModalitySet present, std::span<const std::size_t> token_counts,
                                   std::size_t n_modalities = kNumModalities,
                                   bool with_combinations = true) {
  if (present.empty()) throw std::invalid_argument("build_layout: no modality present");
  if (n_modalities > kMaxModalities || token_counts.size() < n_modalities)
    throw std::invalid_argument("build_layout: token_counts must cover every modality");
  if (!present.is_subset_of(ModalitySet::all(n_modalities)))
    throw std::invalid_argument("build_layout: present set outside modality range");
  SequenceLayout l;
  l.n_modalities = n_modalities;
  l.present = present;
  if (with_combinations) l.combinations = enumerate_combinations(present);
  l.spans.assign(n_modalities, std::nullopt);
  std::size_t cursor = 1 + l.combinations.size();
  for (std::size_t m = 0; m < n_modalities; ++m) {
    if (!present.contains(m)) continue;
    if (token_counts[m] == 0)
      throw std::invalid_argument("build_layout: present modality with zero tokens");
    l.spans[m] = TokenSpan{cursor, token_counts[m]};
    cursor += token_counts[m];
  }
  l.total_len = cursor;
  return l;
}

/// Additive attention mask: 0 where attention is allowed, kMaskNegative
/// elsewhere. Row 0 (task token) sees everything; no other row sees
/// column 0; a combination token sees itself and its member modalities'
/// tokens; a modality token sees its own modality only.
template <typename T = double>
Matrix<T> build_mask(const SequenceLayout& layout) {
  const std::size_t n = layout.total_len;
  Matrix<T> mask(n, n, static_cast<T>(kMaskNegative));
  std::vector<SlotOwner> owners;
  owners.reserve(n);
  for (std::size_t i = 0; i < n; ++i) owners.push_back(layout.owner(i));
  for (std::size_t j = 0; j < n; ++j) mask(0, j) = T{};
  for (std::size_t i = 1; i < n; ++i) {
    const SlotOwner& oi = owners[i];
    for (std::size_t j = 1; j < n; ++j) {
      const SlotOwner& oj = owners[j];
      bool allowed = false;
      if (i == j) {
        allowed = true;
      } else if (oj.kind == SlotKind::modality) {
        if (oi.kind == SlotKind::combination) allowed = oi.combination.contains(oj.modality);
        else if (oi.kind == SlotKind::modality) allowed = oi.modality == oj.modality;
      }
      if (allowed) mask(i, j) = T{};
    }
  }
  return mask;
}

}  // namespace flexcare
