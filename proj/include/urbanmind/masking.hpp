#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "urbanmind/rng.hpp"
#include "urbanmind/tensor.hpp"

namespace urbanmind {

enum class MaskStrategy { kSpatial, kTemporal, kGlobal };

std::string to_string(MaskStrategy s);

// Explicit set of masked (t, c, i, j) positions over a (T, C, l, l) tensor.
// Indices are kept sorted and unique.
struct MaskSpec {
  MaskStrategy strategy = MaskStrategy::kSpatial;
  std::vector<std::array<int64_t, 4>> indices;
  double p_s = 0.0;  // 0 when the strategy has no spatial ratio
  double p_t = 0.0;
  std::array<int64_t, 4> shape{0, 0, 0, 0};  // (T, C, l, l)

  int64_t count() const { return static_cast<int64_t>(indices.size()); }
  // "strategy p_s p_t" plus shape, for the run log.
  std::string describe() const;
};

// Number of masked positions for a ratio over n slots: nearest integer,
// floor 1.
int64_t mask_count(double ratio, int64_t n);

// One channel chosen uniformly per time step; within that (t, c) slice,
// mask_count(p_s, l*l) distinct cells masked.
MaskSpec spatial_mask(const std::array<int64_t, 4>& shape, double p_s, Rng& rng);

// mask_count(p_t, T) distinct time steps; one channel per sampled step, whole
// l x l slice masked.
MaskSpec temporal_mask(const std::array<int64_t, 4>& shape, double p_t, Rng& rng);

// mask_count(p_t, T) distinct time steps; per step, mask_count(p_s, C*l*l)
// distinct (c, i, j) triples masked.
MaskSpec global_mask(const std::array<int64_t, 4>& shape, double p_s, double p_t,
                     Rng& rng);

// Copy of x with masked positions set to 0; everything else bit-identical.
Tensor apply_mask(const Tensor& x, const MaskSpec& mask);

}  // namespace urbanmind
