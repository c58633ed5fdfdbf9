#pragma once

#include <optional>
#include <string>
#include <vector>

#include "urbanmind/rng.hpp"
#include "urbanmind/tensor.hpp"

namespace urbanmind {

// City partitioned into H x W unit cells. Cell indices are 1-based:
// 1 <= i <= height, 1 <= j <= width.
struct CityGrid {
  std::string name;
  int height = 0;
  int width = 0;
  double cell_size_km = 1.0;
};

// Square window of side x side cells anchored at its top-left cell.
struct Region {
  int top_i = 1;
  int top_j = 1;
  int side = 1;

  bool operator==(const Region&) const = default;
  bool fits(const CityGrid& g) const {
    return side >= 1 && top_i >= 1 && top_j >= 1 &&
           top_i + side - 1 <= g.height && top_j + side - 1 <= g.width;
  }
};

// Per-channel affine map onto [-1, 1] with exact inverse.
struct NormalizationScaler {
  std::vector<double> per_channel_min;
  std::vector<double> per_channel_max;

  double normalize_value(int channel, double x) const;
  double denormalize_value(int channel, double y) const;
};

// 5-D dynamics array indexed [day, slot, channel, row, col].
struct UrbanDynamicsTensor {
  Tensor values;  // shape (N, T, C, side, side)
  std::vector<std::string> channel_names;
  std::string city;
  Region region;
  bool normalized = false;
  std::optional<NormalizationScaler> scaler;

  int64_t days() const { return values.dim(0); }
  int64_t slots() const { return values.dim(1); }
  int64_t channels() const { return values.dim(2); }
  int64_t side() const { return values.dim(3); }

  double at(int64_t n, int64_t t, int64_t c, int64_t i, int64_t j) const;
  double& at(int64_t n, int64_t t, int64_t c, int64_t i, int64_t j);

  // Slice of one day: (T, C, side, side).
  Tensor day_slice(int64_t n) const;
  // Single-channel view with C=1 (the target dynamics).
  UrbanDynamicsTensor channel_slice(int64_t c) const;

  void validate() const;
};

enum class SplitMode { kStandard, kZeroShot };

struct SplitSpec {
  std::vector<Region> train_regions;
  std::vector<Region> test_regions;
  SplitMode mode = SplitMode::kStandard;
  // Standard mode holds regions identical and splits along days instead.
  double train_day_fraction = 0.8;
};

// Per-channel upper-bound rule applied before normalization.
struct ClipRule {
  enum Kind { kFixedCap, kPercentile } kind = kFixedCap;
  double value = 140.0;  // cap, or percentile in (0,1]
};

struct ClipPolicy {
  std::vector<ClipRule> per_channel;
  // speed channels -> fixed cap 140, everything else -> 90th percentile
  static ClipPolicy defaults_for(const std::vector<std::string>& channel_names);
};

// Every side x side window whose top-left steps by `stride` in both axes,
// row-major order.
std::vector<Region> partition_city(const CityGrid& grid, int side, int stride);

UrbanDynamicsTensor clip_outliers(const UrbanDynamicsTensor& raw,
                                  const ClipPolicy& policy);

std::pair<UrbanDynamicsTensor, NormalizationScaler> minmax_normalize(
    const UrbanDynamicsTensor& raw);

UrbanDynamicsTensor denormalize(const UrbanDynamicsTensor& data,
                                const NormalizationScaler& scaler);

SplitSpec make_splits(const std::vector<Region>& regions, SplitMode mode,
                      double test_fraction, uint64_t seed);

// Synthetic channel-0 signal: diurnal sinusoid plus a fixed spatial gradient
// with a slow per-day phase drift. Channels c >= 1 are lag-c affine copies of
// channel 0. Values are quantized to f32 so that dataset files round-trip
// exactly.
struct SyntheticParams {
  double amplitude = 1.0;
  double phase = 0.0;
  double phase_drift_per_day = 0.01;  // cycles per day
  double grad_x = 0.4;
  double grad_y = 0.25;
  double coupling = 0.9;
  double channel_offset = 0.1;  // per-channel additive offset step
  double noise = 0.1;

  // Closed-form channel-0 value before noise.
  double base_value(int64_t day, int64_t t, int64_t i, int64_t j, int64_t T,
                    int64_t side) const;
};

UrbanDynamicsTensor generate_synthetic(const Region& region, int64_t days,
                                       int64_t slots, int64_t channels,
                                       uint64_t seed,
                                       const SyntheticParams& params = {});

// Combined per-channel scale over several region tensors (the benchmark-wide
// normalization used by the pipeline).
NormalizationScaler fit_scaler(const std::vector<UrbanDynamicsTensor>& tensors);
UrbanDynamicsTensor apply_scaler(const UrbanDynamicsTensor& raw,
                                 const NormalizationScaler& scaler);

// Dataset directory: `meta` (JSON) + `values.f32` (little-endian f32,
// row-major (N,T,C,side,side)).
void save_dataset(const UrbanDynamicsTensor& tensor, const std::string& dir);
UrbanDynamicsTensor load_dataset(const std::string& dir);

// City dump directory: `meta` (JSON with a region list) + `values.f32` in
// (N, T, R, C, side, side) order; loads as one tensor per region.
void save_city_dump(const std::vector<UrbanDynamicsTensor>& regions,
                    const std::string& dir);
std::vector<UrbanDynamicsTensor> load_city_dump(const std::string& dir);

}  // namespace urbanmind
