#include "urbanmind/masking.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "urbanmind/common.hpp"

namespace urbanmind {

std::string to_string(MaskStrategy s) {
  switch (s) {
    case MaskStrategy::kSpatial: return "spatial";
    case MaskStrategy::kTemporal: return "temporal";
    case MaskStrategy::kGlobal: return "global";
  }
  return "?";
}

std::string MaskSpec::describe() const {
  std::ostringstream os;
  os << to_string(strategy) << " p_s=" << p_s << " p_t=" << p_t << " shape=("
     << shape[0] << "," << shape[1] << "," << shape[2] << "," << shape[3] << ")";
  return os.str();
}

int64_t mask_count(double ratio, int64_t n) {
  return std::max<int64_t>(1, std::llround(ratio * static_cast<double>(n)));
}

namespace {

void check_shape(const std::array<int64_t, 4>& shape) {
  check_arg(shape[0] >= 1 && shape[1] >= 1 && shape[2] >= 1 && shape[3] >= 1,
            "mask shape must be positive");
  check_arg(shape[2] == shape[3], "mask expects a square spatial window");
}

void check_ratio(double r, const char* name) {
  check_arg(r > 0.0 && r < 1.0, std::string(name) + " must lie in (0,1)");
}

void finish(MaskSpec& spec) {
  std::sort(spec.indices.begin(), spec.indices.end());
  check_arg(std::adjacent_find(spec.indices.begin(), spec.indices.end()) ==
                spec.indices.end(),
            "mask indices must be unique");
}

}  // namespace

MaskSpec spatial_mask(const std::array<int64_t, 4>& shape, double p_s, Rng& rng) {
  check_shape(shape);
  check_ratio(p_s, "p_s");
  const int64_t T = shape[0], C = shape[1], l = shape[2];
  const int64_t per_step = mask_count(p_s, l * l);

  MaskSpec spec;
  spec.strategy = MaskStrategy::kSpatial;
  spec.p_s = p_s;
  spec.shape = shape;
  for (int64_t t = 0; t < T; ++t) {
    const auto c = static_cast<int64_t>(rng.below(static_cast<uint64_t>(C)));
    for (uint64_t cell : rng.sample_distinct(static_cast<uint64_t>(l * l),
                                             static_cast<uint64_t>(per_step))) {
      const auto idx = static_cast<int64_t>(cell);
      spec.indices.push_back({t, c, idx / l, idx % l});
    }
  }
  finish(spec);
  return spec;
}

MaskSpec temporal_mask(const std::array<int64_t, 4>& shape, double p_t, Rng& rng) {
  check_shape(shape);
  check_ratio(p_t, "p_t");
  const int64_t T = shape[0], C = shape[1], l = shape[2];
  const int64_t n_steps = mask_count(p_t, T);

  MaskSpec spec;
  spec.strategy = MaskStrategy::kTemporal;
  spec.p_t = p_t;
  spec.shape = shape;
  for (uint64_t step : rng.sample_distinct(static_cast<uint64_t>(T),
                                           static_cast<uint64_t>(n_steps))) {
    const auto t = static_cast<int64_t>(step);
    const auto c = static_cast<int64_t>(rng.below(static_cast<uint64_t>(C)));
    for (int64_t i = 0; i < l; ++i)
      for (int64_t j = 0; j < l; ++j) spec.indices.push_back({t, c, i, j});
  }
  finish(spec);
  return spec;
}

MaskSpec global_mask(const std::array<int64_t, 4>& shape, double p_s, double p_t,
                     Rng& rng) {
  check_shape(shape);
  check_ratio(p_s, "p_s");
  check_ratio(p_t, "p_t");
  const int64_t T = shape[0], C = shape[1], l = shape[2];
  const int64_t n_steps = mask_count(p_t, T);
  const int64_t per_step = mask_count(p_s, C * l * l);

  MaskSpec spec;
  spec.strategy = MaskStrategy::kGlobal;
  spec.p_s = p_s;
  spec.p_t = p_t;
  spec.shape = shape;
  for (uint64_t step : rng.sample_distinct(static_cast<uint64_t>(T),
                                           static_cast<uint64_t>(n_steps))) {
    const auto t = static_cast<int64_t>(step);
    for (uint64_t triple : rng.sample_distinct(static_cast<uint64_t>(C * l * l),
                                               static_cast<uint64_t>(per_step))) {
      const auto v = static_cast<int64_t>(triple);
      spec.indices.push_back({t, v / (l * l), (v / l) % l, v % l});
    }
  }
  finish(spec);
  return spec;
}

Tensor apply_mask(const Tensor& x, const MaskSpec& mask) {
  check_arg(x.rank() == 4, "apply_mask expects a (T,C,l,l) tensor");
  for (int k = 0; k < 4; ++k)
    check_arg(x.dim(k) == mask.shape[static_cast<size_t>(k)],
              "apply_mask: tensor shape does not match mask shape");
  Tensor out = x;
  for (const auto& [t, c, i, j] : mask.indices) out.at4(t, c, i, j) = 0.0;
  return out;
}

}  // namespace urbanmind
