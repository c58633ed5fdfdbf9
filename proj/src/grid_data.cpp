#include "urbanmind/grid_data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "urbanmind/common.hpp"

namespace urbanmind {

namespace fs = std::filesystem;
using nlohmann::json;

double NormalizationScaler::normalize_value(int channel, double x) const {
  const double lo = per_channel_min[static_cast<size_t>(channel)];
  const double hi = per_channel_max[static_cast<size_t>(channel)];
  return 2.0 * (x - lo) / (hi - lo) - 1.0;
}

double NormalizationScaler::denormalize_value(int channel, double y) const {
  const double lo = per_channel_min[static_cast<size_t>(channel)];
  const double hi = per_channel_max[static_cast<size_t>(channel)];
  return (y + 1.0) * 0.5 * (hi - lo) + lo;
}

double UrbanDynamicsTensor::at(int64_t n, int64_t t, int64_t c, int64_t i,
                               int64_t j) const {
  const auto& s = values.shape();
  return values[(((n * s[1] + t) * s[2] + c) * s[3] + i) * s[4] + j];
}

double& UrbanDynamicsTensor::at(int64_t n, int64_t t, int64_t c, int64_t i,
                                int64_t j) {
  const auto& s = values.shape();
  return values[(((n * s[1] + t) * s[2] + c) * s[3] + i) * s[4] + j];
}

Tensor UrbanDynamicsTensor::day_slice(int64_t n) const {
  const int64_t T = slots(), C = channels(), l = side();
  Tensor out({T, C, l, l});
  const int64_t stride = T * C * l * l;
  const double* src = values.data() + n * stride;
  std::copy(src, src + stride, out.data());
  return out;
}

UrbanDynamicsTensor UrbanDynamicsTensor::channel_slice(int64_t c) const {
  check_arg(c >= 0 && c < channels(), "channel index out of range");
  UrbanDynamicsTensor out;
  out.values = Tensor({days(), slots(), 1, side(), side()});
  for (int64_t n = 0; n < days(); ++n)
    for (int64_t t = 0; t < slots(); ++t)
      for (int64_t i = 0; i < side(); ++i)
        for (int64_t j = 0; j < side(); ++j)
          out.at(n, t, 0, i, j) = at(n, t, c, i, j);
  out.channel_names = {channel_names[static_cast<size_t>(c)]};
  out.city = city;
  out.region = region;
  out.normalized = normalized;
  if (scaler) {
    NormalizationScaler s;
    s.per_channel_min = {scaler->per_channel_min[static_cast<size_t>(c)]};
    s.per_channel_max = {scaler->per_channel_max[static_cast<size_t>(c)]};
    out.scaler = s;
  }
  return out;
}

void UrbanDynamicsTensor::validate() const {
  check_arg(values.rank() == 5, "dynamics tensor must be 5-D");
  check_arg(values.dim(3) == values.dim(4), "region window must be square");
  check_arg(static_cast<int64_t>(channel_names.size()) == channels(),
            "channel_names length must equal C");
  check_arg(values.all_finite(), "dynamics tensor holds non-finite values");
  if (normalized) {
    for (int64_t i = 0; i < values.size(); ++i)
      check_arg(values[i] >= -1.0 - 1e-9 && values[i] <= 1.0 + 1e-9,
                "normalized tensor holds values outside [-1, 1]");
  }
}

ClipPolicy ClipPolicy::defaults_for(const std::vector<std::string>& channel_names) {
  ClipPolicy p;
  for (const auto& name : channel_names) {
    ClipRule r;
    if (name.find("speed") != std::string::npos) {
      r.kind = ClipRule::kFixedCap;
      r.value = 140.0;
    } else {
      r.kind = ClipRule::kPercentile;
      r.value = 0.90;
    }
    p.per_channel.push_back(r);
  }
  return p;
}

std::vector<Region> partition_city(const CityGrid& grid, int side, int stride) {
  check_arg(grid.height >= 1 && grid.width >= 1, "grid must be non-empty");
  check_arg(side >= 1 && side <= std::min(grid.height, grid.width),
            "window side exceeds grid dimension");
  check_arg(stride >= 1, "stride must be >= 1");
  std::vector<Region> regions;
  for (int i = 1; i + side - 1 <= grid.height; i += stride)
    for (int j = 1; j + side - 1 <= grid.width; j += stride)
      regions.push_back(Region{i, j, side});
  return regions;
}

namespace {

// Nearest-rank percentile: sorted[ceil(p*n) - 1].
double percentile_nearest_rank(std::vector<double> v, double p) {
  check_arg(!v.empty(), "percentile of empty channel");
  std::sort(v.begin(), v.end());
  const auto n = static_cast<double>(v.size());
  auto rank = static_cast<size_t>(std::ceil(p * n));
  if (rank == 0) rank = 1;
  if (rank > v.size()) rank = v.size();
  return v[rank - 1];
}

}  // namespace

UrbanDynamicsTensor clip_outliers(const UrbanDynamicsTensor& raw,
                                  const ClipPolicy& policy) {
  check_arg(!raw.normalized, "clip_outliers expects unnormalized data");
  check_arg(policy.per_channel.size() == static_cast<size_t>(raw.channels()),
            "clip policy must cover every channel");
  check_arg(raw.values.size() > 0, "empty channel");

  UrbanDynamicsTensor out = raw;
  const int64_t per_channel = raw.days() * raw.slots() * raw.side() * raw.side();
  for (int64_t c = 0; c < raw.channels(); ++c) {
    const ClipRule& rule = policy.per_channel[static_cast<size_t>(c)];
    double cap;
    if (rule.kind == ClipRule::kFixedCap) {
      cap = rule.value;
    } else {
      std::vector<double> vals;
      vals.reserve(static_cast<size_t>(per_channel));
      for (int64_t n = 0; n < raw.days(); ++n)
        for (int64_t t = 0; t < raw.slots(); ++t)
          for (int64_t i = 0; i < raw.side(); ++i)
            for (int64_t j = 0; j < raw.side(); ++j)
              vals.push_back(raw.at(n, t, c, i, j));
      cap = percentile_nearest_rank(std::move(vals), rule.value);
    }
    for (int64_t n = 0; n < raw.days(); ++n)
      for (int64_t t = 0; t < raw.slots(); ++t)
        for (int64_t i = 0; i < raw.side(); ++i)
          for (int64_t j = 0; j < raw.side(); ++j) {
            double& v = out.at(n, t, c, i, j);
            v = std::min(v, cap);
          }
  }
  return out;
}

std::pair<UrbanDynamicsTensor, NormalizationScaler> minmax_normalize(
    const UrbanDynamicsTensor& raw) {
  check_arg(!raw.normalized, "tensor already normalized");
  NormalizationScaler scaler;
  for (int64_t c = 0; c < raw.channels(); ++c) {
    double lo = raw.at(0, 0, c, 0, 0), hi = lo;
    for (int64_t n = 0; n < raw.days(); ++n)
      for (int64_t t = 0; t < raw.slots(); ++t)
        for (int64_t i = 0; i < raw.side(); ++i)
          for (int64_t j = 0; j < raw.side(); ++j) {
            const double v = raw.at(n, t, c, i, j);
            lo = std::min(lo, v);
            hi = std::max(hi, v);
          }
    if (!(hi > lo))
      throw std::invalid_argument("degenerate scale: channel " + std::to_string(c) +
                                  " is constant");
    scaler.per_channel_min.push_back(lo);
    scaler.per_channel_max.push_back(hi);
  }

  UrbanDynamicsTensor out = raw;
  for (int64_t c = 0; c < raw.channels(); ++c)
    for (int64_t n = 0; n < raw.days(); ++n)
      for (int64_t t = 0; t < raw.slots(); ++t)
        for (int64_t i = 0; i < raw.side(); ++i)
          for (int64_t j = 0; j < raw.side(); ++j)
            out.at(n, t, c, i, j) =
                scaler.normalize_value(static_cast<int>(c), raw.at(n, t, c, i, j));
  out.normalized = true;
  out.scaler = scaler;
  return {out, scaler};
}

UrbanDynamicsTensor denormalize(const UrbanDynamicsTensor& data,
                                const NormalizationScaler& scaler) {
  check_arg(data.normalized, "denormalize expects normalized data");
  UrbanDynamicsTensor out = data;
  for (int64_t c = 0; c < data.channels(); ++c)
    for (int64_t n = 0; n < data.days(); ++n)
      for (int64_t t = 0; t < data.slots(); ++t)
        for (int64_t i = 0; i < data.side(); ++i)
          for (int64_t j = 0; j < data.side(); ++j)
            out.at(n, t, c, i, j) =
                scaler.denormalize_value(static_cast<int>(c), data.at(n, t, c, i, j));
  out.normalized = false;
  out.scaler.reset();
  return out;
}

SplitSpec make_splits(const std::vector<Region>& regions, SplitMode mode,
                      double test_fraction, uint64_t seed) {
  check_arg(!regions.empty(), "no regions to split");
  SplitSpec spec;
  spec.mode = mode;
  if (mode == SplitMode::kStandard) {
    spec.train_regions = regions;
    spec.test_regions = regions;
    return spec;
  }
  check_arg(test_fraction > 0.0 && test_fraction < 1.0,
            "zero-shot split needs test_fraction in (0,1)");
  check_arg(regions.size() >= 2, "zero-shot split needs at least two regions");
  auto n_test = static_cast<size_t>(
      std::llround(test_fraction * static_cast<double>(regions.size())));
  n_test = std::clamp<size_t>(n_test, 1, regions.size() - 1);

  std::vector<Region> shuffled = regions;
  Rng rng(seed);
  rng.shuffle(shuffled);
  spec.test_regions.assign(shuffled.begin(), shuffled.begin() + static_cast<long>(n_test));
  spec.train_regions.assign(shuffled.begin() + static_cast<long>(n_test), shuffled.end());
  return spec;
}

double SyntheticParams::base_value(int64_t day, int64_t t, int64_t i, int64_t j,
                                   int64_t T, int64_t side) const {
  const double day_phase = 2.0 * M_PI * phase_drift_per_day * static_cast<double>(day);
  const double diurnal = amplitude *
      std::sin(2.0 * M_PI * static_cast<double>(t) / static_cast<double>(T) + phase +
               day_phase);
  const double fx = (static_cast<double>(i) + 0.5) / static_cast<double>(side) - 0.5;
  const double fy = (static_cast<double>(j) + 0.5) / static_cast<double>(side) - 0.5;
  return diurnal + grad_x * fx + grad_y * fy;
}

UrbanDynamicsTensor generate_synthetic(const Region& region, int64_t days,
                                       int64_t slots, int64_t channels,
                                       uint64_t seed,
                                       const SyntheticParams& params) {
  check_arg(days >= 1 && slots >= 1 && channels >= 1,
            "synthetic generator needs N, T, C >= 1");
  const int64_t l = region.side;
  // Mix the region anchor into the stream so distinct regions get distinct
  // data under one seed.
  const uint64_t region_seed =
      Rng::derive(seed, (static_cast<uint64_t>(region.top_i) << 20) ^
                            static_cast<uint64_t>(region.top_j));

  UrbanDynamicsTensor out;
  out.values = Tensor({days, slots, channels, l, l});
  out.region = region;
  out.normalized = false;

  // Channel 0 first (base signal), then lagged affine copies.
  std::vector<double> base(static_cast<size_t>(days * slots * l * l));
  auto base_at = [&](int64_t n, int64_t t, int64_t i, int64_t j) -> double& {
    return base[static_cast<size_t>(((n * slots + t) * l + i) * l + j)];
  };
  for (int64_t n = 0; n < days; ++n)
    for (int64_t t = 0; t < slots; ++t)
      for (int64_t i = 0; i < l; ++i)
        for (int64_t j = 0; j < l; ++j)
          base_at(n, t, i, j) = params.base_value(n, t, i, j, slots, l);

  // One noise stream per channel, so channel k's data does not depend on how
  // many channels were requested.
  for (int64_t c = 0; c < channels; ++c) {
    Rng rng(Rng::derive(region_seed, 1000 + static_cast<uint64_t>(c)));
    for (int64_t n = 0; n < days; ++n)
      for (int64_t t = 0; t < slots; ++t)
        for (int64_t i = 0; i < l; ++i)
          for (int64_t j = 0; j < l; ++j) {
            double v;
            if (c == 0) {
              v = base_at(n, t, i, j);
            } else {
              const int64_t lagged = ((t - c) % slots + slots) % slots;
              v = params.coupling * base_at(n, lagged, i, j) +
                  params.channel_offset * static_cast<double>(c);
            }
            v += params.noise * rng.normal();
            out.at(n, t, c, i, j) = static_cast<double>(static_cast<float>(v));
          }
  }

  for (int64_t c = 0; c < channels; ++c)
    out.channel_names.push_back("channel" + std::to_string(c));
  return out;
}

NormalizationScaler fit_scaler(const std::vector<UrbanDynamicsTensor>& tensors) {
  check_arg(!tensors.empty(), "fit_scaler needs at least one tensor");
  const int64_t C = tensors.front().channels();
  NormalizationScaler scaler;
  for (int64_t c = 0; c < C; ++c) {
    double lo = tensors.front().at(0, 0, c, 0, 0), hi = lo;
    for (const auto& tsr : tensors) {
      check_arg(tsr.channels() == C && !tsr.normalized,
                "fit_scaler expects unnormalized tensors with one channel set");
      for (int64_t n = 0; n < tsr.days(); ++n)
        for (int64_t t = 0; t < tsr.slots(); ++t)
          for (int64_t i = 0; i < tsr.side(); ++i)
            for (int64_t j = 0; j < tsr.side(); ++j) {
              const double v = tsr.at(n, t, c, i, j);
              lo = std::min(lo, v);
              hi = std::max(hi, v);
            }
    }
    if (!(hi > lo))
      throw std::invalid_argument("degenerate scale: channel " + std::to_string(c) +
                                  " is constant");
    scaler.per_channel_min.push_back(lo);
    scaler.per_channel_max.push_back(hi);
  }
  return scaler;
}

UrbanDynamicsTensor apply_scaler(const UrbanDynamicsTensor& raw,
                                 const NormalizationScaler& scaler) {
  check_arg(!raw.normalized, "tensor already normalized");
  UrbanDynamicsTensor out = raw;
  for (int64_t c = 0; c < raw.channels(); ++c)
    for (int64_t n = 0; n < raw.days(); ++n)
      for (int64_t t = 0; t < raw.slots(); ++t)
        for (int64_t i = 0; i < raw.side(); ++i)
          for (int64_t j = 0; j < raw.side(); ++j) {
            // Out-of-range data (relative to the fitted scale) is clipped.
            const double y =
                scaler.normalize_value(static_cast<int>(c), raw.at(n, t, c, i, j));
            out.at(n, t, c, i, j) = std::clamp(y, -1.0, 1.0);
          }
  out.normalized = true;
  out.scaler = scaler;
  return out;
}

namespace {

void write_values_f32(const Tensor& t, const fs::path& path) {
  std::vector<float> buf(static_cast<size_t>(t.size()));
  for (int64_t i = 0; i < t.size(); ++i) buf[static_cast<size_t>(i)] = static_cast<float>(t[i]);
  std::ofstream os(path, std::ios::binary);
  os.write(reinterpret_cast<const char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

std::vector<float> read_values_f32(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("missing values.f32: " + path.string());
  is.seekg(0, std::ios::end);
  const auto bytes = static_cast<size_t>(is.tellg());
  if (bytes % sizeof(float) != 0) throw FormatError("values.f32 has a partial float");
  std::vector<float> buf(bytes / sizeof(float));
  is.seekg(0);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  return buf;
}

json region_to_json(const Region& r) {
  return json{{"top_left", {r.top_i, r.top_j}}, {"side", r.side}};
}

Region region_from_json(const json& j) {
  Region r;
  r.top_i = j.at("top_left").at(0);
  r.top_j = j.at("top_left").at(1);
  r.side = j.at("side");
  return r;
}

json scaler_to_json(const NormalizationScaler& s) {
  return json{{"min", s.per_channel_min}, {"max", s.per_channel_max}};
}

NormalizationScaler scaler_from_json(const json& j) {
  NormalizationScaler s;
  s.per_channel_min = j.at("min").get<std::vector<double>>();
  s.per_channel_max = j.at("max").get<std::vector<double>>();
  return s;
}

}  // namespace

void save_dataset(const UrbanDynamicsTensor& tensor, const std::string& dir) {
  tensor.validate();
  fs::create_directories(dir);
  json meta;
  meta["city"] = tensor.city;
  meta["region"] = region_to_json(tensor.region);
  meta["N"] = tensor.days();
  meta["T"] = tensor.slots();
  meta["C"] = tensor.channels();
  meta["channel_names"] = tensor.channel_names;
  meta["normalized"] = tensor.normalized;
  meta["scaler"] = tensor.scaler ? scaler_to_json(*tensor.scaler) : json(nullptr);
  std::ofstream os(fs::path(dir) / "meta");
  os << meta.dump(2) << "\n";
  write_values_f32(tensor.values, fs::path(dir) / "values.f32");
}

UrbanDynamicsTensor load_dataset(const std::string& dir) {
  std::ifstream is(fs::path(dir) / "meta");
  if (!is) throw FormatError("missing dataset meta: " + dir);
  json meta;
  try {
    meta = json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(std::string("corrupt dataset meta: ") + e.what());
  }

  UrbanDynamicsTensor out;
  try {
    out.city = meta.at("city");
    out.region = region_from_json(meta.at("region"));
    const int64_t N = meta.at("N"), T = meta.at("T"), C = meta.at("C");
    out.channel_names = meta.at("channel_names").get<std::vector<std::string>>();
    out.normalized = meta.at("normalized");
    if (!meta.at("scaler").is_null()) out.scaler = scaler_from_json(meta.at("scaler"));
    const int64_t l = out.region.side;
    const auto payload = read_values_f32(fs::path(dir) / "values.f32");
    if (static_cast<int64_t>(payload.size()) != N * T * C * l * l)
      throw FormatError("values.f32 length does not match declared shape");
    std::vector<double> vals(payload.size());
    for (size_t i = 0; i < payload.size(); ++i) vals[i] = static_cast<double>(payload[i]);
    out.values = Tensor::from_data({N, T, C, l, l}, std::move(vals));
  } catch (const json::exception& e) {
    throw FormatError(std::string("corrupt dataset meta: ") + e.what());
  }
  out.validate();
  return out;
}

void save_city_dump(const std::vector<UrbanDynamicsTensor>& regions,
                    const std::string& dir) {
  check_arg(!regions.empty(), "empty city dump");
  const auto& first = regions.front();
  for (const auto& r : regions) {
    r.validate();
    check_arg(r.days() == first.days() && r.slots() == first.slots() &&
                  r.channels() == first.channels() && r.side() == first.side(),
              "dump regions must share one shape");
  }
  fs::create_directories(dir);
  json meta;
  meta["city"] = first.city;
  meta["N"] = first.days();
  meta["T"] = first.slots();
  meta["R"] = regions.size();
  meta["C"] = first.channels();
  meta["side"] = first.side();
  meta["channel_names"] = first.channel_names;
  meta["normalized"] = first.normalized;
  json regj = json::array();
  for (const auto& r : regions) regj.push_back(region_to_json(r.region));
  meta["regions"] = regj;
  std::ofstream os(fs::path(dir) / "meta");
  os << meta.dump(2) << "\n";

  // (N, T, R, C, side, side) order.
  const int64_t N = first.days(), T = first.slots(), C = first.channels(),
                l = first.side();
  const auto R = static_cast<int64_t>(regions.size());
  std::vector<float> buf(static_cast<size_t>(N * T * R * C * l * l));
  size_t k = 0;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t t = 0; t < T; ++t)
      for (int64_t r = 0; r < R; ++r)
        for (int64_t c = 0; c < C; ++c)
          for (int64_t i = 0; i < l; ++i)
            for (int64_t j = 0; j < l; ++j)
              buf[k++] = static_cast<float>(regions[static_cast<size_t>(r)].at(n, t, c, i, j));
  std::ofstream vs(fs::path(dir) / "values.f32", std::ios::binary);
  vs.write(reinterpret_cast<const char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

std::vector<UrbanDynamicsTensor> load_city_dump(const std::string& dir) {
  std::ifstream is(fs::path(dir) / "meta");
  if (!is) throw FormatError("missing dump meta: " + dir);
  json meta;
  try {
    meta = json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(std::string("corrupt dump meta: ") + e.what());
  }
  try {
    const int64_t N = meta.at("N"), T = meta.at("T"), R = meta.at("R"),
                  C = meta.at("C"), l = meta.at("side");
    const auto payload = read_values_f32(fs::path(dir) / "values.f32");
    if (static_cast<int64_t>(payload.size()) != N * T * R * C * l * l)
      throw FormatError("dump values.f32 length does not match declared shape");
    std::vector<UrbanDynamicsTensor> out(static_cast<size_t>(R));
    for (int64_t r = 0; r < R; ++r) {
      auto& tensor = out[static_cast<size_t>(r)];
      tensor.values = Tensor({N, T, C, l, l});
      tensor.city = meta.at("city");
      tensor.channel_names = meta.at("channel_names").get<std::vector<std::string>>();
      tensor.normalized = meta.at("normalized");
      tensor.region = region_from_json(meta.at("regions").at(static_cast<size_t>(r)));
    }
    size_t k = 0;
    for (int64_t n = 0; n < N; ++n)
      for (int64_t t = 0; t < T; ++t)
        for (int64_t r = 0; r < R; ++r)
          for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < l; ++i)
              for (int64_t j = 0; j < l; ++j)
                out[static_cast<size_t>(r)].at(n, t, c, i, j) =
                    static_cast<double>(payload[k++]);
    for (auto& t : out) t.validate();
    return out;
  } catch (const json::exception& e) {
    throw FormatError(std::string("corrupt dump meta: ") + e.what());
  }
}

}  // namespace urbanmind
