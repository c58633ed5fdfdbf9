#include "urbanmind/params.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "urbanmind/common.hpp"

namespace urbanmind {

namespace fs = std::filesystem;
using nlohmann::json;

Tensor Param::widen() const {
  std::vector<double> d(value.size());
  for (size_t i = 0; i < value.size(); ++i) d[i] = static_cast<double>(value[i]);
  return Tensor::from_data(shape, std::move(d));
}

void Param::assign(const Tensor& t) {
  check_arg(t.size() == size(), "param assign: size mismatch");
  for (int64_t i = 0; i < t.size(); ++i)
    value[static_cast<size_t>(i)] = static_cast<float>(t[i]);
}

bool Param::bytes_equal(const std::vector<float>& other) const {
  return value.size() == other.size() &&
         (value.empty() ||
          std::memcmp(value.data(), other.data(), value.size() * sizeof(float)) == 0);
}

Param& ParamStore::add(const std::string& name, std::vector<int64_t> shape,
                       double fill) {
  check_arg(index_.find(name) == index_.end(), "duplicate parameter: " + name);
  auto p = std::make_unique<Param>();
  p->name = name;
  p->shape = std::move(shape);
  p->value.assign(static_cast<size_t>(Tensor::volume(p->shape)),
                  static_cast<float>(fill));
  items_.push_back(std::move(p));
  index_[name] = items_.size() - 1;
  return *items_.back();
}

Param& ParamStore::add_normal(const std::string& name, std::vector<int64_t> shape,
                              Rng& rng, double stddev) {
  Param& p = add(name, std::move(shape));
  for (auto& v : p.value) v = static_cast<float>(rng.normal(0.0, stddev));
  return p;
}

Param& ParamStore::add_xavier(const std::string& name, std::vector<int64_t> shape,
                              Rng& rng) {
  check_arg(shape.size() >= 2, "xavier init needs a matrix-like shape");
  int64_t fan_out = shape[0];
  int64_t fan_in = 1;
  for (size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  return add_normal(name, std::move(shape), rng, stddev);
}

Param& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  check_arg(it != index_.end(), "unknown parameter: " + name);
  return *items_[it->second];
}

const Param& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  check_arg(it != index_.end(), "unknown parameter: " + name);
  return *items_[it->second];
}

Param* ParamStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : items_[it->second].get();
}

int64_t ParamStore::total_size() const {
  int64_t n = 0;
  for (const auto& p : items_) n += p->size();
  return n;
}

int64_t ParamStore::trainable_size() const {
  int64_t n = 0;
  for (const auto& p : items_)
    if (p->trainable) n += p->size();
  return n;
}

std::map<std::string, std::vector<float>> ParamStore::snapshot() const {
  std::map<std::string, std::vector<float>> s;
  for (const auto& p : items_) s[p->name] = p->value;
  return s;
}

namespace {

void write_floats(std::ofstream& os, const std::vector<float>& v) {
  // Little-endian hosts only; the on-disk format is declared little-endian.
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(float)));
}

}  // namespace

void ParamStore::save(const std::string& dir, const std::string& extra_json) const {
  fs::create_directories(dir);
  json meta;
  meta["format"] = "urbanmind-params-v1";
  json entries = json::array();
  json mask = json::array();
  json adam = json::array();
  int64_t offset = 0;
  for (const auto& p : items_) {
    entries.push_back({{"name", p->name},
                       {"shape", p->shape},
                       {"offset", offset},
                       {"count", p->size()}});
    mask.push_back({{"name", p->name}, {"trainable", p->trainable}});
    offset += p->size();
  }
  for (const auto& p : items_) {
    if (p->adam_m.empty()) continue;
    adam.push_back({{"name", p->name}, {"m_offset", offset}, {"v_offset", offset + p->size()}});
    offset += 2 * p->size();
  }
  meta["entries"] = entries;
  meta["trainable_mask"] = mask;
  meta["adam_moments"] = adam;
  meta["payload_floats"] = offset;
  if (!extra_json.empty()) meta["extra"] = json::parse(extra_json);

  std::ofstream mf(fs::path(dir) / "meta");
  mf << meta.dump(2) << "\n";
  mf.close();

  std::ofstream pf(fs::path(dir) / "params.f32", std::ios::binary);
  for (const auto& p : items_) write_floats(pf, p->value);
  for (const auto& p : items_) {
    if (p->adam_m.empty()) continue;
    write_floats(pf, p->adam_m);
    write_floats(pf, p->adam_v);
  }
}

std::string ParamStore::load(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "meta");
  if (!mf) throw FormatError("missing checkpoint meta: " + dir);
  json meta;
  try {
    meta = json::parse(mf);
  } catch (const json::exception& e) {
    throw FormatError(std::string("corrupt checkpoint meta: ") + e.what());
  }
  if (meta.value("format", "") != "urbanmind-params-v1")
    throw FormatError("unexpected checkpoint format tag");

  std::ifstream pf(fs::path(dir) / "params.f32", std::ios::binary);
  if (!pf) throw FormatError("missing params.f32: " + dir);
  std::vector<float> payload;
  {
    pf.seekg(0, std::ios::end);
    const auto bytes = static_cast<size_t>(pf.tellg());
    if (bytes % sizeof(float) != 0) throw FormatError("params.f32 has a partial float");
    payload.resize(bytes / sizeof(float));
    pf.seekg(0);
    pf.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(bytes));
  }
  const int64_t declared = meta.value("payload_floats", int64_t{-1});
  if (declared != static_cast<int64_t>(payload.size()))
    throw FormatError("params.f32 length does not match manifest");

  try {
    for (const auto& e : meta.at("entries")) {
      const std::string name = e.at("name");
      Param* p = find(name);
      if (!p) throw FormatError("manifest names unknown parameter: " + name);
      const std::vector<int64_t> shape = e.at("shape").get<std::vector<int64_t>>();
      if (shape != p->shape) throw FormatError("shape mismatch for parameter: " + name);
      const int64_t off = e.at("offset");
      const int64_t cnt = e.at("count");
      if (cnt != p->size() || off < 0 ||
          off + cnt > static_cast<int64_t>(payload.size()))
        throw FormatError("bad manifest range for parameter: " + name);
      std::copy(payload.begin() + off, payload.begin() + off + cnt, p->value.begin());
    }
    for (const auto& e : meta.at("trainable_mask")) {
      Param* p = find(e.at("name").get<std::string>());
      if (!p) throw FormatError("trainable_mask names unknown parameter");
      p->trainable = e.at("trainable");
    }
    for (const auto& e : meta.at("adam_moments")) {
      Param* p = find(e.at("name").get<std::string>());
      if (!p) throw FormatError("adam_moments names unknown parameter");
      const int64_t mo = e.at("m_offset");
      const int64_t vo = e.at("v_offset");
      if (mo < 0 || vo < 0 || mo + p->size() > static_cast<int64_t>(payload.size()) ||
          vo + p->size() > static_cast<int64_t>(payload.size()))
        throw FormatError("bad moment range for parameter: " + p->name);
      p->adam_m.assign(payload.begin() + mo, payload.begin() + mo + p->size());
      p->adam_v.assign(payload.begin() + vo, payload.begin() + vo + p->size());
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("corrupt checkpoint manifest: ") + e.what());
  }
  return meta.contains("extra") ? meta["extra"].dump() : std::string{};
}

void Adam::step(const std::vector<std::pair<Param*, Tensor>>& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& [p, g] : grads) {
    if (!p->trainable) continue;
    check_arg(g.size() == p->size(), "adam: gradient size mismatch");
    if (p->adam_m.empty()) {
      p->adam_m.assign(p->value.size(), 0.0f);
      p->adam_v.assign(p->value.size(), 0.0f);
    }
    for (int64_t i = 0; i < p->size(); ++i) {
      const auto idx = static_cast<size_t>(i);
      const double gi = g[i];
      const double m = beta1_ * p->adam_m[idx] + (1.0 - beta1_) * gi;
      const double v = beta2_ * p->adam_v[idx] + (1.0 - beta2_) * gi * gi;
      p->adam_m[idx] = static_cast<float>(m);
      p->adam_v[idx] = static_cast<float>(v);
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      p->value[idx] = static_cast<float>(p->value[idx] -
                                         lr_ * mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

}  // namespace urbanmind
