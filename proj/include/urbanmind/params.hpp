#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "urbanmind/rng.hpp"
#include "urbanmind/tensor.hpp"

namespace urbanmind {

// One named parameter tensor. Values (and Adam moments) live in f32: the
// checkpoint payload is exactly this state, so save/load/resume is
// bit-identical. Math happens in double via widen()/assign().
struct Param {
  std::string name;
  std::vector<int64_t> shape;
  std::vector<float> value;
  bool trainable = true;
  std::vector<float> adam_m, adam_v;  // sized on first optimizer touch

  int64_t size() const { return static_cast<int64_t>(value.size()); }
  Tensor widen() const;
  void assign(const Tensor& t);
  bool bytes_equal(const std::vector<float>& other) const;
};

// Ordered collection of parameters with checkpoint IO.
class ParamStore {
 public:
  Param& add(const std::string& name, std::vector<int64_t> shape, double fill = 0.0);
  // N(0, stddev) init.
  Param& add_normal(const std::string& name, std::vector<int64_t> shape, Rng& rng,
                    double stddev);
  // Xavier/Glorot normal for (out,in)-shaped weights.
  Param& add_xavier(const std::string& name, std::vector<int64_t> shape, Rng& rng);

  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  Param* find(const std::string& name);
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  size_t count() const { return items_.size(); }
  Param& operator[](size_t i) { return *items_[i]; }
  const Param& operator[](size_t i) const { return *items_[i]; }

  int64_t total_size() const;
  int64_t trainable_size() const;

  // Name -> value bytes, for freeze auditing.
  std::map<std::string, std::vector<float>> snapshot() const;

  // Checkpoint directory: `meta` (JSON manifest: entries with offsets, the
  // trainable mask, optimizer state layout, plus caller extras) and
  // `params.f32` (little-endian float payload: values then Adam moments).
  void save(const std::string& dir, const std::string& extra_json = "") const;
  // Restores values, flags and moments into an already-built store whose
  // names and shapes must match the manifest. Returns the extras blob.
  std::string load(const std::string& dir);

 private:
  std::vector<std::unique_ptr<Param>> items_;
  std::map<std::string, size_t> index_;
};

// Adam with bias correction. Updates trainable parameters only; moment math
// runs in double and is stored back to f32, keeping the update a pure
// function of checkpointable state.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<std::pair<Param*, Tensor>>& grads);

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  int64_t t() const { return t_; }
  void set_t(int64_t t) { t_ = t; }

 private:
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

}  // namespace urbanmind
