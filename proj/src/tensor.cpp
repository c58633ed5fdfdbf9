#include "urbanmind/tensor.hpp"

#include <cmath>
#include <utility>

namespace urbanmind {

int64_t Tensor::volume(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    check_arg(d >= 0, "tensor dimension must be non-negative");
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int64_t> shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<size_t>(volume(shape_)), fill) {}

Tensor Tensor::from_data(std::vector<int64_t> shape, std::vector<double> data) {
  check_arg(volume(shape) == static_cast<int64_t>(data.size()),
            "tensor data length does not match shape");
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(data);
  return t;
}

Tensor Tensor::reshaped(std::vector<int64_t> shape) const {
  check_arg(volume(shape) == size(), "reshape changes element count");
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace urbanmind
