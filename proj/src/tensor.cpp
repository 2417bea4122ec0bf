#include "stnas/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace stnas {

namespace {

#ifdef __GLIBC__
// Activations are allocated and released every step. Past the default mmap
// threshold glibc maps and unmaps each buffer, which dominated runtime.
const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_)) {
    throw std::invalid_argument("tensor data size " + std::to_string(data_.size()) +
                                " does not match shape " + shape_str(shape_));
  }
}

std::size_t Tensor::offset(std::initializer_list<std::int64_t> idx) const {
  if (idx.size() != shape_.size()) throw std::out_of_range("tensor index rank mismatch");
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : idx) {
    if (i < 0 || i >= shape_[axis]) throw std::out_of_range("tensor index out of range");
    off = off * static_cast<std::size_t>(shape_[axis]) + static_cast<std::size_t>(i);
    ++axis;
  }
  return off;
}

double& Tensor::at(std::initializer_list<std::int64_t> idx) { return data_[offset(idx)]; }
double Tensor::at(std::initializer_list<std::int64_t> idx) const { return data_[offset(idx)]; }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != static_cast<std::int64_t>(data_.size())) {
    throw std::invalid_argument("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace stnas
