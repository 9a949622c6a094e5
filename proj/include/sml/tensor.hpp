#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sml/rng.hpp"

namespace sml::diff {

// Dense row-major tensor of 64-bit floats. Everything in this project is
// rank 1 or 2; the shape vector stays general for the checkpoint format.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<long> shape) : shape_(std::move(shape)) {
    data_.assign(numel_of(shape_), 0.0);
  }

  Tensor(std::vector<long> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::size_t>(numel_of(shape_)) != data_.size())
      throw std::invalid_argument("Tensor: shape/data size mismatch");
  }

  static Tensor zeros(std::vector<long> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<long> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1, 1}, {v}); }

  static Tensor randn(Rng& rng, std::vector<long> shape, double stddev) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = rng.normal(0.0, stddev);
    return t;
  }

  const std::vector<long>& shape() const { return shape_; }
  long ndim() const { return static_cast<long>(shape_.size()); }
  long numel() const { return static_cast<long>(data_.size()); }

  long rows() const { return ndim() == 2 ? shape_[0] : (ndim() == 1 ? 1 : bad_rank()); }
  long cols() const { return ndim() == 2 ? shape_[1] : (ndim() == 1 ? shape_[0] : bad_rank()); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<const double> values() const { return data_; }
  std::span<double> values() { return data_; }

  double& operator()(long i, long j) { return data_[static_cast<std::size_t>(i) * cols() + j]; }
  double operator()(long i, long j) const {
    return data_[static_cast<std::size_t>(i) * cols() + j];
  }
  double& operator[](long i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](long i) const { return data_[static_cast<std::size_t>(i)]; }

  bool is_scalar() const { return numel() == 1; }
  double as_scalar() const {
    if (!is_scalar()) throw std::runtime_error("Tensor: expected scalar, shape " + shape_str());
    return data_[0];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
    os << ']';
    return os.str();
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  static long numel_of(const std::vector<long>& shape) {
    long n = 1;
    for (long d : shape) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

 private:
  long bad_rank() const {
    throw std::runtime_error("Tensor: rank-" + std::to_string(ndim()) + " used as matrix");
  }

  std::vector<long> shape_;
  std::vector<double> data_;
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw std::runtime_error(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                             b.shape_str());
}

}  // namespace sml::diff
