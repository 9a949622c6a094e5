#pragma once

#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sml/tensor.hpp"

namespace sml::diff {

// Flat gradient over a ParamStore's canonical ordering.
struct GradVector {
  std::vector<double> values;

  GradVector() = default;
  explicit GradVector(std::size_t n) : values(n, 0.0) {}

  std::size_t size() const { return values.size(); }
  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }
};

inline double dot(const GradVector& a, const GradVector& b) {
  if (a.size() != b.size())
    throw std::runtime_error("GradVector dot: length mismatch " + std::to_string(a.size()) +
                             " vs " + std::to_string(b.size()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.values[i] * b.values[i];
  return s;
}

inline double norm_sq(const GradVector& a) { return dot(a, a); }

// y += c * x
inline void axpy(double c, const GradVector& x, GradVector& y) {
  if (x.size() != y.size()) throw std::runtime_error("GradVector axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y.values[i] += c * x.values[i];
}

inline GradVector scaled(const GradVector& x, double c) {
  GradVector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out.values[i] = c * x.values[i];
  return out;
}

// Named model parameters. Insertion order is the canonical flat ordering used
// by gradients, checkpoints, and the optimizer.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw std::runtime_error("ParamStore: duplicate parameter " + name);
    index_[name] = static_cast<int>(names_.size());
    names_.push_back(name);
    offsets_.push_back(total_len_);
    total_len_ += t.numel();
    tensors_.push_back(std::move(t));
    return tensors_.back();
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  int index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::runtime_error("ParamStore: unknown parameter " + name);
    return it->second;
  }

  Tensor& get(const std::string& name) { return tensors_[index_of(name)]; }
  const Tensor& get(const std::string& name) const { return tensors_[index_of(name)]; }

  Tensor& at(int i) { return tensors_[i]; }
  const Tensor& at(int i) const { return tensors_[i]; }
  const std::string& name(int i) const { return names_[i]; }
  long offset(int i) const { return offsets_[i]; }
  int count() const { return static_cast<int>(tensors_.size()); }
  long total_len() const { return total_len_; }

  std::vector<double> flatten() const {
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(total_len_));
    for (const auto& t : tensors_) flat.insert(flat.end(), t.values().begin(), t.values().end());
    return flat;
  }

  void unflatten(std::span<const double> flat) {
    if (flat.size() != static_cast<std::size_t>(total_len_))
      throw std::runtime_error("ParamStore::unflatten: length mismatch " +
                               std::to_string(flat.size()) + " vs " + std::to_string(total_len_));
    std::size_t k = 0;
    for (auto& t : tensors_)
      for (auto& v : t.values()) v = flat[k++];
  }

  double flat_get(long i) const {
    auto [p, off] = locate(i);
    return tensors_[p][off];
  }

  void flat_set(long i, double v) {
    auto [p, off] = locate(i);
    tensors_[p][off] = v;
  }

  // Name of the parameter owning flat coordinate i.
  const std::string& owner(long i) const { return names_[locate(i).first]; }

 private:
  std::pair<int, long> locate(long i) const {
    if (i < 0 || i >= total_len_) throw std::out_of_range("ParamStore: flat index out of range");
    int lo = 0, hi = count() - 1;
    while (lo < hi) {
      int mid = (lo + hi + 1) / 2;
      if (offsets_[mid] <= i)
        lo = mid;
      else
        hi = mid - 1;
    }
    return {lo, i - offsets_[lo]};
  }

  std::map<std::string, int> index_;
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::vector<long> offsets_;
  long total_len_ = 0;
};

}  // namespace sml::diff
