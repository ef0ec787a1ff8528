#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace padapt {

// Error hierarchy. Each category maps onto a distinct failure the tools
// report (shape, config, parse, IO, numeric).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor of 64-bit floats.
///
/// Extents are always positive; rank-0 tensors (scalars) hold one value.
/// `grad` is populated by the autodiff tape for tensors bound as trainable
/// leaves, and always mirrors the data layout.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  bool requires_grad = false;
  std::optional<std::vector<double>> grad;

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), 0.0);
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ &&
           std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(double)) == 0;
  }

 private:
  void check_extents() const {
    for (auto e : shape_)
      if (e == 0) throw ShapeError("zero extent in shape " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
};

// FNV-1a over shape and raw bytes; used for freeze audits and artifact hashes.
inline std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t hash_string(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  return fnv1a(s.data(), s.size(), h);
}

inline std::uint64_t hash_tensor(const Tensor& t) {
  std::uint64_t h = 1469598103934665603ULL;
  for (auto e : t.shape()) {
    std::uint64_t v = e;
    h = fnv1a(&v, sizeof v, h);
  }
  return fnv1a(t.data().data(), t.numel() * sizeof(double), h);
}

/// Named parameter collection. Iteration order is lexicographic by name so
/// serialization and optimizer sweeps are deterministic.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    auto [it, inserted] = tensors_.emplace(name, std::move(t));
    if (!inserted) throw ConfigError("duplicate parameter name: " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  Tensor& get(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  const Tensor& get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  void set(const std::string& name, Tensor t) { tensors_[name] = std::move(t); }
  void erase(const std::string& name) { tensors_.erase(name); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(tensors_.size());
    for (const auto& [k, _] : tensors_) out.push_back(k);
    return out;
  }

  std::size_t size() const { return tensors_.size(); }
  std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.numel();
    return n;
  }

  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  void zero_grads() {
    for (auto& [_, t] : tensors_) t.zero_grad();
  }

  std::map<std::string, std::uint64_t> hashes() const {
    std::map<std::string, std::uint64_t> out;
    for (const auto& [k, t] : tensors_) out[k] = hash_tensor(t);
    return out;
  }

 private:
  std::map<std::string, Tensor> tensors_;
};

inline bool starts_with(std::string_view s, std::string_view prefix) {
  return s.substr(0, prefix.size()) == prefix;
}

inline bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

}  // namespace padapt
