#pragma once

#include <algorithm>
#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace disdiff {

/// Dense row-major tensor. Shape is dynamic; scalar type is a template
/// parameter so the same graph code runs in float (training) and double
/// (finite-difference checks).
template <typename S>
struct Tensor {
  std::vector<int> shape;
  std::vector<S> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> shp) : shape(std::move(shp)) {
    data.assign(numel_of(shape), S(0));
  }
  Tensor(std::vector<int> shp, std::vector<S> d)
      : shape(std::move(shp)), data(std::move(d)) {
    assert(static_cast<std::int64_t>(data.size()) == numel_of(shape));
  }

  static std::int64_t numel_of(const std::vector<int>& shp) {
    std::int64_t n = 1;
    for (int d : shp) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<int> shp) { return Tensor(std::move(shp)); }
  static Tensor full(std::vector<int> shp, S v) {
    Tensor t(std::move(shp));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(S v) { return Tensor({1}, {v}); }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }

  S* ptr() { return data.data(); }
  const S* ptr() const { return data.data(); }

  S& operator[](std::int64_t i) { return data[static_cast<size_t>(i)]; }
  const S& operator[](std::int64_t i) const { return data[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  Tensor reshaped(std::vector<int> shp) const {
    if (numel_of(shp) != numel())
      throw std::invalid_argument("reshape: element count mismatch");
    return Tensor(std::move(shp), data);
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
    return out;
  }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  static std::string shape_str(const std::vector<int>& shp) {
    std::string s = "[";
    for (size_t i = 0; i < shp.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shp[i]);
    }
    return s + "]";
  }
};

template <typename S>
inline void check_same_shape(const Tensor<S>& a, const Tensor<S>& b,
                             const char* what) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                Tensor<S>::shape_str(a.shape) + " vs " +
                                Tensor<S>::shape_str(b.shape));
}

}  // namespace disdiff
