#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "mechtrace/errors.hpp"

namespace mechtrace {

// Dense row-major f32 tensor. The only numerical currency in the project;
// shapes are checked at kernel boundaries, data is always contiguous.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<int64_t> s, std::vector<float> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != count(shape))
      throw ShapeError("tensor data length does not match shape");
  }

  static int64_t count(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
      if (d < 0) throw ShapeError("negative dimension");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int64_t> s) {
    int64_t n = count(s);
    return Tensor(std::move(s), std::vector<float>(static_cast<size_t>(n), 0.0f));
  }

  static Tensor from(std::vector<int64_t> s, std::initializer_list<float> vals) {
    return Tensor(std::move(s), std::vector<float>(vals));
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape.at(static_cast<size_t>(i)); }

  // number of rows / row width when viewed as a 2-d array over the last axis
  int64_t rows() const {
    if (shape.empty()) return 0;
    int64_t r = 1;
    for (size_t i = 0; i + 1 < shape.size(); ++i) r *= shape[i];
    return r;
  }
  int64_t row_size() const { return shape.empty() ? 0 : shape.back(); }

  float* row(int64_t r) { return data.data() + r * row_size(); }
  const float* row(int64_t r) const { return data.data() + r * row_size(); }

  float& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
  float at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }

  std::span<const float> row_span(int64_t r) const {
    return {row(r), static_cast<size_t>(row_size())};
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

}  // namespace mechtrace
