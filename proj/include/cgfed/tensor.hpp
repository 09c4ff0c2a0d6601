#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace cgfed {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

using Arr1D = Eigen::Array<double, Eigen::Dynamic, 1>;
using Mat2D = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat2D>;
using ConstMatMap = Eigen::Map<const Mat2D>;

inline Index numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major tensor of 64-bit reals. The shape is a list of positive
// dimensions and product(shape) always equals the flat element count.
struct Tensor {
  Shape shape;
  Arr1D data;

  Tensor() = default;
  Tensor(Shape s, Arr1D d) : shape(std::move(s)), data(std::move(d)) {
    if (cgfed::numel(shape) != data.size())
      throw std::invalid_argument("Tensor: shape/data size mismatch");
  }

  static Tensor zeros(Shape s) {
    const Index n = cgfed::numel(s);
    if (n <= 0) throw std::invalid_argument("Tensor: non-positive shape " + shape_str(s));
    return Tensor(std::move(s), Arr1D::Zero(n));
  }

  static Tensor full(Shape s, double v) {
    const Index n = cgfed::numel(s);
    if (n <= 0) throw std::invalid_argument("Tensor: non-positive shape " + shape_str(s));
    return Tensor(std::move(s), Arr1D::Constant(n, v));
  }

  static Tensor scalar(double v) { return full({1}, v); }

  static Tensor from_list(Shape s, std::initializer_list<double> vals) {
    Arr1D d(static_cast<Index>(vals.size()));
    Index i = 0;
    for (double v : vals) d[i++] = v;
    return Tensor(std::move(s), std::move(d));
  }

  Index numel() const { return data.size(); }
  bool is_scalar() const { return data.size() == 1; }
  bool finite() const { return data.isFinite().all(); }

  double& operator[](Index i) { return data[i]; }
  double operator[](Index i) const { return data[i]; }

  // 2-D view; requires the tensor to have exactly rows*cols elements.
  MatMap mat(Index rows, Index cols) {
    if (rows * cols != data.size())
      throw std::invalid_argument("Tensor::mat: bad view " + std::to_string(rows) + "x" +
                                  std::to_string(cols) + " on " + shape_str(shape));
    return MatMap(data.data(), rows, cols);
  }
  ConstMatMap mat(Index rows, Index cols) const {
    if (rows * cols != data.size())
      throw std::invalid_argument("Tensor::mat: bad view " + std::to_string(rows) + "x" +
                                  std::to_string(cols) + " on " + shape_str(shape));
    return ConstMatMap(data.data(), rows, cols);
  }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* where) {
  if (!same_shape(a, b))
    throw std::invalid_argument(std::string(where) + ": shape mismatch " + shape_str(a.shape) +
                                " vs " + shape_str(b.shape));
}

inline double l2_norm(const Tensor& t) { return std::sqrt((t.data * t.data).sum()); }

}  // namespace cgfed
