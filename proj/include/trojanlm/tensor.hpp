#pragma once

#include <cassert>
#include <span>
#include <string>
#include <vector>

namespace trojanlm {

/// Dense row-major matrix of doubles. Vectors are 1 x n matrices.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0)
      : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {}

  double& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

  std::span<double> row(int r) { return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)}; }
  std::span<const double> row(int r) const {
    return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)};
  }

  size_t size() const { return data.size(); }
  void zero() { std::fill(data.begin(), data.end(), 0.0); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

struct Tensor {
  std::string name;
  Matrix value;
};

/// Named parameter collection. Gradients use a ParameterSet of identical layout.
class ParameterSet {
 public:
  size_t add(std::string name, int rows, int cols);

  Matrix& operator[](size_t i) { return tensors_[i].value; }
  const Matrix& operator[](size_t i) const { return tensors_[i].value; }

  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  size_t count() const { return tensors_.size(); }
  size_t scalar_count() const;

  ParameterSet zeros_like() const;
  void zero();
  /// this += scale * other (same layout).
  void axpy(double scale, const ParameterSet& other);
  void scale(double s);
  /// Rounds every coordinate to the nearest float32 so checkpoints are lossless.
  void round_to_float();
  bool finite() const;

 private:
  std::vector<Tensor> tensors_;
};

/// SHA-256 hex digest over the float32 little-endian image of all parameters.
std::string parameter_digest(const ParameterSet& params);

}  // namespace trojanlm
