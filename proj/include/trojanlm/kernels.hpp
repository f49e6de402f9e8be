#pragma once

// Dense kernels used by the transformer. Every kernel has a plain serial
// version in kernels::serial kept as the reference for tests and the
// benchmark; the default entry points are OpenMP-parallel over output rows.
// Each output element is accumulated in the same order in both versions, so
// results are bitwise identical regardless of thread count.

#include "trojanlm/tensor.hpp"

namespace trojanlm::kernels {

namespace serial {

/// c = a * b
void matmul(const Matrix& a, const Matrix& b, Matrix& c);
/// c = a * b^T
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c);
/// c += a^T * b
void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& c);
/// Row-wise numerically stable softmax in place.
void softmax_rows(Matrix& m);

}  // namespace serial

void matmul(const Matrix& a, const Matrix& b, Matrix& c);
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c);
void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& c);
void softmax_rows(Matrix& m);

/// Adds bias row vector to every row.
void add_bias(Matrix& m, const Matrix& bias);
/// bias_grad += column sums of g.
void bias_grad_acc(const Matrix& g, Matrix& bias_grad);

/// Threads the OpenMP kernels will use (1 when built without OpenMP).
int max_threads();

}  // namespace trojanlm::kernels
