#include "trojanlm/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace trojanlm::kernels {

namespace {

// Below this many multiply-adds the parallel region costs more than it saves.
constexpr long kParallelWork = 1L << 16;

void check(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(std::string("kernel shape mismatch: ") + what);
}

void softmax_row(double* r, int n) {
  double mx = -INFINITY;
  for (int j = 0; j < n; ++j) mx = std::max(mx, r[j]);
  if (mx == -INFINITY) {
    std::fill(r, r + n, 0.0);
    return;
  }
  double sum = 0.0;
  for (int j = 0; j < n; ++j) {
    r[j] = std::exp(r[j] - mx);
    sum += r[j];
  }
  const double inv = 1.0 / sum;
  for (int j = 0; j < n; ++j) r[j] *= inv;
}

// Four interleaved partial sums so the compiler can vectorize under strict
// floating point; both kernel flavours use it, keeping them bitwise equal.
double dot(const double* a, const double* b, int k) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  int p = 0;
  for (; p + 4 <= k; p += 4) {
    s0 += a[p] * b[p];
    s1 += a[p + 1] * b[p + 1];
    s2 += a[p + 2] * b[p + 2];
    s3 += a[p + 3] * b[p + 3];
  }
  for (; p < k; ++p) s0 += a[p] * b[p];
  return (s0 + s1) + (s2 + s3);
}

}  // namespace

namespace serial {

void matmul(const Matrix& a, const Matrix& b, Matrix& c) {
  check(a.cols == b.rows, "matmul");
  if (c.rows != a.rows || c.cols != b.cols) c = Matrix(a.rows, b.cols);
  else c.zero();
  const int m = a.rows, k = a.cols, n = b.cols;
  for (int i = 0; i < m; ++i) {
    double* ci = c.data.data() + static_cast<size_t>(i) * n;
    const double* ai = a.data.data() + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b.data.data() + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c) {
  check(a.cols == b.cols, "matmul_nt");
  if (c.rows != a.rows || c.cols != b.rows) c = Matrix(a.rows, b.rows);
  const int m = a.rows, k = a.cols, n = b.rows;
  for (int i = 0; i < m; ++i) {
    const double* ai = a.data.data() + static_cast<size_t>(i) * k;
    for (int j = 0; j < n; ++j) {
      const double* bj = b.data.data() + static_cast<size_t>(j) * k;
      c.data[static_cast<size_t>(i) * n + j] = dot(ai, bj, k);
    }
  }
}

void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  check(a.rows == b.rows && c.rows == a.cols && c.cols == b.cols, "matmul_tn_acc");
  const int k = a.rows, m = a.cols, n = b.cols;
  for (int p = 0; p < k; ++p) {
    const double* ap = a.data.data() + static_cast<size_t>(p) * m;
    const double* bp = b.data.data() + static_cast<size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const double av = ap[i];
      double* ci = c.data.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void softmax_rows(Matrix& m) {
  for (int i = 0; i < m.rows; ++i) softmax_row(m.data.data() + static_cast<size_t>(i) * m.cols, m.cols);
}

}  // namespace serial

void matmul(const Matrix& a, const Matrix& b, Matrix& c) {
  check(a.cols == b.rows, "matmul");
  if (c.rows != a.rows || c.cols != b.cols) c = Matrix(a.rows, b.cols);
  else c.zero();
  const int m = a.rows, k = a.cols, n = b.cols;
  const long work = static_cast<long>(m) * k * n;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (int i = 0; i < m; ++i) {
    double* ci = c.data.data() + static_cast<size_t>(i) * n;
    const double* ai = a.data.data() + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b.data.data() + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c) {
  check(a.cols == b.cols, "matmul_nt");
  if (c.rows != a.rows || c.cols != b.rows) c = Matrix(a.rows, b.rows);
  const int m = a.rows, k = a.cols, n = b.rows;
  const long work = static_cast<long>(m) * k * n;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (int i = 0; i < m; ++i) {
    const double* ai = a.data.data() + static_cast<size_t>(i) * k;
    for (int j = 0; j < n; ++j) {
      const double* bj = b.data.data() + static_cast<size_t>(j) * k;
      c.data[static_cast<size_t>(i) * n + j] = dot(ai, bj, k);
    }
  }
}

void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  check(a.rows == b.rows && c.rows == a.cols && c.cols == b.cols, "matmul_tn_acc");
  const int k = a.rows, m = a.cols, n = b.cols;
  const long work = static_cast<long>(m) * k * n;
  // Parallel over rows of c; per element the p-order matches the serial loop.
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (int i = 0; i < m; ++i) {
    double* ci = c.data.data() + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = a.data[static_cast<size_t>(p) * m + i];
      const double* bp = b.data.data() + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void softmax_rows(Matrix& m) {
  const long work = static_cast<long>(m.rows) * m.cols * 16;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (int i = 0; i < m.rows; ++i) softmax_row(m.data.data() + static_cast<size_t>(i) * m.cols, m.cols);
}

void add_bias(Matrix& m, const Matrix& bias) {
  check(bias.size() == static_cast<size_t>(m.cols), "add_bias");
  for (int i = 0; i < m.rows; ++i) {
    double* r = m.data.data() + static_cast<size_t>(i) * m.cols;
    for (int j = 0; j < m.cols; ++j) r[j] += bias.data[j];
  }
}

void bias_grad_acc(const Matrix& g, Matrix& bias_grad) {
  check(bias_grad.size() == static_cast<size_t>(g.cols), "bias_grad_acc");
  for (int i = 0; i < g.rows; ++i) {
    const double* r = g.data.data() + static_cast<size_t>(i) * g.cols;
    for (int j = 0; j < g.cols; ++j) bias_grad.data[j] += r[j];
  }
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace trojanlm::kernels
