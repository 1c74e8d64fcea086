#pragma once

// Dense products used by every probe. Each output element is owned by one
// thread and accumulated in a fixed order, so the OpenMP kernels are
// bit-identical to their serial references.

#include "tcprof/matrix.hpp"

namespace tcprof::kernels {

/// C = A * B
Matrix matmul(const Matrix& a, const Matrix& b);
/// C = A * B^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// C = A^T * B
Matrix matmul_tn(const Matrix& a, const Matrix& b);

Matrix matmul_serial(const Matrix& a, const Matrix& b);
Matrix matmul_nt_serial(const Matrix& a, const Matrix& b);
Matrix matmul_tn_serial(const Matrix& a, const Matrix& b);

/// Number of OpenMP threads the kernels will use.
int thread_count();
void set_thread_count(int n);

}  // namespace tcprof::kernels
