#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "ffkv/numerics/matrix.hpp"

namespace ffkv {

// ---------------------------------------------------------------------------
// Reductions (64-bit accumulation)

inline double dot(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

inline double squared_norm(std::span<const float> a) { return dot(a, a); }

inline double l2_norm(std::span<const float> a) { return std::sqrt(squared_norm(a)); }

inline Vector row_l2_norms(const Matrix& w) {
  Vector out(w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r) out[r] = static_cast<float>(l2_norm(w.row(r)));
  return out;
}

inline Vector column_means(const Matrix& m) {
  std::vector<double> acc(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) acc[c] += row[c];
  }
  Vector out(m.cols());
  const double n = m.rows() ? static_cast<double>(m.rows()) : 1.0;
  for (std::size_t c = 0; c < m.cols(); ++c) out[c] = static_cast<float>(acc[c] / n);
  return out;
}

// ---------------------------------------------------------------------------
// Products. Inner loops accumulate in float (GEMM throughput on one core);
// see the reductions above for the 64-bit paths.

// a (n x k) * b (k x m)
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimension mismatch");
  Matrix out(a.rows(), b.cols());
  const std::size_t k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    float* o = out.row(i).data();
    const float* ar = a.row(i).data();
    for (std::size_t p = 0; p < k; ++p) {
      const float av = ar[p];
      if (av == 0.0f) continue;
      const float* br = b.row(p).data();
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

// a (n x k) * b^T where b is (m x k)
inline Matrix matmul_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw DimensionError("matmul_bt: inner dimension mismatch");
  Matrix out(a.rows(), b.rows());
  const std::size_t k = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const float* ar = a.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const float* br = b.row(j).data();
      float acc = 0.0f;
      for (std::size_t p = 0; p < k; ++p) acc += ar[p] * br[p];
      out(i, j) = acc;
    }
  }
  return out;
}

// a^T * b where a is (n x k) and b is (n x m); accumulates into `out` (k x m).
inline void add_matmul_at(const Matrix& a, const Matrix& b, Matrix& out) {
  if (a.rows() != b.rows()) throw DimensionError("matmul_at: row mismatch");
  if (out.rows() != a.cols() || out.cols() != b.cols()) throw DimensionError("matmul_at: output shape");
  const std::size_t m = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const float* ar = a.row(i).data();
    const float* br = b.row(i).data();
    for (std::size_t p = 0; p < a.cols(); ++p) {
      const float av = ar[p];
      if (av == 0.0f) continue;
      float* o = out.row(p).data();
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
}

// x (len k) * w (k x m)
inline Vector vec_mat(std::span<const float> x, const Matrix& w) {
  if (x.size() != w.rows()) throw DimensionError("vec_mat: length mismatch");
  Vector out(w.cols(), 0.0f);
  for (std::size_t p = 0; p < x.size(); ++p) {
    const float xv = x[p];
    if (xv == 0.0f) continue;
    auto wr = w.row(p);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += xv * wr[j];
  }
  return out;
}

inline void add_row_vector(Matrix& m, std::span<const float> v) {
  if (v.size() != m.cols()) throw DimensionError("add_row_vector: width mismatch");
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < v.size(); ++c) row[c] += v[c];
  }
}

inline void add_in_place(Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add_in_place");
  auto& x = a.storage();
  const auto& y = b.storage();
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[i];
}

inline void add_column_sums(const Matrix& m, std::span<float> out) {
  if (out.size() != m.cols()) throw DimensionError("add_column_sums: width mismatch");
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += row[c];
  }
}

// ---------------------------------------------------------------------------
// Sparsity

// Indices of the k entries kept by the top-k rule, in ascending index order.
// `signed_values` ranks by value instead of absolute value. Ties go to the
// lowest index.
inline std::vector<std::size_t> top_k_indices(std::span<const float> v, std::size_t k, bool signed_values = false) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (k >= v.size()) return idx;
  auto key = [&](std::size_t i) { return signed_values ? v[i] : std::fabs(v[i]); };
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), [&](std::size_t a, std::size_t b) {
    const float ka = key(a), kb = key(b);
    return ka > kb || (ka == kb && a < b);
  });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline Vector top_k_mask(std::span<const float> v, std::size_t k, bool signed_values = false) {
  if (k >= v.size()) return Vector(v.begin(), v.end());
  Vector out(v.size(), 0.0f);
  for (std::size_t i : top_k_indices(v, k, signed_values)) out[i] = v[i];
  return out;
}

inline std::size_t count_nonzero(std::span<const float> v) {
  return static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [](float x) { return x != 0.0f; }));
}

// ---------------------------------------------------------------------------
// Cosine alignment

struct MaxCosine {
  double score = 0.0;
  std::size_t index = 0;
  bool zero_norm = false;  // source row had zero norm; score forced to 0
};

// For each row of `a`, the best-matching row of `b` by cosine similarity.
// Zero-norm rows in `b` have cosine 0 with everything.
inline std::vector<MaxCosine> cosine_similarity_argmax(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw DimensionError("cosine_similarity_argmax: column mismatch");
  if (b.rows() == 0) throw DimensionError("cosine_similarity_argmax: empty target dictionary");
  const std::size_t d = a.cols();

  // Normalize the target once in double so every score uses the same operands.
  std::vector<double> bn(b.rows() * d, 0.0);
  for (std::size_t k = 0; k < b.rows(); ++k) {
    const double n = l2_norm(b.row(k));
    if (n == 0.0) continue;
    auto br = b.row(k);
    for (std::size_t c = 0; c < d; ++c) bn[k * d + c] = br[c] / n;
  }

  std::vector<MaxCosine> out(a.rows());
  std::vector<double> an(d);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double n = l2_norm(a.row(r));
    if (n == 0.0) {
      out[r] = MaxCosine{0.0, 0, true};
      continue;
    }
    auto ar = a.row(r);
    for (std::size_t c = 0; c < d; ++c) an[c] = ar[c] / n;
    double best = -2.0;
    std::size_t best_k = 0;
    for (std::size_t k = 0; k < b.rows(); ++k) {
      const double* bk = bn.data() + k * d;
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += an[c] * bk[c];
      if (s > best) {
        best = s;
        best_k = k;
      }
    }
    out[r] = MaxCosine{std::clamp(best, -1.0, 1.0), best_k, false};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Summary statistics

inline double mean(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

// Standard error of the mean with the n-1 sample variance; 0 for n < 2.
inline double standard_error(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  const double var = ss / static_cast<double>(xs.size() - 1);
  return std::sqrt(var / static_cast<double>(xs.size()));
}

}  // namespace ffkv
