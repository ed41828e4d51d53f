#include "mechtrace/kernels.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <mutex>

#ifdef MECHTRACE_USE_OPENBLAS
#include <cblas.h>
extern "C" void openblas_set_num_threads(int);
#endif

namespace mechtrace {

namespace {

void check_2d(const Tensor& t, const char* name) {
  if (t.ndim() != 2)
    throw ShapeError(std::string(name) + " must be 2-d, got " + t.shape_str());
}

#ifdef MECHTRACE_USE_OPENBLAS
// kernels stay single threaded; parallelism lives at the prompt level
void blas_single_thread() {
  static std::once_flag once;
  std::call_once(once, [] { openblas_set_num_threads(1); });
}
#endif

void matmul_f32(const float* a, const float* b, float* c,
                int64_t m, int64_t k, int64_t n, bool b_transposed) {
#ifdef MECHTRACE_USE_OPENBLAS
  blas_single_thread();
  cblas_sgemm(CblasRowMajor, CblasNoTrans,
              b_transposed ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k),
              1.0f, a, static_cast<int>(k), b,
              b_transposed ? static_cast<int>(k) : static_cast<int>(n),
              0.0f, c, static_cast<int>(n));
#else
  if (!b_transposed) {
    // axpy formulation: stream rows of B, good locality for row-major data
    for (int64_t i = 0; i < m; ++i) {
      float* ci = c + i * n;
      std::memset(ci, 0, sizeof(float) * static_cast<size_t>(n));
      const float* ai = a + i * k;
      for (int64_t p = 0; p < k; ++p) {
        const float aip = ai[p];
        if (aip == 0.0f) continue;
        const float* bp = b + p * n;
        for (int64_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
      }
    }
  } else {
    for (int64_t i = 0; i < m; ++i) {
      const float* ai = a + i * k;
      float* ci = c + i * n;
      for (int64_t j = 0; j < n; ++j) {
        const float* bj = b + j * k;
        float acc0 = 0.0f, acc1 = 0.0f, acc2 = 0.0f, acc3 = 0.0f;
        int64_t p = 0;
        for (; p + 4 <= k; p += 4) {
          acc0 += ai[p] * bj[p];
          acc1 += ai[p + 1] * bj[p + 1];
          acc2 += ai[p + 2] * bj[p + 2];
          acc3 += ai[p + 3] * bj[p + 3];
        }
        float acc = (acc0 + acc1) + (acc2 + acc3);
        for (; p < k; ++p) acc += ai[p] * bj[p];
        ci[j] = acc;
      }
    }
  }
#endif
}

void matmul_f64(const float* a, const float* b, float* c,
                int64_t m, int64_t k, int64_t n, bool b_transposed) {
  std::vector<double> acc(static_cast<size_t>(n));
  for (int64_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const float* ai = a + i * k;
    if (!b_transposed) {
      for (int64_t p = 0; p < k; ++p) {
        const double aip = ai[p];
        const float* bp = b + p * n;
        for (int64_t j = 0; j < n; ++j) acc[static_cast<size_t>(j)] += aip * bp[j];
      }
    } else {
      for (int64_t j = 0; j < n; ++j) {
        const float* bj = b + j * k;
        double s = 0.0;
        for (int64_t p = 0; p < k; ++p) s += static_cast<double>(ai[p]) * bj[p];
        acc[static_cast<size_t>(j)] = s;
      }
    }
    float* ci = c + i * n;
    for (int64_t j = 0; j < n; ++j) ci[j] = static_cast<float>(acc[static_cast<size_t>(j)]);
  }
}

Tensor matmul_impl(const Tensor& a, const Tensor& b, Accumulate acc, bool b_transposed) {
  check_2d(a, "matmul lhs");
  check_2d(b, "matmul rhs");
  const int64_t m = a.dim(0), k = a.dim(1);
  const int64_t bk = b_transposed ? b.dim(1) : b.dim(0);
  const int64_t n = b_transposed ? b.dim(0) : b.dim(1);
  if (k != bk)
    throw ShapeError("matmul inner dimensions disagree: " + a.shape_str() +
                     (b_transposed ? " x T" : " x ") + b.shape_str());
  Tensor c = Tensor::zeros({m, n});
  if (m == 0 || n == 0) return c;
  if (acc == Accumulate::F64)
    matmul_f64(a.data.data(), b.data.data(), c.data.data(), m, k, n, b_transposed);
  else
    matmul_f32(a.data.data(), b.data.data(), c.data.data(), m, k, n, b_transposed);
  return c;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, Accumulate acc) {
  return matmul_impl(a, b, acc, false);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b, Accumulate acc) {
  return matmul_impl(a, b, acc, true);
}

void layernorm_row(const float* x, float* out, const float* gain, const float* bias,
                   int64_t d, float eps) {
  double mean = 0.0;
  for (int64_t j = 0; j < d; ++j) mean += x[j];
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (int64_t j = 0; j < d; ++j) {
    const double c = x[j] - mean;
    var += c * c;
  }
  var /= static_cast<double>(d);
  const float inv = 1.0f / std::sqrt(static_cast<float>(var) + eps);
  const float mu = static_cast<float>(mean);
  for (int64_t j = 0; j < d; ++j) out[j] = (x[j] - mu) * inv * gain[j] + bias[j];
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  const int64_t d = x.row_size();
  if (gain.numel() != d || bias.numel() != d)
    throw ShapeError("layernorm gain/bias length " + gain.shape_str() + "/" +
                     bias.shape_str() + " does not match last dim " + std::to_string(d));
  Tensor out = Tensor::zeros(x.shape);
  const int64_t rows = x.rows();
  for (int64_t r = 0; r < rows; ++r)
    layernorm_row(x.row(r), out.row(r), gain.data.data(), bias.data.data(), d, eps);
  return out;
}

void softmax_row_inplace(float* x, int64_t n) {
  float mx = -std::numeric_limits<float>::infinity();
  for (int64_t j = 0; j < n; ++j) mx = std::max(mx, x[j]);
  if (!(mx > -std::numeric_limits<float>::infinity())) {
    // fully masked row; extend to uniform rather than produce NaN
    const float u = 1.0f / static_cast<float>(n);
    for (int64_t j = 0; j < n; ++j) x[j] = u;
    return;
  }
  double sum = 0.0;
  for (int64_t j = 0; j < n; ++j) {
    const float e = std::exp(x[j] - mx);
    x[j] = e;
    sum += e;
  }
  const float inv = static_cast<float>(1.0 / sum);
  for (int64_t j = 0; j < n; ++j) x[j] *= inv;
}

Tensor softmax_rows(const Tensor& x) {
  Tensor out = x;
  const int64_t rows = out.rows(), n = out.row_size();
  for (int64_t r = 0; r < rows; ++r) softmax_row_inplace(out.row(r), n);
  return out;
}

float gelu_scalar(float x) {
  // tanh approximation, matching GPT-2
  const float c = 0.7978845608028654f;  // sqrt(2/pi)
  const float inner = c * (x + 0.044715f * x * x * x);
  return 0.5f * x * (1.0f + std::tanh(inner));
}

Tensor gelu(const Tensor& x) {
  Tensor out = x;
  for (float& v : out.data) v = gelu_scalar(v);
  return out;
}

int64_t rank_of(std::span<const float> logits, int64_t token) {
  if (token < 0 || token >= static_cast<int64_t>(logits.size()))
    throw NumericError("rank_of: token " + std::to_string(token) +
                       " out of range for vocab of " + std::to_string(logits.size()));
  const float v = logits[static_cast<size_t>(token)];
  int64_t greater = 0;
  for (float x : logits)
    if (x > v) ++greater;
  return 1 + greater;
}

int64_t rank_of(const Tensor& logits, int64_t token) {
  return rank_of(std::span<const float>(logits.data), token);
}

int64_t argmax_lowest(std::span<const float> v) {
  int64_t best = 0;
  for (size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<size_t>(best)]) best = static_cast<int64_t>(i);
  return best;
}

bool all_finite(std::span<const float> v) {
  for (float x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

bool all_finite(const Tensor& t) { return all_finite(std::span<const float>(t.data)); }

float dot(std::span<const float> a, std::span<const float> b) {
  float acc0 = 0.0f, acc1 = 0.0f, acc2 = 0.0f, acc3 = 0.0f;
  size_t n = a.size(), p = 0;
  for (; p + 4 <= n; p += 4) {
    acc0 += a[p] * b[p];
    acc1 += a[p + 1] * b[p + 1];
    acc2 += a[p + 2] * b[p + 2];
    acc3 += a[p + 3] * b[p + 3];
  }
  float acc = (acc0 + acc1) + (acc2 + acc3);
  for (; p < n; ++p) acc += a[p] * b[p];
  return acc;
}

void add_inplace(std::span<float> dst, std::span<const float> src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void axpy(float alpha, std::span<const float> x, std::span<float> y) {
  for (size_t i = 0; i < y.size(); ++i) y[i] += alpha * x[i];
}

}  // namespace mechtrace
