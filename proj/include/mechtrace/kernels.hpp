#pragma once

#include <cstdint>
#include <span>

#include "mechtrace/tensor.hpp"

namespace mechtrace {

enum class Accumulate { F32, F64 };

// C = A[m,k] * B[k,n]. Accumulation is f32 by default; f64 behind the flag.
Tensor matmul(const Tensor& a, const Tensor& b, Accumulate acc = Accumulate::F32);

// C = A[m,k] * B[n,k]^T. Used for projections against row-major embedding
// tables, where B's rows are the output channels.
Tensor matmul_nt(const Tensor& a, const Tensor& b, Accumulate acc = Accumulate::F32);

// Per-row normalization over the last axis: (x - mean) / sqrt(var + eps),
// then gain * x + bias. Population variance.
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps);
void layernorm_row(const float* x, float* out, const float* gain, const float* bias,
                   int64_t d, float eps);

// Row softmax with max subtraction. -inf entries map to exactly 0.
Tensor softmax_rows(const Tensor& x);
void softmax_row_inplace(float* x, int64_t n);

// Elementwise tanh-approximation GELU, as used by GPT-2.
Tensor gelu(const Tensor& x);
float gelu_scalar(float x);

// 1-based rank of `token` in a logit vector: 1 + count of strictly greater
// entries. Ties never worsen the rank.
int64_t rank_of(const Tensor& logits, int64_t token);
int64_t rank_of(std::span<const float> logits, int64_t token);

// argmax with ties broken toward the lowest index
int64_t argmax_lowest(std::span<const float> v);

bool all_finite(const Tensor& t);
bool all_finite(std::span<const float> v);

float dot(std::span<const float> a, std::span<const float> b);
void add_inplace(std::span<float> dst, std::span<const float> src);
void axpy(float alpha, std::span<const float> x, std::span<float> y);  // y += alpha*x

}  // namespace mechtrace
