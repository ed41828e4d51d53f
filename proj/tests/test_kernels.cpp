#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "mechtrace/kernels.hpp"

using namespace mechtrace;

namespace {

// independent O(mnk) oracle
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c = Tensor::zeros({m, n});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p)
        acc += static_cast<double>(a.at(i, p)) * b.at(p, j);
      c.at(i, j) = static_cast<float>(acc);
    }
  return c;
}

Tensor random2d(int64_t r, int64_t c, std::mt19937& rng) {
  Tensor t = Tensor::zeros({r, c});
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  for (float& v : t.data) v = dist(rng);
  return t;
}

}  // namespace

TEST_CASE("matmul identity") {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor b = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor c = matmul(eye, b);
  for (int64_t i = 0; i < 4; ++i) CHECK(c.data[size_t(i)] == b.data[size_t(i)]);
}

TEST_CASE("matmul 1x2 by 2x1") {
  const Tensor a = Tensor::from({1, 2}, {1, 2});
  const Tensor b = Tensor::from({2, 1}, {3, 4});
  const Tensor c = matmul(a, b);
  CHECK(c.shape == std::vector<int64_t>{1, 1});
  CHECK(c.data[0] == doctest::Approx(11.0f).epsilon(1e-7));
}

TEST_CASE("matmul matches the naive oracle") {
  std::mt19937 rng(7);
  const Tensor a = random2d(7, 5, rng);
  const Tensor b = random2d(5, 3, rng);
  const Tensor got = matmul(a, b);
  const Tensor want = naive_matmul(a, b);
  for (size_t i = 0; i < got.data.size(); ++i)
    CHECK(std::abs(got.data[i] - want.data[i]) <= 1e-6f);
}

TEST_CASE("matmul random sizes up to 64x64 within 1e-5 relative error") {
  std::mt19937 rng(123);
  std::uniform_int_distribution<int64_t> size(1, 64);
  for (int round = 0; round < 12; ++round) {
    const int64_t m = size(rng), k = size(rng), n = size(rng);
    const Tensor a = random2d(m, k, rng);
    const Tensor b = random2d(k, n, rng);
    const Tensor got = matmul(a, b);
    const Tensor want = naive_matmul(a, b);
    CHECK(all_finite(got));
    for (size_t i = 0; i < got.data.size(); ++i) {
      const float scale = std::max(1.0f, std::abs(want.data[i]));
      CHECK(std::abs(got.data[i] - want.data[i]) <= 1e-5f * scale);
    }
  }
}

TEST_CASE("matmul_nt equals matmul against the transpose") {
  std::mt19937 rng(99);
  const Tensor a = random2d(6, 10, rng);
  const Tensor bt = random2d(4, 10, rng);  // B^T stored row-major
  Tensor b = Tensor::zeros({10, 4});
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 10; ++j) b.at(j, i) = bt.at(i, j);
  const Tensor got = matmul_nt(a, bt);
  const Tensor want = naive_matmul(a, b);
  for (size_t i = 0; i < got.data.size(); ++i)
    CHECK(std::abs(got.data[i] - want.data[i]) <= 1e-5f);
}

TEST_CASE("matmul f64 accumulation stays close to the oracle") {
  std::mt19937 rng(5);
  const Tensor a = random2d(16, 48, rng);
  const Tensor b = random2d(48, 8, rng);
  const Tensor got = matmul(a, b, Accumulate::F64);
  const Tensor want = naive_matmul(a, b);
  for (size_t i = 0; i < got.data.size(); ++i)
    CHECK(std::abs(got.data[i] - want.data[i]) <= 1e-6f);
}

TEST_CASE("matmul shape mismatch raises a dimension error") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_AS((void)matmul(a, b), ShapeError);
  CHECK_THROWS_AS((void)matmul_nt(a, Tensor::zeros({2, 4})), ShapeError);
  CHECK_THROWS_AS((void)matmul(Tensor::zeros({2}), b), ShapeError);
}

TEST_CASE("layernorm constant row becomes the bias") {
  const Tensor x = Tensor::from({1, 4}, {3, 3, 3, 3});
  const Tensor gain = Tensor::from({4}, {1, 1, 1, 1});
  const Tensor bias = Tensor::from({4}, {0, 0, 0, 0});
  const Tensor out = layernorm(x, gain, bias, 1e-5f);
  for (float v : out.data) CHECK(v == doctest::Approx(0.0f));
}

TEST_CASE("layernorm leaves an already normalized row in place") {
  const Tensor x = Tensor::from({1, 2}, {1, -1});
  const Tensor gain = Tensor::from({2}, {1, 1});
  const Tensor bias = Tensor::from({2}, {0, 0});
  const Tensor out = layernorm(x, gain, bias, 1e-12f);
  CHECK(out.data[0] == doctest::Approx(1.0f).epsilon(1e-5));
  CHECK(out.data[1] == doctest::Approx(-1.0f).epsilon(1e-5));
}

TEST_CASE("layernorm recomputed mean and variance, d=768") {
  std::mt19937 rng(21);
  const Tensor x = random2d(4, 768, rng);
  const Tensor gain = Tensor({768}, std::vector<float>(768, 1.0f));
  const Tensor bias = Tensor({768}, std::vector<float>(768, 0.0f));
  const Tensor out = layernorm(x, gain, bias, 1e-5f);
  for (int64_t r = 0; r < 4; ++r) {
    double mean = 0.0, var = 0.0;
    for (int64_t j = 0; j < 768; ++j) mean += out.at(r, j);
    mean /= 768.0;
    for (int64_t j = 0; j < 768; ++j) var += (out.at(r, j) - mean) * (out.at(r, j) - mean);
    var /= 768.0;
    CHECK(std::abs(mean) <= 1e-5);
    CHECK(std::abs(var - 1.0) <= 1e-3);
  }
}

TEST_CASE("layernorm dimension mismatch") {
  CHECK_THROWS_AS(
      (void)layernorm(Tensor::zeros({2, 4}), Tensor::zeros({3}), Tensor::zeros({4}), 1e-5f),
      ShapeError);
}

TEST_CASE("softmax symmetry and saturation") {
  Tensor x = Tensor::from({1, 2}, {0, 0});
  Tensor s = softmax_rows(x);
  CHECK(s.data[0] == doctest::Approx(0.5f));
  CHECK(s.data[1] == doctest::Approx(0.5f));

  Tensor big = Tensor::from({1, 2}, {1000, 0});
  Tensor sb = softmax_rows(big);
  CHECK(std::abs(sb.data[0] - 1.0f) <= 1e-6f);
  CHECK(std::abs(sb.data[1]) <= 1e-6f);
}

TEST_CASE("softmax shift invariance and row sums") {
  std::mt19937 rng(3);
  Tensor x = random2d(5, 9, rng);
  // grid-quantized inputs keep x + c exact in f32
  for (float& v : x.data) v = std::round(v * 1024.0f) / 1024.0f;
  Tensor shifted = x;
  for (int64_t r = 0; r < 5; ++r)
    for (int64_t j = 0; j < 9; ++j) shifted.at(r, j) += 17.5f;
  const Tensor a = softmax_rows(x);
  const Tensor b = softmax_rows(shifted);
  for (size_t i = 0; i < a.data.size(); ++i) CHECK(std::abs(a.data[i] - b.data[i]) <= 1e-6f);
  for (int64_t r = 0; r < 5; ++r) {
    double sum = 0.0;
    for (int64_t j = 0; j < 9; ++j) {
      CHECK(a.at(r, j) >= 0.0f);
      sum += a.at(r, j);
    }
    CHECK(std::abs(sum - 1.0) <= 1e-5);
  }
  CHECK(all_finite(a));
}

TEST_CASE("softmax maps -inf entries to exactly zero") {
  const float inf = std::numeric_limits<float>::infinity();
  Tensor x = Tensor::from({1, 3}, {-inf, 0, 0});
  const Tensor s = softmax_rows(x);
  CHECK(s.data[0] == 0.0f);
  CHECK(s.data[1] == doctest::Approx(0.5f));
}

TEST_CASE("gelu fixed points and asymptote") {
  CHECK(gelu_scalar(0.0f) == 0.0f);
  CHECK(std::abs(gelu_scalar(10.0f) - 10.0f) <= 1e-5f);
  CHECK(std::abs(gelu_scalar(-10.0f)) <= 1e-5f);
}

TEST_CASE("gelu matches the high-precision scalar oracle") {
  // frozen values from an arbitrary-precision evaluation of the tanh form
  const struct {
    float x;
    double want;
  } cases[] = {
      {1.0f, 0.8411919906082767},    {0.5f, 0.34571400982514392},
      {-1.25f, -0.1322857970302854}, {3.0f, 2.996362607918227},
      {-0.1f, -0.046017248954564836},
  };
  for (const auto& c : cases)
    CHECK(std::abs(static_cast<double>(gelu_scalar(c.x)) - c.want) <= 1e-6);
}

TEST_CASE("rank_of basics and tie convention") {
  const Tensor logits = Tensor::from({5}, {0.5f, 2.0f, 2.0f, -1.0f, 2.0f});
  CHECK(rank_of(logits, 1) == 1);  // ties do not worsen rank
  CHECK(rank_of(logits, 2) == 1);
  CHECK(rank_of(logits, 0) == 4);
  CHECK(rank_of(logits, 3) == 5);

  const Tensor uniform = Tensor({4}, std::vector<float>(4, 1.0f));
  for (int64_t t = 0; t < 4; ++t) CHECK(rank_of(uniform, t) == 1);

  CHECK_THROWS_AS((void)rank_of(logits, 5), NumericError);
  CHECK_THROWS_AS((void)rank_of(logits, -1), NumericError);
}

TEST_CASE("rank_of matches a sort-based oracle on a random vector") {
  std::mt19937 rng(42);
  std::uniform_real_distribution<float> dist(-3.0f, 3.0f);
  Tensor logits = Tensor::zeros({100});
  for (float& v : logits.data) v = dist(rng);
  std::vector<float> sorted(logits.data.begin(), logits.data.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<float>());
  for (int64_t t = 0; t < 100; ++t) {
    const float v = logits.data[size_t(t)];
    const auto it = std::lower_bound(sorted.begin(), sorted.end(), v, std::greater<float>());
    const int64_t want = 1 + (it - sorted.begin());
    CHECK(rank_of(logits, t) == want);
  }
}

TEST_CASE("argmax ties break toward the lowest id") {
  const std::vector<float> v = {0.0f, 3.0f, 1.0f, 3.0f};
  CHECK(argmax_lowest(v) == 1);
  const std::vector<float> w = {5.0f};
  CHECK(argmax_lowest(w) == 0);
}

TEST_CASE("kernels keep finite inputs finite") {
  std::mt19937 rng(11);
  const Tensor a = random2d(8, 8, rng);
  CHECK(all_finite(matmul(a, a)));
  CHECK(all_finite(gelu(a)));
  CHECK(all_finite(softmax_rows(a)));
  const Tensor ones = Tensor({8}, std::vector<float>(8, 1.0f));
  const Tensor zeros = Tensor({8}, std::vector<float>(8, 0.0f));
  CHECK(all_finite(layernorm(a, ones, zeros, 1e-5f)));
}
