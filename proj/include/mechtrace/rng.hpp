#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

namespace mechtrace {

// Deterministic sampling helpers. std::uniform_int_distribution is
// implementation-defined, so bounded draws are done by rejection on the raw
// mt19937_64 stream; results are identical across platforms and compilers.
class DetRng {
 public:
  explicit DetRng(uint64_t seed) : eng_(seed) {}

  uint64_t next() { return eng_(); }

  uint64_t bounded(uint64_t n) {
    if (n == 0) return 0;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v;
    do {
      v = eng_();
    } while (v >= limit);
    return v % n;
  }

 private:
  std::mt19937_64 eng_;
};

// n distinct indices from [0, pool), in ascending order (partial
// Fisher-Yates); n >= pool returns everything
inline std::vector<int64_t> sample_indices(int64_t pool, int64_t n, uint64_t seed) {
  std::vector<int64_t> idx(static_cast<size_t>(pool));
  for (int64_t i = 0; i < pool; ++i) idx[static_cast<size_t>(i)] = i;
  if (n >= pool) return idx;
  DetRng rng(seed);
  for (int64_t i = 0; i < n; ++i) {
    const int64_t j = i + static_cast<int64_t>(rng.bounded(static_cast<uint64_t>(pool - i)));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  idx.resize(static_cast<size_t>(n));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace mechtrace
