#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <sstream>
#include <string>

#include "diffseg/common.hpp"
#include "diffseg/tensor.hpp"

namespace diffseg {

// Deterministic random source. All sampling algorithms are pinned here
// (uniform bits -> double, Box-Muller, unbiased bounded ints) so that a seed
// fully determines every stream independent of the standard library's
// distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; caches the paired draw.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Unbiased integer in [0, n).
  uint64_t below(uint64_t n) {
    require(n >= 1, "rng: below(0)");
    uint64_t threshold = (0 - n) % n;  // 2^64 mod n
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Unbiased integer in [lo, hi], inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    require(lo <= hi, "rng: empty range");
    return lo + static_cast<int64_t>(below(static_cast<uint64_t>(hi - lo) + 1));
  }

  double uniform_in(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Derived stream that does not perturb this one.
  static uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::string state_string() const {
    std::ostringstream oss;
    uint64_t bits;
    static_assert(sizeof(bits) == sizeof(spare_));
    std::memcpy(&bits, &spare_, sizeof(bits));
    oss << engine_ << ' ' << (has_spare_ ? 1 : 0) << ' ' << bits;
    return oss.str();
  }

  void set_state(const std::string& s) {
    std::istringstream iss(s);
    int flag = 0;
    uint64_t bits = 0;
    iss >> engine_ >> flag >> bits;
    require(!iss.fail(), "rng: malformed state string");
    has_spare_ = flag != 0;
    std::memcpy(&spare_, &bits, sizeof(bits));
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng) {
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal());
}

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, double stddev) {
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal() * stddev);
}

template <typename T>
Tensor<T> normal_tensor(std::vector<int64_t> shape, Rng& rng) {
  Tensor<T> t(std::move(shape));
  fill_normal(t, rng);
  return t;
}

// Seeded in-place Fisher-Yates; pinned implementation for reproducibility.
template <typename V>
void shuffle_indices(V& v, Rng& rng) {
  for (size_t i = v.size(); i > 1; --i) {
    size_t j = static_cast<size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace diffseg
