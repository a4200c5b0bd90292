#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

#include "mcd/common.hpp"

namespace mcd {

// Deterministic 64-bit PRNG (splitmix64) with explicit, hand-rolled
// distributions. std:: distributions are implementation-defined, which would
// break the bit-reproducibility contract across toolchains, so everything
// derives from raw 64-bit draws here.
//
// Substreams: derive(a, b) hashes the root seed with the given keys, so the
// derived stream does not depend on how many draws the parent has consumed.
class SeededRng {
 public:
  explicit SeededRng(uint64_t seed) : seed_(seed), state_(seed) {}

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  static uint64_t mix(std::initializer_list<uint64_t> keys) {
    uint64_t h = 0x51bd92fb3c9e1a57ull;
    for (uint64_t k : keys) {
      h ^= k + 0x9E3779B97F4A7C15ull + (h << 6) + (h >> 2);
      h = (h ^ (h >> 33)) * 0xFF51AFD7ED558CCDull;
      h = (h ^ (h >> 33)) * 0xC4CEB9FE1A85EC53ull;
      h ^= h >> 33;
    }
    return h;
  }

  SeededRng derive(uint64_t a, uint64_t b = 0) const {
    return SeededRng(mix({seed_, a, b}));
  }

  // Uniform double in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int64_t randint(int64_t n) {
    MCD_CHECK(n > 0, "randint needs n > 0, got ", n);
    return int64_t((static_cast<unsigned __int128>(next_u64()) *
                    static_cast<unsigned __int128>(n)) >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller, one spare cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    // Avoid log(0).
    u1 = u1 > 0 ? u1 : 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Normal truncated to [-2, 2] sigma, rescaled by stddev.
  double trunc_normal(double stddev) {
    double x = normal();
    while (x < -2.0 || x > 2.0) x = normal();
    return x * stddev;
  }

  template <typename V>
  void shuffle(std::vector<V>& v) {
    for (int64_t i = int64_t(v.size()) - 1; i > 0; --i) {
      std::swap(v[size_t(i)], v[size_t(randint(i + 1))]);
    }
  }

  // k distinct indices drawn uniformly from [0, n), in random order.
  std::vector<int> sample_without_replacement(int n, int k) {
    MCD_CHECK(k >= 0 && k <= n, "cannot sample ", k, " of ", n);
    std::vector<int> idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) idx[size_t(i)] = i;
    for (int i = 0; i < k; ++i) {
      const int j = i + int(randint(n - i));
      std::swap(idx[size_t(i)], idx[size_t(j)]);
    }
    idx.resize(size_t(k));
    return idx;
  }

 private:
  uint64_t seed_;
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mcd
