#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace relab {

// FNV-1a over the raw bytes.
constexpr std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Stable seed derivation used for every stream in an experiment:
//   seed = splitmix64(fnv1a64(key) ^ splitmix64(master_seed))
// Keys are slash-separated paths such as "perm/3" or "trial/toy-pair__n5000__full/2".
constexpr std::uint64_t derive_seed(std::uint64_t master_seed, std::string_view key) {
  return splitmix64(fnv1a64(key) ^ splitmix64(master_seed));
}

// Portable random stream. The engine (mt19937_64) is fully specified by the
// standard; the distributions below are written out so that draws do not
// depend on the standard library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Rejection sampling removes modulo bias.
  std::uint64_t uniform_int(std::uint64_t n);

  // Standard normal via Box-Muller (one value per call, no cached spare).
  double normal();

  bool bernoulli(double p) { return uniform() < p; }

  template <typename Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      auto j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Index drawn from an unnormalised discrete distribution.
  std::size_t categorical(const std::vector<double>& weights);

 private:
  std::mt19937_64 engine_;
};

}  // namespace relab
