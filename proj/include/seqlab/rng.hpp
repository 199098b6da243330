#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace seqlab {

// Counter-based generator built on the splitmix64 finalizer. A stream is
// keyed by up to three 64-bit values (e.g. run seed, step index, candidate
// index); the same key always realizes the same draw sequence, independent
// of platform and of any other stream. This is what makes candidate
// evaluation reproducible and safe to run concurrently.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_key(std::uint64_t a, std::uint64_t b = 0,
                             std::uint64_t c = 0) {
  return mix64(mix64(mix64(a) ^ b) ^ c);
}

// Registry of purpose tags mixed into stream keys, so distinct subsystems
// fed from one run seed never share a stream.
namespace stream_tag {
inline constexpr std::uint64_t init = 1;       // parameter initialization
inline constexpr std::uint64_t batch = 2;      // batch index sampling
inline constexpr std::uint64_t decode = 3;     // ancestral sampling noise
inline constexpr std::uint64_t proposal = 4;   // MGS candidate perturbations
inline constexpr std::uint64_t data = 5;       // dataset generation
inline constexpr std::uint64_t mix = 6;        // mixed-step Bernoulli draws
}  // namespace stream_tag

class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : state_(mix64(key)) {}
  CounterRng(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0)
      : state_(mix_key(a, b, c)) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on (lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; the spare is cached so draw order is
  // well defined.
  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    // keep u1 away from 0 for the log
    u1 = (u1 <= 0.0) ? 0x1.0p-53 : u1;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Index in [0, n).
  std::size_t index(std::size_t n) {
    return std::size_t(uniform() * double(n)) % n;
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Sample k distinct indices from [0, n) by partial Fisher-Yates.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k,
                                               CounterRng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (k > n) k = n;
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i + rng.index(n - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return idx;
}

}  // namespace seqlab
