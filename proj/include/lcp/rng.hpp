#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace lcp {

// Deterministic counter-based generator (splitmix64 finalizer).  A single
// root seed is split into named substreams so that independent consumers
// (weight init, dropout, shuffling, scene layout) draw from decoupled
// sequences regardless of evaluation order.  Splitting is stateless with
// respect to the parent: the child stream depends only on (parent seed, key).
class Rng {
 public:
  explicit Rng(std::uint64_t seed)
      : seed_(mix(seed ^ kRootSalt)), state_(seed_) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix(state_);
  }

  // Uniform in [0,1) with 53 random bits.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  float next_float() {
    return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f;
  }

  // Uniform integer in [0,n) without modulo bias (rejection sampling).
  std::uint64_t next_below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~0ull - (~0ull % n + 1) % n;
    std::uint64_t v = next_u64();
    while (v > limit) v = next_u64();
    return v % n;
  }

  double uniform(double lo, double hi) {
    return lo + (hi - lo) * next_double();
  }

  // Derive an independent substream.  Mix the child key into the parent's
  // construction seed through two finalizer rounds so sibling streams
  // decorrelate; draws on the parent never shift its children.
  Rng split(std::uint64_t key) const {
    Rng child(0);
    child.seed_ = mix(mix(seed_ ^ kSplitSalt) + key);
    child.state_ = child.seed_;
    return child;
  }

  Rng split(std::string_view name) const { return split(hash_name(name)); }

  // FNV-1a, used to turn substream names into split keys.
  static std::uint64_t hash_name(std::string_view name) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (char c : name) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ull;
    }
    return h;
  }

 private:
  static constexpr std::uint64_t kRootSalt = 0x8f1bbcdcbfa53e0bull;
  static constexpr std::uint64_t kSplitSalt = 0xd2b74407b1ce6e93ull;

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;   // frozen at construction; the basis for splits
  std::uint64_t state_;  // advances with each draw
};

// Fisher-Yates shuffle driven by the stream above.
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next_below(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace lcp
