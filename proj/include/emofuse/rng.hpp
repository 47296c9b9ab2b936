// Copyright 2026 The emofuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "emofuse/common.hpp"

namespace emofuse {

// Named, seeded random streams. Every random draw in the project (weight
// init, shuffles, dropout masks, corpus synthesis) comes from one of these,
// so a (seed, name) pair fully determines the sequence. The generator is
// splitmix64; distributions are hand-rolled so results do not depend on the
// standard library implementation.
class RngStream {
 public:
  RngStream(uint64_t seed, std::string_view name)
      : seed_(seed), tag_(fnv1a(name.data(), name.size())) {
    state_ = mix_(seed_ ^ 0x6a09e667f3bcc909ULL, tag_);
  }

  // Substream derived from this stream's identity, independent of how many
  // draws have been consumed from the parent.
  RngStream derived(std::string_view sub) const {
    RngStream s(*this);
    s.tag_ = fnv1a(sub.data(), sub.size(), tag_);
    s.state_ = mix_(s.seed_ ^ 0x6a09e667f3bcc909ULL, s.tag_);
    return s;
  }

  RngStream derived(uint64_t salt) const {
    RngStream s(*this);
    s.tag_ = fnv1a(&salt, sizeof(salt), tag_);
    s.state_ = mix_(s.seed_ ^ 0x6a09e667f3bcc909ULL, s.tag_);
    return s;
  }

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  size_t index(size_t n) { return static_cast<size_t>(next_u64() % n); }

  // Box-Muller. Draws two uniforms per call; the sine half is discarded to
  // keep the stream stateless between calls.
  double normal() {
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <class Vec>
  void shuffle(Vec& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  uint64_t seed() const { return seed_; }

 private:
  static uint64_t mix_(uint64_t a, uint64_t b) {
    uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  uint64_t seed_;
  uint64_t tag_;
  uint64_t state_;
};

}  // namespace emofuse
