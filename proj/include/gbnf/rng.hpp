#pragma once

#include <cstdint>
#include <random>

namespace gbnf {

using Rng = std::mt19937_64;

// Independent stream for (seed, stage, step). Every stochastic step in training
// pulls its randomness from here so runs are reproducible bit-for-bit.
inline Rng derive_rng(std::uint64_t seed, std::uint64_t stage = 0, std::uint64_t step = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stage), static_cast<std::uint32_t>(stage >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32)};
  return Rng(seq);
}

}  // namespace gbnf
