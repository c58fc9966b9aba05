#pragma once

#include <cstdint>

namespace molre::flops {

// Cost convention used everywhere in this project: one multiply-accumulate
// counts as 2 FLOPs; activations and other scalar ops count 1 FLOP per
// scalar; pure data movement (transpose, slice, concat, reshape) counts 0.
// The closed-form counters in cost.hpp and the runtime instrumentation in
// tensor.hpp share these formulas, so analytical and instrumented counts
// agree exactly.

constexpr std::uint64_t elementwise(std::uint64_t numel) { return numel; }

constexpr std::uint64_t matmul(std::uint64_t m, std::uint64_t k, std::uint64_t n) {
  return 2 * m * k * n;
}

constexpr std::uint64_t conv1d(std::uint64_t t_out, std::uint64_t kernel, std::uint64_t c_in,
                               std::uint64_t c_out) {
  return 2 * t_out * kernel * c_in * c_out + t_out * c_out;
}

// Per element: subtract max, exp, running sum, divide.
constexpr std::uint64_t softmax(std::uint64_t numel) { return 4 * numel; }

// Per element: negate, exp, add, divide.
constexpr std::uint64_t sigmoid(std::uint64_t numel) { return 4 * numel; }

// Per element: mean/variance accumulation, subtract, scale (amortized).
constexpr std::uint64_t layer_norm(std::uint64_t numel) { return 8 * numel; }

// Sum over the reduced axis plus one divide per output element.
constexpr std::uint64_t mean(std::uint64_t numel_in, std::uint64_t numel_out) {
  return numel_in + numel_out;
}

namespace detail {
inline thread_local bool enabled = false;
inline thread_local std::uint64_t counted = 0;
inline void add(std::uint64_t n) {
  if (enabled) counted += n;
}
}  // namespace detail

inline void enable() { detail::enabled = true; }
inline void disable() { detail::enabled = false; }
inline void reset() { detail::counted = 0; }
inline std::uint64_t count() { return detail::counted; }

/// Counts the FLOPs executed while in scope.
class Scope {
 public:
  Scope() {
    reset();
    enable();
  }
  ~Scope() { disable(); }
  Scope(const Scope&) = delete;
  Scope& operator=(const Scope&) = delete;

  std::uint64_t count() const { return flops::count(); }
};

}  // namespace molre::flops
