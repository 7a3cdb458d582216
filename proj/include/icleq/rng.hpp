#pragma once

#include <array>
#include <cstdint>

#include "icleq/numerics.hpp"

namespace icleq {

/// Counter-based random stream (Philox4x32-10). The output sequence is a
/// pure function of (seed, stream id, position), so streams can be handed
/// to concurrent workers without affecting each other.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }
  /// Number of 64-bit words drawn so far.
  std::uint64_t draws() const { return draws_; }

  std::uint64_t next_u64();
  /// Uniform on (0, 1), never exactly 0 or 1.
  double uniform();
  /// Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n);
  double normal();

  /// Independent child stream keyed by (this stream, child).
  RngStream split(std::uint64_t child) const;

 private:
  void refill();

  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t block_ = 0;
  std::array<std::uint64_t, 2> buffer_{};
  int buffered_ = 0;
  std::uint64_t draws_ = 0;
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

/// Complex normal with independent real and imaginary parts of variance ½.
Complex standard_complex_normal(RngStream& rng);

namespace detail {
/// Philox4x32 block function with 10 rounds.
std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> ctr,
                                           std::array<std::uint32_t, 2> key);
}  // namespace detail

/// Deterministic 64-bit mixing of two words, used to derive stream ids.
std::uint64_t mix_stream_id(std::uint64_t a, std::uint64_t b);

}  // namespace icleq
