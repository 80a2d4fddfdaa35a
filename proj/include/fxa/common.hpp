#pragma once

// Shared word arithmetic, width handling and small utilities used by every
// layer of the toolchain. A "word" is a w-bit unsigned integer carried in a
// uint64_t; arithmetic is mod 2^w with two's-complement signed views.

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace fxa {

using u8 = std::uint8_t;
using u32 = std::uint32_t;
using u64 = std::uint64_t;
using i32 = std::int32_t;
using i64 = std::int64_t;

// Errors thrown by the toolchain. CLI maps these to exit codes.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CompileError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct RuntimeFault : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct StatFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// splitmix64 finalizer; the keyed mixing primitive behind the cipher, the
// deterministic result padding and the garbage blocks.
constexpr u64 mix64(u64 z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Plaintext word width in bits. The toolchain accepts 8, 16 or 32; the
// cipher layer additionally works at smaller test widths.
struct Width {
  unsigned bits = 16;

  constexpr u64 mask() const { return (bits >= 64) ? ~0ull : ((1ull << bits) - 1); }
  constexpr u64 block_mask() const {
    return (2 * bits >= 64) ? ~0ull : ((1ull << (2 * bits)) - 1);
  }
  constexpr u64 sign_bit() const { return 1ull << (bits - 1); }
  constexpr u64 wrap(u64 v) const { return v & mask(); }
  constexpr u64 add(u64 a, u64 b) const { return (a + b) & mask(); }
  constexpr u64 sub(u64 a, u64 b) const { return (a - b) & mask(); }
  constexpr u64 neg(u64 a) const { return (0 - a) & mask(); }
  constexpr bool is_neg(u64 a) const { return (a & sign_bit()) != 0; }

  // Signed view of a w-bit word.
  constexpr i64 to_signed(u64 v) const {
    v &= mask();
    return is_neg(v) ? i64(v) - i64(mask()) - 1 : i64(v);
  }
  constexpr u64 from_signed(i64 s) const { return u64(s) & mask(); }

  constexpr u64 mul(u64 a, u64 b) const { return (a * b) & mask(); }

  // Division dialect used throughout: signed, truncating toward zero,
  // division by zero yields all-ones (-1), INT_MIN/-1 wraps.
  constexpr u64 sdiv(u64 a, u64 b) const {
    if ((b & mask()) == 0) return mask();
    i64 sa = to_signed(a), sb = to_signed(b);
    if (sb == -1) return neg(a);  // covers INT_MIN/-1 by wrapping
    return from_signed(sa / sb);
  }

  // Comparison dialect: sign of the w-bit difference. This is what the
  // branch instructions implement; deltas cancel exactly under it.
  constexpr bool lt(u64 a, u64 b) const { return is_neg(sub(a, b)); }
  constexpr bool gt(u64 a, u64 b) const { return is_neg(sub(b, a)); }
  constexpr bool le(u64 a, u64 b) const { return !gt(a, b); }
  constexpr bool ge(u64 a, u64 b) const { return !lt(a, b); }
};

inline Width check_toolchain_width(unsigned bits) {
  if (bits != 8 && bits != 16 && bits != 32)
    throw UsageError("width must be 8, 16 or 32");
  return Width{bits};
}

// Long (2w-bit) values are carried as high/low word pairs.
struct LongWord {
  u64 hi = 0;
  u64 lo = 0;
  bool operator==(const LongWord&) const = default;
};

inline u64 long_join_hi(Width w, u64 full) { return (full >> w.bits) & w.mask(); }
inline u64 long_join_lo(Width w, u64 full) { return full & w.mask(); }

inline u64 long_to_u64(Width w, LongWord v) {
  return ((v.hi & w.mask()) << w.bits) | (v.lo & w.mask());
}
inline LongWord long_from_u64(Width w, u64 full) {
  return {long_join_hi(w, full), long_join_lo(w, full)};
}

// True 2w-bit ops on hi/lo pairs (the "tilde" semantics inside long
// instructions; constants apply per half with no carry).
inline LongWord long_add(Width w, LongWord a, LongWord b) {
  u64 m = w.block_mask();
  return long_from_u64(w, (long_to_u64(w, a) + long_to_u64(w, b)) & m);
}
inline LongWord long_sub(Width w, LongWord a, LongWord b) {
  u64 m = w.block_mask();
  return long_from_u64(w, (long_to_u64(w, a) - long_to_u64(w, b)) & m);
}
inline LongWord long_mul(Width w, LongWord a, LongWord b) {
  if (w.bits == 32) {
    unsigned __int128 p = (unsigned __int128)long_to_u64(w, a) * long_to_u64(w, b);
    return long_from_u64(w, (u64)p);
  }
  u64 m = w.block_mask();
  return long_from_u64(w, (long_to_u64(w, a) * long_to_u64(w, b)) & m);
}
inline i64 long_to_signed(Width w, LongWord v) {
  u64 full = long_to_u64(w, v);
  unsigned bb = 2 * w.bits;
  if (bb >= 64) return i64(full);
  u64 sign = 1ull << (bb - 1);
  return (full & sign) ? i64(full) - (i64(w.block_mask()) + 1) : i64(full);
}
inline LongWord long_from_signed(Width w, i64 s) {
  return long_from_u64(w, u64(s) & w.block_mask());
}
inline LongWord long_sdiv(Width w, LongWord a, LongWord b) {
  if (long_to_u64(w, b) == 0) return long_from_u64(w, w.block_mask());
  if (w.bits == 32) {
    i64 sa = i64(long_to_u64(w, a)), sb = i64(long_to_u64(w, b));
    if (sb == -1 && sa == INT64_MIN) return a;
    return long_from_u64(w, u64(sa / sb));
  }
  return long_from_signed(w, long_to_signed(w, a) / long_to_signed(w, b));
}
inline bool long_is_neg(Width w, LongWord v) { return w.is_neg(v.hi); }

// Hex helpers for the line-oriented file formats.
inline std::string to_hex(u64 v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%llx", (unsigned long long)v);
  return buf;
}
inline u64 parse_hex(const std::string& s) {
  if (s.empty()) throw FormatError("empty hex field");
  u64 v = 0;
  for (char c : s) {
    int d;
    if (c >= '0' && c <= '9') d = c - '0';
    else if (c >= 'a' && c <= 'f') d = c - 'a' + 10;
    else if (c >= 'A' && c <= 'F') d = c - 'A' + 10;
    else throw FormatError("bad hex digit in '" + s + "'");
    v = (v << 4) | u64(d);
  }
  return v;
}

// Deterministic RNG. All compiler randomness flows through one of these,
// seeded from the --seed flag; draws are made portable (mask, not
// std::uniform_int_distribution).
class Rng {
 public:
  explicit Rng(u64 seed) : state_(seed ? seed : 0x243f6a8885a308d3ull) {}

  u64 next() {
    state_ = mix64(state_ + 0x632be59bd9b4e019ull);
    return mix64(state_);
  }
  u64 word(Width w) { return next() & w.mask(); }
  u64 bits(unsigned n) { return n == 0 ? 0 : (next() & ((n >= 64) ? ~0ull : ((1ull << n) - 1))); }
  bool coin() { return next() & 1; }
  // Uniform in [0, n) by rejection.
  u64 below(u64 n) {
    if (n == 0) return 0;
    u64 lim = ~0ull - (~0ull % n);
    u64 v;
    do { v = next(); } while (v >= lim);
    return v % n;
  }
  Rng fork(u64 salt) { return Rng(mix64(state_ ^ mix64(salt))); }

 private:
  u64 state_;
};

}  // namespace fxa
