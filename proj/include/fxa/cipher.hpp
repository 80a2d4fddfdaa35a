#pragma once

// The aliased, padded, keyed encryption every other layer treats as opaque.
//
// A ciphertext block is 2w bits: a w-bit plaintext word joined with w bits
// of padding, sealed by an 8-round balanced Feistel permutation keyed from
// a byte-string key. Padding = context tag (top bits) + nonce. Two blocks
// with equal plaintext but different padding are distinct blocks that
// compare equal as plaintexts ("aliases").

#include <string>
#include <vector>

#include "fxa/common.hpp"

namespace fxa {

// Context tags. Tag 0 marks runtime data; every (opcode, constant-slot)
// pair in the instruction set gets its own tag >= 1 (assigned in isa.hpp).
// Seven bits of padding are reserved for the tag at toolchain widths.
constexpr unsigned kTagBits = 7;
constexpr u64 kRuntimeTag = 0;

inline unsigned tag_bits_for(Width w) {
  // Widths below 8 exist only for exhaustive cipher tests.
  return w.bits >= 8 ? kTagBits : w.bits - 1;
}

struct Padding {
  u64 tag = kRuntimeTag;
  u64 nonce = 0;
  bool operator==(const Padding&) const = default;
};

struct Ciphertext {
  u64 block = 0;
  bool operator==(const Ciphertext&) const = default;
};

struct CiphertextHash {
  size_t operator()(const Ciphertext& c) const { return size_t(mix64(c.block)); }
};

class Key {
 public:
  Key() : Key("00112233445566778899aabbccddeeff") {}

  // Hex string, up to 32 digits; shorter keys are zero-extended.
  explicit Key(const std::string& hex) {
    if (hex.empty() || hex.size() > 32) throw UsageError("key must be 1..32 hex digits");
    u64 k[2] = {0, 0};
    for (size_t i = 0; i < hex.size(); i++) {
      char c = hex[i];
      int d;
      if (c >= '0' && c <= '9') d = c - '0';
      else if (c >= 'a' && c <= 'f') d = c - 'a' + 10;
      else if (c >= 'A' && c <= 'F') d = c - 'A' + 10;
      else throw UsageError("key must be hex");
      k[i / 16] = (k[i / 16] << 4) | u64(d);
    }
    lo_ = k[0];
    hi_ = k[1];
  }

  u64 material(u64 salt) const { return mix64(lo_ ^ mix64(hi_ + salt)); }
  bool operator==(const Key&) const = default;

 private:
  u64 lo_, hi_;
};

class Cipher {
 public:
  Cipher(Key key, Width w) : key_(key), w_(w) {
    if (w.bits < 2 || w.bits > 32) throw UsageError("cipher width must be in [2,32]");
    for (unsigned r = 0; r < kRounds; r++) subkey_[r] = key_.material(0x100 + r);
    pad_salt_ = key_.material(0x900dcafe);
    garbage_salt_ = key_.material(0xbadf00d);
  }

  Width width() const { return w_; }
  unsigned tag_bits() const { return tag_bits_for(w_); }
  unsigned nonce_bits() const { return w_.bits - tag_bits(); }
  u64 nonce_mask() const { return (1ull << nonce_bits()) - 1; }
  u64 max_tag() const { return (1ull << tag_bits()) - 1; }

  u64 pack_padding(Padding p) const {
    if (p.tag > max_tag()) throw UsageError("context tag out of range for width");
    if (p.nonce > nonce_mask()) throw UsageError("nonce out of range for width");
    return (p.tag << nonce_bits()) | p.nonce;
  }
  Padding unpack_padding(u64 field) const {
    return Padding{(field >> nonce_bits()) & max_tag(), field & nonce_mask()};
  }

  Ciphertext encrypt(u64 value, Padding p) const {
    if (value > w_.mask()) throw UsageError("plaintext value out of range");
    u64 block = (pack_padding(p) << w_.bits) | value;
    return Ciphertext{feistel(block, /*enc=*/true)};
  }

  struct Plain {
    u64 value;
    Padding padding;
  };

  Plain decrypt(Ciphertext c) const {
    u64 block = feistel(c.block & w_.block_mask(), /*enc=*/false);
    return Plain{block & w_.mask(), unpack_padding((block >> w_.bits) & w_.mask())};
  }

  // Same plaintext value and tag, fresh random nonce.
  Ciphertext fresh_alias(Ciphertext c, Rng& rng) const {
    Plain p = decrypt(c);
    return encrypt(p.value, Padding{p.padding.tag, rng.bits(nonce_bits())});
  }

  Ciphertext encrypt_data(u64 value, Rng& rng) const {
    return encrypt(value & w_.mask(), Padding{kRuntimeTag, rng.bits(nonce_bits())});
  }

  // Lifted operator with a caller-supplied rng for the fresh result padding.
  template <typename F>
  Ciphertext lift_op(F op, Ciphertext a, Ciphertext b, Rng& rng) const {
    u64 v = w_.wrap(op(decrypt(a).value, decrypt(b).value));
    return encrypt_data(v, rng);
  }

  // Deterministic lifted operator used inside the processor model: the
  // result padding is a keyed hash of the result value and the second
  // operand's padding. Ignoring the first operand's padding keeps memory
  // cells reachable after the base register is re-encoded (the effective
  // address block depends only on the address value and the displacement
  // constant's padding).
  Ciphertext lift_det(u64 result_value, Padding second_operand_pad, u64 op_salt) const {
    u64 v = w_.wrap(result_value);
    u64 n = mix64(pad_salt_ ^ (v * 0x9e3779b97f4a7c15ull) ^
                  mix64(pack_padding(second_operand_pad) + op_salt));
    return encrypt(v, Padding{kRuntimeTag, n & nonce_mask()});
  }

  // Deterministic nonsense on a constraint violation; a valid data block.
  Ciphertext garbage(u64 a, u64 b) const {
    u64 m = mix64(garbage_salt_ ^ a ^ mix64(b));
    return encrypt(m & w_.mask(), Padding{kRuntimeTag, (m >> 32) & nonce_mask()});
  }

  bool same_key(const Cipher& o) const { return key_ == o.key_; }

 private:
  static constexpr unsigned kRounds = 8;

  u64 feistel(u64 block, bool enc) const {
    u64 m = w_.mask();
    u64 left = (block >> w_.bits) & m, right = block & m;
    if (enc) {
      for (unsigned r = 0; r < kRounds; r++) {
        u64 f = mix64(right + subkey_[r]) & m;
        u64 nl = right, nr = left ^ f;
        left = nl;
        right = nr;
      }
    } else {
      for (unsigned r = kRounds; r-- > 0;) {
        u64 f = mix64(left + subkey_[r]) & m;
        u64 pl = right ^ f, pr = left;
        left = pl;
        right = pr;
      }
    }
    return (left << w_.bits) | right;
  }

  Key key_;
  Width w_;
  u64 subkey_[kRounds];
  u64 pad_salt_;
  u64 garbage_salt_;
};

}  // namespace fxa
