#pragma once

// Instruction set: the Table-1 integer subset plus the three-constant
// logical/shift forms, long (2w-bit) arithmetic on register pairs, IEEE
// floating point at w=32, and the TLB-entry invalidate special register.
//
// Every arithmetic instruction folds encrypted additive constants so that
// the compiler can offset runtime data beneath the encryption by arbitrary
// deltas. Branch displacements and jump targets are plaintext instruction
// indices; branch target = pc + 1 + disp.

#include <array>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "fxa/cipher.hpp"
#include "fxa/common.hpp"

namespace fxa {

enum class Op : u32 {
  // Integer (one additive constant).
  Add, Addi, Sub,
  // Integer, three constants: r0 <- (r1 [-] k1) [op] (r2 [-] k2) [+] k0.
  Mul, Div, And, Or, Xor, Sll, Srl, Sra,
  // Exact block copy.
  Mov,
  // Branches: if b then pc <- pc + 1 + i, test r1 REL r2 [+] k (post-diddle).
  Beq, Bne, Blt, Bgt, Ble, Bge,
  B,
  // Memory: mem[r1 [+] k] <- r2  /  r0 <- mem[r1 [+] k].
  Sw, Lw,
  Jr, Jal, J,
  // Long forms on even register pairs; constants are hi/lo block pairs
  // applied per half with no carry, the inner operation is true 2w-bit.
  Addl, Subl, Mull, Divl,
  // Single-precision float (w=32 only), three constants.
  Addf, Subf, Mulf, Divf,
  // Float branches, two constants (k1, k2).
  Beqf, Bnef, Bltf, Bgtf, Blef, Bgef,
  // Double float on register pairs (w=32 only).
  Addd, Subd, Muld, Divd,
  // mtspr UDTLBEIR r: drop the TLB mapping keyed by r's block.
  Mtspr,
  Count_
};

constexpr unsigned kNumOps = unsigned(Op::Count_);

struct OpInfo {
  const char* name;
  unsigned num_consts;   // ciphertext block slots
  unsigned num_regs;     // register fields used
  bool has_disp;         // branch displacement / jump target field
};

inline const OpInfo& op_info(Op op) {
  static const OpInfo table[kNumOps] = {
      {"add", 1, 3, false},  {"addi", 1, 2, false}, {"sub", 1, 3, false},
      {"mul", 3, 3, false},  {"div", 3, 3, false},  {"and", 3, 3, false},
      {"or", 3, 3, false},   {"xor", 3, 3, false},  {"sll", 3, 3, false},
      {"srl", 3, 3, false},  {"sra", 3, 3, false},  {"mov", 0, 2, false},
      {"beq", 1, 2, true},   {"bne", 1, 2, true},   {"blt", 1, 2, true},
      {"bgt", 1, 2, true},   {"ble", 1, 2, true},   {"bge", 1, 2, true},
      {"b", 0, 0, true},     {"sw", 1, 2, false},   {"lw", 1, 2, false},
      {"jr", 0, 1, false},   {"jal", 0, 0, true},   {"j", 0, 0, true},
      {"addl", 6, 3, false}, {"subl", 6, 3, false}, {"mull", 6, 3, false},
      {"divl", 6, 3, false}, {"addf", 3, 3, false}, {"subf", 3, 3, false},
      {"mulf", 3, 3, false}, {"divf", 3, 3, false}, {"beqf", 2, 2, true},
      {"bnef", 2, 2, true},  {"bltf", 2, 2, true},  {"bgtf", 2, 2, true},
      {"blef", 2, 2, true},  {"bgef", 2, 2, true},  {"addd", 6, 3, false},
      {"subd", 6, 3, false}, {"muld", 6, 3, false}, {"divd", 6, 3, false},
      {"mtspr", 0, 1, false},
  };
  return table[unsigned(op)];
}

inline bool is_int_branch(Op op) { return op >= Op::Beq && op <= Op::Bge; }
inline bool is_fp_branch(Op op) { return op >= Op::Beqf && op <= Op::Bgef; }
inline bool is_branch(Op op) { return is_int_branch(op) || is_fp_branch(op); }
inline bool is_long_op(Op op) { return op >= Op::Addl && op <= Op::Divl; }
inline bool is_double_op(Op op) { return op >= Op::Addd && op <= Op::Divd; }
inline bool is_pair_op(Op op) { return is_long_op(op) || is_double_op(op); }
inline bool is_fp_op(Op op) { return (op >= Op::Addf && op <= Op::Divf) || is_fp_branch(op) || is_double_op(op); }

// Arithmetic instructions that write a register (the tactic-relevant set;
// copies, branches and jumps are excluded).
inline bool is_arith_write(Op op) {
  return (op >= Op::Add && op <= Op::Sra) || is_long_op(op) ||
         (op >= Op::Addf && op <= Op::Divf) || is_double_op(op);
}
inline bool is_copy(Op op) { return op == Op::Mov || op == Op::Sw || op == Op::Lw; }

// Liar compilation swaps a branch for its negation with the diddle bit
// compensating, so structural comparison works on negation classes.
inline u32 opcode_class(Op op) {
  switch (op) {
    case Op::Bne: return u32(Op::Beq);
    case Op::Bge: return u32(Op::Blt);
    case Op::Ble: return u32(Op::Bgt);
    case Op::Bnef: return u32(Op::Beqf);
    case Op::Bgef: return u32(Op::Bltf);
    case Op::Blef: return u32(Op::Bgtf);
    default: return u32(op);
  }
}
inline Op negate_branch(Op op) {
  switch (op) {
    case Op::Beq: return Op::Bne;
    case Op::Bne: return Op::Beq;
    case Op::Blt: return Op::Bge;
    case Op::Bge: return Op::Blt;
    case Op::Bgt: return Op::Ble;
    case Op::Ble: return Op::Bgt;
    case Op::Beqf: return Op::Bnef;
    case Op::Bnef: return Op::Beqf;
    case Op::Bltf: return Op::Bgef;
    case Op::Bgef: return Op::Bltf;
    case Op::Bgtf: return Op::Blef;
    case Op::Blef: return Op::Bgtf;
    default: throw UsageError("not a branch");
  }
}

// ---- context tags ----------------------------------------------------
// One tag per (opcode, constant slot), except that the sw and lw address
// displacements share a single class: the paper's resynchronization and
// release sequences move one displacement block between sw, lw and addi.

namespace detail {
struct TagTable {
  std::array<std::array<u64, 6>, kNumOps> tag{};
  u64 count = 0;
  TagTable() {
    u64 next = 1;
    for (unsigned o = 0; o < kNumOps; o++) {
      const OpInfo& info = op_info(Op(o));
      for (unsigned s = 0; s < info.num_consts; s++) {
        if (Op(o) == Op::Lw)
          tag[o][s] = tag[unsigned(Op::Sw)][s];
        else
          tag[o][s] = next++;
      }
    }
    count = next;
  }
};
inline const TagTable& tag_table() {
  static const TagTable t;
  return t;
}
}  // namespace detail

inline u64 const_tag(Op op, unsigned slot) {
  if (slot >= op_info(op).num_consts) throw UsageError("constant slot out of range");
  return detail::tag_table().tag[unsigned(op)][slot];
}
inline u64 mem_disp_tag() { return const_tag(Op::Sw, 0); }
inline u64 num_tags() { return detail::tag_table().count; }

// ---- registers --------------------------------------------------------

constexpr unsigned kNumRegs = 32;
constexpr unsigned kZer = 0;   // heap base / literal anchor
constexpr unsigned kSp = 2;    // stack pointer
constexpr unsigned kRa = 4;    // return address
constexpr unsigned kV0 = 6;    // return value (v1 = 7 is the long partner)
constexpr unsigned kA0 = 8;    // a0..a3 = 8..11
constexpr unsigned kT0 = 12;   // t0..t9 = 12..21

inline std::string reg_name(unsigned r) {
  if (r == kZer) return "zer";
  if (r == kSp) return "sp";
  if (r == kRa) return "ra";
  if (r == kV0) return "v0";
  if (r == kV0 + 1) return "v1";
  if (r >= kA0 && r < kA0 + 4) return "a" + std::to_string(r - kA0);
  if (r >= kT0 && r < kT0 + 10) return "t" + std::to_string(r - kT0);
  return "r" + std::to_string(r);
}

inline int reg_by_name(const std::string& s) {
  for (unsigned r = 0; r < kNumRegs; r++)
    if (reg_name(r) == s) return int(r);
  if (s.size() > 1 && s[0] == 'r') {
    int v = 0;
    for (size_t i = 1; i < s.size(); i++) {
      if (s[i] < '0' || s[i] > '9') return -1;
      v = v * 10 + (s[i] - '0');
    }
    return v < int(kNumRegs) ? v : -1;
  }
  return -1;
}

// ---- instructions and programs ---------------------------------------

struct Instruction {
  Op op = Op::Mov;
  unsigned r0 = 0, r1 = 0, r2 = 0;
  int disp = 0;  // branch pc-relative delta, or absolute target for j/jal
  std::vector<Ciphertext> consts;

  const Ciphertext& k(unsigned slot) const { return consts.at(slot); }
};

struct Program {
  Width width;
  std::vector<Instruction> code;
  unsigned entry = 0;
  std::map<std::string, unsigned> symbols;

  unsigned size() const { return unsigned(code.size()); }

  // Structural fingerprint: stable across recompilations (constants and
  // branch negation-class variants excluded).
  u64 fingerprint() const {
    u64 h = mix64(0xf1a9 ^ (u64(width.bits) << 8) ^ entry);
    for (const Instruction& i : code) {
      h = mix64(h ^ opcode_class(i.op));
      h = mix64(h ^ (u64(i.r0) | (u64(i.r1) << 8) | (u64(i.r2) << 16)));
      h = mix64(h ^ u64(u32(i.disp)));
      h = mix64(h ^ i.consts.size());
    }
    return h;
  }
};

// Structural comparison. Reports every difference in shape; encrypted
// constants are intentionally not compared.
inline std::vector<std::string> structural_diff(const Program& a, const Program& b) {
  std::vector<std::string> out;
  if (a.width.bits != b.width.bits) out.push_back("width differs");
  if (a.entry != b.entry) out.push_back("entry differs");
  if (a.size() != b.size()) {
    out.push_back("length differs: " + std::to_string(a.size()) + " vs " +
                  std::to_string(b.size()));
    return out;
  }
  for (unsigned i = 0; i < a.size(); i++) {
    const Instruction &x = a.code[i], &y = b.code[i];
    if (opcode_class(x.op) != opcode_class(y.op))
      out.push_back("op class differs at " + std::to_string(i));
    else if (x.r0 != y.r0 || x.r1 != y.r1 || x.r2 != y.r2)
      out.push_back("registers differ at " + std::to_string(i));
    else if (x.disp != y.disp)
      out.push_back("displacement differs at " + std::to_string(i));
    else if (x.consts.size() != y.consts.size())
      out.push_back("constant count differs at " + std::to_string(i));
  }
  return out;
}

inline bool ciphertext_diff(const Program& a, const Program& b) {
  if (a.size() != b.size()) return true;
  for (unsigned i = 0; i < a.size(); i++) {
    if (a.code[i].op != b.code[i].op) return true;
    if (a.code[i].consts.size() != b.code[i].consts.size()) return true;
    for (size_t s = 0; s < a.code[i].consts.size(); s++)
      if (!(a.code[i].consts[s] == b.code[i].consts[s])) return true;
  }
  return false;
}

// ---- IEEE 754 encode/decode (w=32 only) --------------------------------

inline u64 fp_encode(float x) {
  u32 bits;
  std::memcpy(&bits, &x, 4);
  return bits;
}
inline float fp_decode(u64 v) {
  u32 bits = u32(v);
  float x;
  std::memcpy(&x, &bits, 4);
  return x;
}
inline u64 fp64_encode_hi(double x) {
  u64 bits;
  std::memcpy(&bits, &x, 8);
  return bits >> 32;
}
inline u64 fp64_encode_lo(double x) {
  u64 bits;
  std::memcpy(&bits, &x, 8);
  return bits & 0xffffffffull;
}
inline double fp64_decode(u64 hi, u64 lo) {
  u64 bits = (hi << 32) | (lo & 0xffffffffull);
  double x;
  std::memcpy(&x, &bits, 8);
  return x;
}

inline void require_fp_width(Width w) {
  if (w.bits != 32) throw UsageError("floating point requires width 32");
}

}  // namespace fxa
