#pragma once

// The obfuscation scheme and everything else the compiler hands the user:
// per-point delta maps, per-instruction metadata (what kind of write, which
// free draw produced its delta, trailer-set membership), the input/output
// encoding spec, and the trace decoder that recovers nominal plaintexts.

#include <algorithm>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fxa/vm.hpp"

namespace fxa {

// A location the scheme assigns deltas to: a register or a frame slot
// (slot indices are sp-relative within the active function's frame).
struct Loc {
  enum class Kind : u32 { Reg, Slot };
  Kind kind = Kind::Reg;
  u32 index = 0;

  static Loc reg(u32 r) { return Loc{Kind::Reg, r}; }
  static Loc slot(u32 s) { return Loc{Kind::Slot, s}; }
  u64 key() const { return (u64(kind) << 32) | index; }
  static Loc from_key(u64 k) { return Loc{Kind(k >> 32), u32(k)}; }
  bool operator==(const Loc&) const = default;
  std::string str() const {
    return kind == Kind::Reg ? reg_name(index) : "s" + std::to_string(index);
  }
};

// Sorted (loc-key, delta) snapshot of the delta database after each
// instruction. The join rule makes these path-invariant.
struct DeltaScheme {
  using Snapshot = std::vector<std::pair<u64, u64>>;
  Snapshot entry;
  std::vector<Snapshot> post;

  static std::optional<u64> find(const Snapshot& s, Loc l) {
    u64 k = l.key();
    auto it = std::lower_bound(s.begin(), s.end(), k,
                               [](const std::pair<u64, u64>& p, u64 v) { return p.first < v; });
    if (it == s.end() || it->first != k) return std::nullopt;
    return it->second;
  }
  std::optional<u64> delta_at(u32 point, Loc l) const {
    if (point >= post.size()) return std::nullopt;
    return find(post[point], l);
  }
};

// Draw ids: 0 is reserved for "pinned" words (return addresses and their
// copies) whose delta is structurally zero; free draws count from 1.
constexpr u64 kPinnedDraw = 0;

struct InstrMeta {
  enum class Kind : u8 { Other, ArithWrite, Copy, Branch };
  Kind kind = Kind::Other;
  Loc target{};            // written location (register, or slot for sw)
  bool pair = false;       // long/double register-pair write
  u64 draw = kPinnedDraw;  // free-delta draw id for the written word
  u64 draw_lo = kPinnedDraw;
  i64 trailer_group = -1;  // >=0: member of that trailer set (hi word)
  i64 trailer_group_lo = -1;
  bool pinned = false;     // address-path / return-address write
  u32 copy_src_reg = 0;    // mov: r1; sw: r2 (lw's source is the cell)
};

struct InputSpec {
  u32 reg = 0;
  u64 delta = 0;
  u64 delta_lo = 0;  // long inputs: low-half delta (reg+1)
  bool pair = false;
  bool pinned = false;  // ra: must decrypt to the return sentinel
  u64 draw = kPinnedDraw;
  u64 draw_lo = kPinnedDraw;
};

struct OutputSpec {
  u32 reg = kV0;
  u64 delta = 0;
  u64 delta_lo = 0;
  bool pair = false;
};

struct ParamInfo {
  std::string name;
  bool is_long = false;
};

struct CompilationOutput {
  Program program;
  DeltaScheme scheme;
  std::vector<InstrMeta> meta;
  std::vector<InputSpec> inputs;
  OutputSpec output;
  std::vector<ParamInfo> params;
  u64 seed = 0;
  u64 source_hash = 0;
  u64 num_draws = 0;
  std::string entry_name;

  u64 fingerprint() const { return program.fingerprint(); }
};

// ---- encode / decode ----------------------------------------------------

struct PlainValue {
  u64 value = 0;  // long: full 2w-bit value
  bool is_long = false;
};

// Encrypts the user's plaintext inputs per the entry scheme: value v at
// location l becomes E[v + D_entry(l)] with fresh runtime padding.
inline InputMap encode_inputs(const CompilationOutput& out, Key key,
                              const std::vector<PlainValue>& args) {
  Width w = out.program.width;
  Cipher cipher(key, w);
  Rng rng = Rng(out.seed).fork(0xe9c0de);
  if (args.size() != out.params.size())
    throw UsageError("expected " + std::to_string(out.params.size()) + " input values, got " +
                     std::to_string(args.size()));
  InputMap m;
  size_t arg = 0;
  for (const InputSpec& in : out.inputs) {
    if (in.pinned) {
      m.regs[in.reg] = cipher.encrypt_data(Vm::sentinel_return(w), rng);
      continue;
    }
    if (in.reg >= kA0 && in.reg < kA0 + 4) {
      const PlainValue& v = args.at(arg);
      if (v.is_long != in.pair)
        throw UsageError("input " + std::to_string(arg) + " has wrong width");
      arg++;
      if (in.pair) {
        m.regs[in.reg] = cipher.encrypt_data(w.add(long_join_hi(w, v.value), in.delta), rng);
        m.regs[in.reg + 1] = cipher.encrypt_data(w.add(long_join_lo(w, v.value), in.delta_lo), rng);
      } else {
        m.regs[in.reg] = cipher.encrypt_data(w.add(v.value, in.delta), rng);
      }
    } else {
      // sp starts at nominal -1, zer at nominal 0.
      u64 nominal = (in.reg == kSp) ? w.mask() : 0;
      m.regs[in.reg] = cipher.encrypt_data(w.add(nominal, in.delta), rng);
    }
  }
  if (arg != args.size()) throw UsageError("too many input values");
  return m;
}

inline PlainValue decode_outputs(const CompilationOutput& out, Key key,
                                 const MachineState& final_state) {
  Width w = out.program.width;
  Cipher cipher(key, w);
  const OutputSpec& o = out.output;
  if (o.pair) {
    u64 hi = w.sub(cipher.decrypt(final_state.regs[o.reg]).value, o.delta);
    u64 lo = w.sub(cipher.decrypt(final_state.regs[o.reg + 1]).value, o.delta_lo);
    return PlainValue{long_to_u64(w, LongWord{hi, lo}), true};
  }
  return PlainValue{w.sub(cipher.decrypt(final_state.regs[o.reg]).value, o.delta), false};
}

// ---- decoded trace view -------------------------------------------------

struct DecodedEvent {
  u32 pc = 0;
  Op op = Op::Mov;
  std::string loc;
  u64 plain = 0;    // plaintext beneath the encryption
  u64 nominal = 0;  // plain - scheme delta
  bool pinned = false;
  bool is_pair_lo = false;
};

struct DecodedTrace {
  std::vector<DecodedEvent> events;
  std::vector<std::pair<std::string, u64>> inputs;  // location, nominal value
};

inline DecodedTrace decode_trace(const Trace& t, Key key, const CompilationOutput& out) {
  if (t.fingerprint != out.fingerprint())
    throw UsageError("trace/scheme mismatch: program fingerprints differ");
  Width w = out.program.width;
  Cipher cipher(key, w);
  DecodedTrace dt;
  for (const InputRecord& in : t.inputs) {
    u64 plain = cipher.decrypt(in.block).value;
    if (in.is_reg) {
      u64 delta = 0;
      for (const InputSpec& spec : out.inputs) {
        if (spec.reg == in.reg) delta = spec.delta;
        else if (spec.pair && spec.reg + 1 == in.reg) delta = spec.delta_lo;
      }
      dt.inputs.push_back({reg_name(in.reg), w.sub(plain, delta)});
    } else {
      dt.inputs.push_back({"mem[" + to_hex(in.addr.block) + "]", plain});
    }
  }
  for (const TraceEvent& e : t.events) {
    if (!e.is_write()) continue;
    const InstrMeta& m = out.meta.at(e.pc);
    auto decode_one = [&](Ciphertext block, Loc l, bool lo) {
      DecodedEvent de;
      de.pc = e.pc;
      de.op = e.op;
      de.loc = l.str();
      de.plain = cipher.decrypt(block).value;
      de.pinned = m.pinned;
      de.is_pair_lo = lo;
      u64 delta = 0;
      if (!m.pinned) {
        if (auto d = out.scheme.delta_at(e.pc, l)) delta = *d;
      }
      de.nominal = w.sub(de.plain, delta);
      dt.events.push_back(de);
    };
    if (e.kind == TraceEvent::Kind::Mem) {
      decode_one(e.block, m.target, false);  // compiler records the slot
    } else if (e.kind == TraceEvent::Kind::RegPair) {
      decode_one(e.block, Loc::reg(e.loc), false);
      decode_one(e.block2, Loc::reg(e.loc + 1), true);
    } else {
      decode_one(e.block, Loc::reg(e.loc), false);
    }
  }
  return dt;
}

inline std::string format_decoded(const DecodedTrace& dt, Width w) {
  std::ostringstream os;
  for (auto& [loc, v] : dt.inputs)
    os << "in " << loc << " = " << w.to_signed(v) << "\n";
  for (const DecodedEvent& e : dt.events) {
    os << e.pc << " " << op_info(e.op).name << " " << e.loc << " = " << w.to_signed(e.plain);
    if (!e.pinned) os << " nominal " << w.to_signed(e.nominal);
    os << "\n";
  }
  return os.str();
}

}  // namespace fxa
