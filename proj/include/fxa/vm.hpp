#pragma once

// Executes programs over encrypted state. Registers and memory hold
// ciphertext blocks only; memory is addressed by full-block encrypted
// effective addresses behind a unit-granularity first-come-first-served
// TLB. Every write (and every effective-address block) lands in the trace.
//
// The machine is deterministic: result paddings come from a keyed hash of
// the inputs, so re-executing an instruction on the same blocks reproduces
// the same block. That is what makes a stored cell reachable again by
// reissuing the same base register and displacement constant.

#include <algorithm>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "fxa/cipher.hpp"
#include "fxa/isa.hpp"

namespace fxa {

constexpr u64 kAddSalt = 0;  // shared by addi, add and the lw/sw address path

struct MachineState {
  std::array<Ciphertext, kNumRegs> regs{};
  u64 pc = 0;
  u64 fuel = 0;
  bool halted = false;
};

class Tlb {
 public:
  explicit Tlb(u64 capacity) : capacity_(capacity) {}

  // Existing mapping or first-come-first-served allocation.
  u32 translate(Ciphertext addr, bool* fresh = nullptr) {
    auto it = map_.find(addr.block);
    if (it != map_.end()) {
      if (fresh) *fresh = false;
      return it->second;
    }
    u32 phys;
    if (!free_.empty()) {
      phys = free_.back();
      free_.pop_back();
    } else {
      if (next_free_ >= capacity_) throw RuntimeFault("physical memory exhausted");
      phys = u32(next_free_++);
    }
    map_.emplace(addr.block, phys);
    if (fresh) *fresh = true;
    return phys;
  }

  // Removing an absent mapping is a no-op.
  void invalidate(Ciphertext addr) {
    auto it = map_.find(addr.block);
    if (it == map_.end()) return;
    free_.push_back(it->second);
    map_.erase(it);
  }

  bool mapped(Ciphertext addr) const { return map_.count(addr.block) != 0; }
  u64 occupancy() const { return map_.size(); }
  std::vector<u64> mapped_blocks() const {
    std::vector<u64> out;
    out.reserve(map_.size());
    for (auto& [b, p] : map_) out.push_back(b);
    return out;
  }

 private:
  std::unordered_map<u64, u32> map_;
  std::vector<u32> free_;
  u64 next_free_ = 0;
  u64 capacity_;
};

struct TraceEvent {
  enum class Kind { Reg, RegPair, Mem, Branch, Invalidate };
  Kind kind;
  u32 pc;
  Op op;
  u32 loc = 0;          // register index or physical memory index
  Ciphertext block{};   // written block (high half for pairs)
  Ciphertext block2{};  // low half for pair writes
  bool taken = false;   // branches
  bool has_addr = false;
  Ciphertext eff{}, base{}, disp{};  // memory access blocks (sw/lw/mtspr)

  bool is_write() const { return kind == Kind::Reg || kind == Kind::RegPair || kind == Kind::Mem; }
};

struct InputRecord {
  bool is_reg;
  u32 reg = 0;          // when is_reg
  Ciphertext addr{};    // memory input: the effective-address block
  Ciphertext block{};
};

struct Trace {
  Width width;
  u64 fingerprint = 0;
  std::vector<TraceEvent> events;
  std::vector<InputRecord> inputs;
  bool complete = false;  // natural return (jr to sentinel)
  u64 steps = 0;
};

struct InputMap {
  std::unordered_map<u32, Ciphertext> regs;
  std::unordered_map<u64, Ciphertext> mem;  // keyed by address block
};

enum class RunStatus { Returned, FuelExhausted, Fault };

struct RunResult {
  Trace trace;
  MachineState state;
  RunStatus status = RunStatus::Returned;
  std::string fault;
  u64 tlb_occupancy = 0;
  u64 tlb_peak = 0;
};

struct VmOptions {
  bool strict = false;      // diagnose violations instead of silent garbage
  u64 memory_cap = 1ull << 20;
  bool trace_enabled = true;
};

// Trace structure: (pc, opcode class, location kind+index, taken flags,
// input location sequence). Empty result means structurally identical.
inline std::vector<std::string> structural_diff(const Trace& a, const Trace& b) {
  std::vector<std::string> out;
  if (a.events.size() != b.events.size()) {
    out.push_back("event count differs: " + std::to_string(a.events.size()) + " vs " +
                  std::to_string(b.events.size()));
    return out;
  }
  for (size_t i = 0; i < a.events.size(); i++) {
    const TraceEvent &x = a.events[i], &y = b.events[i];
    if (x.kind != y.kind || x.pc != y.pc || opcode_class(x.op) != opcode_class(y.op) ||
        x.loc != y.loc || x.taken != y.taken) {
      out.push_back("event " + std::to_string(i) + " differs structurally");
      if (out.size() > 16) return out;
    }
  }
  if (a.inputs.size() != b.inputs.size()) {
    out.push_back("input count differs");
    return out;
  }
  for (size_t i = 0; i < a.inputs.size(); i++) {
    if (a.inputs[i].is_reg != b.inputs[i].is_reg ||
        (a.inputs[i].is_reg && a.inputs[i].reg != b.inputs[i].reg))
      out.push_back("input " + std::to_string(i) + " differs structurally");
  }
  return out;
}

inline bool ciphertext_diff(const Trace& a, const Trace& b) {
  if (a.events.size() != b.events.size()) return true;
  for (size_t i = 0; i < a.events.size(); i++)
    if (!(a.events[i].block == b.events[i].block)) return true;
  return false;
}

class Vm {
 public:
  Vm(const Program& program, Key key, VmOptions opt = {})
      : prog_(program),
        cipher_(key, program.width),
        w_(program.width),
        opt_(opt),
        tlb_(opt.memory_cap) {}

  static u64 sentinel_return(Width w) { return w.mask(); }

  // Executes from the entry point until jr-to-sentinel, fault or fuel
  // exhaustion. `inputs` preloads registers and memory cells; locations
  // read before written are recorded in the trace as inputs.
  RunResult run(const InputMap& inputs, u64 fuel) {
    inputs_ = &inputs;
    result_ = RunResult{};
    result_.trace.width = w_;
    result_.trace.fingerprint = prog_.fingerprint();
    st_ = MachineState{};
    st_.pc = prog_.entry;
    st_.fuel = fuel;
    reg_written_.fill(false);
    reg_read_.fill(false);
    for (unsigned r = 0; r < kNumRegs; r++)
      st_.regs[r] = cipher_.encrypt(0, Padding{kRuntimeTag, mix64(0xcafe + r) & cipher_.nonce_mask()});
    for (auto& [r, c] : inputs.regs) {
      if (r >= kNumRegs) throw UsageError("input register out of range");
      st_.regs[r] = c;
    }
    mem_.clear();

    while (!st_.halted) {
      if (st_.fuel == 0) {
        result_.status = RunStatus::FuelExhausted;
        break;
      }
      if (st_.pc >= prog_.size()) {
        fault("pc out of range: " + std::to_string(st_.pc));
        break;
      }
      st_.fuel--;
      result_.trace.steps++;
      if (!step(prog_.code[st_.pc])) break;
      result_.tlb_peak = std::max(result_.tlb_peak, tlb_.occupancy());
    }
    if (st_.halted) result_.status = RunStatus::Returned;
    result_.trace.complete = (result_.status == RunStatus::Returned);
    result_.state = st_;
    result_.tlb_occupancy = tlb_.occupancy();
    return std::move(result_);
  }

  const Tlb& tlb() const { return tlb_; }
  Tlb& tlb() { return tlb_; }
  const Cipher& cipher() const { return cipher_; }

 private:
  struct Violation {};

  void fault(const std::string& msg) {
    result_.status = RunStatus::Fault;
    result_.fault = msg;
    failed_ = true;
  }

  // Reads a register as runtime data (decrypted). Tag violations yield
  // silent garbage in default mode, a diagnostic in strict mode.
  Cipher::Plain read_data(unsigned r, bool* bad) {
    Ciphertext c = read_reg_block(r);
    Cipher::Plain p = cipher_.decrypt(c);
    if (p.padding.tag != kRuntimeTag) {
      if (opt_.strict) {
        fault("tag violation: register " + reg_name(r) + " at pc " + std::to_string(st_.pc));
        *bad = true;
        return p;
      }
      *bad = true;  // caller substitutes garbage
    }
    return p;
  }

  Ciphertext read_reg_block(unsigned r) {
    if (!reg_written_[r] && !reg_read_[r]) {
      reg_read_[r] = true;
      if (opt_.strict && !inputs_->regs.count(r)) {
        fault("missing input: register " + reg_name(r) + " read before written");
        throw Violation{};
      }
      result_.trace.inputs.push_back(InputRecord{true, r, {}, st_.regs[r]});
    }
    return st_.regs[r];
  }

  Cipher::Plain read_const(const Instruction& i, unsigned slot, bool* bad) {
    Cipher::Plain p = cipher_.decrypt(i.k(slot));
    u64 expect = const_tag(i.op, slot);
    bool ok = p.padding.tag == expect ||
              (i.op == Op::Addi && p.padding.tag == mem_disp_tag());
    if (!ok) {
      if (opt_.strict) {
        fault("tag violation: constant " + std::to_string(slot) + " of " +
              op_info(i.op).name + " at pc " + std::to_string(st_.pc));
        *bad = true;
        return p;
      }
      *bad = true;
    }
    return p;
  }

  void write_reg(unsigned r, Ciphertext c, const Instruction& i, bool record = true) {
    st_.regs[r] = c;
    reg_written_[r] = true;
    if (record && opt_.trace_enabled)
      result_.trace.events.push_back(
          TraceEvent{TraceEvent::Kind::Reg, u32(st_.pc), i.op, r, c});
  }

  struct Cell {
    Ciphertext content;
    bool written = false;
  };

  Cell& cell_at(u32 phys) {
    if (phys >= mem_.size()) mem_.resize(phys + 1);
    return mem_[phys];
  }

  // Effective address formation: identical for lw, sw and addi, so the
  // release sequence can reproduce the block the memory unit saw.
  Ciphertext eff_addr(u64 base_value, Cipher::Plain disp) const {
    return cipher_.lift_det(base_value + disp.value, disp.padding, kAddSalt);
  }

  bool step(const Instruction& i) {
    failed_ = false;
    try {
      exec(i);
    } catch (Violation&) {
      return false;
    } catch (RuntimeFault& f) {
      fault(f.what());
      return false;
    }
    return !failed_;
  }

  void exec(const Instruction& i) {
    Width w = w_;
    u64 next_pc = st_.pc + 1;
    bool bad = false;

    auto garbage_out = [&](unsigned dest) {
      write_reg(dest, cipher_.garbage(st_.pc, mix64(u64(i.op))), i);
    };

    switch (i.op) {
      case Op::Add: case Op::Addi: case Op::Sub: {
        Cipher::Plain a = read_data(i.r1, &bad);
        u64 acc = a.value;
        if (i.op != Op::Addi) {
          Cipher::Plain b = read_data(i.r2, &bad);
          acc = (i.op == Op::Sub) ? w.sub(acc, b.value) : w.add(acc, b.value);
        }
        Cipher::Plain k = read_const(i, 0, &bad);
        if (bad) { garbage_out(i.r0); break; }
        // The result block matches the effective-address block lw/sw would
        // form from the same base value and constant, which is what lets
        // "addi r sp k; mtspr UDTLBEIR r" reproduce a defunct address.
        write_reg(i.r0, eff_addr(acc, k), i);
        break;
      }

      case Op::Mul: case Op::Div: case Op::And: case Op::Or: case Op::Xor:
      case Op::Sll: case Op::Srl: case Op::Sra: {
        Cipher::Plain a = read_data(i.r1, &bad);
        Cipher::Plain b = read_data(i.r2, &bad);
        Cipher::Plain k0 = read_const(i, 0, &bad);
        Cipher::Plain k1 = read_const(i, 1, &bad);
        Cipher::Plain k2 = read_const(i, 2, &bad);
        if (bad) { garbage_out(i.r0); break; }
        u64 x = w.sub(a.value, k1.value), y = w.sub(b.value, k2.value);
        u64 inner;
        switch (i.op) {
          case Op::Mul: inner = w.mul(x, y); break;
          case Op::Div: inner = w.sdiv(x, y); break;
          case Op::And: inner = x & y; break;
          case Op::Or: inner = x | y; break;
          case Op::Xor: inner = x ^ y; break;
          default: {  // shifts: counts >= w give 0 / sign fill
            u64 c = y;
            if (i.op == Op::Sll) inner = c >= w.bits ? 0 : w.wrap(x << c);
            else if (i.op == Op::Srl) inner = c >= w.bits ? 0 : (x >> c);
            else inner = c >= w.bits ? (w.is_neg(x) ? w.mask() : 0)
                                     : w.from_signed(w.to_signed(x) >> c);
          }
        }
        write_reg(i.r0, cipher_.lift_det(w.add(inner, k0.value), k0.padding, u64(i.op)), i);
        break;
      }

      case Op::Mov:
        // Exact block copy; data is preserved identically.
        write_reg(i.r0, read_reg_block(i.r1), i);
        break;

      case Op::Beq: case Op::Bne: case Op::Blt:
      case Op::Bgt: case Op::Ble: case Op::Bge: {
        Cipher::Plain a = read_data(i.r1, &bad);
        Cipher::Plain b = read_data(i.r2, &bad);
        Cipher::Plain k = read_const(i, 0, &bad);
        u64 lhs = a.value, rhs = w.add(b.value, k.value);
        bool raw;
        switch (i.op) {
          case Op::Beq: raw = lhs == rhs; break;
          case Op::Bne: raw = lhs != rhs; break;
          case Op::Blt: raw = w.lt(lhs, rhs); break;
          case Op::Bgt: raw = w.gt(lhs, rhs); break;
          case Op::Ble: raw = w.le(lhs, rhs); break;
          default: raw = w.ge(lhs, rhs); break;
        }
        bool diddle = (k.padding.nonce & 1) != 0;
        bool taken = bad ? ((mix64(st_.pc) & 1) != 0) : (raw != diddle);
        if (taken) next_pc = u64(i64(st_.pc) + 1 + i.disp);
        if (opt_.trace_enabled)
          result_.trace.events.push_back(
              TraceEvent{TraceEvent::Kind::Branch, u32(st_.pc), i.op, 0, {}, {}, taken});
        break;
      }

      case Op::B:
        next_pc = u64(i64(st_.pc) + 1 + i.disp);
        break;

      case Op::Sw: case Op::Lw: {
        Cipher::Plain base = read_data(i.r1, &bad);
        Cipher::Plain k = cipher_.decrypt(i.k(0));
        if (k.padding.tag != mem_disp_tag()) {
          if (opt_.strict) { fault("tag violation: memory displacement at pc " + std::to_string(st_.pc)); return; }
          bad = true;
        }
        Ciphertext eff = bad ? cipher_.garbage(st_.pc, i.k(0).block)
                             : eff_addr(base.value, k);
        u32 phys = tlb_.translate(eff);
        Cell& cell = cell_at(phys);
        if (i.op == Op::Sw) {
          cell.content = read_reg_block(i.r2);
          cell.written = true;
          if (opt_.trace_enabled) {
            TraceEvent e{TraceEvent::Kind::Mem, u32(st_.pc), i.op, phys, cell.content};
            e.has_addr = true;
            e.eff = eff; e.base = st_.regs[i.r1]; e.disp = i.k(0);
            result_.trace.events.push_back(e);
          }
        } else {
          if (!cell.written) {
            auto it = inputs_->mem.find(eff.block);
            if (it != inputs_->mem.end()) {
              cell.content = it->second;
            } else {
              if (opt_.strict) { fault("missing input: memory read before written at pc " + std::to_string(st_.pc)); return; }
              cell.content = cipher_.garbage(eff.block, 0x9ead);
            }
            cell.written = true;
            result_.trace.inputs.push_back(InputRecord{false, 0, eff, cell.content});
          }
          st_.regs[i.r0] = cell.content;
          reg_written_[i.r0] = true;
          if (opt_.trace_enabled) {
            TraceEvent e{TraceEvent::Kind::Reg, u32(st_.pc), i.op, i.r0, cell.content};
            e.has_addr = true;
            e.eff = eff; e.base = st_.regs[i.r1]; e.disp = i.k(0);
            result_.trace.events.push_back(e);
          }
        }
        break;
      }

      case Op::Jr: {
        Cipher::Plain t = read_data(i.r0, &bad);
        if (bad) { fault("jr through non-data block at pc " + std::to_string(st_.pc)); return; }
        if (t.value == sentinel_return(w)) {
          st_.halted = true;
          break;
        }
        next_pc = t.value;
        break;
      }

      case Op::Jal: {
        u64 ret = st_.pc + 1;
        Ciphertext c = cipher_.lift_det(ret, Padding{kRuntimeTag, 0}, 0x3a1);
        write_reg(kRa, c, i);
        next_pc = u64(i.disp);
        break;
      }

      case Op::J:
        next_pc = u64(i.disp);
        break;

      case Op::Addl: case Op::Subl: case Op::Mull: case Op::Divl: {
        if ((i.r0 | i.r1 | i.r2) & 1) { fault("long op on odd register pair"); return; }
        Cipher::Plain ah = read_data(i.r1, &bad), al = read_data(i.r1 + 1, &bad);
        Cipher::Plain bh = read_data(i.r2, &bad), bl = read_data(i.r2 + 1, &bad);
        Cipher::Plain k[6];
        for (unsigned s = 0; s < 6; s++) k[s] = read_const(i, s, &bad);
        if (bad) {
          write_pair(i.r0, cipher_.garbage(st_.pc, 1), cipher_.garbage(st_.pc, 2), i);
          break;
        }
        LongWord a{w.sub(ah.value, k[2].value), w.sub(al.value, k[3].value)};
        LongWord b{w.sub(bh.value, k[4].value), w.sub(bl.value, k[5].value)};
        LongWord inner;
        switch (i.op) {
          case Op::Addl: inner = long_add(w, a, b); break;
          case Op::Subl: inner = long_sub(w, a, b); break;
          case Op::Mull: inner = long_mul(w, a, b); break;
          default: inner = long_sdiv(w, a, b); break;
        }
        u64 rh = w.add(inner.hi, k[0].value), rl = w.add(inner.lo, k[1].value);
        write_pair(i.r0, cipher_.lift_det(rh, k[0].padding, u64(i.op)),
                   cipher_.lift_det(rl, k[1].padding, u64(i.op) + 0x100), i);
        break;
      }

      case Op::Addf: case Op::Subf: case Op::Mulf: case Op::Divf: {
        require_fp_width(w);
        Cipher::Plain a = read_data(i.r1, &bad), b = read_data(i.r2, &bad);
        Cipher::Plain k0 = read_const(i, 0, &bad), k1 = read_const(i, 1, &bad),
                      k2 = read_const(i, 2, &bad);
        if (bad) { garbage_out(i.r0); break; }
        float x = fp_decode(w.sub(a.value, k1.value));
        float y = fp_decode(w.sub(b.value, k2.value));
        float r;
        switch (i.op) {
          case Op::Addf: r = x + y; break;
          case Op::Subf: r = x - y; break;
          case Op::Mulf: r = x * y; break;
          default: r = x / y; break;
        }
        write_reg(i.r0, cipher_.lift_det(w.add(fp_encode(r), k0.value), k0.padding, u64(i.op)), i);
        break;
      }

      case Op::Beqf: case Op::Bnef: case Op::Bltf:
      case Op::Bgtf: case Op::Blef: case Op::Bgef: {
        require_fp_width(w);
        Cipher::Plain a = read_data(i.r1, &bad), b = read_data(i.r2, &bad);
        Cipher::Plain k1 = read_const(i, 0, &bad), k2 = read_const(i, 1, &bad);
        float x = fp_decode(w.sub(a.value, k1.value));
        float y = fp_decode(w.sub(b.value, k2.value));
        bool raw;
        switch (i.op) {
          case Op::Beqf: raw = x == y; break;
          case Op::Bnef: raw = x != y; break;
          case Op::Bltf: raw = x < y; break;
          case Op::Bgtf: raw = x > y; break;
          case Op::Blef: raw = x <= y; break;
          default: raw = x >= y; break;
        }
        bool diddle = (k1.padding.nonce & 1) != 0;
        bool taken = bad ? ((mix64(st_.pc) & 1) != 0) : (raw != diddle);
        if (taken) next_pc = u64(i64(st_.pc) + 1 + i.disp);
        if (opt_.trace_enabled)
          result_.trace.events.push_back(
              TraceEvent{TraceEvent::Kind::Branch, u32(st_.pc), i.op, 0, {}, {}, taken});
        break;
      }

      case Op::Addd: case Op::Subd: case Op::Muld: case Op::Divd: {
        require_fp_width(w);
        if ((i.r0 | i.r1 | i.r2) & 1) { fault("double op on odd register pair"); return; }
        Cipher::Plain ah = read_data(i.r1, &bad), al = read_data(i.r1 + 1, &bad);
        Cipher::Plain bh = read_data(i.r2, &bad), bl = read_data(i.r2 + 1, &bad);
        Cipher::Plain k[6];
        for (unsigned s = 0; s < 6; s++) k[s] = read_const(i, s, &bad);
        if (bad) {
          write_pair(i.r0, cipher_.garbage(st_.pc, 3), cipher_.garbage(st_.pc, 4), i);
          break;
        }
        double x = fp64_decode(w.sub(ah.value, k[2].value), w.sub(al.value, k[3].value));
        double y = fp64_decode(w.sub(bh.value, k[4].value), w.sub(bl.value, k[5].value));
        double r;
        switch (i.op) {
          case Op::Addd: r = x + y; break;
          case Op::Subd: r = x - y; break;
          case Op::Muld: r = x * y; break;
          default: r = x / y; break;
        }
        write_pair(i.r0, cipher_.lift_det(w.add(fp64_encode_hi(r), k[0].value), k[0].padding, u64(i.op)),
                   cipher_.lift_det(w.add(fp64_encode_lo(r), k[1].value), k[1].padding, u64(i.op) + 0x100), i);
        break;
      }

      case Op::Mtspr: {
        Ciphertext addr = read_reg_block(i.r0);
        tlb_.invalidate(addr);
        if (opt_.trace_enabled) {
          TraceEvent e{TraceEvent::Kind::Invalidate, u32(st_.pc), i.op, 0, {}};
          e.has_addr = true;
          e.eff = addr;
          result_.trace.events.push_back(e);
        }
        break;
      }

      default:
        fault("unimplemented opcode");
        return;
    }

    if (!st_.halted) st_.pc = next_pc;
  }

  void write_pair(unsigned r, Ciphertext hi, Ciphertext lo, const Instruction& i) {
    st_.regs[r] = hi;
    st_.regs[r + 1] = lo;
    reg_written_[r] = reg_written_[r + 1] = true;
    if (opt_.trace_enabled) {
      TraceEvent e{TraceEvent::Kind::RegPair, u32(st_.pc), i.op, r, hi};
      e.block2 = lo;
      result_.trace.events.push_back(e);
    }
  }

  const Program& prog_;
  Cipher cipher_;
  Width w_;
  VmOptions opt_;
  Tlb tlb_;
  std::vector<Cell> mem_;
  MachineState st_;
  RunResult result_;
  const InputMap* inputs_ = nullptr;
  std::array<bool, kNumRegs> reg_written_{};
  std::array<bool, kNumRegs> reg_read_{};
  bool failed_ = false;
};

// Pure single-instruction transition for tests: runs `i` against a copy of
// the state and returns the successor state.
inline MachineState step_semantics(const Instruction& i, const MachineState& s, Key key,
                                   Width w, bool strict = false) {
  Program p;
  p.width = w;
  p.code = {i};
  p.entry = 0;
  Vm vm(p, key, VmOptions{strict, 1 << 20, false});
  InputMap inputs;
  for (unsigned r = 0; r < kNumRegs; r++) inputs.regs[r] = s.regs[r];
  RunResult rr = vm.run(inputs, 1);
  if (strict && rr.status == RunStatus::Fault) throw RuntimeFault(rr.fault);
  return rr.state;
}

}  // namespace fxa
