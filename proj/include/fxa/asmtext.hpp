#pragma once

// Textual assembly and the line-oriented object format share one grammar.
//
//   fxaasm 1 w=16 entry=0
//   loop:
//     addi t0 a0 #-86921031      ; plaintext constant, nonce drawn
//     add  t0 t1 t2 #5|1033      ; explicit value|padding pair
//     sub  t1 t1 t1 $91ff03a2    ; raw ciphertext block (object form)
//     beq  t0 t1 2 #240236822    ; displacement is a plain index delta
//     bne  t0 t1 loop #0
//     sw   #-12(t1) t0
//     lw   t0 #-12(t1)
//     mull t0 t2 t4 #81985529216486895 #0 #0
//     mtspr UDTLBEIR t0
//     jr   ra
//
// Comments run from ';' to end of line. Branch targets may be labels or
// signed index deltas (target = pc + 1 + delta); j/jal take absolute
// indices or labels.

#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fxa/isa.hpp"

namespace fxa {

namespace detail {

inline std::vector<std::string> tokens_of(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ';') break;
    if (c == ' ' || c == '\t' || c == '\r' || c == ',') {
      if (!cur.empty()) out.push_back(cur), cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

inline bool parse_int(const std::string& s, i64* out) {
  if (s.empty()) return false;
  size_t i = 0;
  bool neg = false;
  if (s[0] == '-' || s[0] == '+') neg = s[0] == '-', i = 1;
  if (i >= s.size()) return false;
  u64 v = 0;
  if (s.size() > i + 2 && s[i] == '0' && (s[i + 1] == 'x' || s[i + 1] == 'X')) {
    try { v = parse_hex(s.substr(i + 2)); } catch (...) { return false; }
  } else {
    for (; i < s.size(); i++) {
      if (s[i] < '0' || s[i] > '9') return false;
      v = v * 10 + u64(s[i] - '0');
    }
  }
  *out = neg ? -i64(v) : i64(v);
  return true;
}

}  // namespace detail

class Assembler {
 public:
  Assembler(Key key, Width w, u64 seed = 0)
      : cipher_(key, w), w_(w), rng_(mix64(seed) ^ 0xa55e3b1e) {}

  Program assemble(const std::string& text) {
    std::vector<Line> lines = first_pass(text);
    Program p;
    p.width = w_;
    p.entry = entry_;
    p.symbols = labels_;
    for (Line& ln : lines) p.code.push_back(encode(ln));
    for (const Instruction& ins : p.code) {
      if (is_branch(ins.op)) {
        i64 tgt = i64(&ins - p.code.data()) + 1 + ins.disp;
        if (tgt < 0 || tgt > i64(p.size()))
          throw FormatError("branch target out of range at instruction " +
                            std::to_string(&ins - p.code.data()));
      } else if (ins.op == Op::J || ins.op == Op::Jal) {
        if (ins.disp < 0 || ins.disp > int(p.size()))
          throw FormatError("jump target out of range");
      }
    }
    return p;
  }

 private:
  struct ConstTok {
    enum Kind { Plain, WithPad, RawBlock } kind;
    i64 value = 0;
    i64 pad = 0;
    u64 block = 0;
  };

  struct Line {
    Op op;
    std::vector<std::string> regs;
    std::string disp_tok;
    std::vector<ConstTok> consts;
    unsigned index;
  };

  std::vector<Line> first_pass(const std::string& text) {
    std::vector<Line> out;
    std::istringstream in(text);
    std::string raw;
    bool saw_header = false;
    unsigned index = 0;
    while (std::getline(in, raw)) {
      std::vector<std::string> tok = detail::tokens_of(raw);
      if (tok.empty()) continue;
      if (!saw_header && (tok[0] == "fxaasm" || tok[0] == "fxaobj")) {
        saw_header = true;
        parse_header(tok);
        continue;
      }
      if (tok[0].back() == ':') {
        std::string name = tok[0].substr(0, tok[0].size() - 1);
        if (labels_.count(name)) throw FormatError("duplicate label " + name);
        labels_[name] = index;
        tok.erase(tok.begin());
        if (tok.empty()) continue;
      }
      out.push_back(parse_line(tok, index));
      index++;
    }
    if (!saw_header) throw FormatError("missing 'fxaasm'/'fxaobj' header line");
    return out;
  }

  void parse_header(const std::vector<std::string>& tok) {
    bool width_seen = false;
    for (size_t i = 1; i < tok.size(); i++) {
      const std::string& t = tok[i];
      if (t.rfind("w=", 0) == 0) {
        i64 v;
        if (!detail::parse_int(t.substr(2), &v) || unsigned(v) != w_.bits)
          throw FormatError("file width " + t.substr(2) + " does not match configured width " +
                            std::to_string(w_.bits));
        width_seen = true;
      } else if (t.rfind("entry=", 0) == 0) {
        i64 v;
        if (!detail::parse_int(t.substr(6), &v)) throw FormatError("bad entry field");
        entry_ = unsigned(v);
      } else if (t == "1") {
        // format version
      } else if (t.rfind("fp=", 0) == 0) {
        // informational fingerprint, not validated on input
      } else {
        throw FormatError("unknown header field: " + t);
      }
    }
    if (!width_seen) throw FormatError("header missing w= field");
  }

  Line parse_line(std::vector<std::string> tok, unsigned index) {
    Line ln;
    ln.index = index;
    int opid = -1;
    for (unsigned o = 0; o < kNumOps; o++)
      if (tok[0] == op_info(Op(o)).name) { opid = int(o); break; }
    if (opid < 0) throw FormatError("unknown mnemonic: " + tok[0]);
    ln.op = Op(opid);
    tok.erase(tok.begin());

    if (ln.op == Op::Mtspr) {
      if (tok.size() != 2 || tok[0] != "UDTLBEIR")
        throw FormatError("mtspr expects: mtspr UDTLBEIR <reg>");
      ln.regs.push_back(tok[1]);
      return ln;
    }

    if (ln.op == Op::Sw || ln.op == Op::Lw) {
      // sw #k(base) src   |   lw dest #k(base)
      std::string addr = (ln.op == Op::Sw) ? tok.at(0) : tok.at(1);
      size_t open = addr.find('(');
      if (open == std::string::npos || addr.back() != ')')
        throw FormatError("memory operand must be const(reg): " + addr);
      ln.consts.push_back(parse_const(addr.substr(0, open)));
      ln.regs.push_back(addr.substr(open + 1, addr.size() - open - 2));  // base
      if (ln.op == Op::Sw) {
        ln.regs.push_back(tok.at(1));  // source
      } else {
        ln.regs.insert(ln.regs.begin(), tok.at(0));  // dest first
      }
      if (tok.size() != 2) throw FormatError("bad operand count for memory op");
      return ln;
    }

    const OpInfo& info = op_info(ln.op);
    size_t t = 0;
    // Register fields. Branches list r1 r2 before the displacement.
    unsigned nregs = info.num_regs;
    for (unsigned r = 0; r < nregs; r++) {
      if (t >= tok.size()) throw FormatError(std::string("missing register for ") + info.name);
      ln.regs.push_back(tok[t++]);
    }
    if (info.has_disp) {
      if (t >= tok.size()) throw FormatError(std::string("missing target for ") + info.name);
      ln.disp_tok = tok[t++];
    }
    while (t < tok.size()) ln.consts.push_back(parse_const(tok[t++]));
    return ln;
  }

  ConstTok parse_const(const std::string& s) {
    ConstTok c;
    if (s.empty()) throw FormatError("empty constant");
    if (s[0] == '$') {
      c.kind = ConstTok::RawBlock;
      c.block = parse_hex(s.substr(1));
      return c;
    }
    if (s[0] != '#') throw FormatError("constant must start with # or $: " + s);
    std::string body = s.substr(1);
    size_t bar = body.find('|');
    if (bar == std::string::npos) {
      c.kind = ConstTok::Plain;
      if (!detail::parse_int(body, &c.value)) throw FormatError("bad constant: " + s);
    } else {
      c.kind = ConstTok::WithPad;
      if (!detail::parse_int(body.substr(0, bar), &c.value) ||
          !detail::parse_int(body.substr(bar + 1), &c.pad))
        throw FormatError("bad value|padding constant: " + s);
    }
    return c;
  }

  unsigned parse_reg(const std::string& s) {
    int r = reg_by_name(s);
    if (r < 0) throw FormatError("bad register name: " + s);
    return unsigned(r);
  }

  Ciphertext seal(Op op, unsigned slot, const ConstTok& c, bool low_half_value, bool pair_half) {
    switch (c.kind) {
      case ConstTok::RawBlock:
        return Ciphertext{c.block & w_.block_mask()};
      case ConstTok::WithPad: {
        u64 v = u64(c.value) & w_.mask();
        return cipher_.encrypt(v, cipher_.unpack_padding(u64(c.pad) & w_.mask()));
      }
      case ConstTok::Plain: {
        u64 full = u64(c.value) & (pair_half ? w_.block_mask() : w_.mask());
        u64 v = pair_half ? (low_half_value ? long_join_lo(w_, full) : long_join_hi(w_, full))
                          : full;
        return cipher_.encrypt(v, Padding{const_tag(op, slot), rng_.bits(cipher_.nonce_bits())});
      }
    }
    throw FormatError("unreachable");
  }

  Instruction encode(Line& ln) {
    Instruction ins;
    ins.op = ln.op;
    const OpInfo& info = op_info(ln.op);
    if (!ln.regs.empty()) ins.r0 = parse_reg(ln.regs[0]);
    if (ln.regs.size() > 1) ins.r1 = parse_reg(ln.regs[1]);
    if (ln.regs.size() > 2) ins.r2 = parse_reg(ln.regs[2]);
    if (is_branch(ln.op)) {
      // stored as r1, r2 operands
      ins.r1 = parse_reg(ln.regs[0]);
      ins.r2 = parse_reg(ln.regs[1]);
      ins.r0 = 0;
    }
    if (ln.op == Op::Sw) {
      ins.r1 = parse_reg(ln.regs[0]);
      ins.r2 = parse_reg(ln.regs[1]);
      ins.r0 = 0;
    } else if (ln.op == Op::Lw) {
      ins.r0 = parse_reg(ln.regs[0]);
      ins.r1 = parse_reg(ln.regs[1]);
    }
    if (is_pair_op(ln.op) && ((ins.r0 | ins.r1 | ins.r2) & 1))
      throw FormatError("pair operation registers must be even-numbered");

    if (info.has_disp) {
      i64 v;
      if (detail::parse_int(ln.disp_tok, &v)) {
        ins.disp = int(v);
      } else {
        auto it = labels_.find(ln.disp_tok);
        if (it == labels_.end()) throw FormatError("unresolved label: " + ln.disp_tok);
        ins.disp = (ln.op == Op::J || ln.op == Op::Jal)
                       ? int(it->second)
                       : int(it->second) - int(ln.index) - 1;
      }
    }

    unsigned want = info.num_consts;
    if (is_pair_op(ln.op)) {
      // Either one token per logical 2w-bit constant or one per half block.
      if (ln.consts.size() == want / 2) {
        for (unsigned lc = 0; lc < want / 2; lc++) {
          ins.consts.push_back(seal(ln.op, 2 * lc, ln.consts[lc], false, true));
          ins.consts.push_back(seal(ln.op, 2 * lc + 1, ln.consts[lc], true, true));
        }
        return ins;
      }
    }
    if (ln.consts.size() != want)
      throw FormatError(std::string(info.name) + " expects " + std::to_string(want) +
                        " constants, got " + std::to_string(ln.consts.size()));
    for (unsigned s = 0; s < want; s++)
      ins.consts.push_back(seal(ln.op, s, ln.consts[s], false, false));
    return ins;
  }

  Cipher cipher_;
  Width w_;
  Rng rng_;
  std::map<std::string, unsigned> labels_;
  unsigned entry_ = 0;
};

inline Program assemble(const std::string& text, Key key, Width w, u64 seed = 0) {
  return Assembler(key, w, seed).assemble(text);
}

// With a key, constants print as value|padding; without, as raw blocks.
inline std::string disassemble(const Program& p, std::optional<Key> key = std::nullopt) {
  std::optional<Cipher> c;
  if (key) c.emplace(*key, p.width);
  std::ostringstream out;
  out << "fxaobj 1 w=" << p.width.bits << " entry=" << p.entry
      << " fp=" << to_hex(p.fingerprint()) << "\n";
  for (unsigned idx = 0; idx < p.size(); idx++) {
    const Instruction& i = p.code[idx];
    const OpInfo& info = op_info(i.op);
    auto ct = [&](unsigned slot) -> std::string {
      if (!c) return "$" + to_hex(i.k(slot).block);
      Cipher::Plain pl = c->decrypt(i.k(slot));
      return "#" + std::to_string(p.width.to_signed(pl.value)) + "|" +
             std::to_string(p.width.to_signed(c->pack_padding(pl.padding)));
    };
    out << "  " << info.name;
    if (i.op == Op::Mtspr) {
      out << " UDTLBEIR " << reg_name(i.r0);
    } else if (i.op == Op::Sw) {
      out << " " << ct(0) << "(" << reg_name(i.r1) << ") " << reg_name(i.r2);
    } else if (i.op == Op::Lw) {
      out << " " << reg_name(i.r0) << " " << ct(0) << "(" << reg_name(i.r1) << ")";
    } else {
      if (is_branch(i.op)) {
        out << " " << reg_name(i.r1) << " " << reg_name(i.r2) << " " << i.disp;
      } else {
        if (info.num_regs > 0) out << " " << reg_name(i.r0);
        if (info.num_regs > 1) out << " " << reg_name(i.r1);
        if (info.num_regs > 2) out << " " << reg_name(i.r2);
        if (info.has_disp) out << " " << i.disp;
      }
      for (unsigned s = 0; s < i.consts.size(); s++) out << " " << ct(s);
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace fxa
