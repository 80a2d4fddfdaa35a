#pragma once

// The randomizing compiler. Every recompilation draws a fresh obfuscation
// scheme: a delta from nominal for each register and frame slot at each
// program point, implemented by varying the encrypted constants folded
// into every arithmetic instruction. Across seeds the emitted code is
// structurally identical; only constants (and branch negation-class
// spellings, compensated by the diddle bit) differ.
//
// Conventions:
//   - sp enters a function at a drawn delta and keeps one body delta for
//     the whole activation, so the per-slot address constants stay valid;
//   - every named variable lives in frame slots behind the stack pointer;
//     a data write draws a fresh address alias and releases the defunct
//     TLB mapping (read, release, write order);
//   - array and pointer accesses compile to guard chains touching every
//     entry of the declared range;
//   - at every control-flow join each location written on a joining path
//     is retargeted to a common delta by trailer adds, one per path.

#include <map>
#include <set>

#include "fxa/lang.hpp"
#include "fxa/scheme.hpp"

namespace fxa {

struct CompilerOptions {
  bool zero_v0_delta = false;
  // Test hook: fixes every drawn delta (negative control for uniformity).
  std::optional<u64> fixed_delta;
};

class Compiler {
 public:
  Compiler(const SourceProgram& src, Key key, Width w, u64 seed, CompilerOptions opt = {})
      : src_(src), key_(key), w_(w), cipher_(key, w), rng_(mix64(seed ^ 0xc0371e2)),
        seed_(seed), opt_(opt) {}

  CompilationOutput compile() {
    out_ = CompilationOutput{};
    out_.program.width = w_;
    out_.seed = seed_;
    out_.source_hash = src_.source_hash;
    out_.entry_name = src_.entry;
    draws_ = 0;

    zer_delta_ = fresh();
    for (auto& f : src_.funcs) draw_signature(*f);
    for (auto& f : src_.funcs) compile_function(*f);
    for (auto& [fn, sites] : call_sites_)
      for (u32 s : sites) out_.program.code[s].disp = int(sigs_[fn].entry_index);

    const FuncDef& entry = src_.entry_func();
    const Sig& es = sigs_[&entry];
    out_.program.entry = es.entry_index;
    for (auto& f : src_.funcs) out_.program.symbols[f->name] = sigs_[f.get()].entry_index;

    out_.inputs.push_back(InputSpec{kZer, zer_delta_.delta, 0, false, false, zer_delta_.id});
    out_.inputs.push_back(InputSpec{kSp, es.sp_in.delta, 0, false, false, es.sp_in.id});
    out_.inputs.push_back(InputSpec{kRa, 0, 0, false, true, kPinnedDraw});
    unsigned word = 0;
    for (u32 p : entry.params) {
      const VarInfo& v = entry.vars[p];
      InputSpec in;
      in.reg = kA0 + word;
      in.pair = v.type.is_long();
      in.delta = es.args[word].delta;
      in.draw = es.args[word].id;
      if (in.pair) {
        in.delta_lo = es.args[word + 1].delta;
        in.draw_lo = es.args[word + 1].id;
      }
      out_.params.push_back(ParamInfo{v.name, v.type.is_long()});
      out_.inputs.push_back(in);
      word += v.type.size_slots();
    }
    out_.output = OutputSpec{kV0, es.v0.delta, es.v0_lo.delta, entry.ret.is_long()};
    out_.num_draws = draws_;
    return std::move(out_);
  }

 private:
  static constexpr unsigned kScratch = 22;  // reserved for release sequences

  struct Draw {
    u64 delta = 0;
    u64 id = kPinnedDraw;
  };

  Draw fresh() {
    u64 d = opt_.fixed_delta ? *opt_.fixed_delta : rng_.word(w_);
    return Draw{d, ++draws_};
  }

  struct Sig {
    Draw sp_in, sp_fn, sp_out;
    struct ArgSlot {
      u64 delta;
      u64 id;
    };
    std::vector<ArgSlot> args;
    Draw v0, v0_lo;
    u32 entry_index = 0;
  };

  void draw_signature(const FuncDef& f) {
    Sig s;
    s.sp_in = fresh();
    s.sp_fn = fresh();
    s.sp_out = fresh();
    for (u32 wds = 0; wds < f.param_words; wds++) {
      Draw d = fresh();
      s.args.push_back(Sig::ArgSlot{d.delta, d.id});
    }
    s.v0 = fresh();
    s.v0_lo = f.ret.is_long() ? fresh() : Draw{};
    if (opt_.zero_v0_delta && f.name == src_.entry) {
      s.v0.delta = 0;
      s.v0_lo.delta = 0;
    }
    sigs_[&f] = s;
  }

  // ---- low-level emission ----

  u64 nonce() { return rng_.bits(cipher_.nonce_bits()); }

  Ciphertext konst(Op op, unsigned slot, u64 value) {
    return cipher_.encrypt(value & w_.mask(), Padding{const_tag(op, slot), nonce()});
  }

  u32 emit(Instruction ins, InstrMeta m) {
    u32 idx = u32(out_.program.code.size());
    out_.program.code.push_back(std::move(ins));
    out_.meta.push_back(m);
    out_.scheme.post.emplace_back(deltas_.begin(), deltas_.end());
    return idx;
  }

  u64 delta_of(Loc l) const {
    auto it = deltas_.find(l.key());
    if (it == deltas_.end()) throw CompileError("internal: no delta for " + l.str());
    return it->second;
  }
  void set_delta(Loc l, u64 d) { deltas_[l.key()] = d; }

  u32 emit_addi(unsigned dst, unsigned src, u64 kval, u64 new_delta, u64 draw_id,
                i64 trailer = -1, bool pinned = false) {
    Instruction ins;
    ins.op = Op::Addi;
    ins.r0 = dst;
    ins.r1 = src;
    ins.consts.push_back(konst(Op::Addi, 0, kval));
    InstrMeta m;
    m.kind = InstrMeta::Kind::ArithWrite;
    m.target = Loc::reg(dst);
    m.draw = draw_id;
    m.trailer_group = trailer;
    m.pinned = pinned;
    set_delta(Loc::reg(dst), new_delta);
    return emit(std::move(ins), m);
  }

  // dst <- src [+] E[target.delta - delta(src)]
  u32 retarget(unsigned dst, unsigned src, Draw target, i64 trailer = -1) {
    u64 k = w_.sub(target.delta, delta_of(Loc::reg(src)));
    return emit_addi(dst, src, k, target.delta, target.id, trailer);
  }

  // dst <- zer [+] E[value + target.delta - zer_delta]
  u32 load_literal(unsigned dst, u64 value, Draw target, i64 trailer = -1) {
    u64 k = w_.sub(w_.add(value, target.delta), zer_delta_.delta);
    return emit_addi(dst, kZer, k, target.delta, target.id, trailer);
  }

  // dst <- a +/- b [+] k (one folded constant)
  u32 emit_add3(Op op, unsigned dst, unsigned a, unsigned b, Draw target) {
    u64 da = delta_of(Loc::reg(a)), db = delta_of(Loc::reg(b));
    u64 k = (op == Op::Add) ? w_.sub(w_.sub(target.delta, da), db)
                            : w_.add(w_.sub(target.delta, da), db);
    Instruction ins;
    ins.op = op;
    ins.r0 = dst;
    ins.r1 = a;
    ins.r2 = b;
    ins.consts.push_back(konst(op, 0, k));
    InstrMeta m;
    m.kind = InstrMeta::Kind::ArithWrite;
    m.target = Loc::reg(dst);
    m.draw = target.id;
    set_delta(Loc::reg(dst), target.delta);
    return emit(std::move(ins), m);
  }

  // add with the second operand being sp (address formation):
  // dst <- a [+] sp [+] E[k]
  u32 emit_add_sp(unsigned dst, unsigned a, u64 base_plus_delta, Draw target) {
    u64 k = w_.sub(w_.sub(base_plus_delta, delta_of(Loc::reg(a))), cur_sig_->sp_fn.delta);
    Instruction ins;
    ins.op = Op::Add;
    ins.r0 = dst;
    ins.r1 = a;
    ins.r2 = kSp;
    ins.consts.push_back(konst(Op::Add, 0, k));
    InstrMeta m;
    m.kind = InstrMeta::Kind::ArithWrite;
    m.target = Loc::reg(dst);
    m.draw = target.id;
    set_delta(Loc::reg(dst), target.delta);
    return emit(std::move(ins), m);
  }

  // dst <- (a [-] k1) op (b [-] k2) [+] k0
  u32 emit_strip3(Op op, unsigned dst, unsigned a, unsigned b, Draw target) {
    Instruction ins;
    ins.op = op;
    ins.r0 = dst;
    ins.r1 = a;
    ins.r2 = b;
    ins.consts.push_back(konst(op, 0, target.delta));
    ins.consts.push_back(konst(op, 1, delta_of(Loc::reg(a))));
    ins.consts.push_back(konst(op, 2, delta_of(Loc::reg(b))));
    InstrMeta m;
    m.kind = InstrMeta::Kind::ArithWrite;
    m.target = Loc::reg(dst);
    m.draw = target.id;
    set_delta(Loc::reg(dst), target.delta);
    return emit(std::move(ins), m);
  }

  u32 emit_long3(Op op, unsigned dst, unsigned a, unsigned b, Draw hi, Draw lo) {
    Instruction ins;
    ins.op = op;
    ins.r0 = dst;
    ins.r1 = a;
    ins.r2 = b;
    ins.consts.push_back(konst(op, 0, hi.delta));
    ins.consts.push_back(konst(op, 1, lo.delta));
    ins.consts.push_back(konst(op, 2, delta_of(Loc::reg(a))));
    ins.consts.push_back(konst(op, 3, delta_of(Loc::reg(a + 1))));
    ins.consts.push_back(konst(op, 4, delta_of(Loc::reg(b))));
    ins.consts.push_back(konst(op, 5, delta_of(Loc::reg(b + 1))));
    InstrMeta m;
    m.kind = InstrMeta::Kind::ArithWrite;
    m.target = Loc::reg(dst);
    m.pair = true;
    m.draw = hi.id;
    m.draw_lo = lo.id;
    set_delta(Loc::reg(dst), hi.delta);
    set_delta(Loc::reg(dst + 1), lo.delta);
    return emit(std::move(ins), m);
  }

  u32 emit_mov(unsigned dst, unsigned src) {
    Instruction ins;
    ins.op = Op::Mov;
    ins.r0 = dst;
    ins.r1 = src;
    InstrMeta m;
    m.kind = InstrMeta::Kind::Copy;
    m.target = Loc::reg(dst);
    m.copy_src_reg = src;
    set_delta(Loc::reg(dst), delta_of(Loc::reg(src)));
    return emit(std::move(ins), m);
  }

  // ---- frame slots and aliasing ----

  struct SlotState {
    Ciphertext cur{};
    u64 alias_id = 0;
    bool mapped = false;
  };

  // Alias constants encode (slot - sp_delta): sp [+] k is the slot's
  // nominal absolute address.
  Ciphertext draw_alias(u32 slot, const Ciphertext* avoid) {
    u64 value = w_.sub(slot, cur_sig_->sp_fn.delta);
    for (int tries = 0; tries < 64; tries++) {
      Ciphertext c = cipher_.encrypt(value, Padding{mem_disp_tag(), nonce()});
      if (!avoid || !(c == *avoid)) return c;
    }
    throw CompileError("internal: alias nonce space exhausted");
  }

  SlotState& slot_state(u32 slot) {
    auto it = slots_.find(slot);
    if (it == slots_.end()) {
      SlotState st;
      st.cur = draw_alias(slot, nullptr);
      st.alias_id = ++alias_ids_;
      it = slots_.emplace(slot, st).first;
    }
    return it->second;
  }

  u32 emit_slot_read(unsigned dst, u32 slot) {
    SlotState& st = slot_state(slot);
    Instruction ins;
    ins.op = Op::Lw;
    ins.r0 = dst;
    ins.r1 = kSp;
    ins.consts.push_back(st.cur);
    InstrMeta m;
    m.kind = InstrMeta::Kind::Copy;
    m.target = Loc::reg(dst);
    m.pinned = pinned_slots_.count(slot) != 0;
    set_delta(Loc::reg(dst), delta_of(Loc::slot(slot)));
    return emit(std::move(ins), m);
  }

  // addi scratch sp k; mtspr UDTLBEIR scratch — reproduces the effective
  // address block and drops its mapping.
  void emit_release(Ciphertext alias_const) {
    Instruction a;
    a.op = Op::Addi;
    a.r0 = kScratch;
    a.r1 = kSp;
    a.consts.push_back(alias_const);
    InstrMeta ma;
    ma.kind = InstrMeta::Kind::ArithWrite;
    ma.target = Loc::reg(kScratch);
    ma.pinned = true;  // holds a nominal address, never sampled as data
    set_delta(Loc::reg(kScratch), 0);
    emit(std::move(a), ma);
    Instruction mt;
    mt.op = Op::Mtspr;
    mt.r0 = kScratch;
    emit(std::move(mt), InstrMeta{});
  }

  // Store src into the slot. An alias identity change releases the old
  // mapping first (read happens before any release at call sites, so a
  // block-colliding fresh nonce stays harmless).
  void emit_slot_write(u32 slot, unsigned src, const std::optional<Ciphertext>& new_alias,
                       u64 new_alias_id) {
    SlotState& st = slot_state(slot);
    if (new_alias && new_alias_id != st.alias_id) {
      if (st.mapped) emit_release(st.cur);
      st.cur = *new_alias;
      st.alias_id = new_alias_id;
    }
    Instruction ins;
    ins.op = Op::Sw;
    ins.r1 = kSp;
    ins.r2 = src;
    ins.consts.push_back(st.cur);
    InstrMeta m;
    m.kind = InstrMeta::Kind::Copy;
    m.target = Loc::slot(slot);
    m.copy_src_reg = src;
    m.pinned = pinned_slots_.count(slot) != 0;
    st.mapped = true;
    set_delta(Loc::slot(slot), delta_of(Loc::reg(src)));
    emit(std::move(ins), m);
  }

  // Ordinary data write: a fresh alias each time after the first.
  void slot_write_fresh(u32 slot, unsigned src) {
    SlotState& st = slot_state(slot);
    if (!st.mapped) {
      emit_slot_write(slot, src, st.cur, st.alias_id);
      return;
    }
    Ciphertext next = draw_alias(slot, &st.cur);
    emit_slot_write(slot, src, next, ++alias_ids_);
  }

  // ---- labels and branches ----

  u32 new_label() {
    labels_.push_back(~0u);
    return u32(labels_.size() - 1);
  }
  void bind(u32 label) { labels_[label] = u32(out_.program.code.size()); }

  static Op rel_op(const std::string& rel) {
    if (rel == "==") return Op::Beq;
    if (rel == "!=") return Op::Bne;
    if (rel == "<") return Op::Blt;
    if (rel == ">") return Op::Bgt;
    if (rel == "<=") return Op::Ble;
    if (rel == ">=") return Op::Bge;
    throw CompileError("bad relation " + rel);
  }

  // Branch to `label` iff (plain(a) REL plain(b)) == jump_if. The mnemonic
  // is drawn equiprobably from the negation pair, the diddle bit (lowest
  // nonce bit of the constant) compensating.
  void emit_branch(const std::string& rel, bool jump_if, unsigned a, unsigned b, u32 label) {
    Op base = rel_op(rel);
    if (!jump_if) base = negate_branch(base);
    bool liar = rng_.coin();
    Op op = liar ? negate_branch(base) : base;
    u64 k = w_.sub(delta_of(Loc::reg(a)), delta_of(Loc::reg(b)));
    u64 n = (nonce() & ~1ull) | u64(liar);
    Instruction ins;
    ins.op = op;
    ins.r1 = a;
    ins.r2 = b;
    ins.consts.push_back(cipher_.encrypt(k & w_.mask(), Padding{const_tag(op, 0), n}));
    InstrMeta m;
    m.kind = InstrMeta::Kind::Branch;
    u32 idx = emit(std::move(ins), m);
    patches_.push_back({idx, label});
  }

  void emit_b(u32 label) {
    Instruction ins;
    ins.op = Op::B;
    u32 idx = emit(std::move(ins), InstrMeta{});
    patches_.push_back({idx, label});
  }

  void resolve_patches() {
    for (auto& [idx, label] : patches_) {
      if (labels_[label] == ~0u) throw CompileError("internal: unbound label");
      out_.program.code[idx].disp = int(labels_[label]) - int(idx) - 1;
    }
    patches_.clear();
  }

  // ---- temporaries: five pairs t0..t9, longs use (even, even+1) ----

  struct Val {
    unsigned reg;
    TypeRef type;
  };

  unsigned alloc_pair(bool is_long = false) {
    if (depth_ >= 5) throw CompileError("expression too deep for the register budget");
    temp_long_[depth_] = is_long;
    return kT0 + 2 * depth_++;
  }
  void free_pair() { depth_--; }
  void mark_temp_long(unsigned reg, bool lng) {
    if (reg >= kT0 && reg < kT0 + 10) temp_long_[(reg - kT0) / 2] = lng;
  }

  // ---- joins and trailers ----

  struct JoinEntry {
    Draw target;
    Ciphertext alias{};
    u64 alias_id = 0;
  };

  struct JoinPlan {
    std::map<u32, JoinEntry> slots;
  };

  void scan_written(const Stmt& s, const FuncDef& f, std::set<u32>& out) {
    switch (s.k) {
      case St::Assign:
        scan_lvalue(*s.lhs, f, out);
        return;
      case St::Decl: {
        const VarInfo& v = f.vars[s.var];
        for (u32 k = 0; k < v.type.size_slots(); k++) out.insert(v.slot + k);
        return;
      }
      case St::If:
        for (auto& c : s.body) scan_written(*c, f, out);
        for (auto& c : s.els) scan_written(*c, f, out);
        return;
      case St::While:
        for (auto& c : s.body) scan_written(*c, f, out);
        return;
      case St::For:
        if (s.init) scan_written(*s.init, f, out);
        if (s.inc) scan_written(*s.inc, f, out);
        for (auto& c : s.body) scan_written(*c, f, out);
        return;
      case St::Block:
      case St::Label:
        for (auto& c : s.body) scan_written(*c, f, out);
        return;
      default:
        return;
    }
  }

  void scan_lvalue(const Expr& e, const FuncDef& f, std::set<u32>& out) {
    AccessPlan p = resolve_access(e, f);
    if (p.chain) {
      for (u32 k = 0; k < p.count; k++)
        for (u32 wd = 0; wd < p.word_count; wd++)
          out.insert(p.base_slot + k * p.stride + p.field_off + wd);
    } else {
      for (u32 wd = 0; wd < p.word_count; wd++) out.insert(p.static_slot + wd);
    }
  }

  JoinPlan make_join(const std::set<u32>& written, bool fresh_aliases) {
    JoinPlan plan;
    for (u32 slot : written) {
      SlotState& st = slot_state(slot);
      JoinEntry je;
      je.target = fresh();
      if (fresh_aliases) {
        je.alias = draw_alias(slot, &st.cur);
        je.alias_id = ++alias_ids_;
      } else {
        je.alias = st.cur;
        je.alias_id = st.alias_id;
      }
      plan.slots[slot] = je;
    }
    return plan;
  }

  // One trailer add per slot per path brings the path to the join state.
  void apply_join(const JoinPlan& plan) {
    if (plan.slots.empty()) return;
    unsigned t = alloc_pair();
    for (auto& [slot, je] : plan.slots) {
      emit_slot_read(t, slot);
      retarget(t, t, je.target, i64(je.target.id));
      emit_slot_write(slot, t, je.alias, je.alias_id);
    }
    free_pair();
  }

  void land_join(const JoinPlan& plan) {
    for (auto& [slot, je] : plan.slots) {
      SlotState& st = slot_state(slot);
      st.cur = je.alias;
      st.alias_id = je.alias_id;
      st.mapped = true;
      set_delta(Loc::slot(slot), je.target.delta);
    }
  }

  // ---- access plans ----

  struct AccessPlan {
    bool chain = false;
    u32 static_slot = 0;
    u32 base_slot = 0;
    u32 count = 0;
    u32 stride = 1;
    u32 field_off = 0;
    const Expr* index = nullptr;
    const Expr* pointer = nullptr;
    u32 word_count = 1;
    TypeRef type;
  };

  AccessPlan resolve_access(const Expr& e, const FuncDef& f) {
    AccessPlan p;
    p.type = e.type;
    p.word_count = e.type.is_long() ? 2 : 1;
    switch (e.k) {
      case Ex::Var:
        p.static_slot = f.vars[e.var].slot;
        return p;
      case Ex::Member: {
        const Expr& base = *e.kids[0];
        const StructField* fld = base.type.sd->field(e.op);
        AccessPlan bp = resolve_access(base, f);
        bp.type = e.type;
        bp.word_count = p.word_count;
        if (bp.chain) {
          bp.field_off += fld->offset;
        } else {
          bp.static_slot += fld->offset;
        }
        return bp;
      }
      case Ex::Index: {
        const Expr& arr = *e.kids[0];
        AccessPlan bp = resolve_access(arr, f);
        if (bp.chain) throw CompileError("nested dynamic indexing is not supported");
        p.chain = true;
        p.base_slot = bp.static_slot;
        p.count = arr.type.count;
        p.stride = arr.type.elem->size_slots();
        p.index = e.kids[1].get();
        return p;
      }
      case Ex::Deref: {
        const Expr& ptr = *e.kids[0];
        const VarInfo& rv = f.vars[ptr.type.range_var];
        p.chain = true;
        p.base_slot = rv.slot;
        if (rv.type.k == TypeRef::K::Array) {
          p.count = rv.type.count;
          p.stride = rv.type.elem->size_slots();
        } else {
          p.count = 1;
          p.stride = rv.type.size_slots();
        }
        p.pointer = &ptr;
        return p;
      }
      default:
        throw CompileError("not an addressable expression");
    }
  }

  // ---- expressions ----

  Val compile_expr(const Expr& e, const FuncDef& f) {
    switch (e.k) {
      case Ex::IntLit: {
        bool lng = e.type.is_long();
        unsigned r = alloc_pair(lng);
        if (lng) {
          load_literal(r, long_join_hi(w_, e.lit), fresh());
          load_literal(r + 1, long_join_lo(w_, e.lit), fresh());
        } else {
          load_literal(r, e.lit & w_.mask(), fresh());
        }
        return Val{r, e.type};
      }
      case Ex::Var: {
        const VarInfo& v = f.vars[e.var];
        if (v.type.k == TypeRef::K::Array) {  // decay to the base address
          unsigned r = alloc_pair();
          Draw d = fresh();
          u64 k = w_.sub(w_.add(v.slot, d.delta), cur_sig_->sp_fn.delta);
          emit_addi(r, kSp, k, d.delta, d.id);
          TypeRef pt;
          pt.k = TypeRef::K::Ptr;
          pt.elem = v.type.elem;
          pt.range_var = e.var;
          return Val{r, pt};
        }
        bool lng = v.type.is_long();
        unsigned r = alloc_pair(lng);
        emit_slot_read(r, v.slot);
        retarget(r, r, fresh());
        if (lng) {
          emit_slot_read(r + 1, v.slot + 1);
          retarget(r + 1, r + 1, fresh());
        }
        return Val{r, v.type};
      }
      case Ex::Member: {
        AccessPlan p = resolve_access(e, f);
        if (p.chain) return chain_read(p, f);
        bool lng = e.type.is_long();
        unsigned r = alloc_pair(lng);
        emit_slot_read(r, p.static_slot);
        retarget(r, r, fresh());
        if (lng) {
          emit_slot_read(r + 1, p.static_slot + 1);
          retarget(r + 1, r + 1, fresh());
        }
        return Val{r, e.type};
      }
      case Ex::Index:
      case Ex::Deref:
        return chain_read(resolve_access(e, f), f);
      case Ex::AddrOf: {
        const Expr& lv = *e.kids[0];
        if (lv.k == Ex::Var) {
          unsigned r = alloc_pair();
          Draw d = fresh();
          u64 k = w_.sub(w_.add(f.vars[lv.var].slot, d.delta), cur_sig_->sp_fn.delta);
          emit_addi(r, kSp, k, d.delta, d.id);
          return Val{r, e.type};
        }
        // &A[e]
        const Expr& arr = *lv.kids[0];
        u32 base = f.vars[arr.var].slot;
        u32 stride = arr.type.elem->size_slots();
        Val idx = compile_expr(*lv.kids[1], f);
        if (stride > 1) {
          Val s = compile_expr_literal(stride);
          emit_strip3(Op::Mul, idx.reg, idx.reg, s.reg, fresh());
          free_pair();
        }
        Draw d = fresh();
        emit_add_sp(idx.reg, idx.reg, w_.add(base, d.delta), d);
        return Val{idx.reg, e.type};
      }
      case Ex::Unary: {
        if (e.op == "(long)") return widen(compile_expr(*e.kids[0], f));
        if (e.op == "-") {
          if (e.type.is_long()) {
            Val zero = compile_expr_long_literal(0);
            Val v = compile_expr(*e.kids[0], f);
            emit_long3(Op::Subl, zero.reg, zero.reg, v.reg, fresh(), fresh());
            free_pair();
            return Val{zero.reg, e.type};
          }
          Val zero = compile_expr_literal(0);
          Val v = compile_expr(*e.kids[0], f);
          emit_add3(Op::Sub, zero.reg, zero.reg, v.reg, fresh());
          free_pair();
          return Val{zero.reg, e.type};
        }
        return materialize_cond(e, f);  // "!"
      }
      case Ex::Binary: {
        const std::string& op = e.op;
        if (op == "&&" || op == "||" || op == "==" || op == "!=" || op == "<" ||
            op == ">" || op == "<=" || op == ">=")
          return materialize_cond(e, f);
        if (e.kids[0]->type.is_ptr() || e.kids[1]->type.is_ptr())
          return compile_ptr_arith(e, f);
        if (e.type.is_long()) return compile_long_arith(e, f);
        Val a = compile_expr(*e.kids[0], f);
        Val b = compile_expr(*e.kids[1], f);
        if (op == "+") emit_add3(Op::Add, a.reg, a.reg, b.reg, fresh());
        else if (op == "-") emit_add3(Op::Sub, a.reg, a.reg, b.reg, fresh());
        else if (op == "*") emit_strip3(Op::Mul, a.reg, a.reg, b.reg, fresh());
        else if (op == "/") emit_strip3(Op::Div, a.reg, a.reg, b.reg, fresh());
        else if (op == "%") {
          unsigned q = alloc_pair();
          emit_strip3(Op::Div, q, a.reg, b.reg, fresh());
          emit_strip3(Op::Mul, q, q, b.reg, fresh());
          emit_add3(Op::Sub, a.reg, a.reg, q, fresh());
          free_pair();
        } else {
          throw CompileError("bad operator " + op);
        }
        free_pair();
        return Val{a.reg, e.type};
      }
      case Ex::Ternary: {
        u32 Lelse = new_label(), Lend = new_label();
        compile_cond(*e.kids[0], f, false, Lelse);
        bool lng = e.type.is_long();
        Draw common = fresh();
        Draw common_lo = lng ? fresh() : Draw{};
        SavedState pre = save_state();
        unsigned d0 = depth_;
        Val a = compile_expr(*e.kids[1], f);
        move_into(a.reg, a, common, common_lo);
        emit_b(Lend);
        while (depth_ > d0) free_pair();
        restore_state(pre);
        bind(Lelse);
        Val b = compile_expr(*e.kids[2], f);
        move_into(b.reg, b, common, common_lo);
        while (depth_ > d0 + 1) free_pair();
        bind(Lend);
        if (a.reg != b.reg) throw CompileError("internal: ternary arm register mismatch");
        set_delta(Loc::reg(a.reg), common.delta);
        if (lng) set_delta(Loc::reg(a.reg + 1), common_lo.delta);
        mark_temp_long(a.reg, lng);
        return Val{a.reg, e.type};
      }
      case Ex::Call:
        return compile_call(e, f);
    }
    throw CompileError("unreachable expression");
  }

  Val compile_expr_literal(u64 v) {
    unsigned r = alloc_pair();
    load_literal(r, v & w_.mask(), fresh());
    return Val{r, TypeRef::int_t()};
  }
  Val compile_expr_long_literal(u64 v) {
    unsigned r = alloc_pair(true);
    load_literal(r, long_join_hi(w_, v), fresh());
    load_literal(r + 1, long_join_lo(w_, v), fresh());
    return Val{r, TypeRef::long_t()};
  }

  // Sign-extend the int in r into the pair (r, r+1): the value moves to
  // the low word, an arithmetic shift by w-1 fills the high word.
  Val widen(Val v) {
    unsigned r = v.reg;
    emit_mov(r + 1, r);
    Val cnt = compile_expr_literal(w_.bits - 1);
    Draw d = fresh();
    Instruction ins;
    ins.op = Op::Sra;
    ins.r0 = r;
    ins.r1 = r + 1;
    ins.r2 = cnt.reg;
    ins.consts.push_back(konst(Op::Sra, 0, d.delta));
    ins.consts.push_back(konst(Op::Sra, 1, delta_of(Loc::reg(r + 1))));
    ins.consts.push_back(konst(Op::Sra, 2, delta_of(Loc::reg(cnt.reg))));
    InstrMeta m;
    m.kind = InstrMeta::Kind::ArithWrite;
    m.target = Loc::reg(r);
    m.draw = d.id;
    set_delta(Loc::reg(r), d.delta);
    emit(std::move(ins), m);
    free_pair();
    mark_temp_long(r, true);
    return Val{r, TypeRef::long_t()};
  }

  Val compile_long_arith(const Expr& e, const FuncDef& f) {
    Val a = compile_expr(*e.kids[0], f);
    Val b = compile_expr(*e.kids[1], f);
    const std::string& op = e.op;
    if (op == "+") emit_long3(Op::Addl, a.reg, a.reg, b.reg, fresh(), fresh());
    else if (op == "-") emit_long3(Op::Subl, a.reg, a.reg, b.reg, fresh(), fresh());
    else if (op == "*") emit_long3(Op::Mull, a.reg, a.reg, b.reg, fresh(), fresh());
    else if (op == "/") emit_long3(Op::Divl, a.reg, a.reg, b.reg, fresh(), fresh());
    else if (op == "%") {
      unsigned q = alloc_pair(true);
      emit_long3(Op::Divl, q, a.reg, b.reg, fresh(), fresh());
      emit_long3(Op::Mull, q, q, b.reg, fresh(), fresh());
      emit_long3(Op::Subl, a.reg, a.reg, q, fresh(), fresh());
      free_pair();
    } else {
      throw CompileError("bad long operator " + op);
    }
    free_pair();
    return Val{a.reg, TypeRef::long_t()};
  }

  Val compile_ptr_arith(const Expr& e, const FuncDef& f) {
    const Expr& pe = e.kids[0]->type.is_ptr() ? *e.kids[0] : *e.kids[1];
    const Expr& ie = e.kids[0]->type.is_ptr() ? *e.kids[1] : *e.kids[0];
    u32 stride = e.type.elem->size_slots();
    Val p = compile_expr(pe, f);
    Val i = compile_expr(ie, f);
    if (stride > 1) {
      Val s = compile_expr_literal(stride);
      emit_strip3(Op::Mul, i.reg, i.reg, s.reg, fresh());
      free_pair();
    }
    emit_add3(e.op == "-" ? Op::Sub : Op::Add, p.reg, p.reg, i.reg, fresh());
    free_pair();
    return Val{p.reg, e.type};
  }

  void move_into(unsigned dst, Val v, Draw common, Draw common_lo) {
    u64 k = w_.sub(common.delta, delta_of(Loc::reg(v.reg)));
    emit_addi(dst, v.reg, k, common.delta, common.id, i64(common.id));
    if (v.type.is_long()) {
      u64 kl = w_.sub(common_lo.delta, delta_of(Loc::reg(v.reg + 1)));
      emit_addi(dst + 1, v.reg + 1, kl, common_lo.delta, common_lo.id, i64(common_lo.id));
    }
  }

  // 0/1 with a common drawn delta; the two literal loads form the trailer
  // set for the join at the end of the construct.
  Val materialize_cond(const Expr& e, const FuncDef& f) {
    unsigned r = alloc_pair();
    u32 Ltrue = new_label(), Lend = new_label();
    compile_cond(e, f, true, Ltrue);
    Draw common = fresh();
    load_literal(r, 0, common, i64(common.id));
    emit_b(Lend);
    bind(Ltrue);
    load_literal(r, 1, common, i64(common.id));
    bind(Lend);
    return Val{r, TypeRef::int_t()};
  }

  // ---- conditions ----

  void compile_cond(const Expr& e, const FuncDef& f, bool sense, u32 target) {
    if (e.k == Ex::Unary && e.op == "!") {
      compile_cond(*e.kids[0], f, !sense, target);
      return;
    }
    if (e.k == Ex::Binary && (e.op == "&&" || e.op == "||")) {
      bool is_and = e.op == "&&";
      if (is_and == sense) {
        u32 skip = new_label();
        compile_cond(*e.kids[0], f, !sense, skip);
        compile_cond(*e.kids[1], f, sense, target);
        bind(skip);
      } else {
        compile_cond(*e.kids[0], f, sense, target);
        compile_cond(*e.kids[1], f, sense, target);
      }
      return;
    }
    if (e.k == Ex::Binary &&
        (e.op == "==" || e.op == "!=" || e.op == "<" || e.op == ">" || e.op == "<=" ||
         e.op == ">=")) {
      if (e.kids[0]->type.is_long() || e.kids[1]->type.is_long()) {
        compile_long_cond(e, f, sense, target);
        return;
      }
      Val a = compile_expr(*e.kids[0], f);
      Val b = compile_expr(*e.kids[1], f);
      emit_branch(e.op, sense, a.reg, b.reg, target);
      free_pair();
      free_pair();
      return;
    }
    if (e.type.is_long()) {
      compile_long_truth(e, f, sense, target);
      return;
    }
    Val v = compile_expr(e, f);
    Val z = compile_expr_literal(0);
    emit_branch("!=", sense, v.reg, z.reg, target);
    free_pair();
    free_pair();
  }

  // Long comparisons reduce to the 2w-bit difference: equality tests both
  // halves against zero, order is the sign of the high half.
  void compile_long_cond(const Expr& e, const FuncDef& f, bool sense, u32 target) {
    std::string op = e.op;
    const Expr* lhs = e.kids[0].get();
    const Expr* rhs = e.kids[1].get();
    if (op == ">") { std::swap(lhs, rhs); op = "<"; }
    if (op == "<=") { std::swap(lhs, rhs); op = ">="; }
    Val a = compile_expr(*lhs, f);
    Val b = compile_expr(*rhs, f);
    emit_long3(Op::Subl, a.reg, a.reg, b.reg, fresh(), fresh());
    free_pair();  // b
    Val z = compile_expr_literal(0);
    if (op == "==" || op == "!=") {
      bool jump_if_eq = (op == "==") == sense;
      if (jump_if_eq) {
        u32 skip = new_label();
        emit_branch("!=", true, a.reg, z.reg, skip);
        retarget(z.reg, z.reg, fresh());
        emit_branch("==", true, a.reg + 1, z.reg, target);
        bind(skip);
      } else {
        emit_branch("!=", true, a.reg, z.reg, target);
        retarget(z.reg, z.reg, fresh());
        emit_branch("!=", true, a.reg + 1, z.reg, target);
      }
    } else {
      bool jump_if_lt = (op == "<") == sense;
      emit_branch("<", jump_if_lt, a.reg, z.reg, target);
    }
    free_pair();  // z
    free_pair();  // a
  }

  void compile_long_truth(const Expr& e, const FuncDef& f, bool sense, u32 target) {
    Val v = compile_expr(e, f);
    Val z = compile_expr_literal(0);
    if (sense) {
      emit_branch("!=", true, v.reg, z.reg, target);
      retarget(z.reg, z.reg, fresh());
      emit_branch("!=", true, v.reg + 1, z.reg, target);
    } else {
      u32 skip = new_label();
      emit_branch("!=", true, v.reg, z.reg, skip);
      retarget(z.reg, z.reg, fresh());
      emit_branch("==", true, v.reg + 1, z.reg, target);
      bind(skip);
    }
    free_pair();
    free_pair();
  }

  // ---- chains ----

  // Comparand: the accessed entry's nominal absolute address plus a fresh
  // delta, anchored on sp.
  Val chain_address(const AccessPlan& p, const FuncDef& f) {
    if (p.pointer) return compile_expr(*p.pointer, f);
    Val idx = compile_expr(*p.index, f);
    if (p.stride > 1) {
      Val s = compile_expr_literal(p.stride);
      emit_strip3(Op::Mul, idx.reg, idx.reg, s.reg, fresh());
      free_pair();
    }
    Draw d = fresh();
    emit_add_sp(idx.reg, idx.reg, w_.add(p.base_slot, d.delta), d);
    return Val{idx.reg, TypeRef::int_t()};
  }

  void chain_guard(unsigned tg, unsigned taddr, u32 entry_addr_slot, u32 next_label) {
    Draw dg = fresh();
    u64 k = w_.sub(w_.add(entry_addr_slot, dg.delta), cur_sig_->sp_fn.delta);
    emit_addi(tg, kSp, k, dg.delta, dg.id);
    emit_branch("!=", true, taddr, tg, next_label);
  }

  // Read chain: guards over every entry; the matching entry lands in the
  // result at a common freshly drawn delta; a miss falls through to a
  // defined junk value.
  Val chain_read(const AccessPlan& p, const FuncDef& f) {
    bool lng = p.type.is_long();
    Val addr = chain_address(p, f);
    unsigned r = addr.reg;
    unsigned tg = alloc_pair();
    u32 Lend = new_label();
    Draw common = fresh();
    Draw common_lo = lng ? fresh() : Draw{};
    for (u32 k = 0; k < p.count; k++) {
      u32 next = new_label();
      chain_guard(tg, r, p.base_slot + k * p.stride, next);
      u32 slot = p.base_slot + k * p.stride + p.field_off;
      // the arm diverges: it clobbers the comparand register, so the
      // fall-through compile state is restored afterwards
      SavedState pre = save_state();
      emit_slot_read(r, slot);
      u64 kv = w_.sub(common.delta, delta_of(Loc::reg(r)));
      emit_addi(r, r, kv, common.delta, common.id, i64(common.id));
      if (lng) {
        emit_slot_read(r + 1, slot + 1);
        u64 kl = w_.sub(common_lo.delta, delta_of(Loc::reg(r + 1)));
        emit_addi(r + 1, r + 1, kl, common_lo.delta, common_lo.id, i64(common_lo.id));
      }
      emit_b(Lend);
      restore_state(pre);
      bind(next);
    }
    load_literal(r, rng_.word(w_), common, i64(common.id));
    if (lng) load_literal(r + 1, rng_.word(w_), common_lo, i64(common_lo.id));
    bind(Lend);
    set_delta(Loc::reg(r), common.delta);
    if (lng) set_delta(Loc::reg(r + 1), common_lo.delta);
    free_pair();  // tg
    mark_temp_long(r, lng);
    return Val{r, p.type};
  }

  // Write chain: every entry word is re-encoded to a fresh delta at a
  // fresh alias; the matching entry takes the stored value.
  void chain_write(const AccessPlan& p, Val value, const FuncDef& f) {
    Val addr = chain_address(p, f);
    unsigned taddr = addr.reg;
    unsigned tg = alloc_pair();
    unsigned tc = alloc_pair();
    for (u32 k = 0; k < p.count; k++) {
      u32 slot = p.base_slot + k * p.stride + p.field_off;
      for (u32 half = 0; half < p.word_count; half++) {
        u32 Lskip = new_label(), Lstore = new_label();
        chain_guard(tg, taddr, p.base_slot + k * p.stride, Lskip);
        Draw common = fresh();
        SlotState& st = slot_state(slot + half);
        Ciphertext next_alias = draw_alias(slot + half, &st.cur);
        u64 next_id = ++alias_ids_;
        u64 kv = w_.sub(common.delta, delta_of(Loc::reg(value.reg + half)));
        emit_addi(tc, value.reg + half, kv, common.delta, common.id, i64(common.id));
        emit_b(Lstore);
        bind(Lskip);
        emit_slot_read(tc, slot + half);
        u64 kc = w_.sub(common.delta, delta_of(Loc::reg(tc)));
        emit_addi(tc, tc, kc, common.delta, common.id, i64(common.id));
        bind(Lstore);
        set_delta(Loc::reg(tc), common.delta);
        emit_slot_write(slot + half, tc, next_alias, next_id);
      }
    }
    free_pair();  // tc
    free_pair();  // tg
    free_pair();  // addr
  }

  // ---- calls ----

  Val compile_call(const Expr& e, const FuncDef& f) {
    const FuncDef& callee = *e.callee;
    const Sig& sig = sigs_.at(&callee);
    unsigned below = depth_;
    std::vector<Val> argvals;
    for (auto& a : e.kids) argvals.push_back(compile_expr(*a, f));
    unsigned word = 0;
    for (Val& av : argvals) {
      const Sig::ArgSlot& slot = sig.args.at(word);
      u64 k = w_.sub(slot.delta, delta_of(Loc::reg(av.reg)));
      emit_addi(kA0 + word, av.reg, k, slot.delta, slot.id, i64(slot.id));
      word++;
      if (av.type.is_long()) {
        const Sig::ArgSlot& lo = sig.args.at(word);
        u64 kl = w_.sub(lo.delta, delta_of(Loc::reg(av.reg + 1)));
        emit_addi(kA0 + word, av.reg + 1, kl, lo.delta, lo.id, i64(lo.id));
        word++;
      }
    }
    for (size_t i = 0; i < argvals.size(); i++) free_pair();
    // spill the still-live temporaries under the arguments
    for (unsigned d = 0; d < below; d++) {
      unsigned reg = kT0 + 2 * d;
      u32 sl = cur_fn_->spill_base + 2 * d;
      emit_slot_write(sl, reg, std::nullopt, 0);
      if (temp_long_[d]) emit_slot_write(sl + 1, reg + 1, std::nullopt, 0);
    }
    u64 kin = w_.sub(sig.sp_in.delta, cur_sig_->sp_fn.delta);
    emit_addi(kSp, kSp, kin, sig.sp_in.delta, sig.sp_in.id, i64(sig.sp_in.id));
    Instruction jal;
    jal.op = Op::Jal;
    InstrMeta mj;
    mj.target = Loc::reg(kRa);
    mj.pinned = true;
    set_delta(Loc::reg(kRa), 0);
    u32 site = emit(std::move(jal), mj);
    call_sites_[&callee].push_back(site);
    set_delta(Loc::reg(kV0), sig.v0.delta);
    if (callee.ret.is_long()) set_delta(Loc::reg(kV0 + 1), sig.v0_lo.delta);
    u64 kout = w_.sub(cur_sig_->sp_fn.delta, sig.sp_out.delta);
    emit_addi(kSp, kSp, kout, cur_sig_->sp_fn.delta, cur_sig_->sp_fn.id,
              i64(cur_sig_->sp_fn.id));
    for (unsigned d = 0; d < below; d++) {
      unsigned reg = kT0 + 2 * d;
      u32 sl = cur_fn_->spill_base + 2 * d;
      emit_slot_read(reg, sl);
      if (temp_long_[d]) emit_slot_read(reg + 1, sl + 1);
    }
    bool lng = callee.ret.is_long();
    unsigned r = alloc_pair(lng);
    retarget(r, kV0, fresh());
    if (lng) retarget(r + 1, kV0 + 1, fresh());
    return Val{r, callee.ret};
  }

  // ---- statements ----

  struct SavedState {
    std::map<u64, u64> deltas;
    std::map<u32, SlotState> slots;
  };
  SavedState save_state() const { return SavedState{deltas_, slots_}; }
  void restore_state(const SavedState& s) {
    deltas_ = s.deltas;
    slots_ = s.slots;
  }

  struct LoopCtx {
    JoinPlan head;
    u32 head_label = 0;
    u32 cont_label = 0;
    u32 exit_label = 0;
  };

  struct UserLabel {
    u32 label = 0;
    JoinPlan plan;
    bool bound = false;
  };

  // A goto label's scheme covers every variable slot of the function and
  // is drawn at its first mention; gotos and the fall-in path conform.
  UserLabel& user_label(const std::string& name, const FuncDef& f) {
    auto it = user_labels_.find(name);
    if (it != user_labels_.end()) return it->second;
    UserLabel ul;
    ul.label = new_label();
    std::set<u32> all;
    for (const VarInfo& v : f.vars)
      for (u32 k = 0; k < v.type.size_slots(); k++) all.insert(v.slot + k);
    ul.plan = make_join(all, /*fresh_aliases=*/true);
    return user_labels_.emplace(name, std::move(ul)).first->second;
  }

  void compile_stmt(const Stmt& s, const FuncDef& f) {
    switch (s.k) {
      case St::Empty:
        return;
      case St::Block:
        for (auto& c : s.body) compile_stmt(*c, f);
        return;
      case St::Decl:
        compile_decl(s, f);
        return;
      case St::Assign:
        compile_assign(s, f);
        return;
      case St::ExprStmt: {
        compile_expr(*s.lhs, f);
        free_pair();
        return;
      }
      case St::Return:
        compile_return(s.rhs.get(), f);
        return;
      case St::If: {
        std::set<u32> written;
        for (auto& c : s.body) scan_written(*c, f, written);
        for (auto& c : s.els) scan_written(*c, f, written);
        JoinPlan plan = make_join(written, /*fresh_aliases=*/false);
        u32 Lelse = new_label(), Lend = new_label();
        compile_cond(*s.cond, f, false, Lelse);
        SavedState pre = save_state();
        for (auto& c : s.body) compile_stmt(*c, f);
        apply_join(plan);
        emit_b(Lend);
        restore_state(pre);
        bind(Lelse);
        for (auto& c : s.els) compile_stmt(*c, f);
        apply_join(plan);
        bind(Lend);
        land_join(plan);
        return;
      }
      case St::While: {
        std::set<u32> written;
        for (auto& c : s.body) scan_written(*c, f, written);
        JoinPlan plan = make_join(written, /*fresh_aliases=*/true);
        apply_join(plan);
        land_join(plan);
        LoopCtx ctx;
        ctx.head = plan;
        ctx.head_label = new_label();
        ctx.exit_label = new_label();
        ctx.cont_label = ctx.head_label;
        bind(ctx.head_label);
        compile_cond(*s.cond, f, false, ctx.exit_label);
        loops_.push_back(ctx);
        SavedState head_state = save_state();
        for (auto& c : s.body) compile_stmt(*c, f);
        apply_join(plan);
        emit_b(ctx.head_label);
        loops_.pop_back();
        restore_state(head_state);
        bind(ctx.exit_label);
        land_join(plan);
        return;
      }
      case St::For: {
        if (s.init) compile_stmt(*s.init, f);
        std::set<u32> written;
        for (auto& c : s.body) scan_written(*c, f, written);
        if (s.inc) scan_written(*s.inc, f, written);
        JoinPlan plan = make_join(written, /*fresh_aliases=*/true);
        apply_join(plan);
        land_join(plan);
        LoopCtx ctx;
        ctx.head = plan;
        ctx.head_label = new_label();
        ctx.exit_label = new_label();
        ctx.cont_label = new_label();
        bind(ctx.head_label);
        if (s.cond) compile_cond(*s.cond, f, false, ctx.exit_label);
        loops_.push_back(ctx);
        SavedState head_state = save_state();
        for (auto& c : s.body) compile_stmt(*c, f);
        apply_join(plan);
        land_join(plan);
        bind(ctx.cont_label);
        if (s.inc) compile_stmt(*s.inc, f);
        apply_join(plan);
        emit_b(ctx.head_label);
        loops_.pop_back();
        restore_state(head_state);
        bind(ctx.exit_label);
        land_join(plan);
        return;
      }
      case St::Break: {
        if (loops_.empty()) throw CompileError("break outside a loop");
        LoopCtx& ctx = loops_.back();
        SavedState here = save_state();
        apply_join(ctx.head);
        emit_b(ctx.exit_label);
        restore_state(here);
        return;
      }
      case St::Continue: {
        if (loops_.empty()) throw CompileError("continue outside a loop");
        LoopCtx& ctx = loops_.back();
        SavedState here = save_state();
        apply_join(ctx.head);
        emit_b(ctx.cont_label);
        restore_state(here);
        return;
      }
      case St::Goto: {
        UserLabel& ul = user_label(s.label, f);
        SavedState here = save_state();
        apply_join(ul.plan);
        emit_b(ul.label);
        restore_state(here);
        return;
      }
      case St::Label: {
        UserLabel& ul = user_label(s.label, f);
        if (ul.bound) throw CompileError("duplicate label " + s.label);
        apply_join(ul.plan);
        bind(ul.label);
        land_join(ul.plan);
        ul.bound = true;
        for (auto& c : s.body) compile_stmt(*c, f);
        return;
      }
    }
  }

  void compile_decl(const Stmt& s, const FuncDef& f) {
    const VarInfo& v = f.vars[s.var];
    if (v.type.k == TypeRef::K::Array) {
      u32 stride = v.type.elem->size_slots();
      std::vector<bool> covered(v.type.count, false);
      for (const ArrayInit& it : s.array_init)
        for (u32 k = it.from; k <= it.to && k < v.type.count; k++) covered[k] = true;
      bool any_zero = false;
      for (u32 k = 0; k < v.type.count; k++) any_zero |= !covered[k];
      if (any_zero) {
        Val z = v.type.elem->is_long() ? compile_expr_long_literal(0)
                                       : compile_expr_literal(0);
        unsigned t = alloc_pair();
        for (u32 k = 0; k < v.type.count; k++)
          if (!covered[k]) store_entry(v.slot + k * stride, z, t);
        free_pair();
        free_pair();
      }
      for (const ArrayInit& it : s.array_init) {
        Val val = compile_expr(*it.value, f);
        unsigned t = alloc_pair();
        for (u32 k = it.from; k <= it.to; k++) store_entry(v.slot + k * stride, val, t);
        free_pair();
        free_pair();
      }
      return;
    }
    if (v.type.k == TypeRef::K::Struct) {
      Val z = compile_expr_literal(0);
      unsigned t = alloc_pair();
      for (u32 k = 0; k < v.type.size_slots(); k++)
        store_entry(v.slot + k, Val{z.reg, TypeRef::int_t()}, t);
      free_pair();
      free_pair();
      return;
    }
    Val val = s.has_init ? compile_expr(*s.rhs, f)
                         : (v.type.is_long() ? compile_expr_long_literal(0)
                                             : compile_expr_literal(0));
    slot_write_fresh(v.slot, val.reg);
    if (v.type.is_long()) slot_write_fresh(v.slot + 1, val.reg + 1);
    free_pair();
  }

  // Store one value into an entry through a per-entry fresh delta.
  void store_entry(u32 slot, Val v, unsigned t) {
    retarget(t, v.reg, fresh());
    slot_write_fresh(slot, t);
    if (v.type.is_long()) {
      retarget(t, v.reg + 1, fresh());
      slot_write_fresh(slot + 1, t);
    }
  }

  void compile_assign(const Stmt& s, const FuncDef& f) {
    AccessPlan plan = resolve_access(*s.lhs, f);
    Val v = compile_expr(*s.rhs, f);
    if (plan.chain) {
      chain_write(plan, v, f);
      free_pair();
      return;
    }
    retarget(v.reg, v.reg, fresh());
    slot_write_fresh(plan.static_slot, v.reg);
    if (plan.type.is_long()) {
      retarget(v.reg + 1, v.reg + 1, fresh());
      slot_write_fresh(plan.static_slot + 1, v.reg + 1);
    }
    free_pair();
  }

  void compile_return(const Expr* value, const FuncDef& f) {
    const Sig& sig = *cur_sig_;
    if (value) {
      Val v = compile_expr(*value, f);
      u64 k = w_.sub(sig.v0.delta, delta_of(Loc::reg(v.reg)));
      emit_addi(kV0, v.reg, k, sig.v0.delta, sig.v0.id, i64(sig.v0.id));
      if (f.ret.is_long()) {
        u64 kl = w_.sub(sig.v0_lo.delta, delta_of(Loc::reg(v.reg + 1)));
        emit_addi(kV0 + 1, v.reg + 1, kl, sig.v0_lo.delta, sig.v0_lo.id, i64(sig.v0_lo.id));
      }
      free_pair();
    } else {
      load_literal(kV0, 0, Draw{sig.v0.delta, sig.v0.id}, i64(sig.v0.id));
      if (f.ret.is_long())
        load_literal(kV0 + 1, 0, Draw{sig.v0_lo.delta, sig.v0_lo.id}, i64(sig.v0_lo.id));
    }
    // reload ra, release every frame mapping, pop the frame, return
    emit_slot_read(kRa, f.ra_slot);
    for (u32 sl = 0; sl < f.frame_slots; sl++) {
      auto it = slots_.find(sl);
      if (it == slots_.end() || !it->second.mapped) continue;
      emit_release(it->second.cur);
    }
    u64 k = w_.add(f.frame_slots, w_.sub(sig.sp_out.delta, sig.sp_fn.delta));
    emit_addi(kSp, kSp, k, sig.sp_out.delta, sig.sp_out.id, i64(sig.sp_out.id));
    Instruction jr;
    jr.op = Op::Jr;
    jr.r0 = kRa;
    emit(std::move(jr), InstrMeta{});
  }

  // ---- function compilation ----

  void compile_function(const FuncDef& f) {
    cur_fn_ = &f;
    sigs_[&f].entry_index = u32(out_.program.code.size());
    cur_sig_ = &sigs_.at(&f);
    deltas_.clear();
    slots_.clear();
    user_labels_.clear();
    pinned_slots_.clear();
    pinned_slots_.insert(f.ra_slot);
    depth_ = 0;
    temp_long_.assign(5, false);

    set_delta(Loc::reg(kZer), zer_delta_.delta);
    set_delta(Loc::reg(kSp), cur_sig_->sp_in.delta);
    set_delta(Loc::reg(kRa), 0);

    // prologue: push the frame, map every slot, save ra, home parameters
    u64 kp = w_.add(w_.neg(f.frame_slots),
                    w_.sub(cur_sig_->sp_fn.delta, cur_sig_->sp_in.delta));
    emit_addi(kSp, kSp, kp, cur_sig_->sp_fn.delta, cur_sig_->sp_fn.id, i64(cur_sig_->sp_fn.id));
    {
      unsigned t = alloc_pair();
      for (u32 sl = 0; sl < f.frame_slots; sl++) {
        if (sl == f.ra_slot) continue;
        load_literal(t, 0, fresh());
        emit_slot_write(sl, t, std::nullopt, 0);
      }
      free_pair();
    }
    emit_slot_write(f.ra_slot, kRa, std::nullopt, 0);
    unsigned word = 0;
    for (u32 p : f.params) {
      const VarInfo& v = f.vars[p];
      unsigned t = alloc_pair();
      set_delta(Loc::reg(kA0 + word), cur_sig_->args[word].delta);
      retarget(t, kA0 + word, fresh());
      slot_write_fresh(v.slot, t);
      word++;
      if (v.type.is_long()) {
        set_delta(Loc::reg(kA0 + word), cur_sig_->args[word].delta);
        retarget(t, kA0 + word, fresh());
        slot_write_fresh(v.slot + 1, t);
        word++;
      }
      free_pair();
    }

    for (auto& s : f.body) compile_stmt(*s, f);
    compile_return(nullptr, f);  // implicit `return 0` when control falls off

    for (auto& [name, ul] : user_labels_)
      if (!ul.bound) throw CompileError("goto to undefined label " + name);
    resolve_patches();
  }

  const SourceProgram& src_;
  Key key_;
  Width w_;
  Cipher cipher_;
  Rng rng_;
  u64 seed_;
  CompilerOptions opt_;

  CompilationOutput out_;
  u64 draws_ = 0;
  u64 alias_ids_ = 0;
  Draw zer_delta_;
  std::map<const FuncDef*, Sig> sigs_;
  std::map<const FuncDef*, std::vector<u32>> call_sites_;

  const FuncDef* cur_fn_ = nullptr;
  const Sig* cur_sig_ = nullptr;
  std::map<u64, u64> deltas_;
  std::map<u32, SlotState> slots_;
  std::set<u32> pinned_slots_;
  std::map<std::string, UserLabel> user_labels_;
  std::vector<u32> labels_;
  std::vector<std::pair<u32, u32>> patches_;
  std::vector<LoopCtx> loops_;
  unsigned depth_ = 0;
  std::vector<bool> temp_long_;
};

inline CompilationOutput compile_program(const SourceProgram& src, u64 seed, Key key, Width w,
                                         CompilerOptions opt = {}) {
  return Compiler(src, key, w, seed, opt).compile();
}

inline CompilationOutput compile_source(const std::string& text, u64 seed, Key key, Width w,
                                        CompilerOptions opt = {}) {
  SourceProgram prog = parse_source(text);
  return Compiler(prog, key, w, seed, opt).compile();
}

}  // namespace fxa
