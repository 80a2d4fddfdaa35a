#pragma once

// Reference interpreter for the C subset: the independent oracle the
// compiled pipeline is tested against. It evaluates the AST directly over
// a flat word-addressed store using the same dialect semantics the machine
// implements (mod-2^w arithmetic, sign-of-difference comparisons, division
// by zero yields -1), but shares none of the cipher/codegen/VM path.

#include <unordered_map>

#include "fxa/lang.hpp"

namespace fxa::testing {

class Interp {
 public:
  Interp(const SourceProgram& prog, Width w, u64 step_budget = 50'000'000)
      : prog_(prog), w_(w), budget_(step_budget) {}

  struct Value {
    u64 raw = 0;  // long: full 2w bits; pointers hold addresses
    bool is_long = false;
  };

  Value run(const std::vector<Value>& args) {
    const FuncDef& f = prog_.entry_func();
    sp_ = w_.mask();  // nominal stack top, matches the machine convention
    mem_.clear();
    return call(f, args);
  }

 private:
  struct Frame {
    const FuncDef* fn;
    u64 base;  // address of slot 0
  };

  struct Flow {
    enum class K { Normal, Break, Continue, Return, Goto } k = K::Normal;
    Value ret;
    std::string label;
  };

  void tick() {
    if (budget_-- == 0) throw RuntimeFault("interpreter step budget exhausted");
  }

  Value call(const FuncDef& f, const std::vector<Value>& args) {
    if (args.size() != f.params.size()) throw UsageError("argument count mismatch");
    if (++depth_ > 4096) throw RuntimeFault("interpreter recursion too deep");
    u64 saved_sp = sp_;
    sp_ = w_.sub(sp_, f.frame_slots);
    Frame fr{&f, sp_};
    for (size_t i = 0; i < args.size(); i++) {
      const VarInfo& v = f.vars[f.params[i]];
      if (v.type.is_long() != args[i].is_long) throw UsageError("argument width mismatch");
      store(fr, var_addr(fr, f.params[i]), v.type, args[i]);
    }
    Flow fl = exec_seq(fr, f.body, nullptr);
    if (fl.k == Flow::K::Goto) throw CompileError("goto to unknown label " + fl.label);
    Value ret = (fl.k == Flow::K::Return) ? fl.ret : Value{0, f.ret.is_long()};
    if (f.ret.is_long() && !ret.is_long) ret = widen(ret);
    sp_ = saved_sp;
    depth_--;
    return ret;
  }

  u64 var_addr(const Frame& fr, u32 var) const {
    return w_.add(fr.base, fr.fn->vars[var].slot);
  }

  u64 load_word(u64 addr) {
    auto it = mem_.find(addr);
    return it == mem_.end() ? 0 : it->second;
  }

  Value load(const Frame&, u64 addr, const TypeRef& t) {
    if (t.is_long())
      return Value{long_to_u64(w_, LongWord{load_word(addr), load_word(w_.add(addr, 1))}), true};
    return Value{load_word(addr), false};
  }

  void store(const Frame&, u64 addr, const TypeRef& t, Value v) {
    if (t.is_long()) {
      LongWord lw = long_from_u64(w_, v.raw);
      mem_[addr] = lw.hi;
      mem_[w_.add(addr, 1)] = lw.lo;
    } else {
      mem_[addr] = v.raw & w_.mask();
    }
  }

  Value widen(Value v) const {
    return Value{u64(w_.to_signed(v.raw)) & w_.block_mask(), true};
  }

  // --- lvalue resolution: address + element type ---

  struct Place {
    u64 addr;
    TypeRef type;
  };

  Place place_of(const Frame& fr, const Expr& e) {
    switch (e.k) {
      case Ex::Var:
        return Place{var_addr(fr, e.var), e.type};
      case Ex::Member: {
        Place base = place_of(fr, *e.kids[0]);
        const StructField* f = e.kids[0]->type.sd->field(e.op);
        return Place{w_.add(base.addr, f->offset), f->type};
      }
      case Ex::Index: {
        Place base = place_of(fr, *e.kids[0]);
        u64 idx = eval(fr, *e.kids[1]).raw;
        u32 stride = e.type.size_slots();
        i64 si = w_.to_signed(idx);
        if (si < 0 || si >= i64(e.kids[0]->type.count))
          throw RuntimeFault("array index out of range in oracle");
        return Place{w_.add(base.addr, u64(si) * stride), e.type};
      }
      case Ex::Deref: {
        Value p = eval(fr, *e.kids[0]);
        u32 range = e.kids[0]->type.range_var;
        const TypeRef& rt = fr.fn->vars[range].type;
        u64 base = var_addr(fr, range);
        u64 off = w_.sub(p.raw, base);
        u32 stride = e.type.size_slots();
        u64 extent = rt.size_slots();
        if (off >= extent || off % stride != 0)
          throw RuntimeFault("pointer outside its restrict range in oracle");
        return Place{p.raw & w_.mask(), e.type};
      }
      default:
        throw CompileError("not an lvalue");
    }
  }

  // --- expressions ---

  Value eval(const Frame& fr, const Expr& e) {
    tick();
    switch (e.k) {
      case Ex::IntLit:
        return e.type.is_long() ? Value{e.lit & w_.block_mask(), true}
                                : Value{e.lit & w_.mask(), false};
      case Ex::Var: {
        if (e.type.k == TypeRef::K::Array)  // decay
          return Value{var_addr(fr, e.var), false};
        return load(fr, var_addr(fr, e.var), e.type);
      }
      case Ex::Member: case Ex::Index: case Ex::Deref: {
        Place p = place_of(fr, e);
        return load(fr, p.addr, p.type);
      }
      case Ex::AddrOf: {
        Place p = place_of(fr, *e.kids[0]);
        return Value{p.addr, false};
      }
      case Ex::Unary: {
        if (e.op == "(long)") return widen(eval(fr, *e.kids[0]));
        Value v = eval(fr, *e.kids[0]);
        if (e.op == "-") {
          if (v.is_long) return Value{(0 - v.raw) & w_.block_mask(), true};
          return Value{w_.neg(v.raw), false};
        }
        // "!"
        return Value{u64(v.raw == 0), false};
      }
      case Ex::Binary:
        return eval_binary(fr, e);
      case Ex::Ternary: {
        Value c = eval(fr, *e.kids[0]);
        return eval(fr, *e.kids[c.raw != 0 ? 1 : 2]);
      }
      case Ex::Call: {
        std::vector<Value> args;
        for (auto& k : e.kids) args.push_back(eval(fr, *k));
        return call(*e.callee, args);
      }
    }
    throw CompileError("unreachable expression kind");
  }

  Value eval_binary(const Frame& fr, const Expr& e) {
    const std::string& op = e.op;
    if (op == "&&") {
      Value a = eval(fr, *e.kids[0]);
      if (a.raw == 0) return Value{0, false};
      return Value{u64(eval(fr, *e.kids[1]).raw != 0), false};
    }
    if (op == "||") {
      Value a = eval(fr, *e.kids[0]);
      if (a.raw != 0) return Value{1, false};
      return Value{u64(eval(fr, *e.kids[1]).raw != 0), false};
    }
    Value a = eval(fr, *e.kids[0]);
    Value b = eval(fr, *e.kids[1]);
    // pointer arithmetic scales by the element stride
    if (e.kids[0]->type.is_ptr() || e.kids[1]->type.is_ptr()) {
      bool cmp = op == "==" || op == "!=" || op == "<" || op == ">" || op == "<=" || op == ">=";
      if (!cmp) {
        u32 stride = e.type.elem->size_slots();
        if (e.kids[0]->type.is_ptr() && op == "+")
          return Value{w_.add(a.raw, w_.mul(b.raw, stride)), false};
        if (e.kids[0]->type.is_ptr() && op == "-")
          return Value{w_.sub(a.raw, w_.mul(b.raw, stride)), false};
        return Value{w_.add(b.raw, w_.mul(a.raw, stride)), false};
      }
    }
    if (a.is_long || b.is_long) {
      u64 x = a.raw, y = b.raw;
      u64 bm = w_.block_mask();
      unsigned bb = 2 * w_.bits;
      u64 sign = 1ull << (bb - 1);
      auto is_neg = [&](u64 v) { return (v & sign) != 0; };
      if (op == "+") return Value{(x + y) & bm, true};
      if (op == "-") return Value{(x - y) & bm, true};
      if (op == "*") return Value{long_to_u64(w_, long_mul(w_, long_from_u64(w_, x), long_from_u64(w_, y))), true};
      if (op == "/") return Value{long_to_u64(w_, long_sdiv(w_, long_from_u64(w_, x), long_from_u64(w_, y))), true};
      if (op == "%") {
        u64 q = long_to_u64(w_, long_sdiv(w_, long_from_u64(w_, x), long_from_u64(w_, y)));
        return Value{(x - q * y) & bm, true};
      }
      if (op == "==") return Value{u64(x == y), false};
      if (op == "!=") return Value{u64(x != y), false};
      if (op == "<") return Value{u64(is_neg((x - y) & bm)), false};
      if (op == ">") return Value{u64(is_neg((y - x) & bm)), false};
      if (op == "<=") return Value{u64(!is_neg((y - x) & bm)), false};
      if (op == ">=") return Value{u64(!is_neg((x - y) & bm)), false};
      throw CompileError("bad long operator " + op);
    }
    u64 x = a.raw & w_.mask(), y = b.raw & w_.mask();
    if (op == "+") return Value{w_.add(x, y), false};
    if (op == "-") return Value{w_.sub(x, y), false};
    if (op == "*") return Value{w_.mul(x, y), false};
    if (op == "/") return Value{w_.sdiv(x, y), false};
    if (op == "%") return Value{w_.sub(x, w_.mul(w_.sdiv(x, y), y)), false};
    if (op == "==") return Value{u64(x == y), false};
    if (op == "!=") return Value{u64(x != y), false};
    if (op == "<") return Value{u64(w_.lt(x, y)), false};
    if (op == ">") return Value{u64(w_.gt(x, y)), false};
    if (op == "<=") return Value{u64(w_.le(x, y)), false};
    if (op == ">=") return Value{u64(w_.ge(x, y)), false};
    throw CompileError("bad operator " + op);
  }

  // --- statements. `seek` non-null means: skip effects until the label. ---

  Flow exec_seq(const Frame& fr, const std::vector<StmtP>& body, const std::string* seek) {
    std::string pending;
    const std::string* seeking = seek;
    size_t i = 0;
    while (i < body.size()) {
      Flow fl = exec(fr, *body[i], seeking);
      seeking = nullptr;
      if (fl.k == Flow::K::Goto) {
        size_t j = 0;
        for (; j < body.size(); j++)
          if (contains_label(*body[j], fl.label)) break;
        if (j == body.size()) return fl;  // propagate to an enclosing sequence
        pending = fl.label;
        seeking = &pending;
        i = j;
        continue;
      }
      if (fl.k != Flow::K::Normal) return fl;
      i++;
    }
    return Flow{};
  }

  static bool contains_label(const Stmt& s, const std::string& l) {
    if (s.k == St::Label && s.label == l) return true;
    for (auto& c : s.body)
      if (contains_label(*c, l)) return true;
    for (auto& c : s.els)
      if (contains_label(*c, l)) return true;
    return false;
  }

  Flow exec(const Frame& fr, const Stmt& s, const std::string* seek) {
    tick();
    if (seek && !contains_label(s, *seek) ) {
      // skipping forward: declarations still reserve storage but anything
      // skipped performs no effects (matches goto over a declaration)
      return Flow{};
    }
    switch (s.k) {
      case St::Empty:
        return Flow{};
      case St::Block:
        return exec_seq(fr, s.body, seek);
      case St::Label: {
        const std::string* inner = seek;
        if (seek && s.label == *seek) inner = nullptr;
        if (s.body.empty()) return Flow{};
        return exec(fr, *s.body[0], inner);
      }
      case St::Decl: {
        const VarInfo& v = fr.fn->vars[s.var];
        u64 base = var_addr(fr, s.var);
        if (v.type.k == TypeRef::K::Array) {
          u32 stride = v.type.elem->size_slots();
          for (u32 k = 0; k < v.type.count; k++)
            store(fr, w_.add(base, k * stride), *v.type.elem, Value{0, v.type.elem->is_long()});
          for (const ArrayInit& it : s.array_init) {
            Value val = eval(fr, *it.value);
            for (u32 k = it.from; k <= it.to; k++)
              store(fr, w_.add(base, k * stride), *v.type.elem, val);
          }
        } else if (v.type.k == TypeRef::K::Struct) {
          for (u32 k = 0; k < v.type.size_slots(); k++) mem_[w_.add(base, k)] = 0;
        } else {
          Value val{0, v.type.is_long()};
          if (s.has_init) val = eval(fr, *s.rhs);
          store(fr, base, v.type, val);
        }
        return Flow{};
      }
      case St::Assign: {
        Value v = eval(fr, *s.rhs);
        Place p = place_of(fr, *s.lhs);
        store(fr, p.addr, p.type, v);
        return Flow{};
      }
      case St::ExprStmt:
        eval(fr, *s.lhs);
        return Flow{};
      case St::If: {
        if (seek) {
          if (contains_label(*s.body[0], *seek)) return exec(fr, *s.body[0], seek);
          return exec(fr, *s.els.at(0), seek);
        }
        bool c = eval(fr, *s.cond).raw != 0;
        if (c) return exec(fr, *s.body[0], nullptr);
        if (!s.els.empty()) return exec(fr, *s.els[0], nullptr);
        return Flow{};
      }
      case St::While: {
        const std::string* inner = seek;
        while (true) {
          if (!inner) {
            if (eval(fr, *s.cond).raw == 0) return Flow{};
          }
          Flow fl = exec(fr, *s.body[0], inner);
          inner = nullptr;
          if (fl.k == Flow::K::Break) return Flow{};
          if (fl.k == Flow::K::Return || fl.k == Flow::K::Goto) return fl;
        }
      }
      case St::For: {
        const std::string* inner = seek;
        if (!inner && s.init) {
          Flow fl = exec(fr, *s.init, nullptr);
          if (fl.k != Flow::K::Normal) return fl;
        }
        while (true) {
          if (!inner) {
            if (s.cond && eval(fr, *s.cond).raw == 0) return Flow{};
          }
          Flow fl = exec(fr, *s.body[0], inner);
          inner = nullptr;
          if (fl.k == Flow::K::Break) return Flow{};
          if (fl.k == Flow::K::Return || fl.k == Flow::K::Goto) return fl;
          if (s.inc) {
            Flow f2 = exec(fr, *s.inc, nullptr);
            if (f2.k != Flow::K::Normal) return f2;
          }
        }
      }
      case St::Return: {
        Flow fl;
        fl.k = Flow::K::Return;
        fl.ret = s.rhs ? eval(fr, *s.rhs) : Value{0, fr.fn->ret.is_long()};
        return fl;
      }
      case St::Goto: {
        Flow fl;
        fl.k = Flow::K::Goto;
        fl.label = s.label;
        return fl;
      }
      case St::Break: {
        Flow fl;
        fl.k = Flow::K::Break;
        return fl;
      }
      case St::Continue: {
        Flow fl;
        fl.k = Flow::K::Continue;
        return fl;
      }
    }
    return Flow{};
  }

  const SourceProgram& prog_;
  Width w_;
  u64 budget_;
  u64 sp_ = 0;
  int depth_ = 0;
  std::unordered_map<u64, u64> mem_;
};

}  // namespace fxa::testing
