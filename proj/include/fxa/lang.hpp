#pragma once

// Front end for the C subset: integer types (bool/char/short promote to the
// w-bit int; long is 2w bits), statically sized arrays, structs, unions,
// and pointers declared with a named restrict range:
//
//     restrict A int *p;        // p points into array (or scalar) A
//
// Expressions are side-effect free except calls; assignment and ++/-- are
// statements. Comparisons use the sign-of-difference dialect the branch
// instructions implement. Declarations are lexically scoped; storage lives
// for the whole function activation.

#include <cctype>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "fxa/common.hpp"

namespace fxa {

// ---- types --------------------------------------------------------------

struct StructDef;

struct TypeRef {
  enum class K : u8 { Int, Long, Ptr, Struct, Array } k = K::Int;
  const StructDef* sd = nullptr;         // Struct
  std::shared_ptr<TypeRef> elem;         // Array element / Ptr pointee
  u32 count = 0;                         // Array length
  u32 range_var = ~0u;                   // Ptr: restrict range variable

  static TypeRef int_t() { return TypeRef{}; }
  static TypeRef long_t() { return TypeRef{K::Long}; }
  bool is_int() const { return k == K::Int; }
  bool is_long() const { return k == K::Long; }
  bool is_ptr() const { return k == K::Ptr; }
  bool is_scalar() const { return is_int() || is_long() || is_ptr(); }
  u32 size_slots() const;
  bool same(const TypeRef& o) const {
    if (k != o.k) return false;
    switch (k) {
      case K::Int: case K::Long: return true;
      case K::Ptr: return elem->same(*o.elem);
      case K::Struct: return sd == o.sd;
      case K::Array: return count == o.count && elem->same(*o.elem);
    }
    return false;
  }
  std::string str() const;
};

struct StructField {
  std::string name;
  TypeRef type;
  u32 offset = 0;  // slots from the struct start
};

struct StructDef {
  std::string name;
  bool is_union = false;
  std::vector<StructField> fields;
  u32 size_slots = 0;
  const StructField* field(const std::string& n) const {
    for (auto& f : fields)
      if (f.name == n) return &f;
    return nullptr;
  }
};

inline u32 TypeRef::size_slots() const {
  switch (k) {
    case K::Int: case K::Ptr: return 1;
    case K::Long: return 2;
    case K::Struct: return sd->size_slots;
    case K::Array: return count * elem->size_slots();
  }
  return 1;
}

inline std::string TypeRef::str() const {
  switch (k) {
    case K::Int: return "int";
    case K::Long: return "long";
    case K::Ptr: return elem->str() + "*";
    case K::Struct: return (sd->is_union ? "union " : "struct ") + sd->name;
    case K::Array: return elem->str() + "[" + std::to_string(count) + "]";
  }
  return "?";
}

// ---- AST ----------------------------------------------------------------

struct VarInfo {
  std::string name;
  TypeRef type;
  u32 slot = 0;  // frame slot of the first word (assigned by layout)
  bool is_param = false;
};

struct Expr;
using ExprP = std::unique_ptr<Expr>;

enum class Ex : u8 {
  IntLit, Var, Unary, Binary, Ternary, Call, Index, Member, Deref, AddrOf
};

struct FuncDef;

struct Expr {
  Ex k;
  u64 lit = 0;
  std::string op;    // unary/binary operator, member name
  u32 var = ~0u;     // Var
  std::vector<ExprP> kids;
  const FuncDef* callee = nullptr;
  TypeRef type;      // set by the checker
};

struct Stmt;
using StmtP = std::unique_ptr<Stmt>;

enum class St : u8 {
  Empty, ExprStmt, Assign, Decl, If, While, For, Return, Goto, Label, Break,
  Continue, Block
};

struct ArrayInit {
  u32 from = 0, to = 0;  // inclusive entry range
  ExprP value;
};

struct Stmt {
  St k = St::Empty;
  ExprP lhs, rhs, cond;       // Assign: lhs/rhs; If/While/For: cond; Return: rhs
  StmtP init, inc;            // For
  std::vector<StmtP> body, els;
  std::string label;          // Goto/Label
  u32 var = ~0u;              // Decl
  std::vector<ArrayInit> array_init;
  bool has_init = false;
};

struct FuncDef {
  std::string name;
  TypeRef ret;
  std::vector<u32> params;  // var ids
  std::vector<VarInfo> vars;
  std::vector<StmtP> body;
  // layout results
  u32 frame_slots = 0;
  u32 ra_slot = 0;
  u32 spill_base = 0;
  u32 spill_count = 0;
  u32 param_words = 0;
};

struct SourceProgram {
  std::vector<std::unique_ptr<StructDef>> structs;
  std::vector<std::unique_ptr<FuncDef>> funcs;
  std::string entry;  // "main" if present, else the first function
  u64 source_hash = 0;

  const FuncDef* func(const std::string& n) const {
    for (auto& f : funcs)
      if (f->name == n) return f.get();
    return nullptr;
  }
  const FuncDef& entry_func() const { return *func(entry); }
};

// ---- lexer ----------------------------------------------------------------

namespace lang_detail {

struct Token {
  enum class T : u8 { Id, Num, Punct, End } t = T::End;
  std::string s;
  u64 num = 0;
  bool is_long = false;
  int line = 0;
};

class Lexer {
 public:
  explicit Lexer(const std::string& src) : src_(&src) { next(); }

  struct Mark {
    size_t pos;
    int line;
    Token tok;
  };
  Mark mark() const { return Mark{pos_, line_, tok_}; }
  void rewind(const Mark& m) {
    pos_ = m.pos;
    line_ = m.line;
    tok_ = m.tok;
  }

  const Token& peek() const { return tok_; }
  Token take() {
    Token t = tok_;
    next();
    return t;
  }
  bool is_punct(const char* p) const { return tok_.t == Token::T::Punct && tok_.s == p; }
  bool is_id(const char* id) const { return tok_.t == Token::T::Id && tok_.s == id; }
  Token expect_punct(const char* p) {
    if (!is_punct(p)) err(std::string("expected '") + p + "'");
    return take();
  }
  Token expect_id() {
    if (tok_.t != Token::T::Id) err("expected identifier");
    return take();
  }
  [[noreturn]] void err(const std::string& msg) const {
    throw CompileError("line " + std::to_string(tok_.line) + ": " + msg +
                       (tok_.s.empty() ? "" : " (at '" + tok_.s + "')"));
  }

 private:
  void next() {
    const std::string& src = *src_;
    while (pos_ < src.size()) {
      char c = src[pos_];
      if (c == '\n') line_++, pos_++;
      else if (c == ' ' || c == '\t' || c == '\r') pos_++;
      else if (c == '/' && pos_ + 1 < src.size() && src[pos_ + 1] == '/') {
        while (pos_ < src.size() && src[pos_] != '\n') pos_++;
      } else if (c == '/' && pos_ + 1 < src.size() && src[pos_ + 1] == '*') {
        pos_ += 2;
        while (pos_ + 1 < src.size() && !(src[pos_] == '*' && src[pos_ + 1] == '/')) {
          if (src[pos_] == '\n') line_++;
          pos_++;
        }
        pos_ += 2;
      } else break;
    }
    tok_ = Token{};
    tok_.line = line_;
    if (pos_ >= src.size()) return;
    char c = src[pos_];
    if (isalpha(c) || c == '_') {
      tok_.t = Token::T::Id;
      while (pos_ < src.size() && (isalnum(src[pos_]) || src[pos_] == '_'))
        tok_.s.push_back(src[pos_++]);
      return;
    }
    if (isdigit(c)) {
      tok_.t = Token::T::Num;
      u64 v = 0;
      if (c == '0' && pos_ + 1 < src.size() && (src[pos_ + 1] == 'x' || src[pos_ + 1] == 'X')) {
        pos_ += 2;
        while (pos_ < src.size() && isxdigit(src[pos_])) {
          char d = src[pos_++];
          v = v * 16 + (isdigit(d) ? d - '0' : (tolower(d) - 'a' + 10));
          tok_.s.push_back(d);
        }
      } else {
        while (pos_ < src.size() && isdigit(src[pos_])) {
          v = v * 10 + u64(src[pos_] - '0');
          tok_.s.push_back(src[pos_++]);
        }
      }
      if (pos_ < src.size() && (src[pos_] == 'L' || src[pos_] == 'l')) {
        tok_.is_long = true;
        pos_++;
        if (pos_ < src.size() && (src[pos_] == 'L' || src[pos_] == 'l')) pos_++;
      }
      tok_.num = v;
      return;
    }
    tok_.t = Token::T::Punct;
    static const char* two[] = {"==", "!=", "<=", ">=", "&&", "||", "+=", "-=",
                                "*=", "/=", "%=", "++", "--", "->", "..."};
    if (pos_ + 2 < src.size() && src.compare(pos_, 3, "...") == 0) {
      tok_.s = "...";
      pos_ += 3;
      return;
    }
    for (const char* p : two) {
      if (src.compare(pos_, 2, p) == 0) {
        tok_.s = p;
        pos_ += 2;
        return;
      }
    }
    tok_.s = std::string(1, c);
    pos_++;
  }

  const std::string* src_;
  size_t pos_ = 0;
  int line_ = 1;
  Token tok_;
};

}  // namespace lang_detail

// ---- parser ---------------------------------------------------------------

class Parser {
 public:
  explicit Parser(const std::string& src) : lex_(src), src_(src) {}

  SourceProgram parse() {
    SourceProgram prog;
    prog_ = &prog;
    u64 h = 0xcbf29ce484222325ull;
    for (char c : src_) h = (h ^ u64(u8(c))) * 0x100000001b3ull;
    prog.source_hash = mix64(h);
    while (lex_.peek().t != lang_detail::Token::T::End) {
      if (lex_.is_id("struct") || lex_.is_id("union")) {
        // Top-level named struct/union definitions only.
        parse_struct_def();
        continue;
      }
      parse_function();
    }
    if (prog.funcs.empty()) throw CompileError("no functions defined");
    prog.entry = prog.func("main") ? "main" : prog.funcs.front()->name;
    for (auto& f : prog.funcs) layout(*f);
    return prog;
  }

 private:
  using Token = lang_detail::Token;

  // --- type parsing ---

  bool peek_type() {
    return lex_.is_id("int") || lex_.is_id("long") || lex_.is_id("char") ||
           lex_.is_id("short") || lex_.is_id("bool") || lex_.is_id("_Bool") ||
           lex_.is_id("struct") || lex_.is_id("union");
  }

  TypeRef parse_base_type() {
    if (lex_.is_id("long")) {
      lex_.take();
      if (lex_.is_id("long") || lex_.is_id("int")) lex_.take();
      return TypeRef::long_t();
    }
    if (lex_.is_id("int") || lex_.is_id("char") || lex_.is_id("short") ||
        lex_.is_id("bool") || lex_.is_id("_Bool")) {
      lex_.take();
      return TypeRef::int_t();  // short types promote; storage is one word
    }
    if (lex_.is_id("struct") || lex_.is_id("union")) {
      bool is_union = lex_.is_id("union");
      lex_.take();
      std::string name = lex_.expect_id().s;
      const StructDef* sd = find_struct(name, is_union);
      if (!sd) lex_.err("unknown " + std::string(is_union ? "union " : "struct ") + name);
      TypeRef t;
      t.k = TypeRef::K::Struct;
      t.sd = sd;
      return t;
    }
    lex_.err("expected a type");
  }

  const StructDef* find_struct(const std::string& name, bool is_union) {
    for (auto& s : prog_->structs)
      if (s->name == name && s->is_union == is_union) return s.get();
    return nullptr;
  }

  void parse_struct_def() {
    bool is_union = lex_.is_id("union");
    lex_.take();
    std::string name = lex_.expect_id().s;
    lex_.expect_punct("{");
    auto def = std::make_unique<StructDef>();
    def->name = name;
    def->is_union = is_union;
    u32 off = 0, maxsz = 0;
    while (!lex_.is_punct("}")) {
      TypeRef base = parse_base_type();
      while (true) {
        std::string fname = lex_.expect_id().s;
        TypeRef ftype = base;
        if (lex_.is_punct("[")) {
          lex_.take();
          Token n = lex_.take();
          if (n.t != Token::T::Num) lex_.err("array size must be a literal");
          lex_.expect_punct("]");
          TypeRef arr;
          arr.k = TypeRef::K::Array;
          arr.elem = std::make_shared<TypeRef>(base);
          arr.count = u32(n.num);
          ftype = arr;
        }
        u32 sz = ftype.size_slots();
        def->fields.push_back(StructField{fname, ftype, is_union ? 0 : off});
        if (is_union) maxsz = std::max(maxsz, sz);
        else off += sz;
        if (lex_.is_punct(",")) { lex_.take(); continue; }
        break;
      }
      lex_.expect_punct(";");
    }
    lex_.expect_punct("}");
    lex_.expect_punct(";");
    def->size_slots = is_union ? maxsz : off;
    if (def->size_slots == 0) lex_.err("empty struct/union");
    if (find_struct(name, is_union)) lex_.err("duplicate struct/union " + name);
    prog_->structs.push_back(std::move(def));
  }

  // --- functions ---

  void parse_function() {
    TypeRef ret = parse_base_type();
    if (!ret.is_scalar()) lex_.err("functions return int or long");
    std::string name = lex_.expect_id().s;
    if (prog_->func(name)) lex_.err("duplicate function " + name);
    auto fn = std::make_unique<FuncDef>();
    fn_ = fn.get();
    fn->name = name;
    fn->ret = ret;
    scopes_.clear();
    scopes_.emplace_back();
    lex_.expect_punct("(");
    if (!lex_.is_punct(")")) {
      while (true) {
        if (lex_.is_id("void") && fn->params.empty()) {
          lex_.take();
          break;
        }
        TypeRef pt = parse_base_type();
        if (!pt.is_int() && !pt.is_long()) lex_.err("parameters must be int or long");
        std::string pname = lex_.expect_id().s;
        u32 id = declare(pname, pt, /*param=*/true);
        fn->params.push_back(id);
        if (lex_.is_punct(",")) { lex_.take(); continue; }
        break;
      }
    }
    lex_.expect_punct(")");
    lex_.expect_punct("{");
    while (!lex_.is_punct("}")) fn->body.push_back(parse_stmt());
    lex_.expect_punct("}");
    u32 words = 0;
    for (u32 p : fn->params) words += fn->vars[p].type.size_slots();
    if (words > 4) lex_.err("at most 4 argument words supported");
    fn->param_words = words;
    scopes_.clear();
    prog_->funcs.push_back(std::move(fn));
  }

  u32 declare(const std::string& name, TypeRef t, bool param = false) {
    auto& scope = scopes_.back();
    if (scope.count(name)) lex_.err("duplicate declaration of " + name);
    u32 id = u32(fn_->vars.size());
    fn_->vars.push_back(VarInfo{name, t, 0, param});
    scope[name] = id;
    return id;
  }

  std::optional<u32> lookup(const std::string& name) {
    for (auto it = scopes_.rbegin(); it != scopes_.rend(); ++it) {
      auto f = it->find(name);
      if (f != it->end()) return f->second;
    }
    return std::nullopt;
  }

  // --- statements ---

  StmtP parse_stmt() {
    auto s = std::make_unique<Stmt>();
    if (lex_.is_punct(";")) {
      lex_.take();
      s->k = St::Empty;
      return s;
    }
    if (lex_.is_punct("{")) {
      lex_.take();
      s->k = St::Block;
      scopes_.emplace_back();
      while (!lex_.is_punct("}")) s->body.push_back(parse_stmt());
      lex_.take();
      scopes_.pop_back();
      return s;
    }
    if (lex_.is_id("restrict")) return parse_restrict_decl();
    if (peek_type()) return parse_decl();
    if (lex_.is_id("if")) {
      lex_.take();
      s->k = St::If;
      lex_.expect_punct("(");
      s->cond = parse_expr();
      lex_.expect_punct(")");
      s->body.push_back(parse_stmt());
      if (lex_.is_id("else")) {
        lex_.take();
        s->els.push_back(parse_stmt());
      }
      return s;
    }
    if (lex_.is_id("while")) {
      lex_.take();
      s->k = St::While;
      lex_.expect_punct("(");
      s->cond = parse_expr();
      lex_.expect_punct(")");
      s->body.push_back(parse_stmt());
      return s;
    }
    if (lex_.is_id("for")) {
      lex_.take();
      s->k = St::For;
      lex_.expect_punct("(");
      scopes_.emplace_back();
      if (!lex_.is_punct(";"))
        s->init = peek_type() ? parse_decl_items() : parse_simple_stmt(false);
      lex_.expect_punct(";");
      if (!lex_.is_punct(";")) s->cond = parse_expr();
      lex_.expect_punct(";");
      if (!lex_.is_punct(")")) s->inc = parse_simple_stmt(true);
      lex_.expect_punct(")");
      s->body.push_back(parse_stmt());
      scopes_.pop_back();
      return s;
    }
    if (lex_.is_id("return")) {
      lex_.take();
      s->k = St::Return;
      if (!lex_.is_punct(";")) {
        s->rhs = parse_expr();
        coerce(s->rhs, fn_->ret, "return value");
      }
      lex_.expect_punct(";");
      return s;
    }
    if (lex_.is_id("goto")) {
      lex_.take();
      s->k = St::Goto;
      s->label = lex_.expect_id().s;
      lex_.expect_punct(";");
      return s;
    }
    if (lex_.is_id("break")) {
      lex_.take();
      lex_.expect_punct(";");
      s->k = St::Break;
      return s;
    }
    if (lex_.is_id("continue")) {
      lex_.take();
      lex_.expect_punct(";");
      s->k = St::Continue;
      return s;
    }
    // label?
    if (lex_.peek().t == Token::T::Id) {
      auto save = lex_.mark();
      Token id = lex_.take();
      if (lex_.is_punct(":")) {
        lex_.take();
        s->k = St::Label;
        s->label = id.s;
        s->body.push_back(parse_stmt());
        return s;
      }
      lex_.rewind(save);
    }
    s = parse_simple_stmt(false);
    lex_.expect_punct(";");
    return s;
  }

  StmtP parse_restrict_decl() {
    lex_.take();  // restrict
    std::string range = lex_.expect_id().s;
    auto rv = lookup(range);
    if (!rv) lex_.err("unknown restrict range " + range);
    TypeRef base = parse_base_type();
    lex_.expect_punct("*");
    std::string name = lex_.expect_id().s;
    const TypeRef& rt = fn_->vars[*rv].type;
    TypeRef elem = (rt.k == TypeRef::K::Array) ? *rt.elem : rt;
    if (!elem.same(base))
      lex_.err("restrict range " + range + " has element type " + elem.str() + ", pointer wants " +
               base.str());
    TypeRef pt;
    pt.k = TypeRef::K::Ptr;
    pt.elem = std::make_shared<TypeRef>(base);
    pt.range_var = *rv;
    auto s = std::make_unique<Stmt>();
    s->k = St::Decl;
    s->var = declare(name, pt);
    if (lex_.is_punct("=")) {
      lex_.take();
      s->rhs = parse_expr();
      coerce(s->rhs, pt, "pointer initializer");
      s->has_init = true;
    }
    lex_.expect_punct(";");
    return s;
  }

  StmtP parse_decl() {
    StmtP s = parse_decl_items();
    lex_.expect_punct(";");
    return s;
  }

  StmtP parse_decl_items() {
    TypeRef base = parse_base_type();
    auto block = std::make_unique<Stmt>();
    block->k = St::Block;
    while (true) {
      std::string name = lex_.expect_id().s;
      TypeRef t = base;
      if (lex_.is_punct("[")) {
        lex_.take();
        Token n = lex_.take();
        if (n.t != Token::T::Num) lex_.err("array size must be a literal");
        lex_.expect_punct("]");
        TypeRef arr;
        arr.k = TypeRef::K::Array;
        arr.elem = std::make_shared<TypeRef>(base);
        arr.count = u32(n.num);
        if (arr.count == 0) lex_.err("zero-length array");
        t = arr;
      }
      auto s = std::make_unique<Stmt>();
      s->k = St::Decl;
      s->var = declare(name, t);
      if (lex_.is_punct("=")) {
        lex_.take();
        if (t.k == TypeRef::K::Array) {
          parse_array_init(*s, t);
        } else {
          s->rhs = parse_expr();
          coerce(s->rhs, t, "initializer");
        }
        s->has_init = true;
      }
      block->body.push_back(std::move(s));
      if (lex_.is_punct(",")) { lex_.take(); continue; }
      break;
    }
    if (block->body.size() == 1) return std::move(block->body.front());
    return block;
  }

  void parse_array_init(Stmt& s, const TypeRef& t) {
    lex_.expect_punct("{");
    u32 next = 0;
    while (!lex_.is_punct("}")) {
      ArrayInit item;
      if (lex_.is_punct("[")) {
        lex_.take();
        Token a = lex_.take();
        if (a.t != Token::T::Num) lex_.err("designator must be a literal");
        item.from = u32(a.num);
        if (lex_.is_punct("...")) {
          lex_.take();
          Token b = lex_.take();
          if (b.t != Token::T::Num) lex_.err("designator must be a literal");
          item.to = u32(b.num);
        } else {
          item.to = item.from;
        }
        lex_.expect_punct("]");
        lex_.expect_punct("=");
        next = item.to + 1;
      } else {
        item.from = item.to = next++;
      }
      if (item.to >= t.count || item.from > item.to) lex_.err("initializer out of range");
      item.value = parse_expr();
      coerce(item.value, *t.elem, "array initializer");
      s.array_init.push_back(std::move(item));
      if (lex_.is_punct(",")) { lex_.take(); continue; }
      break;
    }
    lex_.expect_punct("}");
  }

  // Assignment, call, or ++/--; `inc_only` is the for-increment position.
  StmtP parse_simple_stmt(bool inc_only) {
    auto s = std::make_unique<Stmt>();
    if (lex_.is_punct("++") || lex_.is_punct("--")) {
      std::string op = lex_.take().s;
      ExprP lv = parse_unary();
      require_lvalue(*lv);
      s->k = St::Assign;
      s->rhs = binary(op == "++" ? "+" : "-", clone_expr(*lv), int_lit(1));
      s->lhs = std::move(lv);
      coerce(s->rhs, s->lhs->type, "increment");
      return s;
    }
    if (peek_type() || lex_.is_id("restrict")) lex_.err("declaration not allowed here");
    ExprP e = parse_expr_nocheck_assign();
    if (lex_.is_punct("=") || lex_.is_punct("+=") || lex_.is_punct("-=") ||
        lex_.is_punct("*=") || lex_.is_punct("/=") || lex_.is_punct("%=")) {
      std::string op = lex_.take().s;
      require_lvalue(*e);
      ExprP rhs = parse_expr();
      if (op != "=") rhs = binary(op.substr(0, 1), clone_expr(*e), std::move(rhs));
      s->k = St::Assign;
      coerce(rhs, e->type, "assignment");
      s->lhs = std::move(e);
      s->rhs = std::move(rhs);
      return s;
    }
    if (lex_.is_punct("++") || lex_.is_punct("--")) {
      std::string op = lex_.take().s;
      require_lvalue(*e);
      s->k = St::Assign;
      s->rhs = binary(op == "++" ? "+" : "-", clone_expr(*e), int_lit(1));
      coerce(s->rhs, e->type, "increment");
      s->lhs = std::move(e);
      return s;
    }
    if (e->k != Ex::Call) lex_.err("expression statement must be a call or assignment");
    s->k = St::ExprStmt;
    s->lhs = std::move(e);
    if (inc_only) {}
    return s;
  }

  void require_lvalue(const Expr& e) {
    if (e.k == Ex::Var) {
      if (!e.type.is_scalar()) lex_.err("cannot assign whole arrays/structs");
      return;
    }
    if (e.k == Ex::Index || e.k == Ex::Deref) {
      if (!e.type.is_scalar()) lex_.err("cannot assign whole structs");
      return;
    }
    if (e.k == Ex::Member) {
      if (!e.type.is_scalar()) lex_.err("cannot assign aggregate members");
      return;
    }
    lex_.err("not an assignable location");
  }

  // --- expressions ---

  ExprP int_lit(u64 v) {
    auto e = std::make_unique<Expr>();
    e->k = Ex::IntLit;
    e->lit = v;
    e->type = TypeRef::int_t();
    return e;
  }

  ExprP clone_expr(const Expr& e) {
    auto c = std::make_unique<Expr>();
    c->k = e.k;
    c->lit = e.lit;
    c->op = e.op;
    c->var = e.var;
    c->callee = e.callee;
    c->type = e.type;
    for (auto& k : e.kids) c->kids.push_back(clone_expr(*k));
    return c;
  }

  ExprP binary(const std::string& op, ExprP a, ExprP b) {
    auto e = std::make_unique<Expr>();
    e->k = Ex::Binary;
    e->op = op;
    e->kids.push_back(std::move(a));
    e->kids.push_back(std::move(b));
    type_binary(*e);
    return e;
  }

  // int widens to long implicitly; anything else must match exactly.
  void coerce(ExprP& e, const TypeRef& want, const char* what) {
    if (e->type.same(want)) return;
    if (e->type.is_int() && want.is_long()) {
      auto w = std::make_unique<Expr>();
      w->k = Ex::Unary;
      w->op = "(long)";
      w->type = TypeRef::long_t();
      w->kids.push_back(std::move(e));
      e = std::move(w);
      return;
    }
    lex_.err(std::string(what) + ": cannot convert " + e->type.str() + " to " + want.str());
  }

  void type_binary(Expr& e) {
    TypeRef &a = e.kids[0]->type, &b = e.kids[1]->type;
    const std::string& op = e.op;
    bool cmp = op == "==" || op == "!=" || op == "<" || op == ">" || op == "<=" || op == ">=";
    bool logical = op == "&&" || op == "||";
    if (logical) {
      if (!a.is_scalar() || !b.is_scalar()) lex_.err("logical operands must be scalar");
      e.type = TypeRef::int_t();
      return;
    }
    if (a.is_ptr() || b.is_ptr()) {
      if (cmp) {
        if (!a.same(b)) lex_.err("comparing incompatible pointers");
        e.type = TypeRef::int_t();
        return;
      }
      if (op == "+" || op == "-") {
        if (a.is_ptr() && b.is_int()) {
          e.type = a;
          return;
        }
        if (a.is_int() && b.is_ptr() && op == "+") {
          e.type = b;
          return;
        }
      }
      lex_.err("unsupported pointer arithmetic");
    }
    if (!a.is_scalar() || !b.is_scalar()) lex_.err("aggregate operands in arithmetic");
    bool lng = a.is_long() || b.is_long();
    if (lng) {
      coerce(e.kids[0], TypeRef::long_t(), "operand");
      coerce(e.kids[1], TypeRef::long_t(), "operand");
    }
    e.type = cmp ? TypeRef::int_t() : (lng ? TypeRef::long_t() : TypeRef::int_t());
  }

  ExprP parse_expr() { return parse_ternary(); }
  ExprP parse_expr_nocheck_assign() { return parse_ternary(); }

  ExprP parse_ternary() {
    ExprP c = parse_lor();
    if (!lex_.is_punct("?")) return c;
    lex_.take();
    auto e = std::make_unique<Expr>();
    e->k = Ex::Ternary;
    ExprP a = parse_expr();
    lex_.expect_punct(":");
    ExprP b = parse_ternary();
    if (!c->type.is_scalar()) lex_.err("ternary condition must be scalar");
    if (a->type.is_int() && b->type.is_long()) coerce(a, TypeRef::long_t(), "ternary");
    if (a->type.is_long() && b->type.is_int()) coerce(b, TypeRef::long_t(), "ternary");
    if (!a->type.same(b->type)) lex_.err("ternary arms have different types");
    e->type = a->type;
    e->kids.push_back(std::move(c));
    e->kids.push_back(std::move(a));
    e->kids.push_back(std::move(b));
    return e;
  }

  ExprP parse_lor() {
    ExprP a = parse_land();
    while (lex_.is_punct("||")) {
      lex_.take();
      a = binary("||", std::move(a), parse_land());
    }
    return a;
  }
  ExprP parse_land() {
    ExprP a = parse_eq();
    while (lex_.is_punct("&&")) {
      lex_.take();
      a = binary("&&", std::move(a), parse_eq());
    }
    return a;
  }
  ExprP parse_eq() {
    ExprP a = parse_rel();
    while (lex_.is_punct("==") || lex_.is_punct("!=")) {
      std::string op = lex_.take().s;
      a = binary(op, std::move(a), parse_rel());
    }
    return a;
  }
  ExprP parse_rel() {
    ExprP a = parse_addsub();
    while (lex_.is_punct("<") || lex_.is_punct(">") || lex_.is_punct("<=") ||
           lex_.is_punct(">=")) {
      std::string op = lex_.take().s;
      a = binary(op, std::move(a), parse_addsub());
    }
    return a;
  }
  ExprP parse_addsub() {
    ExprP a = parse_muldiv();
    while (lex_.is_punct("+") || lex_.is_punct("-")) {
      std::string op = lex_.take().s;
      a = binary(op, std::move(a), parse_muldiv());
    }
    return a;
  }
  ExprP parse_muldiv() {
    ExprP a = parse_unary();
    while (lex_.is_punct("*") || lex_.is_punct("/") || lex_.is_punct("%")) {
      std::string op = lex_.take().s;
      a = binary(op, std::move(a), parse_unary());
    }
    return a;
  }

  ExprP parse_unary() {
    if (lex_.is_punct("-") || lex_.is_punct("!") || lex_.is_punct("+")) {
      std::string op = lex_.take().s;
      ExprP k = parse_unary();
      if (op == "+") return k;
      auto e = std::make_unique<Expr>();
      e->k = Ex::Unary;
      e->op = op;
      if (!k->type.is_scalar()) lex_.err("unary operand must be scalar");
      e->type = (op == "!") ? TypeRef::int_t() : k->type;
      if (op == "-" && k->type.is_ptr()) lex_.err("cannot negate a pointer");
      e->kids.push_back(std::move(k));
      return e;
    }
    if (lex_.is_punct("*")) {
      lex_.take();
      ExprP k = parse_unary();
      if (!k->type.is_ptr()) lex_.err("dereference of non-pointer");
      auto e = std::make_unique<Expr>();
      e->k = Ex::Deref;
      e->type = *k->type.elem;
      e->kids.push_back(std::move(k));
      return e;
    }
    if (lex_.is_punct("&")) {
      lex_.take();
      ExprP k = parse_unary();
      if (k->k != Ex::Var && k->k != Ex::Index)
        lex_.err("can only take the address of a variable or array entry");
      if (k->k == Ex::Index && k->kids[0]->k != Ex::Var)
        lex_.err("address-of supports direct array indexing only");
      auto e = std::make_unique<Expr>();
      e->k = Ex::AddrOf;
      TypeRef pt;
      pt.k = TypeRef::K::Ptr;
      pt.elem = std::make_shared<TypeRef>(k->type);
      pt.range_var = (k->k == Ex::Var) ? k->var : k->kids[0]->var;
      e->type = pt;
      e->kids.push_back(std::move(k));
      return e;
    }
    return parse_postfix();
  }

  ExprP parse_postfix() {
    ExprP e = parse_primary();
    while (true) {
      if (lex_.is_punct("[")) {
        lex_.take();
        ExprP idx = parse_expr();
        lex_.expect_punct("]");
        if (!idx->type.is_int()) lex_.err("index must be int");
        auto n = std::make_unique<Expr>();
        if (e->type.k == TypeRef::K::Array) {
          n->k = Ex::Index;
          n->type = *e->type.elem;
        } else if (e->type.is_ptr()) {
          // p[i] is *(p + i)
          auto add = std::make_unique<Expr>();
          add->k = Ex::Binary;
          add->op = "+";
          add->type = e->type;
          add->kids.push_back(std::move(e));
          add->kids.push_back(std::move(idx));
          n->k = Ex::Deref;
          n->type = *add->type.elem;
          n->kids.push_back(std::move(add));
          e = std::move(n);
          continue;
        } else {
          lex_.err("indexing a non-array");
        }
        n->kids.push_back(std::move(e));
        n->kids.push_back(std::move(idx));
        e = std::move(n);
        continue;
      }
      if (lex_.is_punct(".") || lex_.is_punct("->")) {
        bool arrow = lex_.take().s == "->";
        std::string fname = lex_.expect_id().s;
        if (arrow) {
          if (!e->type.is_ptr()) lex_.err("-> on non-pointer");
          auto d = std::make_unique<Expr>();
          d->k = Ex::Deref;
          d->type = *e->type.elem;
          d->kids.push_back(std::move(e));
          e = std::move(d);
        }
        if (e->type.k != TypeRef::K::Struct) lex_.err("member access on non-struct");
        const StructField* f = e->type.sd->field(fname);
        if (!f) lex_.err("no field " + fname + " in " + e->type.str());
        auto n = std::make_unique<Expr>();
        n->k = Ex::Member;
        n->op = fname;
        n->type = f->type;
        n->kids.push_back(std::move(e));
        e = std::move(n);
        continue;
      }
      break;
    }
    return e;
  }

  ExprP parse_primary() {
    if (lex_.is_punct("(")) {
      lex_.take();
      ExprP e = parse_expr();
      lex_.expect_punct(")");
      return e;
    }
    Token t = lex_.take();
    if (t.t == Token::T::Num) {
      auto e = std::make_unique<Expr>();
      e->k = Ex::IntLit;
      e->lit = t.num;
      e->type = t.is_long ? TypeRef::long_t() : TypeRef::int_t();
      return e;
    }
    if (t.t != Token::T::Id) lex_.err("expected expression");
    if (lex_.is_punct("(")) {
      // call; functions may be referenced before their definition only if
      // already parsed (no forward declarations in the subset)
      const FuncDef* callee = prog_->func(t.s);
      if (!callee && fn_ && fn_->name == t.s) callee = fn_;  // direct recursion
      if (!callee) lex_.err("call to unknown function " + t.s);
      auto e = std::make_unique<Expr>();
      e->k = Ex::Call;
      e->op = t.s;
      e->callee = callee;
      e->type = callee->ret;
      lex_.take();
      size_t i = 0;
      if (!lex_.is_punct(")")) {
        while (true) {
          ExprP a = parse_expr();
          if (i >= callee->params.size()) lex_.err("too many arguments to " + t.s);
          coerce(a, callee->vars[callee->params[i]].type, "argument");
          e->kids.push_back(std::move(a));
          i++;
          if (lex_.is_punct(",")) { lex_.take(); continue; }
          break;
        }
      }
      lex_.expect_punct(")");
      if (i != callee->params.size()) lex_.err("too few arguments to " + t.s);
      return e;
    }
    auto v = lookup(t.s);
    if (!v) lex_.err("unknown variable " + t.s);
    auto e = std::make_unique<Expr>();
    e->k = Ex::Var;
    e->var = *v;
    e->type = fn_->vars[*v].type;
    return e;
  }

  // --- layout ---
  // Frame: [0]=ra save, params, locals in declaration order, spill slots.
  void layout(FuncDef& f) {
    u32 off = 0;
    f.ra_slot = off++;
    for (VarInfo& v : f.vars) {
      v.slot = off;
      off += v.type.size_slots();
    }
    f.spill_base = off;
    f.spill_count = 10;  // five temp pairs, two words each
    off += f.spill_count;
    f.frame_slots = off;
  }

  lang_detail::Lexer lex_;
  const std::string& src_;
  SourceProgram* prog_ = nullptr;
  FuncDef* fn_ = nullptr;
  std::vector<std::unordered_map<std::string, u32>> scopes_;
};

inline SourceProgram parse_source(const std::string& src) { return Parser(src).parse(); }

}  // namespace fxa
