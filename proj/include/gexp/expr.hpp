#pragma once

// Small arithmetic expressions over t, x1, x2, y, z for coefficients in
// experiment configs.
//
//   expr   := term (('+' | '-') term)*
//   term   := unary (('*' | '/') unary)*
//   unary  := '-' unary | power
//   power  := atom ('^' unary)?
//   atom   := number | name | name '(' expr (',' expr)* ')' | '(' expr ')'
//
// Names: t, x1, x2, y, z, x (alias of x1), pi. Functions: cos, sin, exp,
// log, sqrt, abs, tanh (one argument), min, max (two arguments).

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <initializer_list>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gexp/gcore.hpp"

namespace gexp::expr {

class ParseError : public InvalidInput {
 public:
  ParseError(const std::string& source, std::size_t pos, const std::string& what)
      : InvalidInput(detail::concat("expression '", source, "': ", what, " at position ", pos)), pos_(pos) {}
  std::size_t position() const noexcept { return pos_; }

 private:
  std::size_t pos_;
};

enum class Var : std::uint8_t { t, x1, x2, y, z };
inline constexpr std::array<std::string_view, 5> kVarNames{"t", "x1", "x2", "y", "z"};

struct Vars {
  double t = 0.0, x1 = 0.0, x2 = 0.0, y = 0.0, z = 0.0;
};

class Expr {
 public:
  Expr() : Expr(0.0) {}
  explicit Expr(double c) : source_(format_number(c)) {
    code_.push_back({Op::constant, c});
    depth_ = 1;
  }

  static Expr parse(std::string source) {
    Expr e;
    e.source_ = std::move(source);
    e.code_.clear();
    Parser p{e.source_, e.code_};
    p.parse();
    e.depth_ = p.max_depth;
    for (const auto& ins : e.code_)
      if (ins.op == Op::load) e.uses_ |= 1u << static_cast<unsigned>(ins.value);
    return e;
  }

  double operator()(const Vars& v) const noexcept {
    std::array<double, kStack> small{};
    std::vector<double> big;
    double* s = small.data();
    if (depth_ > kStack) {
      big.resize(static_cast<std::size_t>(depth_));
      s = big.data();
    }
    int top = -1;
    for (const auto& ins : code_) {
      switch (ins.op) {
        case Op::constant: s[++top] = ins.value; break;
        case Op::load: s[++top] = load(v, static_cast<Var>(static_cast<int>(ins.value))); break;
        case Op::neg: s[top] = -s[top]; break;
        case Op::add: --top; s[top] += s[top + 1]; break;
        case Op::sub: --top; s[top] -= s[top + 1]; break;
        case Op::mul: --top; s[top] *= s[top + 1]; break;
        case Op::div: --top; s[top] /= s[top + 1]; break;
        case Op::pow: --top; s[top] = std::pow(s[top], s[top + 1]); break;
        case Op::min: --top; s[top] = std::min(s[top], s[top + 1]); break;
        case Op::max: --top; s[top] = std::max(s[top], s[top + 1]); break;
        case Op::cos: s[top] = std::cos(s[top]); break;
        case Op::sin: s[top] = std::sin(s[top]); break;
        case Op::exp: s[top] = std::exp(s[top]); break;
        case Op::log: s[top] = std::log(s[top]); break;
        case Op::sqrt: s[top] = std::sqrt(s[top]); break;
        case Op::abs: s[top] = std::abs(s[top]); break;
        case Op::tanh: s[top] = std::tanh(s[top]); break;
      }
    }
    return s[0];
  }

  const std::string& source() const noexcept { return source_; }
  bool uses(Var v) const noexcept { return (uses_ >> static_cast<unsigned>(v)) & 1u; }
  bool is_constant() const noexcept { return uses_ == 0; }

  /// Throws unless only variables in `allowed` appear; `where` names the
  /// config field.
  void require_only(std::initializer_list<Var> allowed, const std::string& where) const {
    unsigned mask = 0;
    for (Var v : allowed) mask |= 1u << static_cast<unsigned>(v);
    for (unsigned i = 0; i < kVarNames.size(); ++i)
      detail::require(!((uses_ & ~mask) >> i & 1u),
                      detail::concat(where, ": variable '", kVarNames[i], "' is not allowed here"));
  }

 private:
  enum class Op : std::uint8_t {
    constant, load, neg, add, sub, mul, div, pow, min, max, cos, sin, exp, log, sqrt, abs, tanh
  };
  struct Instr {
    Op op;
    double value = 0.0;
  };
  static constexpr int kStack = 32;

  static double load(const Vars& v, Var which) noexcept {
    switch (which) {
      case Var::t: return v.t;
      case Var::x1: return v.x1;
      case Var::x2: return v.x2;
      case Var::y: return v.y;
      case Var::z: return v.z;
    }
    return 0.0;
  }

  static std::string format_number(double c) {
    std::array<char, 32> buf{};
    const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), c);
    return {buf.data(), r.ptr};
  }

  struct Parser {
    const std::string& src;
    std::vector<Instr>& out;
    std::size_t pos = 0;
    int depth = 0;
    int max_depth = 0;

    [[noreturn]] void fail(const std::string& what, std::size_t at) const { throw ParseError(src, at, what); }

    void emit(Op op, double value = 0.0) {
      out.push_back({op, value});
      if (op == Op::constant || op == Op::load) {
        max_depth = std::max(max_depth, ++depth);
      } else if (op == Op::add || op == Op::sub || op == Op::mul || op == Op::div || op == Op::pow ||
                 op == Op::min || op == Op::max) {
        --depth;
      }
    }

    void skip() {
      while (pos < src.size() && std::isspace(static_cast<unsigned char>(src[pos]))) ++pos;
    }
    bool accept(char c) {
      skip();
      if (pos < src.size() && src[pos] == c) {
        ++pos;
        return true;
      }
      return false;
    }
    void expect(char c) {
      if (!accept(c)) fail(detail::concat("expected '", c, "'"), pos);
    }

    void parse() {
      skip();
      if (pos == src.size()) fail("empty expression", pos);
      expression();
      skip();
      if (pos != src.size()) fail(detail::concat("unexpected '", src[pos], "'"), pos);
    }

    void expression() {
      term();
      for (;;) {
        if (accept('+')) {
          term();
          emit(Op::add);
        } else if (accept('-')) {
          term();
          emit(Op::sub);
        } else {
          return;
        }
      }
    }

    void term() {
      unary();
      for (;;) {
        if (accept('*')) {
          unary();
          emit(Op::mul);
        } else if (accept('/')) {
          unary();
          emit(Op::div);
        } else {
          return;
        }
      }
    }

    void unary() {
      if (accept('-')) {
        unary();
        emit(Op::neg);
        return;
      }
      if (accept('+')) {
        unary();
        return;
      }
      power();
    }

    void power() {
      atom();
      if (accept('^')) {
        unary();
        emit(Op::pow);
      }
    }

    void atom() {
      skip();
      if (pos == src.size()) fail("unexpected end of expression", pos);
      const char c = src[pos];
      if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
        number();
      } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
        name();
      } else if (accept('(')) {
        expression();
        expect(')');
      } else {
        fail(detail::concat("unexpected '", c, "'"), pos);
      }
    }

    void number() {
      const std::size_t start = pos;
      const char* begin = src.c_str() + pos;
      char* end = nullptr;
      const double v = std::strtod(begin, &end);
      if (end == begin) fail("malformed number", start);
      pos += static_cast<std::size_t>(end - begin);
      if (!std::isfinite(v)) fail("number out of range", start);
      emit(Op::constant, v);
    }

    void name() {
      const std::size_t start = pos;
      while (pos < src.size() && (std::isalnum(static_cast<unsigned char>(src[pos])) || src[pos] == '_')) ++pos;
      const std::string id = src.substr(start, pos - start);
      static const std::array<std::pair<std::string_view, Op>, 7> unary_fns{{{"cos", Op::cos},
                                                                             {"sin", Op::sin},
                                                                             {"exp", Op::exp},
                                                                             {"log", Op::log},
                                                                             {"sqrt", Op::sqrt},
                                                                             {"abs", Op::abs},
                                                                             {"tanh", Op::tanh}}};
      for (const auto& [fn, op] : unary_fns) {
        if (id == fn) {
          expect('(');
          expression();
          expect(')');
          emit(op);
          return;
        }
      }
      if (id == "min" || id == "max") {
        expect('(');
        expression();
        expect(',');
        expression();
        expect(')');
        emit(id == "min" ? Op::min : Op::max);
        return;
      }
      if (id == "pi") {
        emit(Op::constant, 3.14159265358979323846);
        return;
      }
      if (id == "x") {
        emit(Op::load, static_cast<double>(Var::x1));
        return;
      }
      for (std::size_t i = 0; i < kVarNames.size(); ++i) {
        if (id == kVarNames[i]) {
          emit(Op::load, static_cast<double>(i));
          return;
        }
      }
      fail(detail::concat("unknown name '", id, "'"), start);
    }
  };

  std::string source_;
  std::vector<Instr> code_;
  int depth_ = 0;
  unsigned uses_ = 0;
};

}  // namespace gexp::expr
