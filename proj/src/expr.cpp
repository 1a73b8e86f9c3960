#include "autoloss/expr.hpp"

#include <algorithm>
#include <cctype>
#include <functional>

namespace autoloss {

namespace {

constexpr std::array<const char*, 6> kSymbolNames = {"X", "Y", "W", "I", "U", "E"};

constexpr std::array<InputSymbol, 3> kClsSymbols = {
    InputSymbol::Score, InputSymbol::Label, InputSymbol::BoxWeight};
constexpr std::array<InputSymbol, 3> kRegSymbols = {
    InputSymbol::Inter, InputSymbol::Uni, InputSymbol::Enclose};

bool lookup_symbol(std::string_view name, InputSymbol& out) {
  if (name.size() != 1) return false;
  switch (std::tolower(static_cast<unsigned char>(name[0]))) {
    case 'x': out = InputSymbol::Score; return true;
    case 'y': out = InputSymbol::Label; return true;
    case 'w': out = InputSymbol::BoxWeight; return true;
    case 'i': out = InputSymbol::Inter; return true;
    case 'u': out = InputSymbol::Uni; return true;
    case 'e': out = InputSymbol::Enclose; return true;
  }
  return false;
}

}  // namespace

const char* symbol_name(InputSymbol s) {
  return kSymbolNames[static_cast<size_t>(s)];
}

Branch symbol_branch(InputSymbol s) {
  return static_cast<size_t>(s) < 3 ? Branch::Classification : Branch::Regression;
}

std::span<const InputSymbol> branch_symbols(Branch b) {
  if (b == Branch::Classification) return kClsSymbols;
  return kRegSymbols;
}

ExprError::ExprError(Kind kind, std::string message, size_t pos)
    : std::runtime_error(pos == npos ? message
                                     : message + " (at position " +
                                           std::to_string(pos) + ")"),
      kind_(kind),
      pos_(pos) {}

// ---------------------------------------------------------------------------
// LossExpr construction

namespace {

struct Measured {
  int size;
  int depth;
};

Measured measure(const std::vector<Node>& arena, int32_t root) {
  // iterative depth-first walk; (node, depth-so-far)
  int count = 0, depth = 0;
  std::vector<std::pair<int32_t, int>> stack{{root, 1}};
  while (!stack.empty()) {
    auto [id, d] = stack.back();
    stack.pop_back();
    const Node& n = arena[static_cast<size_t>(id)];
    ++count;
    depth = std::max(depth, d);
    if (n.kind == NodeKind::Unary) stack.push_back({n.a, d + 1});
    if (n.kind == NodeKind::Binary) {
      stack.push_back({n.a, d + 1});
      stack.push_back({n.b, d + 1});
    }
  }
  return {count, depth};
}

uint64_t node_key(const std::vector<Node>& arena, int32_t id) {
  const Node& n = arena[static_cast<size_t>(id)];
  switch (n.kind) {
    case NodeKind::Input:
      return mix64(0x9ae16a3b2f90404full, static_cast<uint64_t>(n.sym) + 1);
    case NodeKind::Const:
      return mix64(0xc3a5c85c97cb3127ull, static_cast<uint64_t>(n.cval));
    case NodeKind::Unary: {
      uint64_t c = node_key(arena, n.a);
      return mix64(mix64(0xb492b66fbe98f273ull, static_cast<uint64_t>(n.uop)), c);
    }
    case NodeKind::Binary: {
      uint64_t ka = node_key(arena, n.a);
      uint64_t kb = node_key(arena, n.b);
      if (n.bop == BinaryOp::Add || n.bop == BinaryOp::Mul) {
        if (ka > kb) std::swap(ka, kb);
      }
      uint64_t h = mix64(0x6c62272e07bb0142ull, static_cast<uint64_t>(n.bop));
      return mix64(mix64(h, ka), kb);
    }
  }
  return 0;
}

}  // namespace

LossExpr LossExpr::make(std::vector<Node> arena, int32_t root, Branch branch,
                        const ExprLimits& limits) {
  if (root < 0 || static_cast<size_t>(root) >= arena.size())
    throw ExprError(ExprError::Kind::NodeNotFound, "root node out of range");

  // compact: keep reachable nodes only, children before parents
  std::vector<Node> out;
  out.reserve(arena.size());
  std::function<int32_t(int32_t)> copy = [&](int32_t id) -> int32_t {
    Node n = arena[static_cast<size_t>(id)];
    if (n.kind == NodeKind::Unary) n.a = copy(n.a);
    if (n.kind == NodeKind::Binary) {
      n.a = copy(n.a);
      n.b = copy(n.b);
    }
    out.push_back(n);
    return static_cast<int32_t>(out.size() - 1);
  };
  int32_t new_root = copy(root);

  for (const Node& n : out) {
    switch (n.kind) {
      case NodeKind::Input:
        if (symbol_branch(n.sym) != branch)
          throw ExprError(ExprError::Kind::WrongBranchSymbol,
                          std::string("symbol ") + symbol_name(n.sym) +
                              " is not available in the " + branch_name(branch) +
                              " branch");
        break;
      case NodeKind::Const:
        if (n.cval < 1 || n.cval > 3)
          throw ExprError(ExprError::Kind::Syntax, "constant must be 1, 2 or 3");
        break;
      case NodeKind::Unary:
        if (!in_registry(n.uop, branch))
          throw ExprError(ExprError::Kind::UnknownOperator,
                          std::string("operator ") + op_name(n.uop) +
                              " is not available in the " + branch_name(branch) +
                              " branch");
        break;
      case NodeKind::Binary:
        if (!in_registry(n.bop, branch))
          throw ExprError(ExprError::Kind::UnknownOperator,
                          std::string("operator ") + op_name(n.bop) +
                              " is not available in the " + branch_name(branch) +
                              " branch");
        break;
    }
  }

  Measured m = measure(out, new_root);
  if (m.size > limits.max_nodes)
    throw ExprError(ExprError::Kind::LimitExceeded,
                    "expression has " + std::to_string(m.size) +
                        " nodes, limit is " + std::to_string(limits.max_nodes));
  if (m.depth > limits.max_depth)
    throw ExprError(ExprError::Kind::DepthLimitExceeded,
                    "expression depth " + std::to_string(m.depth) +
                        " exceeds limit " + std::to_string(limits.max_depth));

  LossExpr e;
  e.nodes_ = std::move(out);
  e.root_ = new_root;
  e.branch_ = branch;
  e.depth_ = m.depth;
  e.key_ = node_key(e.nodes_, e.root_);
  return e;
}

bool LossExpr::contains(InputSymbol s) const {
  for (const Node& n : nodes_)
    if (n.kind == NodeKind::Input && n.sym == s) return true;
  return false;
}

bool structurally_equal(const LossExpr& a, const LossExpr& b) {
  if (a.branch() != b.branch() || a.size() != b.size()) return false;
  std::function<bool(int32_t, int32_t)> eq = [&](int32_t ia, int32_t ib) {
    const Node& na = a.node(ia);
    const Node& nb = b.node(ib);
    if (na.kind != nb.kind) return false;
    switch (na.kind) {
      case NodeKind::Input: return na.sym == nb.sym;
      case NodeKind::Const: return na.cval == nb.cval;
      case NodeKind::Unary: return na.uop == nb.uop && eq(na.a, nb.a);
      case NodeKind::Binary:
        return na.bop == nb.bop && eq(na.a, nb.a) && eq(na.b, nb.b);
    }
    return false;
  };
  return eq(a.root(), b.root());
}

// ---------------------------------------------------------------------------
// printing

namespace {

void print_node(const LossExpr& e, int32_t id, std::string& out) {
  const Node& n = e.node(id);
  switch (n.kind) {
    case NodeKind::Input:
      out += symbol_name(n.sym);
      return;
    case NodeKind::Const:
      out += static_cast<char>('0' + n.cval);
      return;
    case NodeKind::Unary:
      out += op_name(n.uop);
      out += '(';
      print_node(e, n.a, out);
      out += ')';
      return;
    case NodeKind::Binary:
      out += op_name(n.bop);
      out += '(';
      print_node(e, n.a, out);
      out += ',';
      print_node(e, n.b, out);
      out += ')';
      return;
  }
}

}  // namespace

std::string print(const LossExpr& e) {
  std::string out;
  out.reserve(static_cast<size_t>(e.size()) * 6);
  print_node(e, e.root(), out);
  return out;
}

// ---------------------------------------------------------------------------
// parsing

namespace {

struct Token {
  enum class Kind { Ident, Int, LParen, RParen, Comma, End };
  Kind kind;
  std::string_view text;
  size_t pos;
};

class Lexer {
 public:
  explicit Lexer(std::string_view text) : text_(text) {}

  Token next() {
    while (i_ < text_.size() &&
           std::isspace(static_cast<unsigned char>(text_[i_])))
      ++i_;
    if (i_ >= text_.size()) return {Token::Kind::End, "", i_};
    size_t start = i_;
    char c = text_[i_];
    if (c == '(') { ++i_; return {Token::Kind::LParen, "(", start}; }
    if (c == ')') { ++i_; return {Token::Kind::RParen, ")", start}; }
    if (c == ',') { ++i_; return {Token::Kind::Comma, ",", start}; }
    if (std::isdigit(static_cast<unsigned char>(c))) {
      while (i_ < text_.size() &&
             std::isdigit(static_cast<unsigned char>(text_[i_])))
        ++i_;
      return {Token::Kind::Int, text_.substr(start, i_ - start), start};
    }
    if (std::isalpha(static_cast<unsigned char>(c))) {
      while (i_ < text_.size() &&
             std::isalnum(static_cast<unsigned char>(text_[i_])))
        ++i_;
      return {Token::Kind::Ident, text_.substr(start, i_ - start), start};
    }
    throw ExprError(ExprError::Kind::Syntax,
                    std::string("unexpected character '") + c + "'", start);
  }

 private:
  std::string_view text_;
  size_t i_ = 0;
};

class Parser {
 public:
  Parser(std::string_view text, Branch branch)
      : lexer_(text), branch_(branch), tok_(lexer_.next()) {}

  int32_t parse_expr() {
    if (tok_.kind == Token::Kind::Int) {
      if (tok_.text.size() != 1 || tok_.text[0] < '1' || tok_.text[0] > '3')
        throw ExprError(ExprError::Kind::Syntax,
                        "constant must be 1, 2 or 3, got '" +
                            std::string(tok_.text) + "'",
                        tok_.pos);
      Node n;
      n.kind = NodeKind::Const;
      n.cval = static_cast<int8_t>(tok_.text[0] - '0');
      advance();
      return push(n);
    }
    if (tok_.kind != Token::Kind::Ident)
      throw ExprError(ExprError::Kind::Syntax,
                      "expected an operator, input symbol or constant",
                      tok_.pos);

    Token ident = tok_;
    advance();

    if (tok_.kind != Token::Kind::LParen) {
      // bare identifier: must be an input symbol
      InputSymbol sym;
      if (lookup_symbol(ident.text, sym)) {
        if (symbol_branch(sym) != branch_)
          throw ExprError(ExprError::Kind::WrongBranchSymbol,
                          "symbol " + std::string(symbol_name(sym)) +
                              " is not available in the " +
                              branch_name(branch_) + " branch",
                          ident.pos);
        Node n;
        n.kind = NodeKind::Input;
        n.sym = sym;
        return push(n);
      }
      UnaryOp u;
      BinaryOp b;
      if (lookup_unary(ident.text, u) || lookup_binary(ident.text, b))
        throw ExprError(ExprError::Kind::ArityMismatch,
                        "operator " + std::string(ident.text) +
                            " requires arguments",
                        ident.pos);
      throw ExprError(ExprError::Kind::UnknownOperator,
                      "unknown identifier '" + std::string(ident.text) + "'",
                      ident.pos);
    }

    // call form
    advance();  // consume '('
    std::vector<int32_t> args;
    args.push_back(parse_expr());
    while (tok_.kind == Token::Kind::Comma) {
      advance();
      args.push_back(parse_expr());
    }
    if (tok_.kind != Token::Kind::RParen)
      throw ExprError(ExprError::Kind::Syntax, "expected ',' or ')'", tok_.pos);
    advance();

    UnaryOp u;
    if (lookup_unary(ident.text, u)) {
      if (!in_registry(u, branch_))
        throw ExprError(ExprError::Kind::UnknownOperator,
                        "operator " + std::string(op_name(u)) +
                            " is not available in the " + branch_name(branch_) +
                            " branch",
                        ident.pos);
      if (args.size() != 1)
        throw ExprError(ExprError::Kind::ArityMismatch,
                        "operator " + std::string(op_name(u)) + " takes 1 " +
                            "argument, got " + std::to_string(args.size()),
                        ident.pos);
      Node n;
      n.kind = NodeKind::Unary;
      n.uop = u;
      n.a = args[0];
      return push(n);
    }
    BinaryOp b;
    if (lookup_binary(ident.text, b)) {
      if (!in_registry(b, branch_))
        throw ExprError(ExprError::Kind::UnknownOperator,
                        "operator " + std::string(op_name(b)) +
                            " is not available in the " + branch_name(branch_) +
                            " branch",
                        ident.pos);
      if (args.size() != 2)
        throw ExprError(ExprError::Kind::ArityMismatch,
                        "operator " + std::string(op_name(b)) + " takes 2 " +
                            "arguments, got " + std::to_string(args.size()),
                        ident.pos);
      Node n;
      n.kind = NodeKind::Binary;
      n.bop = b;
      n.a = args[0];
      n.b = args[1];
      return push(n);
    }
    InputSymbol sym;
    if (lookup_symbol(ident.text, sym))
      throw ExprError(ExprError::Kind::ArityMismatch,
                      "input symbol " + std::string(symbol_name(sym)) +
                          " takes no arguments",
                      ident.pos);
    throw ExprError(ExprError::Kind::UnknownOperator,
                    "unknown identifier '" + std::string(ident.text) + "'",
                    ident.pos);
  }

  void expect_end() {
    if (tok_.kind != Token::Kind::End)
      throw ExprError(ExprError::Kind::Syntax, "unexpected trailing input",
                      tok_.pos);
  }

  std::vector<Node> take_arena() { return std::move(arena_); }

 private:
  void advance() { tok_ = lexer_.next(); }

  int32_t push(const Node& n) {
    arena_.push_back(n);
    return static_cast<int32_t>(arena_.size() - 1);
  }

  Lexer lexer_;
  Branch branch_;
  Token tok_;
  std::vector<Node> arena_;
};

}  // namespace

LossExpr parse(std::string_view text, Branch branch, const ExprLimits& limits) {
  Parser p(text, branch);
  int32_t root = p.parse_expr();
  p.expect_end();
  return LossExpr::make(p.take_arena(), root, branch, limits);
}

// ---------------------------------------------------------------------------
// structural edits

LossExpr replace_subtree(const LossExpr& e, int32_t node_id, const LossExpr& sub,
                         const ExprLimits& limits) {
  if (node_id < 0 || node_id >= e.size())
    throw ExprError(ExprError::Kind::NodeNotFound,
                    "node " + std::to_string(node_id) + " is out of range");
  if (e.branch() != sub.branch())
    throw ExprError(ExprError::Kind::WrongBranchSymbol,
                    "replacement comes from a different branch");

  std::vector<Node> arena = e.nodes();
  int32_t offset = static_cast<int32_t>(arena.size());
  for (Node n : sub.nodes()) {
    if (n.kind == NodeKind::Unary) n.a += offset;
    if (n.kind == NodeKind::Binary) {
      n.a += offset;
      n.b += offset;
    }
    arena.push_back(n);
  }
  int32_t sub_root = sub.root() + offset;

  int32_t root = e.root();
  if (node_id == root) {
    root = sub_root;
  } else {
    for (Node& n : arena) {
      if (n.kind == NodeKind::Unary && n.a == node_id) n.a = sub_root;
      if (n.kind == NodeKind::Binary) {
        if (n.a == node_id) n.a = sub_root;
        if (n.b == node_id) n.b = sub_root;
      }
    }
  }
  return LossExpr::make(std::move(arena), root, e.branch(), limits);
}

LossExpr subtree(const LossExpr& e, int32_t node_id) {
  if (node_id < 0 || node_id >= e.size())
    throw ExprError(ExprError::Kind::NodeNotFound,
                    "node " + std::to_string(node_id) + " is out of range");
  ExprLimits loose{e.size(), e.depth()};
  return LossExpr::make(e.nodes(), node_id, e.branch(), loose);
}

// ---------------------------------------------------------------------------
// random generation

std::array<LeafSpec, 6> leaf_table(Branch b) {
  std::array<LeafSpec, 6> t{};
  auto syms = branch_symbols(b);
  for (int i = 0; i < 3; ++i) t[static_cast<size_t>(i)] = {true, syms[static_cast<size_t>(i)], 0};
  for (int i = 0; i < 3; ++i)
    t[static_cast<size_t>(3 + i)] = {false, InputSymbol::Score, static_cast<int8_t>(i + 1)};
  return t;
}

std::span<const double, 6> leaf_weights(Branch b) {
  if (b == Branch::Classification) return kLeafWeightsCls;
  return kLeafWeightsReg;
}

namespace {

Node make_leaf_node(const LeafSpec& spec) {
  Node n;
  if (spec.is_input) {
    n.kind = NodeKind::Input;
    n.sym = spec.sym;
  } else {
    n.kind = NodeKind::Const;
    n.cval = spec.cval;
  }
  return n;
}

class Generator {
 public:
  Generator(Branch branch, Rng& rng, const ExprLimits& limits, GenTrace* trace)
      : branch_(branch),
        rng_(rng),
        limits_(limits),
        trace_(trace),
        leaves_(leaf_table(branch)),
        leaf_w_(leaf_weights(branch)) {}

  int32_t gen(int budget, int depth) {
    bool depth_capped = depth >= limits_.max_depth;
    if (budget <= 1 || depth_capped) {
      if (trace_) ++trace_->forced_leaf;
      return leaf();
    }
    if (budget == 2) {
      double r = rng_.uniform() * (kGenLeafP + kGenUnaryP);
      if (r < kGenLeafP) {
        if (trace_) ++trace_->kind2_leaf;
        return leaf();
      }
      if (trace_) ++trace_->kind2_unary;
      return unary(budget, depth);
    }
    double r = rng_.uniform();
    if (r < kGenLeafP) {
      if (trace_) ++trace_->kind_leaf;
      return leaf();
    }
    if (r < kGenLeafP + kGenUnaryP) {
      if (trace_) ++trace_->kind_unary;
      return unary(budget, depth);
    }
    if (trace_) ++trace_->kind_binary;
    return binary(budget, depth);
  }

  std::vector<Node> take_arena() { return std::move(arena_); }

 private:
  int32_t leaf() {
    size_t i = rng_.weighted(leaf_w_);
    if (trace_) ++trace_->leaf_counts[i];
    arena_.push_back(make_leaf_node(leaves_[i]));
    return static_cast<int32_t>(arena_.size() - 1);
  }

  int32_t unary(int budget, int depth) {
    auto reg = unary_registry(branch_);
    UnaryOp op = reg[rng_.below(reg.size())];
    if (trace_) ++trace_->unary_counts[static_cast<size_t>(op)];
    Node n;
    n.kind = NodeKind::Unary;
    n.uop = op;
    n.a = gen(budget - 1, depth + 1);
    arena_.push_back(n);
    return static_cast<int32_t>(arena_.size() - 1);
  }

  int32_t binary(int budget, int depth) {
    auto reg = binary_registry(branch_);
    BinaryOp op = reg[rng_.below(reg.size())];
    if (trace_) ++trace_->binary_counts[static_cast<size_t>(op)];
    int rem = budget - 1;  // at least 2 here
    int left = static_cast<int>(rng_.range(1, rem - 1));
    Node n;
    n.kind = NodeKind::Binary;
    n.bop = op;
    n.a = gen(left, depth + 1);
    n.b = gen(rem - left, depth + 1);
    arena_.push_back(n);
    return static_cast<int32_t>(arena_.size() - 1);
  }

  Branch branch_;
  Rng& rng_;
  ExprLimits limits_;
  GenTrace* trace_;
  std::array<LeafSpec, 6> leaves_;
  std::span<const double, 6> leaf_w_;
  std::vector<Node> arena_;
};

bool reads_prediction(const LossExpr& e) {
  if (e.branch() == Branch::Classification) return e.contains(InputSymbol::Score);
  return e.contains(InputSymbol::Inter) || e.contains(InputSymbol::Uni) ||
         e.contains(InputSymbol::Enclose);
}

}  // namespace

LossExpr random_leaf(Branch branch, Rng& rng, GenTrace* trace) {
  auto table = leaf_table(branch);
  size_t i = rng.weighted(leaf_weights(branch));
  if (trace) ++trace->leaf_counts[i];
  return LossExpr::make({make_leaf_node(table[i])}, 0, branch);
}

LossExpr random_expr(Branch branch, Rng& rng, int size_budget,
                     const ExprLimits& limits, GenTrace* trace) {
  if (size_budget < 1) size_budget = 1;
  size_budget = std::min(size_budget, limits.max_nodes);

  for (int attempt = 0; attempt < 50; ++attempt) {
    Generator g(branch, rng, limits, trace);
    int32_t root = g.gen(size_budget, 1);
    LossExpr e = LossExpr::make(g.take_arena(), root, branch, limits);
    if (trace) ++trace->trees;
    if (reads_prediction(e)) return e;
    if (trace) ++trace->redraws;
  }

  // Pathological streak: force the prediction symbol onto a uniformly chosen
  // leaf of the last attempt's shape by regenerating once more and patching.
  Generator g(branch, rng, limits, trace);
  int32_t root = g.gen(size_budget, 1);
  std::vector<Node> arena = g.take_arena();
  if (trace) ++trace->trees;
  std::vector<size_t> leaf_ids;
  for (size_t i = 0; i < arena.size(); ++i)
    if (arena[i].kind != NodeKind::Unary && arena[i].kind != NodeKind::Binary)
      leaf_ids.push_back(i);
  Node& n = arena[leaf_ids[rng.below(leaf_ids.size())]];
  n.kind = NodeKind::Input;
  n.cval = 0;
  n.sym = branch == Branch::Classification
              ? InputSymbol::Score
              : branch_symbols(branch)[rng.below(3)];
  return LossExpr::make(std::move(arena), root, branch, limits);
}

LossExpr random_expr(Branch branch, uint64_t seed, int size_budget,
                     const ExprLimits& limits, GenTrace* trace) {
  Rng rng(seed);
  return random_expr(branch, rng, size_budget, limits, trace);
}

}  // namespace autoloss
