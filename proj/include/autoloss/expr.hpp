#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "autoloss/ops.hpp"
#include "autoloss/rng.hpp"

namespace autoloss {

// DSL input symbols. X/Y/W feed classification losses (scores, one-hot labels,
// per-sample box quality); I/U/E feed regression losses (intersection, union,
// smallest enclosing-box area).
enum class InputSymbol : uint8_t { Score, Label, BoxWeight, Inter, Uni, Enclose };

const char* symbol_name(InputSymbol s);
Branch symbol_branch(InputSymbol s);
std::span<const InputSymbol> branch_symbols(Branch b);

class ExprError : public std::runtime_error {
 public:
  enum class Kind {
    Syntax,
    UnknownOperator,
    ArityMismatch,
    WrongBranchSymbol,
    DepthLimitExceeded,
    LimitExceeded,
    NodeNotFound,
  };

  ExprError(Kind kind, std::string message, size_t pos = npos);

  Kind kind() const { return kind_; }
  // byte offset into the parsed text; npos when not a parse-site error
  size_t pos() const { return pos_; }

  static constexpr size_t npos = static_cast<size_t>(-1);

 private:
  Kind kind_;
  size_t pos_;
};

enum class NodeKind : uint8_t { Input, Const, Unary, Binary };

struct Node {
  NodeKind kind;
  InputSymbol sym = InputSymbol::Score;  // Input
  int8_t cval = 0;                       // Const: 1, 2 or 3
  UnaryOp uop = UnaryOp::Neg;
  BinaryOp bop = BinaryOp::Add;
  int32_t a = -1, b = -1;                // child indices into the arena
};

struct ExprLimits {
  int max_nodes = 40;
  int max_depth = 10;  // nodes on the longest root-to-leaf path
};

// Immutable expression tree over a flat node arena. Construction validates
// branch purity, registry membership and limits; all edit operations return
// new trees. The arena holds exactly the reachable nodes.
class LossExpr {
 public:
  LossExpr() = default;

  // Takes an arena (possibly with unreachable nodes), compacts it and
  // validates. Throws ExprError on violations.
  static LossExpr make(std::vector<Node> arena, int32_t root, Branch branch,
                       const ExprLimits& limits = {});

  bool valid() const { return !nodes_.empty(); }
  Branch branch() const { return branch_; }
  int size() const { return static_cast<int>(nodes_.size()); }
  int depth() const { return depth_; }
  int32_t root() const { return root_; }
  const Node& node(int32_t id) const { return nodes_[static_cast<size_t>(id)]; }
  const std::vector<Node>& nodes() const { return nodes_; }

  // Stable across process runs and arena numbering; commutative operands
  // (Add, Mul) are order-normalized before hashing.
  uint64_t canonical_key() const { return key_; }

  bool contains(InputSymbol s) const;

 private:
  std::vector<Node> nodes_;
  int32_t root_ = -1;
  Branch branch_ = Branch::Classification;
  int depth_ = 0;
  uint64_t key_ = 0;
};

bool structurally_equal(const LossExpr& a, const LossExpr& b);

// Canonical capitalization, e.g. "Add(1,Neg(Div(I,U)))".
std::string print(const LossExpr& e);

// Parses the prefix-call grammar
//   Expr  := Ident '(' Expr (',' Expr)* ')' | Ident | Int
//   Ident := [A-Za-z][A-Za-z0-9]*     (case-insensitive)
//   Int   := '1' | '2' | '3'
// Whitespace is ignored. Unknown identifiers are rejected.
LossExpr parse(std::string_view text, Branch branch, const ExprLimits& limits = {});

// New tree with the subtree rooted at node_id replaced. Throws NodeNotFound
// for a bad id, LimitExceeded/DepthLimitExceeded when the result violates
// the limits.
LossExpr replace_subtree(const LossExpr& e, int32_t node_id, const LossExpr& sub,
                         const ExprLimits& limits = {});

// Extracts the subtree rooted at node_id as its own expression. Limit-free:
// a subtree of a valid tree is always within limits.
LossExpr subtree(const LossExpr& e, int32_t node_id);

// Declared sampling distribution of random_expr; tests check empirical draw
// frequencies against exactly these numbers.
inline constexpr double kGenLeafP = 0.30;
inline constexpr double kGenUnaryP = 0.35;
inline constexpr double kGenBinaryP = 0.35;
// leaf order: the branch's three input symbols, then constants 1, 2, 3
inline constexpr std::array<double, 6> kLeafWeightsCls = {0.35, 0.175, 0.175,
                                                          0.10, 0.10, 0.10};
inline constexpr std::array<double, 6> kLeafWeightsReg = {0.25, 0.25, 0.20,
                                                          0.10, 0.10, 0.10};

struct LeafSpec {
  bool is_input;
  InputSymbol sym;
  int8_t cval;
};
std::array<LeafSpec, 6> leaf_table(Branch b);
std::span<const double, 6> leaf_weights(Branch b);

// Records every free draw the generator makes, including draws inside trees
// that were later redrawn, so empirical frequencies can be tested against the
// declared distribution.
struct GenTrace {
  long kind_leaf = 0, kind_unary = 0, kind_binary = 0;  // full 3-way table
  long kind2_leaf = 0, kind2_unary = 0;                 // budget == 2 table
  long forced_leaf = 0;                                 // budget/depth forced
  std::array<long, 6> leaf_counts{};
  std::array<long, kUnaryOpCount> unary_counts{};
  std::array<long, kBinaryOpCount> binary_counts{};
  long trees = 0;
  long redraws = 0;
};

// Uniformly samples operators and leaves per the declared distribution,
// subject to arity, the size budget and the depth limit. Trees that never
// read the prediction input (X, or any of I/U/E) are redrawn: a loss that
// ignores the prediction cannot train anything.
LossExpr random_expr(Branch branch, Rng& rng, int size_budget,
                     const ExprLimits& limits = {}, GenTrace* trace = nullptr);
LossExpr random_expr(Branch branch, uint64_t seed, int size_budget,
                     const ExprLimits& limits = {}, GenTrace* trace = nullptr);

// Single random leaf drawn from the declared leaf distribution.
LossExpr random_leaf(Branch branch, Rng& rng, GenTrace* trace = nullptr);

}  // namespace autoloss
