#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "autoloss/expr.hpp"
#include "autoloss/ops.hpp"

namespace autoloss {

class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};

class TapeConsumedError : public std::runtime_error {
 public:
  TapeConsumedError() : std::runtime_error("tape was already consumed by backward") {}
};

class ContextError : public std::invalid_argument {
 public:
  explicit ContextError(const std::string& m) : std::invalid_argument(m) {}
};

enum class Rank : uint8_t { Scalar, Vector, Matrix };

// Dense float64 value: scalar, vector[B] or row-major matrix[BxC].
class Tensor {
 public:
  Tensor() : rank_(Rank::Scalar), rows_(1), cols_(1), data_(1, 0.0) {}

  static Tensor scalar(double v) {
    Tensor t;
    t.data_[0] = v;
    return t;
  }
  static Tensor vector(std::vector<double> v) {
    Tensor t;
    t.rank_ = Rank::Vector;
    t.rows_ = static_cast<int>(v.size());
    t.cols_ = 1;
    t.data_ = std::move(v);
    return t;
  }
  static Tensor matrix(int rows, int cols, std::vector<double> v) {
    Tensor t;
    t.rank_ = Rank::Matrix;
    t.rows_ = rows;
    t.cols_ = cols;
    t.data_ = std::move(v);
    return t;
  }
  static Tensor zeros_like(const Tensor& o) {
    Tensor t;
    t.rank_ = o.rank_;
    t.rows_ = o.rows_;
    t.cols_ = o.cols_;
    t.data_.assign(o.data_.size(), 0.0);
    return t;
  }

  Rank rank() const { return rank_; }
  int rows() const { return rows_; }
  int cols() const { return cols_; }
  size_t numel() const { return data_.size(); }
  bool same_shape(const Tensor& o) const {
    return rank_ == o.rank_ && rows_ == o.rows_ && cols_ == o.cols_;
  }

  double& operator[](size_t i) { return data_[i]; }
  double operator[](size_t i) const { return data_[i]; }
  double& at(int r, int c) { return data_[static_cast<size_t>(r) * static_cast<size_t>(cols_) + static_cast<size_t>(c)]; }
  double at(int r, int c) const { return data_[static_cast<size_t>(r) * static_cast<size_t>(cols_) + static_cast<size_t>(c)]; }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  std::string shape_str() const;

 private:
  Rank rank_;
  int rows_, cols_;
  std::vector<double> data_;
};

// Bound inputs for one evaluation. Classification binds X: matrix[BxC],
// Y: matrix[BxC] with {0,1} entries and row sums <= 1 (one-hot, or the binary
// 1x1 form), W: vector[B] or matrix[Bx1]. Regression binds I/U/E: vector[B]
// with 0 <= i <= u <= e and u, e > 0.
class EvalContext {
 public:
  static EvalContext classification(Tensor x, Tensor y, Tensor w);
  static EvalContext regression(Tensor i, Tensor u, Tensor e);

  Branch branch() const { return branch_; }
  int batch() const { return batch_; }
  bool has(InputSymbol s) const { return bound_[static_cast<size_t>(s)].has_value(); }
  const Tensor& get(InputSymbol s) const;

 private:
  Branch branch_ = Branch::Classification;
  int batch_ = 1;
  std::array<std::optional<Tensor>, 6> bound_;
};

using GradMap = std::map<InputSymbol, Tensor>;

// Result of one forward pass. Repeated identical subtrees share one tape slot
// (hash-consing on operator + child slot ids); adjoints accumulate additively
// at shared slots.
class Evaluation {
 public:
  // batch-mean loss (matrix roots reduce rows by mean first)
  double value() const { return value_; }
  // per-sample losses, length = ctx batch
  const std::vector<double>& per_sample() const { return per_sample_; }

  // One shot per forward pass; throws TapeConsumedError afterwards.
  // Returns an entry for every requested symbol; zero tensors for symbols the
  // expression never reads.
  GradMap backward(std::span<const InputSymbol> wrt);

  size_t tape_size() const { return entries_.size(); }

 private:
  friend Evaluation forward(const LossExpr&, const EvalContext&);

  struct Entry {
    NodeKind kind;
    UnaryOp uop = UnaryOp::Neg;
    BinaryOp bop = BinaryOp::Add;
    InputSymbol sym = InputSymbol::Score;
    int32_t a = -1, b = -1;
    Tensor value;
  };

  std::vector<Entry> entries_;
  int32_t root_ = -1;
  int batch_ = 1;
  double value_ = 0.0;
  std::vector<double> per_sample_;
  std::array<int32_t, 6> input_entry_{-1, -1, -1, -1, -1, -1};
  std::array<Tensor, 6> input_binding_;
  bool consumed_ = false;
};

// Evaluates the expression over the context. Throws ShapeError on
// incompatible operand shapes (Dot requires two equal matrices; element-wise
// broadcasting covers equal shapes, scalar-vs-any and vector[B]-vs-
// matrix[BxC]). Non-finite values never throw; they propagate.
Evaluation forward(const LossExpr& e, const EvalContext& ctx);

}  // namespace autoloss
