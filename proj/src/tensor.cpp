#include "autoloss/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

namespace autoloss {

std::string Tensor::shape_str() const {
  switch (rank_) {
    case Rank::Scalar:
      return "scalar";
    case Rank::Vector:
      return "vector[" + std::to_string(rows_) + "]";
    case Rank::Matrix:
      return "matrix[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
  }
  return "?";
}

EvalContext EvalContext::classification(Tensor x, Tensor y, Tensor w) {
  if (x.rank() != Rank::Matrix) throw ContextError("X must be a matrix, got " + x.shape_str());
  if (y.rank() != Rank::Matrix || y.rows() != x.rows() || y.cols() != x.cols())
    throw ContextError("Y must match X shape " + x.shape_str() + ", got " + y.shape_str());
  const int b = x.rows();
  for (int r = 0; r < b; ++r) {
    double sum = 0.0;
    for (int c = 0; c < y.cols(); ++c) {
      const double v = y.at(r, c);
      if (v != 0.0 && v != 1.0) throw ContextError("Y entries must be 0 or 1");
      sum += v;
    }
    if (sum > 1.0) throw ContextError("Y rows must have at most one 1");
  }
  if (w.rank() == Rank::Matrix && w.cols() == 1) w = Tensor::vector(w.data());
  if (w.rank() != Rank::Vector || w.rows() != b)
    throw ContextError("W must be vector[" + std::to_string(b) + "], got " + w.shape_str());
  EvalContext ctx;
  ctx.branch_ = Branch::Classification;
  ctx.batch_ = b;
  ctx.bound_[static_cast<size_t>(InputSymbol::Score)] = std::move(x);
  ctx.bound_[static_cast<size_t>(InputSymbol::Label)] = std::move(y);
  ctx.bound_[static_cast<size_t>(InputSymbol::BoxWeight)] = std::move(w);
  return ctx;
}

EvalContext EvalContext::regression(Tensor i, Tensor u, Tensor e) {
  auto as_vec = [](Tensor& t, const char* name) {
    if (t.rank() == Rank::Scalar) t = Tensor::vector({t[0]});
    if (t.rank() != Rank::Vector)
      throw ContextError(std::string(name) + " must be a vector, got " + t.shape_str());
  };
  as_vec(i, "I");
  as_vec(u, "U");
  as_vec(e, "E");
  const int b = i.rows();
  if (u.rows() != b || e.rows() != b) throw ContextError("I, U, E must share one length");
  for (int r = 0; r < b; ++r) {
    if (!(i[r] >= 0.0 && i[r] <= u[r] && u[r] <= e[r]))
      throw ContextError("need 0 <= i <= u <= e per sample");
    if (!(u[r] > 0.0 && e[r] > 0.0)) throw ContextError("U and E must be positive");
  }
  EvalContext ctx;
  ctx.branch_ = Branch::Regression;
  ctx.batch_ = b;
  ctx.bound_[static_cast<size_t>(InputSymbol::Inter)] = std::move(i);
  ctx.bound_[static_cast<size_t>(InputSymbol::Uni)] = std::move(u);
  ctx.bound_[static_cast<size_t>(InputSymbol::Enclose)] = std::move(e);
  return ctx;
}

const Tensor& EvalContext::get(InputSymbol s) const {
  const auto& slot = bound_[static_cast<size_t>(s)];
  if (!slot) throw ContextError(std::string("symbol ") + symbol_name(s) + " is not bound");
  return *slot;
}

namespace {

struct Shape {
  Rank rank;
  int rows, cols;
};

Shape shape_of(const Tensor& t) { return {t.rank(), t.rows(), t.cols()}; }

// Element-wise broadcast target of two shapes, or throws.
Shape broadcast(const Shape& a, const Shape& b) {
  if (a.rank == b.rank) {
    if (a.rows != b.rows || a.cols != b.cols)
      throw ShapeError("mismatched operand dimensions");
    return a;
  }
  if (a.rank == Rank::Scalar) return b;
  if (b.rank == Rank::Scalar) return a;
  // vector vs matrix: expand the vector along columns
  const Shape& v = (a.rank == Rank::Vector) ? a : b;
  const Shape& m = (a.rank == Rank::Vector) ? b : a;
  if (v.rows != m.rows)
    throw ShapeError("vector length must equal matrix row count for broadcasting");
  return m;
}

// Flat index into an operand for target element (r, c).
inline size_t src_index(const Shape& s, int r, int c) {
  switch (s.rank) {
    case Rank::Scalar:
      return 0;
    case Rank::Vector:
      return static_cast<size_t>(r);
    case Rank::Matrix:
      return static_cast<size_t>(r) * static_cast<size_t>(s.cols) + static_cast<size_t>(c);
  }
  return 0;
}

Tensor make_shape(const Shape& s) {
  switch (s.rank) {
    case Rank::Scalar:
      return Tensor::scalar(0.0);
    case Rank::Vector:
      return Tensor::vector(std::vector<double>(static_cast<size_t>(s.rows), 0.0));
    case Rank::Matrix:
      return Tensor::matrix(s.rows, s.cols,
                            std::vector<double>(static_cast<size_t>(s.rows) * static_cast<size_t>(s.cols), 0.0));
  }
  return Tensor();
}

void softmax_row(const double* x, double* y, int n) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - mx);
    sum += y[i];
  }
  for (int i = 0; i < n; ++i) y[i] /= sum;
}

Tensor eval_unary(UnaryOp op, const Tensor& x) {
  if (op == UnaryOp::Softmax) {
    if (x.rank() == Rank::Scalar) return Tensor::scalar(1.0);
    Tensor y = Tensor::zeros_like(x);
    if (x.rank() == Rank::Vector) {
      softmax_row(x.data().data(), y.data().data(), x.rows());
    } else {
      for (int r = 0; r < x.rows(); ++r)
        softmax_row(x.data().data() + static_cast<size_t>(r) * x.cols(),
                    y.data().data() + static_cast<size_t>(r) * x.cols(), x.cols());
    }
    return y;
  }
  Tensor y = Tensor::zeros_like(x);
  for (size_t i = 0; i < x.numel(); ++i) y[i] = unary_value(op, x[i]);
  return y;
}

Tensor eval_binary(BinaryOp op, const Tensor& a, const Tensor& b) {
  if (op == BinaryOp::Dot) {
    if (a.rank() != Rank::Matrix || b.rank() != Rank::Matrix || !a.same_shape(b))
      throw ShapeError("Dot requires two matrices of identical shape");
    std::vector<double> out(static_cast<size_t>(a.rows()), 0.0);
    for (int r = 0; r < a.rows(); ++r) {
      double s = 0.0;
      for (int c = 0; c < a.cols(); ++c) s += a.at(r, c) * b.at(r, c);
      out[static_cast<size_t>(r)] = s;
    }
    return Tensor::vector(std::move(out));
  }
  const Shape sa = shape_of(a), sb = shape_of(b);
  const Shape st = broadcast(sa, sb);
  Tensor y = make_shape(st);
  const int rows = (st.rank == Rank::Scalar) ? 1 : st.rows;
  const int cols = (st.rank == Rank::Matrix) ? st.cols : 1;
  size_t k = 0;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c, ++k)
      y[k] = binary_value(op, a[src_index(sa, r, c)], b[src_index(sb, r, c)]);
  return y;
}

}  // namespace

Evaluation forward(const LossExpr& e, const EvalContext& ctx) {
  if (e.branch() != ctx.branch())
    throw ContextError("expression branch does not match context branch");

  Evaluation ev;
  ev.batch_ = ctx.batch();
  for (InputSymbol s : branch_symbols(ctx.branch()))
    ev.input_binding_[static_cast<size_t>(s)] = ctx.get(s);

  // key: (kind tag, payload, child a, child b) -> tape slot
  std::map<std::tuple<int, int, int32_t, int32_t>, int32_t> memo;
  std::vector<int32_t> slot_of(e.size(), -1);

  auto visit = [&](auto&& self, int node_id) -> int32_t {
    if (slot_of[static_cast<size_t>(node_id)] >= 0) return slot_of[static_cast<size_t>(node_id)];
    const Node& n = e.node(node_id);
    int32_t ca = -1, cb = -1;
    if (n.kind == NodeKind::Unary || n.kind == NodeKind::Binary) ca = self(self, n.a);
    if (n.kind == NodeKind::Binary) cb = self(self, n.b);

    int tag = 0, payload = 0;
    switch (n.kind) {
      case NodeKind::Input:
        tag = 0;
        payload = static_cast<int>(n.sym);
        break;
      case NodeKind::Const:
        tag = 1;
        payload = n.cval;
        break;
      case NodeKind::Unary:
        tag = 2;
        payload = static_cast<int>(n.uop);
        break;
      case NodeKind::Binary:
        tag = 3;
        payload = static_cast<int>(n.bop);
        break;
    }
    const auto key = std::make_tuple(tag, payload, ca, cb);
    if (auto it = memo.find(key); it != memo.end()) {
      slot_of[static_cast<size_t>(node_id)] = it->second;
      return it->second;
    }

    Evaluation::Entry entry;
    entry.kind = n.kind;
    entry.a = ca;
    entry.b = cb;
    switch (n.kind) {
      case NodeKind::Input:
        entry.sym = n.sym;
        entry.value = ctx.get(n.sym);
        break;
      case NodeKind::Const:
        entry.value = Tensor::scalar(static_cast<double>(n.cval));
        break;
      case NodeKind::Unary:
        entry.uop = n.uop;
        entry.value = eval_unary(n.uop, ev.entries_[static_cast<size_t>(ca)].value);
        break;
      case NodeKind::Binary:
        entry.bop = n.bop;
        entry.value = eval_binary(n.bop, ev.entries_[static_cast<size_t>(ca)].value,
                                  ev.entries_[static_cast<size_t>(cb)].value);
        break;
    }
    const int32_t slot = static_cast<int32_t>(ev.entries_.size());
    ev.entries_.push_back(std::move(entry));
    if (n.kind == NodeKind::Input) ev.input_entry_[static_cast<size_t>(n.sym)] = slot;
    memo.emplace(key, slot);
    slot_of[static_cast<size_t>(node_id)] = slot;
    return slot;
  };

  ev.root_ = visit(visit, e.root());
  const Tensor& rv = ev.entries_[static_cast<size_t>(ev.root_)].value;

  const int b = ev.batch_;
  switch (rv.rank()) {
    case Rank::Scalar:
      ev.value_ = rv[0];
      ev.per_sample_.assign(static_cast<size_t>(b), rv[0]);
      break;
    case Rank::Vector: {
      if (rv.rows() != b) throw ShapeError("root vector length must equal the batch size");
      ev.per_sample_ = rv.data();
      double s = 0.0;
      for (double v : ev.per_sample_) s += v;
      ev.value_ = s / static_cast<double>(b);
      break;
    }
    case Rank::Matrix: {
      if (rv.rows() != b) throw ShapeError("root matrix row count must equal the batch size");
      ev.per_sample_.assign(static_cast<size_t>(b), 0.0);
      double total = 0.0;
      for (int r = 0; r < rv.rows(); ++r) {
        double s = 0.0;
        for (int c = 0; c < rv.cols(); ++c) s += rv.at(r, c);
        ev.per_sample_[static_cast<size_t>(r)] = s / static_cast<double>(rv.cols());
        total += s;
      }
      ev.value_ = total / static_cast<double>(rv.numel());
      break;
    }
  }
  return ev;
}

GradMap Evaluation::backward(std::span<const InputSymbol> wrt) {
  if (consumed_) throw TapeConsumedError();
  consumed_ = true;

  std::vector<Tensor> adj(entries_.size());
  for (size_t i = 0; i < entries_.size(); ++i) adj[i] = Tensor::zeros_like(entries_[i].value);

  // Seed with d(mean over all elements)/d(root element).
  {
    Tensor& root_adj = adj[static_cast<size_t>(root_)];
    const Tensor& rv = entries_[static_cast<size_t>(root_)].value;
    const double seed = 1.0 / static_cast<double>(rv.numel());
    for (size_t i = 0; i < rv.numel(); ++i) root_adj[i] = seed;
  }

  for (size_t i = entries_.size(); i-- > 0;) {
    const Entry& en = entries_[i];
    const Tensor& g = adj[i];
    if (en.kind == NodeKind::Input || en.kind == NodeKind::Const) continue;

    if (en.kind == NodeKind::Unary) {
      const Tensor& x = entries_[static_cast<size_t>(en.a)].value;
      Tensor& gx = adj[static_cast<size_t>(en.a)];
      if (en.uop == UnaryOp::Softmax) {
        const Tensor& y = en.value;
        if (x.rank() == Rank::Scalar) continue;  // constant output, zero gradient
        const int cols = (x.rank() == Rank::Vector) ? x.rows() : x.cols();
        const int rows = (x.rank() == Rank::Vector) ? 1 : x.rows();
        for (int r = 0; r < rows; ++r) {
          const size_t base = static_cast<size_t>(r) * static_cast<size_t>(cols);
          double dot = 0.0;
          for (int c = 0; c < cols; ++c) dot += g[base + c] * y[base + c];
          for (int c = 0; c < cols; ++c) gx[base + c] += y[base + c] * (g[base + c] - dot);
        }
      } else {
        for (size_t k = 0; k < x.numel(); ++k) gx[k] += g[k] * unary_deriv(en.uop, x[k], en.value[k]);
      }
      continue;
    }

    // Binary
    const Tensor& a = entries_[static_cast<size_t>(en.a)].value;
    const Tensor& b = entries_[static_cast<size_t>(en.b)].value;
    Tensor& ga = adj[static_cast<size_t>(en.a)];
    Tensor& gb = adj[static_cast<size_t>(en.b)];

    if (en.bop == BinaryOp::Dot) {
      for (int r = 0; r < a.rows(); ++r) {
        const double gr = g[static_cast<size_t>(r)];
        for (int c = 0; c < a.cols(); ++c) {
          ga.at(r, c) += gr * b.at(r, c);
          gb.at(r, c) += gr * a.at(r, c);
        }
      }
      continue;
    }

    const Shape sa = shape_of(a), sb = shape_of(b);
    const Shape st = shape_of(en.value);
    const int rows = (st.rank == Rank::Scalar) ? 1 : st.rows;
    const int cols = (st.rank == Rank::Matrix) ? st.cols : 1;
    size_t k = 0;
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c, ++k) {
        const double gk = g[k];
        const size_t ia = src_index(sa, r, c), ib = src_index(sb, r, c);
        const double av = a[ia], bv = b[ib];
        switch (en.bop) {
          case BinaryOp::Add:
            ga[ia] += gk;
            gb[ib] += gk;
            break;
          case BinaryOp::Sub:
            ga[ia] += gk;
            gb[ib] -= gk;
            break;
          case BinaryOp::Mul:
            ga[ia] += gk * bv;
            gb[ib] += gk * av;
            break;
          case BinaryOp::Div: {
            const double den = bv + kDivEps;
            ga[ia] += gk / den;
            gb[ib] -= gk * av / (den * den);
            break;
          }
          case BinaryOp::Dot:
            break;
        }
      }
    }
  }

  GradMap out;
  for (InputSymbol s : wrt) {
    const int32_t slot = input_entry_[static_cast<size_t>(s)];
    if (slot >= 0) {
      out.emplace(s, adj[static_cast<size_t>(slot)]);
    } else {
      out.emplace(s, Tensor::zeros_like(input_binding_[static_cast<size_t>(s)]));
    }
  }
  return out;
}

}  // namespace autoloss
