#include "autoloss/zoo.hpp"

#include <cmath>

namespace autoloss {

namespace {

constexpr const char* kBReg =
    "Div("
    "Add(Add(Add(Add(Mul(3,Mul(E,U)),Mul(Mul(3,Add(2,2)),E)),Mul(3,I)),Mul(3,U)),"
    "Mul(3,Add(3,3))),"
    "Add(Add(Add(Add(Add(Neg(Mul(3,Mul(E,U))),Mul(I,U)),Mul(U,U)),"
    "Neg(Mul(Mul(3,Add(2,3)),E))),Mul(Add(2,3),I)),Mul(Add(2,3),U)))";

constexpr ZooEntry kEntries[] = {
    {"ce", Branch::Classification, ZooRole::Baseline,
     "Neg(Dot(Y,Log(Softmax(X))))"},
    {"bce", Branch::Classification, ZooRole::Baseline,
     "Neg(Add(Mul(Y,Log(Sig(X))),Mul(Sub(1,Y),Log(Sub(1,Sig(X))))))"},
    {"fl", Branch::Classification, ZooRole::Baseline,
     "Neg(Add(Mul(Mul(Y,Sub(1,Sig(X))),Log(Sig(X))),"
     "Mul(Mul(Sub(1,Y),Sig(X)),Log(Sub(1,Sig(X))))))"},
    {"iou", Branch::Regression, ZooRole::Baseline, "Add(1,Neg(Div(I,U)))"},
    {"cei", Branch::Classification, ZooRole::Initial,
     "Neg(Dot(Mul(W,Y),Log(Softmax(X))))"},
    {"fli", Branch::Classification, ZooRole::Initial,
     "Neg(Mul(W,Add(Mul(Mul(Y,Sub(1,Sig(X))),Log(Sig(X))),"
     "Mul(Mul(Sub(1,Y),Sig(X)),Log(Sub(1,Sig(X)))))))"},
    {"giou", Branch::Regression, ZooRole::Initial,
     "Add(Add(1,Neg(Div(I,U))),Div(Sub(E,U),E))"},
    {"searched_a_cls", Branch::Classification, ZooRole::Searched,
     "Neg(Dot(Mul(Add(1,Sin(W)),Y),Log(Softmax(X))))"},
    {"searched_a_reg", Branch::Regression, ZooRole::Searched,
     "Add(Add(1,Neg(Div(I,U))),Add(1,Neg(Div(Add(I,2),E))))"},
    {"searched_b_cls", Branch::Classification, ZooRole::Searched,
     "Neg(Add(Mul(Mul(Mul(W,Y),Add(1,Erf(Sig(Sub(1,Y))))),Log(Sig(X))),"
     "Mul(Mul(Sub(Gd(X),Mul(W,Y)),Sub(Sig(X),Mul(W,Y))),Log(Sub(1,Sig(X))))))"},
    {"searched_b_reg", Branch::Regression, ZooRole::Searched, kBReg},
};

// ---------------------------------------------------------------------------
// closed forms, written as straight loops with std math only

constexpr double kEps = 1e-12;

double rsig(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double rgd(double x) { return 2.0 * std::atan(std::tanh(0.5 * x)) / M_PI + 0.5; }
double rerf(double x) { return 0.5 * (std::erf(x) + 1.0); }

// mean over rows of -scale_r * sum_c y_rc * log softmax_rc(x)
double ref_ce_family(const EvalContext& ctx, double (*scale)(double w)) {
  const Tensor& x = ctx.get(InputSymbol::Score);
  const Tensor& y = ctx.get(InputSymbol::Label);
  const Tensor& w = ctx.get(InputSymbol::BoxWeight);
  const int b = x.rows(), c = x.cols();
  double total = 0.0;
  for (int r = 0; r < b; ++r) {
    double mx = x.at(r, 0);
    for (int j = 1; j < c; ++j) mx = std::max(mx, x.at(r, j));
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += std::exp(x.at(r, j) - mx);
    double picked = 0.0;
    for (int j = 0; j < c; ++j)
      picked += y.at(r, j) * (x.at(r, j) - mx - std::log(z));
    total += -scale(w[static_cast<size_t>(r)]) * picked;
  }
  return total / b;
}

// mean over all elements of a per-element binary-style term
template <typename F>
double ref_elementwise(const EvalContext& ctx, F elem) {
  const Tensor& x = ctx.get(InputSymbol::Score);
  const Tensor& y = ctx.get(InputSymbol::Label);
  const Tensor& w = ctx.get(InputSymbol::BoxWeight);
  const int b = x.rows(), c = x.cols();
  double total = 0.0;
  for (int r = 0; r < b; ++r)
    for (int j = 0; j < c; ++j)
      total += elem(x.at(r, j), y.at(r, j), w[static_cast<size_t>(r)]);
  return total / (static_cast<double>(b) * c);
}

template <typename F>
double ref_reg(const EvalContext& ctx, F per) {
  const Tensor& iv = ctx.get(InputSymbol::Inter);
  const Tensor& uv = ctx.get(InputSymbol::Uni);
  const Tensor& ev = ctx.get(InputSymbol::Enclose);
  double total = 0.0;
  for (int r = 0; r < iv.rows(); ++r)
    total += per(iv[static_cast<size_t>(r)], uv[static_cast<size_t>(r)],
                 ev[static_cast<size_t>(r)]);
  return total / iv.rows();
}

}  // namespace

const char* role_name(ZooRole r) {
  switch (r) {
    case ZooRole::Baseline: return "baseline";
    case ZooRole::Initial: return "initial";
    case ZooRole::Searched: return "searched";
  }
  return "?";
}

std::span<const ZooEntry> zoo_entries() { return kEntries; }

const ZooEntry& zoo_entry(std::string_view name) {
  for (const ZooEntry& e : kEntries)
    if (name == e.name) return e;
  throw UnknownLossError(name);
}

LossExpr zoo_expr(std::string_view name) {
  const ZooEntry& e = zoo_entry(name);
  return parse(e.dsl, e.branch, kZooLimits);
}

double reference_value(std::string_view name, const EvalContext& ctx) {
  const ZooEntry& entry = zoo_entry(name);
  if (ctx.branch() != entry.branch)
    throw ContextError("context branch does not match the loss branch");

  if (name == "ce")
    return ref_ce_family(ctx, [](double) { return 1.0; });
  if (name == "cei")
    return ref_ce_family(ctx, [](double w) { return w; });
  if (name == "searched_a_cls")
    return ref_ce_family(ctx, [](double w) { return 1.0 + std::sin(w); });

  if (name == "bce")
    return ref_elementwise(ctx, [](double x, double y, double) {
      return -(y * std::log(rsig(x)) + (1.0 - y) * std::log(1.0 - rsig(x)));
    });
  if (name == "fl")
    return ref_elementwise(ctx, [](double x, double y, double) {
      double s = rsig(x);
      return -(y * (1.0 - s) * std::log(s) + (1.0 - y) * s * std::log(1.0 - s));
    });
  if (name == "fli")
    return ref_elementwise(ctx, [](double x, double y, double w) {
      double s = rsig(x);
      return -w * (y * (1.0 - s) * std::log(s) + (1.0 - y) * s * std::log(1.0 - s));
    });
  if (name == "searched_b_cls")
    return ref_elementwise(ctx, [](double x, double y, double w) {
      double s = rsig(x);
      double wy = w * y;
      double t1 = wy * (1.0 + rerf(rsig(1.0 - y))) * std::log(s);
      double t2 = (rgd(x) - wy) * (s - wy) * std::log(1.0 - s);
      return -(t1 + t2);
    });

  if (name == "iou")
    return ref_reg(ctx, [](double i, double u, double) { return 1.0 - i / (u + kEps); });
  if (name == "giou")
    return ref_reg(ctx, [](double i, double u, double e) {
      return (1.0 - i / (u + kEps)) + (e - u) / (e + kEps);
    });
  if (name == "searched_a_reg")
    return ref_reg(ctx, [](double i, double u, double e) {
      return (1.0 - i / (u + kEps)) + (1.0 - (i + 2.0) / (e + kEps));
    });
  // searched_b_reg
  return ref_reg(ctx, [](double i, double u, double e) {
    double num = 3.0 * e * u + 12.0 * e + 3.0 * i + 3.0 * u + 18.0;
    double den = -3.0 * e * u + i * u + u * u - 15.0 * e + 5.0 * i + 5.0 * u;
    return num / (den + kEps);
  });
}

}  // namespace autoloss
