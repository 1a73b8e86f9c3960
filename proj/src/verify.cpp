#include "autoloss/verify.hpp"

#include <chrono>
#include <cmath>

#include "autoloss/box.hpp"
#include "json.hpp"

namespace autoloss {

namespace {

constexpr double kSlack = 1e-9;
constexpr double kFlatGradient = 1e-3;
constexpr std::array<double, 3> kAnchors = {-2.0, 0.0, 2.0};
constexpr std::array<double, 2> kTails = {20.0, 30.0};

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr std::array<std::array<double, 2>, 8> kDirs = {{{1, 0},
                                                         {0, 1},
                                                         {-1, 0},
                                                         {0, -1},
                                                         {kInvSqrt2, kInvSqrt2},
                                                         {kInvSqrt2, -kInvSqrt2},
                                                         {-kInvSqrt2, kInvSqrt2},
                                                         {-kInvSqrt2, -kInvSqrt2}}};

bool all_finite(const Tensor& t) {
  for (size_t k = 0; k < t.numel(); ++k)
    if (!std::isfinite(t[k])) return false;
  return true;
}

bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

// forward + backward with finiteness checks; per_sample copied out
bool probe(const LossExpr& e, const EvalContext& ctx,
           std::vector<double>* per_sample = nullptr) {
  Evaluation ev = forward(e, ctx);
  if (!std::isfinite(ev.value()) || !all_finite(ev.per_sample())) return false;
  if (per_sample) *per_sample = ev.per_sample();
  auto syms = e.branch() == Branch::Classification
                  ? std::vector<InputSymbol>{InputSymbol::Score}
                  : std::vector<InputSymbol>{InputSymbol::Inter, InputSymbol::Uni,
                                             InputSymbol::Enclose};
  GradMap g = ev.backward(syms);
  for (const auto& [sym, grad] : g)
    if (!all_finite(grad)) return false;
  return true;
}

void require_branch(const LossExpr& e, Branch b, const char* what) {
  if (e.branch() != b)
    throw ContextError(std::string(what) + " applies to the " + branch_name(b) +
                       " branch only");
}

Box unit_target() { return {0, 0, 1, 1}; }

}  // namespace

std::vector<double> score_sweep_grid() {
  std::vector<double> g(1001);
  for (int k = 0; k <= 1000; ++k) g[static_cast<size_t>(k)] = -10.0 + 20.0 * k / 1000.0;
  return g;
}

std::span<const double> anchor_scores() { return kAnchors; }
std::span<const double> tail_scores() { return kTails; }

std::vector<double> translation_grid() {
  std::vector<double> g;
  for (int k = 0; k <= 20; ++k) g.push_back(0.25 * k);
  return g;
}

std::span<const std::array<double, 2>> translation_dirs() { return kDirs; }

std::vector<double> scale_grid() {
  std::vector<double> g(21);
  for (int k = 0; k <= 20; ++k)
    g[static_cast<size_t>(k)] = std::exp(std::log(0.2) * (1.0 - k / 10.0));
  g[10] = 1.0;
  return g;
}

EvalContext cls_sweep_context(bool sweep_positive, double anchor) {
  const std::vector<double> grid = score_sweep_grid();
  const int b = static_cast<int>(grid.size());
  std::vector<double> x(static_cast<size_t>(b) * 2), y(x.size(), 0.0);
  for (int r = 0; r < b; ++r) {
    const double t = grid[static_cast<size_t>(r)];
    x[static_cast<size_t>(r) * 2 + 0] = sweep_positive ? t : anchor;
    x[static_cast<size_t>(r) * 2 + 1] = sweep_positive ? anchor : t;
    y[static_cast<size_t>(r) * 2 + 0] = 1.0;
  }
  return EvalContext::classification(Tensor::matrix(b, 2, std::move(x)),
                                     Tensor::matrix(b, 2, std::move(y)),
                                     Tensor::vector(std::vector<double>(static_cast<size_t>(b), 1.0)));
}

EvalContext cls_tail_context(double score) {
  return EvalContext::classification(Tensor::matrix(1, 2, {score, 0.0}),
                                     Tensor::matrix(1, 2, {1.0, 0.0}),
                                     Tensor::vector({1.0}));
}

EvalContext reg_translation_context(const std::array<double, 2>& dir) {
  const Box g = unit_target();
  std::vector<double> iv, uv, ev;
  for (double t : translation_grid()) {
    Box p{g.x1 + t * dir[0], g.y1 + t * dir[1], g.x2 + t * dir[0], g.y2 + t * dir[1]};
    Overlap o = overlap(p, g);
    iv.push_back(o.i);
    uv.push_back(o.u);
    ev.push_back(o.e);
  }
  return EvalContext::regression(Tensor::vector(std::move(iv)),
                                 Tensor::vector(std::move(uv)),
                                 Tensor::vector(std::move(ev)));
}

EvalContext reg_scale_context() {
  const Box g = unit_target();
  std::vector<double> iv, uv, ev;
  for (double s : scale_grid()) {
    Box p = Box::from_center(0.5, 0.5, s, s);
    Overlap o = overlap(p, g);
    iv.push_back(o.i);
    uv.push_back(o.u);
    ev.push_back(o.e);
  }
  return EvalContext::regression(Tensor::vector(std::move(iv)),
                                 Tensor::vector(std::move(uv)),
                                 Tensor::vector(std::move(ev)));
}

bool check_validness(const LossExpr& e) {
  try {
    if (e.branch() == Branch::Classification) {
      for (double a : kAnchors) {
        if (!probe(e, cls_sweep_context(true, a))) return false;
        if (!probe(e, cls_sweep_context(false, a))) return false;
      }
      for (double t : kTails)
        if (!probe(e, cls_tail_context(t))) return false;
    } else {
      for (const auto& d : kDirs)
        if (!probe(e, reg_translation_context(d))) return false;
      if (!probe(e, reg_scale_context())) return false;
    }
  } catch (const ShapeError&) {
    return false;
  }
  return true;
}

bool check_monotonicity(const LossExpr& e) {
  require_branch(e, Branch::Classification, "monotonicity");
  try {
    std::vector<double> c;
    for (double a : kAnchors) {
      // loss must not rise while the true-class score rises
      Evaluation up = forward(e, cls_sweep_context(true, a));
      c = up.per_sample();
      if (!all_finite(c)) return false;
      for (size_t k = 1; k < c.size(); ++k)
        if (c[k] - c[k - 1] > kSlack) return false;
      // and must not fall while the other-class score rises
      Evaluation down = forward(e, cls_sweep_context(false, a));
      c = down.per_sample();
      if (!all_finite(c)) return false;
      for (size_t k = 1; k < c.size(); ++k)
        if (c[k] - c[k - 1] < -kSlack) return false;
    }
  } catch (const ShapeError&) {
    return false;
  }
  return true;
}

bool check_convergence(const LossExpr& e) {
  require_branch(e, Branch::Classification, "convergence");
  try {
    double prev = 0.0;
    for (size_t t = 0; t < kTails.size(); ++t) {
      Evaluation ev = forward(e, cls_tail_context(kTails[t]));
      if (!std::isfinite(ev.value())) return false;
      GradMap g = ev.backward(std::array{InputSymbol::Score});
      const double slope = g.at(InputSymbol::Score).at(0, 0);
      if (!std::isfinite(slope)) return false;
      if (std::fabs(slope) >= kFlatGradient) return false;
      if (t > 0 && std::fabs(slope) > std::fabs(prev) + kSlack) return false;
      prev = slope;
    }
  } catch (const ShapeError&) {
    return false;
  }
  return true;
}

bool check_distance_consistency(const LossExpr& e) {
  require_branch(e, Branch::Regression, "distance consistency");
  try {
    for (const auto& d : kDirs) {
      Evaluation ev = forward(e, reg_translation_context(d));
      const std::vector<double>& c = ev.per_sample();
      if (!all_finite(c)) return false;
      for (size_t k = 1; k < c.size(); ++k)
        if (c[k] - c[k - 1] < -kSlack) return false;
    }
    Evaluation ev = forward(e, reg_scale_context());
    const std::vector<double>& c = ev.per_sample();
    if (!all_finite(c)) return false;
    const double at_true_scale = c[10];
    for (double v : c)
      if (v < at_true_scale - kSlack) return false;
  } catch (const ShapeError&) {
    return false;
  }
  return true;
}

std::string VerificationReport::to_json() const {
  nlohmann::json j;
  auto put = [&](const char* key, const std::optional<bool>& v) {
    if (v.has_value())
      j[key] = *v;
    else
      j[key] = nullptr;
  };
  put("validness", validness);
  put("monotonicity", monotonicity);
  put("convergence", convergence);
  put("distance_consistency", distance_consistency);
  j["overall"] = overall;
  j["millis"] = millis;
  return j.dump();
}

VerificationReport verify(const LossExpr& e) {
  const auto start = std::chrono::steady_clock::now();
  VerificationReport r;
  r.validness = check_validness(e);
  if (*r.validness) {
    if (e.branch() == Branch::Classification) {
      r.monotonicity = check_monotonicity(e);
      r.convergence = check_convergence(e);
      r.overall = *r.monotonicity && *r.convergence;
    } else {
      r.distance_consistency = check_distance_consistency(e);
      r.overall = *r.distance_consistency;
    }
  }
  r.millis = std::chrono::duration<double, std::milli>(
                 std::chrono::steady_clock::now() - start)
                 .count();
  return r;
}

}  // namespace autoloss
