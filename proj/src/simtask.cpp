#include "autoloss/simtask.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <ostream>

#include "autoloss/rng.hpp"

namespace autoloss {

namespace {

// stream tags; every derived stream is independent of evaluation order
constexpr uint64_t kTagClsData = 0x11;
constexpr uint64_t kTagRegData = 0x12;
constexpr uint64_t kTagClsInit = 0x13;
constexpr uint64_t kTagBatches = 0x21;

constexpr int kTotal = kVerifySplit + kTrainSplit + kValSplit;

double sq_dist(const double* a, const double* b, int n) {
  double s = 0;
  for (int k = 0; k < n; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return s;
}

}  // namespace

ClsDataset make_cls_dataset(uint64_t seed) {
  Rng rng = Rng::derive(seed, 0, kTagClsData);
  ClsDataset d;
  d.centers.resize(static_cast<size_t>(kClsClasses) * kClsDim);
  for (int c = 0; c < kClsClasses; ++c) {
    double* mine = d.centers.data() + static_cast<size_t>(c) * kClsDim;
    for (;;) {
      for (int k = 0; k < kClsDim; ++k)
        mine[k] = rng.uniform(-kClsCenterRange, kClsCenterRange);
      bool far = true;
      for (int p = 0; p < c; ++p) {
        const double* other = d.centers.data() + static_cast<size_t>(p) * kClsDim;
        if (sq_dist(mine, other, kClsDim) < kClsCenterMinDist * kClsCenterMinDist)
          far = false;
      }
      if (far) break;
    }
  }
  d.features.resize(static_cast<size_t>(kTotal) * kClsDim);
  d.labels.resize(kTotal);
  for (int r = 0; r < kTotal; ++r) {
    const int label = r % kClsClasses;  // splits start at multiples of 4
    d.labels[static_cast<size_t>(r)] = label;
    const double* center = d.centers.data() + static_cast<size_t>(label) * kClsDim;
    double* row = d.features.data() + static_cast<size_t>(r) * kClsDim;
    for (int k = 0; k < kClsDim; ++k) row[k] = center[k] + kClsSigma * rng.normal();
  }
  return d;
}

RegDataset make_reg_dataset(uint64_t seed) {
  Rng rng = Rng::derive(seed, 0, kTagRegData);
  RegDataset d;
  d.anchors.reserve(kTotal);
  d.targets.reserve(kTotal);
  for (int r = 0; r < kTotal; ++r) {
    for (;;) {
      const double tw = rng.uniform(0.15, 0.4), th = rng.uniform(0.15, 0.4);
      const double tcx = rng.uniform(0.3, 0.7), tcy = rng.uniform(0.3, 0.7);
      Box target = Box::from_center(tcx, tcy, tw, th);
      // systematic offset plus noise: the regressor has a real bias to learn
      const double acx = tcx + kRegAnchorShiftX + kRegJitterShift * rng.normal();
      const double acy = tcy + kRegAnchorShiftY + kRegJitterShift * rng.normal();
      const double aw = tw * kRegAnchorScale * std::exp(kRegJitterLogSize * rng.normal());
      const double ah = th * kRegAnchorScale * std::exp(kRegJitterLogSize * rng.normal());
      Box anchor = Box::from_center(acx, acy, aw, ah);
      const double overlap_q = iou(anchor, target);
      const bool inside = anchor.x1 >= 0 && anchor.y1 >= 0 && anchor.x2 <= 1 &&
                          anchor.y2 <= 1;
      if (overlap_q >= 0.1 && overlap_q <= 0.9 && inside && aw >= 0.02 && ah >= 0.02) {
        d.targets.push_back(target);
        d.anchors.push_back(anchor);
        break;
      }
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// classification training

namespace {

struct ClsModel {
  std::array<double, static_cast<size_t>(kClsDim) * kClsClasses> w;
  std::array<double, kClsClasses> b;

  bool finite() const {
    for (double v : w)
      if (!std::isfinite(v)) return false;
    for (double v : b)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

ClsModel init_cls_model(uint64_t seed) {
  Rng rng = Rng::derive(seed, 0, kTagClsInit);
  ClsModel m;
  for (double& v : m.w) v = 0.01 * rng.normal();
  for (double& v : m.b) v = 0.01 * rng.normal();
  return m;
}

void cls_logits(const ClsModel& m, const ClsDataset& d, std::span<const int> rows,
                std::vector<double>& out) {
  out.assign(rows.size() * kClsClasses, 0.0);
  for (size_t r = 0; r < rows.size(); ++r) {
    const double* f = d.features.data() + static_cast<size_t>(rows[r]) * kClsDim;
    double* o = out.data() + r * kClsClasses;
    for (int c = 0; c < kClsClasses; ++c) {
      double s = m.b[static_cast<size_t>(c)];
      for (int k = 0; k < kClsDim; ++k)
        s += f[k] * m.w[static_cast<size_t>(k) * kClsClasses + static_cast<size_t>(c)];
      o[c] = s;
    }
  }
}

double cls_accuracy(const ClsModel& m, const ClsDataset& d, int start, int n) {
  std::vector<int> rows(static_cast<size_t>(n));
  std::iota(rows.begin(), rows.end(), start);
  std::vector<double> logits;
  cls_logits(m, d, rows, logits);
  int hits = 0;
  for (int r = 0; r < n; ++r) {
    const double* o = logits.data() + static_cast<size_t>(r) * kClsClasses;
    int best = 0;  // first maximum wins
    for (int c = 1; c < kClsClasses; ++c)
      if (o[c] > o[best]) best = c;
    if (best == d.labels[static_cast<size_t>(start + r)]) ++hits;
  }
  return static_cast<double>(hits) / n;
}

TrainResult train_cls(const LossExpr& e, const SimTask& task, int train_start,
                      int train_n, int steps, int batch_size, int eval_start,
                      int eval_n, Rng* batch_rng) {
  const ClsDataset& d = task.cls;
  ClsModel m = init_cls_model(task.seed);
  std::vector<int> rows(static_cast<size_t>(batch_size));
  std::vector<double> logits, ylab(static_cast<size_t>(batch_size) * kClsClasses),
      wones(static_cast<size_t>(batch_size), 1.0);

  for (int step = 0; step < steps; ++step) {
    if (batch_rng) {
      for (int r = 0; r < batch_size; ++r)
        rows[static_cast<size_t>(r)] =
            train_start + static_cast<int>(batch_rng->below(static_cast<uint64_t>(train_n)));
    } else {
      std::iota(rows.begin(), rows.end(), train_start);
    }
    cls_logits(m, d, rows, logits);
    std::fill(ylab.begin(), ylab.end(), 0.0);
    for (int r = 0; r < batch_size; ++r)
      ylab[static_cast<size_t>(r) * kClsClasses +
           static_cast<size_t>(d.labels[static_cast<size_t>(rows[static_cast<size_t>(r)])])] = 1.0;

    Tensor dx;
    try {
      auto ctx = EvalContext::classification(
          Tensor::matrix(batch_size, kClsClasses, logits),
          Tensor::matrix(batch_size, kClsClasses, ylab), Tensor::vector(wones));
      Evaluation ev = forward(e, ctx);
      GradMap g = ev.backward(std::array{InputSymbol::Score});
      dx = std::move(g.at(InputSymbol::Score));
    } catch (const ShapeError&) {
      return {0.0, 0.0, true};
    }

    for (int r = 0; r < batch_size; ++r) {
      const double* f = d.features.data() +
                        static_cast<size_t>(rows[static_cast<size_t>(r)]) * kClsDim;
      for (int c = 0; c < kClsClasses; ++c) {
        const double gsc = dx.at(r, c);
        m.b[static_cast<size_t>(c)] -= kClsLr * gsc;
        for (int k = 0; k < kClsDim; ++k)
          m.w[static_cast<size_t>(k) * kClsClasses + static_cast<size_t>(c)] -=
              kClsLr * gsc * f[k];
      }
    }
    if (!m.finite()) return {0.0, 0.0, true};
  }
  return {cls_accuracy(m, d, eval_start, eval_n), 0.0, false};
}

// ---------------------------------------------------------------------------
// regression training

struct RegModel {
  std::array<double, 16> w{};  // 4 features x 4 offsets, zero-initialized
  std::array<double, 4> b{};

  bool finite() const {
    for (double v : w)
      if (!std::isfinite(v)) return false;
    for (double v : b)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

struct Decoded {
  Box box;
  double pcx, pcy, pw, ph;
  bool clamped_w, clamped_h;
};

Decoded decode(const Box& anchor, const double* t) {
  const double aw = anchor.w(), ah = anchor.h();
  const double tw = std::clamp(t[2], -kRegDecodeClamp, kRegDecodeClamp);
  const double th = std::clamp(t[3], -kRegDecodeClamp, kRegDecodeClamp);
  Decoded out;
  out.pcx = anchor.cx() + aw * t[0];
  out.pcy = anchor.cy() + ah * t[1];
  out.pw = aw * std::exp(tw);
  out.ph = ah * std::exp(th);
  out.clamped_w = tw != t[2];
  out.clamped_h = th != t[3];
  out.box = Box::from_center(out.pcx, out.pcy, out.pw, out.ph);
  return out;
}

// d(i, u, e) / d(pcx, pcy, pw, ph); ties between predicted and target edges
// follow the predicted branch, disjoint boxes give i a zero gradient.
struct GeomGrads {
  std::array<double, 4> di{}, du{}, de{};
};

GeomGrads overlap_grads(const Decoded& p, const Box& g) {
  GeomGrads out;
  const double px1 = p.box.x1, px2 = p.box.x2, py1 = p.box.y1, py2 = p.box.y2;
  const double iw = std::min(px2, g.x2) - std::max(px1, g.x1);
  const double ih = std::min(py2, g.y2) - std::max(py1, g.y1);

  // corner-space partials
  double di_c[4] = {0, 0, 0, 0};  // x1, y1, x2, y2
  if (iw > 0 && ih > 0) {
    const double diw_x1 = (px1 >= g.x1) ? -1.0 : 0.0;
    const double diw_x2 = (px2 <= g.x2) ? 1.0 : 0.0;
    const double dih_y1 = (py1 >= g.y1) ? -1.0 : 0.0;
    const double dih_y2 = (py2 <= g.y2) ? 1.0 : 0.0;
    di_c[0] = ih * diw_x1;
    di_c[1] = iw * dih_y1;
    di_c[2] = ih * diw_x2;
    di_c[3] = iw * dih_y2;
  }
  const double dew_x1 = (px1 <= g.x1) ? 1.0 : 0.0;  // ew = max(x2) - min(x1)
  const double dew_x2 = (px2 >= g.x2) ? 1.0 : 0.0;
  const double deh_y1 = (py1 <= g.y1) ? 1.0 : 0.0;
  const double deh_y2 = (py2 >= g.y2) ? 1.0 : 0.0;
  const double ew = std::max(px2, g.x2) - std::min(px1, g.x1);
  const double eh = std::max(py2, g.y2) - std::min(py1, g.y1);
  double de_c[4] = {-dew_x1 * eh, -deh_y1 * ew, dew_x2 * eh, deh_y2 * ew};

  // corner -> center/size: d/dcx = d/dx1 + d/dx2, d/dw = (d/dx2 - d/dx1)/2
  auto to_center = [](const double c[4], std::array<double, 4>& out) {
    out[0] = c[0] + c[2];
    out[1] = c[1] + c[3];
    out[2] = 0.5 * (c[2] - c[0]);
    out[3] = 0.5 * (c[3] - c[1]);
  };
  to_center(di_c, out.di);
  to_center(de_c, out.de);
  // u = pw*ph + target area - i
  out.du[0] = -out.di[0];
  out.du[1] = -out.di[1];
  out.du[2] = p.ph - out.di[2];
  out.du[3] = p.pw - out.di[3];
  return out;
}

void reg_features(const RegDataset& d, int row, double* f) {
  const Box& a = d.anchors[static_cast<size_t>(row)];
  f[0] = a.cx();
  f[1] = a.cy();
  f[2] = a.w();
  f[3] = a.h();
}

struct RegGrads {
  std::array<double, 16> w{};
  std::array<double, 4> b{};
};

// Batch-mean loss gradient with respect to the regressor parameters at m.
// Propagates ShapeError / ContextError from the expression evaluation.
RegGrads reg_batch_grads(const LossExpr& e, const RegDataset& d,
                         const RegModel& m, std::span<const int> rows) {
  const size_t n = rows.size();
  std::vector<double> offs(n * 4);
  std::vector<Decoded> decs(n);
  std::vector<double> iv(n), uv(n), evv(n);
  for (size_t r = 0; r < n; ++r) {
    double f[4];
    reg_features(d, rows[r], f);
    for (int c = 0; c < 4; ++c) {
      double s = m.b[static_cast<size_t>(c)];
      for (int k = 0; k < 4; ++k) s += f[k] * m.w[static_cast<size_t>(k) * 4 + static_cast<size_t>(c)];
      offs[r * 4 + static_cast<size_t>(c)] = s;
    }
    decs[r] = decode(d.anchors[static_cast<size_t>(rows[r])], offs.data() + r * 4);
    Overlap o = overlap(decs[r].box, d.targets[static_cast<size_t>(rows[r])]);
    iv[r] = o.i;
    uv[r] = o.u;
    evv[r] = o.e;
  }

  auto ctx = EvalContext::regression(Tensor::vector(iv), Tensor::vector(uv),
                                     Tensor::vector(evv));
  Evaluation ev = forward(e, ctx);
  GradMap g = ev.backward(branch_symbols(Branch::Regression));
  const Tensor& gi = g.at(InputSymbol::Inter);
  const Tensor& gu = g.at(InputSymbol::Uni);
  const Tensor& ge = g.at(InputSymbol::Enclose);

  RegGrads out;
  for (size_t r = 0; r < n; ++r) {
    const int row = rows[r];
    const Decoded& p = decs[r];
    GeomGrads gg = overlap_grads(p, d.targets[static_cast<size_t>(row)]);
    // upstream into (pcx, pcy, pw, ph)
    std::array<double, 4> gbox{};
    for (size_t k = 0; k < 4; ++k)
      gbox[k] = gi[r] * gg.di[k] + gu[r] * gg.du[k] + ge[r] * gg.de[k];
    // decode: pcx = acx + aw*t0, pw = aw*exp(clamp(t2))
    const Box& a = d.anchors[static_cast<size_t>(row)];
    std::array<double, 4> gt{};
    gt[0] = gbox[0] * a.w();
    gt[1] = gbox[1] * a.h();
    gt[2] = p.clamped_w ? 0.0 : gbox[2] * p.pw;
    gt[3] = p.clamped_h ? 0.0 : gbox[3] * p.ph;

    double f[4];
    reg_features(d, row, f);
    for (size_t c = 0; c < 4; ++c) {
      out.b[c] += gt[c];
      for (size_t k = 0; k < 4; ++k) out.w[k * 4 + c] += gt[c] * f[k];
    }
  }
  return out;
}

TrainResult train_reg(const LossExpr& e, const SimTask& task, int train_start,
                      int train_n, int steps, int batch_size, int eval_start,
                      int eval_n, Rng* batch_rng) {
  const RegDataset& d = task.reg;
  RegModel m;
  std::vector<int> rows(static_cast<size_t>(batch_size));

  for (int step = 0; step < steps; ++step) {
    if (batch_rng) {
      for (int r = 0; r < batch_size; ++r)
        rows[static_cast<size_t>(r)] =
            train_start + static_cast<int>(batch_rng->below(static_cast<uint64_t>(train_n)));
    } else {
      std::iota(rows.begin(), rows.end(), train_start);
    }
    RegGrads g;
    try {
      g = reg_batch_grads(e, d, m, rows);
    } catch (const ShapeError&) {
      return {0.0, 0.0, true};
    } catch (const ContextError&) {
      // a non-finite model emitted boxes the context rejects
      return {0.0, 0.0, true};
    }
    for (size_t k = 0; k < 16; ++k) m.w[k] -= kRegLr * g.w[k];
    for (size_t k = 0; k < 4; ++k) m.b[k] -= kRegLr * g.b[k];
    if (!m.finite()) return {0.0, 0.0, true};
  }

  // final metric: mean IoU and AP50 over the eval split
  TrainResult res;
  std::vector<Box> preds;
  std::vector<double> scores(static_cast<size_t>(eval_n), 1.0);
  double miou = 0.0;
  for (int r = 0; r < eval_n; ++r) {
    const int row = eval_start + r;
    double f[4], t[4];
    reg_features(d, row, f);
    for (int c = 0; c < 4; ++c) {
      double s = m.b[static_cast<size_t>(c)];
      for (int k = 0; k < 4; ++k) s += f[k] * m.w[static_cast<size_t>(k) * 4 + static_cast<size_t>(c)];
      t[c] = s;
    }
    Decoded p = decode(d.anchors[static_cast<size_t>(row)], t);
    preds.push_back(p.box);
    miou += iou(p.box, d.targets[static_cast<size_t>(row)]);
  }
  res.metric = miou / eval_n;
  res.ap50 = ap_at_50(preds, scores,
                      std::span<const Box>(d.targets.data() + eval_start,
                                           static_cast<size_t>(eval_n)));
  return res;
}

}  // namespace

TrainResult simulate(const LossExpr& e, const SimTask& task, int steps) {
  if (e.branch() == Branch::Classification)
    return train_cls(e, task, 0, kVerifySplit, steps, kVerifySplit, 0, kVerifySplit,
                     nullptr);
  return train_reg(e, task, 0, kVerifySplit, steps, kVerifySplit, 0, kVerifySplit,
                   nullptr);
}

TrainResult proxy_fitness(const LossExpr& e, const SimTask& task, int steps) {
  Rng rng = Rng::derive(task.seed, e.canonical_key(), kTagBatches);
  const int val_start = kVerifySplit + kTrainSplit;
  if (e.branch() == Branch::Classification)
    return train_cls(e, task, kVerifySplit, kTrainSplit, steps, 64, val_start,
                     kValSplit, &rng);
  return train_reg(e, task, kVerifySplit, kTrainSplit, steps, 64, val_start,
                   kValSplit, &rng);
}

std::array<double, 20> reg_param_gradient(const LossExpr& e, const SimTask& task,
                                          std::span<const int> rows,
                                          std::span<const double> params) {
  if (params.size() != 20)
    throw ContextError("expected 16 weights followed by 4 biases");
  RegModel m;
  std::copy(params.begin(), params.begin() + 16, m.w.begin());
  std::copy(params.begin() + 16, params.end(), m.b.begin());
  RegGrads g = reg_batch_grads(e, task.reg, m, rows);
  std::array<double, 20> out;
  std::copy(g.w.begin(), g.w.end(), out.begin());
  std::copy(g.b.begin(), g.b.end(), out.begin() + 16);
  return out;
}

double ap_at_50(std::span<const Box> preds, std::span<const double> scores,
                std::span<const Box> targets) {
  for (const Box& b : preds)
    if (!(b.w() > 0) || !(b.h() > 0)) throw DegenerateBoxError();
  for (const Box& b : targets)
    if (!(b.w() > 0) || !(b.h() > 0)) throw DegenerateBoxError();
  if (targets.empty() || preds.empty()) return 0.0;

  std::vector<size_t> order(preds.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] > scores[b]; });

  std::vector<bool> matched(targets.size(), false);
  double ap = 0.0;
  int tp = 0, rank = 0;
  for (size_t pi : order) {
    ++rank;
    int best = -1;
    double best_iou = 0.0;
    for (size_t t = 0; t < targets.size(); ++t) {
      if (matched[t]) continue;
      const double v = iou(preds[pi], targets[t]);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(t);
      }
    }
    if (best >= 0 && best_iou >= 0.5) {
      matched[static_cast<size_t>(best)] = true;
      ++tp;
      ap += static_cast<double>(tp) / rank;
    }
  }
  return ap / static_cast<double>(targets.size());
}

void write_cls_csv(const ClsDataset& d, std::ostream& out) {
  out << "split,label";
  for (int k = 0; k < kClsDim; ++k) out << ",f" << k;
  out << "\n";
  for (int r = 0; r < d.size(); ++r) {
    const char* split = r < kVerifySplit
                            ? "verify"
                            : (r < kVerifySplit + kTrainSplit ? "train" : "val");
    out << split << "," << d.labels[static_cast<size_t>(r)];
    for (int k = 0; k < kClsDim; ++k)
      out << "," << d.features[static_cast<size_t>(r) * kClsDim + static_cast<size_t>(k)];
    out << "\n";
  }
}

void write_reg_csv(const RegDataset& d, std::ostream& out) {
  out << "split,ax1,ay1,ax2,ay2,tx1,ty1,tx2,ty2\n";
  for (int r = 0; r < d.size(); ++r) {
    const char* split = r < kVerifySplit
                            ? "verify"
                            : (r < kVerifySplit + kTrainSplit ? "train" : "val");
    const Box& a = d.anchors[static_cast<size_t>(r)];
    const Box& t = d.targets[static_cast<size_t>(r)];
    out << split << "," << a.x1 << "," << a.y1 << "," << a.x2 << "," << a.y2 << ","
        << t.x1 << "," << t.y1 << "," << t.x2 << "," << t.y2 << "\n";
  }
}

}  // namespace autoloss
