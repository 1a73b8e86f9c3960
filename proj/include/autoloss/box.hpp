#pragma once

#include <algorithm>

namespace autoloss {

// Axis-aligned box as corner coordinates, x1 < x2 and y1 < y2.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double w() const { return x2 - x1; }
  double h() const { return y2 - y1; }
  double area() const { return w() * h(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }

  static Box from_center(double cx, double cy, double w, double h) {
    return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  }
};

// intersection, union and smallest enclosing-box areas
struct Overlap {
  double i = 0, u = 0, e = 0;
};

inline Overlap overlap(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double i = iw * ih;
  const double u = a.area() + b.area() - i;
  const double ew = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  const double eh = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  const double e = ew * eh;
  // The union never exceeds the enclosing box, but the two are computed by
  // different formulas and can disagree by an ulp when one box contains the
  // other; clamp so downstream ordering checks see the true invariant.
  return {i, std::min(u, e), e};
}

inline double iou(const Box& a, const Box& b) {
  const Overlap o = overlap(a, b);
  return o.u > 0.0 ? o.i / o.u : 0.0;
}

}  // namespace autoloss
