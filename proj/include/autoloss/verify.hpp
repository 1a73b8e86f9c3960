#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "autoloss/expr.hpp"
#include "autoloss/tensor.hpp"

namespace autoloss {

// Property checks that every candidate loss must pass before any training is
// spent on it. All checks are pure functions of the expression over fixed
// probe grids; a full verify() call stays well under 50 ms.
//
// classification probes: the true-class score sweeps [-10, 10] against a
// fixed other-class anchor (and vice versa) with one-hot labels and unit
// weights; tail contexts pin the score at 20 and 30.
// regression probes: a unit target box against copies translated along eight
// compass directions and rescaled around the center.

std::vector<double> score_sweep_grid();             // 1001 points in [-10, 10]
std::span<const double> anchor_scores();            // {-2, 0, 2}
std::span<const double> tail_scores();              // {20, 30}
std::vector<double> translation_grid();             // 0, 0.25, ..., 5
std::span<const std::array<double, 2>> translation_dirs();  // 8 unit vectors
std::vector<double> scale_grid();                   // 0.2 .. 5, index 10 is 1

// Batched probe contexts. Sweep contexts put the swept score in one column
// and the anchor in the other, labels fixed to class 0, weights to 1.
EvalContext cls_sweep_context(bool sweep_positive, double anchor);
EvalContext cls_tail_context(double score);
EvalContext reg_translation_context(const std::array<double, 2>& dir);
EvalContext reg_scale_context();

// Finite loss, per-sample losses and prediction gradients over every probe
// context of the branch; shape violations count as failure.
bool check_validness(const LossExpr& e);

// Per-sample loss must not increase as the true-class score grows, and must
// not decrease as the other-class score grows (ties allowed, slack 1e-9).
// Classification only.
bool check_monotonicity(const LossExpr& e);

// The loss must flatten out once the true class dominates: |d loss / d score|
// below 1e-3 at scores 20 and 30, not growing between them. Classification
// only.
bool check_convergence(const LossExpr& e);

// Loss must not decrease as the predicted box moves away from the target and
// must be minimal at the true scale. Regression only.
bool check_distance_consistency(const LossExpr& e);

struct VerificationReport {
  std::optional<bool> validness;
  std::optional<bool> monotonicity;
  std::optional<bool> convergence;
  std::optional<bool> distance_consistency;
  bool overall = false;
  double millis = 0.0;

  std::string to_json() const;
};

// Runs validness, then the branch's property checks. A validness failure
// short-circuits (the other fields stay unset); property checks always all
// run once validness holds.
VerificationReport verify(const LossExpr& e);

}  // namespace autoloss
