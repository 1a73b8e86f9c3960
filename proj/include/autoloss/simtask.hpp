#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <vector>

#include "autoloss/box.hpp"
#include "autoloss/expr.hpp"
#include "autoloss/tensor.hpp"

namespace autoloss {

// Synthetic detection-flavored training tasks used to score candidate losses.
// Everything is deterministic in the dataset seed; per-candidate randomness
// (minibatch order) is derived from (seed, canonical key, stage) so results
// never depend on evaluation order or thread count.

// split sizes, shared by both tasks: [verify | train | val]
inline constexpr int kVerifySplit = 64;
inline constexpr int kTrainSplit = 2000;
inline constexpr int kValSplit = 500;

// classification: well-separated Gaussian blobs
inline constexpr int kClsClasses = 4;
inline constexpr int kClsDim = 8;
inline constexpr double kClsSigma = 1.0;
inline constexpr double kClsCenterRange = 6.0;   // centers uniform in [-6, 6]^8
inline constexpr double kClsCenterMinDist = 5.0; // pairwise center separation
inline constexpr double kClsLr = 0.1;

// regression: unit-square boxes with systematically offset anchors, so the
// regressor has a consistent bias to learn
inline constexpr double kRegAnchorShiftX = 0.06;
inline constexpr double kRegAnchorShiftY = -0.04;
inline constexpr double kRegAnchorScale = 0.75;
inline constexpr double kRegJitterShift = 0.03;
inline constexpr double kRegJitterLogSize = 0.1;
inline constexpr double kRegLr = 0.05;
inline constexpr double kRegDecodeClamp = 8.0;  // |log-size offset| bound

struct ClsDataset {
  // row-major [n x kClsDim]; rows 0..63 verify, 64..2063 train, rest val
  std::vector<double> features;
  std::vector<int> labels;
  std::vector<double> centers;  // [kClsClasses x kClsDim]
  int size() const { return static_cast<int>(labels.size()); }
};

struct RegDataset {
  std::vector<Box> anchors;  // model input
  std::vector<Box> targets;  // ground truth
  int size() const { return static_cast<int>(anchors.size()); }
};

ClsDataset make_cls_dataset(uint64_t seed);
RegDataset make_reg_dataset(uint64_t seed);

// Both datasets plus the seed they came from; built once, shared by every
// candidate evaluation.
struct SimTask {
  explicit SimTask(uint64_t seed)
      : seed(seed), cls(make_cls_dataset(seed)), reg(make_reg_dataset(seed)) {}
  uint64_t seed;
  ClsDataset cls;
  RegDataset reg;
};

struct TrainResult {
  double metric = 0.0;  // accuracy (classification) or mean IoU (regression)
  double ap50 = 0.0;    // average precision at IoU 0.5; regression only
  bool diverged = false;
};

// Short full-batch descent on the verify split, scored on that same split: a
// learnability smoke test. A non-finite parameter at any step means the
// candidate diverged and scores 0; a shape-invalid expression scores the same
// way rather than throwing.
TrainResult simulate(const LossExpr& e, const SimTask& task, int steps = 300);

// Minibatch training on the train split, scored on the held-out val split.
TrainResult proxy_fitness(const LossExpr& e, const SimTask& task, int steps = 2000);

class DegenerateBoxError : public std::runtime_error {
 public:
  DegenerateBoxError() : std::runtime_error("box with non-positive extent") {}
};

// Average precision at IoU 0.5: predictions ranked by score (stable on ties),
// greedily matched to the best unmatched target; each true positive at rank k
// contributes precision@k / |targets|. Throws DegenerateBoxError if any box
// has a non-positive side.
double ap_at_50(std::span<const Box> preds, std::span<const double> scores,
                std::span<const Box> targets);

// Gradient of the batch-mean loss over the given dataset rows with respect to
// the regressor parameters (16 weights row-major [feature x offset], then 4
// biases). The geometric chain through (i, u, e) follows the predicted-box
// branch on edge ties, gives the intersection a zero gradient when the boxes
// are disjoint, and kills the log-size path outside the decode clamp.
std::array<double, 20> reg_param_gradient(const LossExpr& e, const SimTask& task,
                                          std::span<const int> rows,
                                          std::span<const double> params);

// plain CSV dumps of the datasets (header row first)
void write_cls_csv(const ClsDataset& d, std::ostream& out);
void write_reg_csv(const RegDataset& d, std::ostream& out);

}  // namespace autoloss
