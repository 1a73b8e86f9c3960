// Compares the serial reference path (workers = 1) against the OpenMP path
// on the hot kernel of a search generation: verifying and simulating a block
// of random candidates. Results must match bitwise; the table reports the
// speedup. Usage: bench_threads [--candidates N] [--repeat R] [--workers W].
#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "autoloss/expr.hpp"
#include "autoloss/parallel.hpp"
#include "autoloss/rng.hpp"
#include "autoloss/simtask.hpp"
#include "autoloss/verify.hpp"

using namespace autoloss;

namespace {

struct Scores {
  std::vector<char> ok;
  std::vector<double> sim;
};

Scores evaluate_block(const std::vector<LossExpr>& pop, const SimTask& task,
                      int workers) {
  Scores s;
  s.ok.assign(pop.size(), 0);
  s.sim.assign(pop.size(), 0.0);
  parallel_for_index(pop.size(), workers, [&](size_t k) {
    VerificationReport rep = verify(pop[k]);
    s.ok[k] = rep.overall ? 1 : 0;
    if (rep.overall) s.sim[k] = simulate(pop[k], task).metric;
  });
  return s;
}

double wall_of(const std::vector<LossExpr>& pop, const SimTask& task,
               int workers, int repeat, Scores& out) {
  using clock = std::chrono::steady_clock;
  double best = 1e300;
  for (int r = 0; r < repeat; ++r) {
    const auto t0 = clock::now();
    out = evaluate_block(pop, task, workers);
    const double secs = std::chrono::duration<double>(clock::now() - t0).count();
    if (secs < best) best = secs;
  }
  return best;
}

}  // namespace

int main(int argc, char** argv) {
  size_t candidates = 200;
  int repeat = 3;
  int workers = hardware_workers();
  for (int a = 1; a < argc; ++a) {
    auto want = [&](const char* flag) {
      return std::strcmp(argv[a], flag) == 0 && a + 1 < argc;
    };
    if (want("--candidates")) candidates = std::stoul(argv[++a]);
    else if (want("--repeat")) repeat = std::atoi(argv[++a]);
    else if (want("--workers")) workers = std::atoi(argv[++a]);
    else {
      std::fprintf(stderr,
                   "usage: bench_threads [--candidates N] [--repeat R] [--workers W]\n");
      return 2;
    }
  }
  if (workers < 2) workers = 2;

  Rng rng(1234);
  std::vector<LossExpr> pop;
  pop.reserve(candidates);
  for (size_t k = 0; k < candidates; ++k)
    pop.push_back(random_expr(k % 2 == 0 ? Branch::Classification
                                         : Branch::Regression,
                              rng, 12));
  SimTask task(42);

  Scores serial, parallel;
  const double t_serial = wall_of(pop, task, 1, repeat, serial);
  const double t_parallel = wall_of(pop, task, workers, repeat, parallel);

  // serial path is the reference: the parallel path must reproduce it exactly
  bool identical = serial.ok == parallel.ok;
  for (size_t k = 0; identical && k < candidates; ++k)
    identical = serial.sim[k] == parallel.sim[k];
  if (!identical) {
    std::fprintf(stderr, "FAIL: parallel results differ from the serial reference\n");
    return 1;
  }

  std::printf("candidates,workers,serial_seconds,parallel_seconds,speedup,identical\n");
  std::printf("%zu,%d,%.4f,%.4f,%.2fx,yes\n", candidates, workers, t_serial,
              t_parallel, t_serial / t_parallel);
  return 0;
}
