#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "autoloss/expr.hpp"
#include "autoloss/rng.hpp"
#include "autoloss/simtask.hpp"
#include "autoloss/verify.hpp"

namespace autoloss {

class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& m) : std::invalid_argument(m) {}
};

// Raised when a generation has no candidate left after verification, so not
// even threshold relaxation can refill the funnel.
class EmptyFunnelError : public std::runtime_error {
 public:
  EmptyFunnelError() : std::runtime_error("no candidate survived verification") {}
};

struct SearchConfig {
  int generations = 5;        // E
  int population = 0;         // N; 0 = branch default (10000 cls, 1000 reg)
  int parents = 3;            // P
  int top_k = 10;             // K, candidates proxy-evaluated per generation
  double crossover_p = 0.5;   // p1
  double mutation_p = 0.2;    // p2
  std::string initial;        // zoo name; empty = branch default (cei / giou)
  Branch branch = Branch::Classification;
  uint64_t seed = 0;
  std::optional<uint64_t> dataset_seed;  // defaults to seed
  int random_budget = 50;     // evaluation budget of the random-search baseline
  ExprLimits limits{};
  int workers = 1;

  int resolved_population() const;
  std::string resolved_initial() const;
  uint64_t resolved_dataset_seed() const { return dataset_seed.value_or(seed); }
  void validate() const;  // throws ConfigError on out-of-range fields
};

// Flat `key = value` text, one pair per line, '#' comments. Keys are the
// SearchConfig field names (limits split into max_nodes / max_depth); every
// key except the mandatory `branch` may be omitted and takes its default.
// Unknown keys and malformed values are ConfigErrors.
SearchConfig parse_config(std::string_view text);
// Effective-config echo: every key with its resolved value, parseable by
// parse_config.
std::string render_config(const SearchConfig& cfg);

struct Candidate {
  LossExpr expr;
  std::optional<VerificationReport> report;
  std::optional<double> sim;      // simulation metric
  std::optional<double> fitness;  // proxy-task metric
  int generation = 0;
  std::vector<uint64_t> lineage;  // canonical keys of the parents
};

// one JSONL row: {gen, expr, stage, value, pass, millis}
struct CandidateRecord {
  int gen = 0;
  std::string expr;
  std::string stage;
  std::optional<double> value;
  std::optional<bool> pass;
  double millis = 0.0;
};

struct GenerationSummary {
  int gen = 0;
  int n_seeded = 0;         // population size entering the generation
  int n_valid = 0;          // past the validness check
  int n_property_pass = 0;  // past the full verifier
  int n_simulated = 0;      // past the simulation threshold
  int n_proxy = 0;          // proxy-evaluated (top-K)
  double best_sim = 0.0;
  double best_fitness = 0.0;
  double threshold = 0.0;   // threshold actually applied, after relaxation
  std::vector<uint64_t> parent_keys;  // selection output, not in the CSV
};

struct SearchLog {
  std::vector<CandidateRecord> records;
  std::vector<GenerationSummary> generations;
};

struct SearchResult {
  std::optional<Candidate> best;
  SearchLog log;
  long proxy_evals = 0;  // proxy_fitness calls actually executed
  double wall_seconds = 0.0;
};

struct PopEntry {
  LossExpr expr;
  std::vector<uint64_t> lineage;
};

// Slot 0 is the unmutated initial loss; every other slot applies 1-3 random
// mutations. Duplicate canonical keys are redrawn a bounded number of times,
// then admitted.
std::vector<PopEntry> seed_population(const LossExpr& initial, int n, Rng& rng,
                                      const ExprLimits& limits = {});

// Mutation kernel weights, in kernel order: replace-node-same-arity,
// insert-unary-above-node, delete-unary-node, replace-subtree-with-leaf,
// graft-subtree-of-size<=5. Tests check empirical kernel frequencies against
// exactly these numbers.
inline constexpr std::array<double, 5> kMutationWeights = {0.4, 0.2, 0.2, 0.1, 0.1};
inline constexpr int kGraftBudget = 5;

struct MutTrace {
  std::array<long, 5> kernel_counts{};
  long fallbacks = 0;  // kernel inapplicable or limits exceeded
};

// Applies exactly one kernel drawn from kMutationWeights. Falls back to the
// input unchanged when the kernel cannot apply (no unary node to delete) or
// the result would violate the limits.
LossExpr mutate(const LossExpr& e, Rng& rng, const ExprLimits& limits = {},
                MutTrace* trace = nullptr);

// Exchanges the subtrees rooted at ia (in a) and ib (in b). A child that
// would violate the limits is replaced by its own parent unchanged. Both
// expressions must share a branch.
std::pair<LossExpr, LossExpr> crossover_at(const LossExpr& a, const LossExpr& b,
                                           int32_t ia, int32_t ib,
                                           const ExprLimits& limits = {});
// Uniformly random crossover points.
std::pair<LossExpr, LossExpr> crossover(const LossExpr& a, const LossExpr& b,
                                        Rng& rng, const ExprLimits& limits = {});

// Generational search engine. One instance owns the task datasets and the
// per-stage result caches (keyed by canonical key), so repeated candidates
// are never re-evaluated and parents carry their scores across generations.
class SearchEngine {
 public:
  explicit SearchEngine(const SearchConfig& cfg);

  const SearchConfig& config() const { return cfg_; }
  const SimTask& task() const { return task_; }
  long proxy_evals() const { return proxy_evals_; }

  struct GenOutcome {
    std::vector<Candidate> parents;  // fitness descending
    double new_threshold = 0.0;     // sim metric of the best-by-fitness
  };

  // One funnel pass: verify all, simulate the passers, apply the sim
  // threshold (relaxing by 0.9 with a logged record while it empties the
  // pool), proxy-evaluate the top-K by sim, select top-P parents by fitness
  // among the proxied candidates and any carried-over candidate with a cached
  // fitness. force_key, when nonzero, pins that candidate into the top-K.
  // Throws EmptyFunnelError when verification leaves nothing to relax into.
  GenOutcome run_generation(const std::vector<PopEntry>& pop, double threshold,
                            int gen, SearchLog& log, uint64_t force_key = 0);

  SearchResult run();          // the full filtered search
  SearchResult run_vanilla();  // validness check only, then proxy everything
  SearchResult run_random();   // no funnel: random draws, all proxy-evaluated

 private:
  std::vector<PopEntry> offspring(const std::vector<Candidate>& parents, Rng& rng);
  SearchResult run_generational(bool funnel);
  GenOutcome run_generation_vanilla(const std::vector<PopEntry>& pop, int gen,
                                    SearchLog& log);
  static void log_random_candidate(SearchLog& log, const std::string& text,
                                   const VerificationReport& rep, double sim,
                                   double fit);

  SearchConfig cfg_;
  SimTask task_;
  std::unordered_map<uint64_t, VerificationReport> verify_cache_;
  std::unordered_map<uint64_t, double> sim_cache_;
  std::unordered_map<uint64_t, double> fitness_cache_;
  std::unordered_map<uint64_t, bool> valid_cache_;  // vanilla mode
  long proxy_evals_ = 0;
};

SearchResult run_search(const SearchConfig& cfg);
SearchResult run_vanilla_ea(const SearchConfig& cfg);
SearchResult run_random_search(const SearchConfig& cfg);

// Writes candidates.jsonl, summary.csv, best.loss and config.effective into
// out_dir (created if missing). Every file is written to a temp name and
// renamed, so interrupted runs never leave truncated artifacts.
void write_artifacts(const SearchResult& result, const SearchConfig& cfg,
                     const std::filesystem::path& out_dir);

}  // namespace autoloss
