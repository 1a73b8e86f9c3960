#include "autoloss/search.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <unordered_set>

#include "autoloss/parallel.hpp"
#include "autoloss/zoo.hpp"
#include "json.hpp"

namespace autoloss {

namespace {

constexpr uint64_t kTagSearch = 0x31;
constexpr uint64_t kTagRandom = 0x32;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr int kSeedRetries = 20;       // duplicate redraws while seeding
constexpr int kOffspringRetries = 10;  // duplicate redraws per offspring slot
constexpr int kRandomSizeBudget = 15;  // node budget of random-search draws

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
      .count();
}

}  // namespace

// ---------------------------------------------------------------------------
// configuration

int SearchConfig::resolved_population() const {
  if (population > 0) return population;
  return branch == Branch::Classification ? 10000 : 1000;
}

std::string SearchConfig::resolved_initial() const {
  if (!initial.empty()) return initial;
  return branch == Branch::Classification ? "cei" : "giou";
}

void SearchConfig::validate() const {
  if (generations < 1) throw ConfigError("generations must be >= 1");
  const int n = resolved_population();
  if (parents < 1 || top_k < parents || n < top_k)
    throw ConfigError("need 1 <= parents <= top_k <= population");
  if (crossover_p < 0 || crossover_p > 1 || mutation_p < 0 || mutation_p > 1)
    throw ConfigError("probabilities must lie in [0, 1]");
  if (random_budget < 0) throw ConfigError("random_budget must be >= 0");
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (limits.max_nodes < 1 || limits.max_depth < 1)
    throw ConfigError("limits must be >= 1");
  LossExpr init;
  try {
    init = zoo_expr(resolved_initial());
  } catch (const UnknownLossError&) {
    throw ConfigError("initial loss '" + resolved_initial() + "' is not in the zoo");
  }
  if (init.branch() != branch)
    throw ConfigError("initial loss '" + resolved_initial() +
                      "' serves the other branch");
  if (init.size() > limits.max_nodes || init.depth() > limits.max_depth)
    throw ConfigError("initial loss exceeds the expression limits");
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

long long parse_int(std::string_view key, std::string_view v, long long lo,
                    long long hi) {
  long long out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size() || out < lo || out > hi)
    throw ConfigError("bad integer for key '" + std::string(key) + "': " + std::string(v));
  return out;
}

uint64_t parse_u64(std::string_view key, std::string_view v) {
  uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw ConfigError("bad integer for key '" + std::string(key) + "': " + std::string(v));
  return out;
}

double parse_prob(std::string_view key, std::string_view v) {
  std::string z(v);
  char* end = nullptr;
  const double out = std::strtod(z.c_str(), &end);
  if (end != z.c_str() + z.size() || !std::isfinite(out))
    throw ConfigError("bad number for key '" + std::string(key) + "': " + z);
  return out;
}

}  // namespace

SearchConfig parse_config(std::string_view text) {
  SearchConfig cfg;
  bool branch_seen = false;
  size_t start = 0;
  while (start <= text.size()) {
    const size_t nl = text.find('\n', start);
    std::string_view line =
        text.substr(start, nl == std::string_view::npos ? text.size() - start : nl - start);
    start = nl == std::string_view::npos ? text.size() + 1 : nl + 1;

    const size_t hash = line.find('#');
    if (hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;

    const size_t eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("expected 'key = value', got: " + std::string(line));
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view val = trim(line.substr(eq + 1));
    if (key.empty() || val.empty())
      throw ConfigError("expected 'key = value', got: " + std::string(line));

    if (key == "generations") {
      cfg.generations = static_cast<int>(parse_int(key, val, 1, 1000000));
    } else if (key == "population") {
      cfg.population = static_cast<int>(parse_int(key, val, 0, 100000000));
    } else if (key == "parents") {
      cfg.parents = static_cast<int>(parse_int(key, val, 1, 1000000));
    } else if (key == "top_k") {
      cfg.top_k = static_cast<int>(parse_int(key, val, 1, 1000000));
    } else if (key == "crossover_p") {
      cfg.crossover_p = parse_prob(key, val);
    } else if (key == "mutation_p") {
      cfg.mutation_p = parse_prob(key, val);
    } else if (key == "initial") {
      cfg.initial = std::string(val);
    } else if (key == "branch") {
      if (val == "cls" || val == "classification") {
        cfg.branch = Branch::Classification;
      } else if (val == "reg" || val == "regression") {
        cfg.branch = Branch::Regression;
      } else {
        throw ConfigError("branch must be cls or reg, got: " + std::string(val));
      }
      branch_seen = true;
    } else if (key == "seed") {
      cfg.seed = parse_u64(key, val);
    } else if (key == "dataset_seed") {
      cfg.dataset_seed = parse_u64(key, val);
    } else if (key == "random_budget") {
      cfg.random_budget = static_cast<int>(parse_int(key, val, 0, 100000000));
    } else if (key == "max_nodes") {
      cfg.limits.max_nodes = static_cast<int>(parse_int(key, val, 1, 1000000));
    } else if (key == "max_depth") {
      cfg.limits.max_depth = static_cast<int>(parse_int(key, val, 1, 1000000));
    } else if (key == "workers") {
      cfg.workers = static_cast<int>(parse_int(key, val, 1, 1023));
    } else {
      throw ConfigError("unknown config key '" + std::string(key) + "'");
    }
  }
  if (!branch_seen) throw ConfigError("missing required key 'branch'");
  cfg.validate();
  return cfg;
}

std::string render_config(const SearchConfig& cfg) {
  std::string out;
  out += "branch = ";
  out += cfg.branch == Branch::Classification ? "cls" : "reg";
  out += "\n";
  out += "generations = " + std::to_string(cfg.generations) + "\n";
  out += "population = " + std::to_string(cfg.resolved_population()) + "\n";
  out += "parents = " + std::to_string(cfg.parents) + "\n";
  out += "top_k = " + std::to_string(cfg.top_k) + "\n";
  out += "crossover_p = " + fmt_double(cfg.crossover_p) + "\n";
  out += "mutation_p = " + fmt_double(cfg.mutation_p) + "\n";
  out += "initial = " + cfg.resolved_initial() + "\n";
  out += "seed = " + std::to_string(cfg.seed) + "\n";
  out += "dataset_seed = " + std::to_string(cfg.resolved_dataset_seed()) + "\n";
  out += "random_budget = " + std::to_string(cfg.random_budget) + "\n";
  out += "max_nodes = " + std::to_string(cfg.limits.max_nodes) + "\n";
  out += "max_depth = " + std::to_string(cfg.limits.max_depth) + "\n";
  out += "workers = " + std::to_string(cfg.workers) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// variation operators

namespace {

int32_t parent_of(const LossExpr& e, int32_t id) {
  for (int32_t i = 0; i < e.size(); ++i) {
    const Node& n = e.node(i);
    if (n.kind == NodeKind::Unary && n.a == id) return i;
    if (n.kind == NodeKind::Binary && (n.a == id || n.b == id)) return i;
  }
  return -1;
}

LossExpr kernel_replace_same_arity(const LossExpr& e, Rng& rng,
                                   const ExprLimits& limits) {
  const auto id = static_cast<int32_t>(rng.below(static_cast<uint64_t>(e.size())));
  const Node& n = e.node(id);
  if (n.kind == NodeKind::Input || n.kind == NodeKind::Const)
    return replace_subtree(e, id, random_leaf(e.branch(), rng), limits);
  std::vector<Node> arena = e.nodes();
  if (n.kind == NodeKind::Unary) {
    const auto reg = unary_registry(e.branch());
    arena[static_cast<size_t>(id)].uop = reg[rng.below(reg.size())];
  } else {
    const auto reg = binary_registry(e.branch());
    arena[static_cast<size_t>(id)].bop = reg[rng.below(reg.size())];
  }
  return LossExpr::make(std::move(arena), e.root(), e.branch(), limits);
}

LossExpr kernel_insert_unary(const LossExpr& e, Rng& rng, const ExprLimits& limits) {
  const auto id = static_cast<int32_t>(rng.below(static_cast<uint64_t>(e.size())));
  const auto reg = unary_registry(e.branch());
  Node wrap;
  wrap.kind = NodeKind::Unary;
  wrap.uop = reg[rng.below(reg.size())];
  wrap.a = id;

  std::vector<Node> arena = e.nodes();
  arena.push_back(wrap);
  const auto nid = static_cast<int32_t>(arena.size() - 1);
  int32_t root = e.root();
  if (id == root) {
    root = nid;
  } else {
    const int32_t p = parent_of(e, id);
    if (arena[static_cast<size_t>(p)].a == id)
      arena[static_cast<size_t>(p)].a = nid;
    else
      arena[static_cast<size_t>(p)].b = nid;
  }
  return LossExpr::make(std::move(arena), root, e.branch(), limits);
}

LossExpr kernel_delete_unary(const LossExpr& e, Rng& rng, const ExprLimits& limits,
                             bool* applied) {
  std::vector<int32_t> unary;
  for (int32_t i = 0; i < e.size(); ++i)
    if (e.node(i).kind == NodeKind::Unary) unary.push_back(i);
  if (unary.empty()) {
    *applied = false;
    return e;
  }
  const int32_t id = unary[rng.below(unary.size())];
  const int32_t child = e.node(id).a;
  std::vector<Node> arena = e.nodes();
  int32_t root = e.root();
  if (id == root) {
    root = child;
  } else {
    const int32_t p = parent_of(e, id);
    if (arena[static_cast<size_t>(p)].a == id)
      arena[static_cast<size_t>(p)].a = child;
    else
      arena[static_cast<size_t>(p)].b = child;
  }
  return LossExpr::make(std::move(arena), root, e.branch(), limits);
}

LossExpr kernel_replace_with_leaf(const LossExpr& e, Rng& rng,
                                  const ExprLimits& limits) {
  const auto id = static_cast<int32_t>(rng.below(static_cast<uint64_t>(e.size())));
  return replace_subtree(e, id, random_leaf(e.branch(), rng), limits);
}

LossExpr kernel_graft(const LossExpr& e, Rng& rng, const ExprLimits& limits) {
  const auto id = static_cast<int32_t>(rng.below(static_cast<uint64_t>(e.size())));
  LossExpr sub = random_expr(e.branch(), rng, kGraftBudget, limits);
  return replace_subtree(e, id, sub, limits);
}

}  // namespace

LossExpr mutate(const LossExpr& e, Rng& rng, const ExprLimits& limits,
                MutTrace* trace) {
  const size_t kernel = rng.weighted(kMutationWeights);
  if (trace) ++trace->kernel_counts[kernel];
  bool applied = true;
  try {
    LossExpr out;
    switch (kernel) {
      case 0: out = kernel_replace_same_arity(e, rng, limits); break;
      case 1: out = kernel_insert_unary(e, rng, limits); break;
      case 2: out = kernel_delete_unary(e, rng, limits, &applied); break;
      case 3: out = kernel_replace_with_leaf(e, rng, limits); break;
      default: out = kernel_graft(e, rng, limits); break;
    }
    if (!applied && trace) ++trace->fallbacks;
    return out;
  } catch (const ExprError&) {
    if (trace) ++trace->fallbacks;
    return e;  // limits exceeded: keep the parent
  }
}

std::pair<LossExpr, LossExpr> crossover_at(const LossExpr& a, const LossExpr& b,
                                           int32_t ia, int32_t ib,
                                           const ExprLimits& limits) {
  if (a.branch() != b.branch())
    throw ExprError(ExprError::Kind::WrongBranchSymbol,
                    "crossover operands must share a branch");
  LossExpr sa = subtree(a, ia);
  LossExpr sb = subtree(b, ib);
  LossExpr ca, cb;
  try {
    ca = replace_subtree(a, ia, sb, limits);
  } catch (const ExprError&) {
    ca = a;  // limit-violating child: keep the parent
  }
  try {
    cb = replace_subtree(b, ib, sa, limits);
  } catch (const ExprError&) {
    cb = b;
  }
  return {std::move(ca), std::move(cb)};
}

std::pair<LossExpr, LossExpr> crossover(const LossExpr& a, const LossExpr& b,
                                        Rng& rng, const ExprLimits& limits) {
  const auto ia = static_cast<int32_t>(rng.below(static_cast<uint64_t>(a.size())));
  const auto ib = static_cast<int32_t>(rng.below(static_cast<uint64_t>(b.size())));
  return crossover_at(a, b, ia, ib, limits);
}

std::vector<PopEntry> seed_population(const LossExpr& initial, int n, Rng& rng,
                                      const ExprLimits& limits) {
  std::vector<PopEntry> out;
  out.reserve(static_cast<size_t>(n));
  std::unordered_set<uint64_t> seen;
  if (n >= 1) {
    out.push_back({initial, {}});
    seen.insert(initial.canonical_key());
  }
  while (static_cast<int>(out.size()) < n) {
    LossExpr cand;
    for (int attempt = 0;; ++attempt) {
      cand = initial;
      const int hops = static_cast<int>(rng.range(1, 3));
      for (int h = 0; h < hops; ++h) cand = mutate(cand, rng, limits);
      if (seen.insert(cand.canonical_key()).second || attempt >= kSeedRetries) break;
    }
    out.push_back({std::move(cand), {initial.canonical_key()}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// engine

namespace {

const SearchConfig& checked(const SearchConfig& cfg) {
  cfg.validate();
  return cfg;
}

}  // namespace

SearchEngine::SearchEngine(const SearchConfig& cfg)
    : cfg_(checked(cfg)), task_(cfg.resolved_dataset_seed()) {}

SearchEngine::GenOutcome SearchEngine::run_generation(const std::vector<PopEntry>& pop,
                                                      double threshold, int gen,
                                                      SearchLog& log,
                                                      uint64_t force_key) {
  const int n = static_cast<int>(pop.size());
  if (n == 0) throw EmptyFunnelError();
  std::vector<uint64_t> keys(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) keys[static_cast<size_t>(i)] = pop[static_cast<size_t>(i)].expr.canonical_key();

  // Stage 1: verify. Unique cache misses are computed in parallel and merged
  // in index order so the caches never depend on the worker count.
  {
    std::vector<int> miss;
    std::unordered_set<uint64_t> pending;
    for (int i = 0; i < n; ++i)
      if (!verify_cache_.count(keys[static_cast<size_t>(i)]) &&
          pending.insert(keys[static_cast<size_t>(i)]).second)
        miss.push_back(i);
    std::vector<VerificationReport> reports(miss.size());
    parallel_for_index(static_cast<int>(miss.size()), cfg_.workers, [&](int j) {
      reports[static_cast<size_t>(j)] =
          verify(pop[static_cast<size_t>(miss[static_cast<size_t>(j)])].expr);
    });
    for (size_t j = 0; j < miss.size(); ++j)
      verify_cache_.emplace(keys[static_cast<size_t>(miss[j])], std::move(reports[j]));
  }

  int n_valid = 0;
  std::vector<int> verified;
  for (int i = 0; i < n; ++i) {
    const VerificationReport& rep = verify_cache_.at(keys[static_cast<size_t>(i)]);
    if (rep.validness.value_or(false)) ++n_valid;
    if (rep.overall) verified.push_back(i);
    log.records.push_back({gen, print(pop[static_cast<size_t>(i)].expr), "verify",
                           std::nullopt, rep.overall, rep.millis});
  }
  const int n_property_pass = static_cast<int>(verified.size());
  if (verified.empty()) throw EmptyFunnelError();

  // Stage 2: simulate every survivor, then apply the threshold.
  {
    std::vector<int> miss;
    std::unordered_set<uint64_t> pending;
    for (int i : verified)
      if (!sim_cache_.count(keys[static_cast<size_t>(i)]) &&
          pending.insert(keys[static_cast<size_t>(i)]).second)
        miss.push_back(i);
    std::vector<double> sims(miss.size());
    parallel_for_index(static_cast<int>(miss.size()), cfg_.workers, [&](int j) {
      sims[static_cast<size_t>(j)] =
          simulate(pop[static_cast<size_t>(miss[static_cast<size_t>(j)])].expr, task_).metric;
    });
    for (size_t j = 0; j < miss.size(); ++j)
      sim_cache_.emplace(keys[static_cast<size_t>(miss[j])], sims[j]);
  }

  double best_sim = kNegInf;
  for (int i : verified)
    best_sim = std::max(best_sim, sim_cache_.at(keys[static_cast<size_t>(i)]));

  auto above = [&](double cut) {
    std::vector<int> out;
    for (int i : verified)
      if (sim_cache_.at(keys[static_cast<size_t>(i)]) >= cut) out.push_back(i);
    return out;
  };
  double used = threshold;
  std::vector<int> survivors = above(used);
  while (survivors.empty()) {
    // Relaxation: nothing cleared the bar, so lower it and log the event.
    used = std::isfinite(used) ? used * 0.9 : best_sim;
    if (std::isfinite(used) && used < 1e-12) used = kNegInf;
    log.records.push_back({gen, "", "threshold_relax", used, std::nullopt, 0.0});
    survivors = above(used);
  }
  for (int i : verified) {
    const double sim = sim_cache_.at(keys[static_cast<size_t>(i)]);
    log.records.push_back({gen, print(pop[static_cast<size_t>(i)].expr), "simulate",
                           sim, sim >= used, 0.0});
  }

  // Stage 3: top-K by simulation metric, unique by key, deterministic order.
  std::vector<int> ranked = survivors;
  std::stable_sort(ranked.begin(), ranked.end(), [&](int a, int b) {
    const double sa = sim_cache_.at(keys[static_cast<size_t>(a)]);
    const double sb = sim_cache_.at(keys[static_cast<size_t>(b)]);
    if (sa != sb) return sa > sb;
    return keys[static_cast<size_t>(a)] < keys[static_cast<size_t>(b)];
  });
  std::vector<int> topk;
  {
    std::unordered_set<uint64_t> taken;
    for (int i : ranked) {
      if (static_cast<int>(topk.size()) >= cfg_.top_k) break;
      if (taken.insert(keys[static_cast<size_t>(i)]).second) topk.push_back(i);
    }
    if (force_key != 0 && !taken.count(force_key)) {
      for (int i : ranked)
        if (keys[static_cast<size_t>(i)] == force_key) {
          if (static_cast<int>(topk.size()) >= cfg_.top_k) topk.back() = i;
          else topk.push_back(i);
          break;
        }
    }
  }

  // Stage 4: proxy fitness on the K.
  {
    std::vector<int> miss;
    for (int i : topk)
      if (!fitness_cache_.count(keys[static_cast<size_t>(i)])) miss.push_back(i);
    std::vector<double> fits(miss.size());
    parallel_for_index(static_cast<int>(miss.size()), cfg_.workers, [&](int j) {
      fits[static_cast<size_t>(j)] =
          proxy_fitness(pop[static_cast<size_t>(miss[static_cast<size_t>(j)])].expr, task_)
              .metric;
    });
    for (size_t j = 0; j < miss.size(); ++j)
      fitness_cache_.emplace(keys[static_cast<size_t>(miss[j])], fits[j]);
    proxy_evals_ += static_cast<long>(miss.size());
  }

  // Stage 5: top-P parents by fitness over the proxied set plus any carried
  // candidate that already has a cached fitness (elitism).
  std::vector<int> pool = topk;
  {
    std::unordered_set<uint64_t> in_pool;
    for (int i : topk) in_pool.insert(keys[static_cast<size_t>(i)]);
    for (int i = 0; i < n; ++i)
      if (fitness_cache_.count(keys[static_cast<size_t>(i)]) &&
          in_pool.insert(keys[static_cast<size_t>(i)]).second)
        pool.push_back(i);
  }
  std::stable_sort(pool.begin(), pool.end(), [&](int a, int b) {
    const double fa = fitness_cache_.at(keys[static_cast<size_t>(a)]);
    const double fb = fitness_cache_.at(keys[static_cast<size_t>(b)]);
    if (fa != fb) return fa > fb;
    return keys[static_cast<size_t>(a)] < keys[static_cast<size_t>(b)];
  });

  GenOutcome out;
  for (int i : pool) {
    if (static_cast<int>(out.parents.size()) >= cfg_.parents) break;
    const uint64_t key = keys[static_cast<size_t>(i)];
    Candidate c;
    c.expr = pop[static_cast<size_t>(i)].expr;
    c.report = verify_cache_.at(key);
    c.sim = sim_cache_.at(key);
    c.fitness = fitness_cache_.at(key);
    c.generation = gen;
    c.lineage = pop[static_cast<size_t>(i)].lineage;
    out.parents.push_back(std::move(c));
  }
  out.new_threshold = sim_cache_.at(keys[static_cast<size_t>(pool.front())]);

  std::unordered_set<uint64_t> parent_keys;
  for (const Candidate& c : out.parents) parent_keys.insert(c.expr.canonical_key());
  for (int i : topk) {
    const uint64_t key = keys[static_cast<size_t>(i)];
    log.records.push_back({gen, print(pop[static_cast<size_t>(i)].expr), "proxy",
                           fitness_cache_.at(key), parent_keys.count(key) > 0, 0.0});
  }
  for (const Candidate& c : out.parents)
    log.records.push_back({gen, print(c.expr), "parent", *c.fitness, true, 0.0});

  GenerationSummary row;
  row.gen = gen;
  row.n_seeded = n;
  row.n_valid = n_valid;
  row.n_property_pass = n_property_pass;
  row.n_simulated = static_cast<int>(survivors.size());
  row.n_proxy = static_cast<int>(topk.size());
  row.best_sim = best_sim;
  row.best_fitness = *out.parents.front().fitness;
  row.threshold = used;
  for (const Candidate& c : out.parents) row.parent_keys.push_back(c.expr.canonical_key());
  log.generations.push_back(std::move(row));
  return out;
}

std::vector<PopEntry> SearchEngine::offspring(const std::vector<Candidate>& parents,
                                              Rng& rng) {
  const int n = cfg_.resolved_population();
  std::vector<PopEntry> out;
  out.reserve(static_cast<size_t>(n));
  std::unordered_set<uint64_t> seen;
  for (const Candidate& p : parents) {  // elitist carry-over
    if (static_cast<int>(out.size()) >= n) break;
    out.push_back({p.expr, p.lineage});
    seen.insert(p.expr.canonical_key());
  }

  std::vector<PopEntry> pending;
  int retries = 0;
  while (static_cast<int>(out.size()) < n) {
    if (pending.empty()) {
      const size_t ia = rng.below(parents.size());
      const size_t ib = rng.below(parents.size());
      const uint64_t ka = parents[ia].expr.canonical_key();
      const uint64_t kb = parents[ib].expr.canonical_key();
      LossExpr ca = parents[ia].expr;
      LossExpr cb = parents[ib].expr;
      std::vector<uint64_t> lin_a{ka}, lin_b{kb};
      if (rng.uniform() < cfg_.crossover_p) {
        std::tie(ca, cb) = crossover(ca, cb, rng, cfg_.limits);
        lin_a = {ka, kb};
        lin_b = {ka, kb};
      }
      if (rng.uniform() < cfg_.mutation_p) ca = mutate(ca, rng, cfg_.limits);
      if (rng.uniform() < cfg_.mutation_p) cb = mutate(cb, rng, cfg_.limits);
      pending.push_back({std::move(ca), std::move(lin_a)});
      pending.push_back({std::move(cb), std::move(lin_b)});
    }
    PopEntry cand = std::move(pending.back());
    pending.pop_back();
    if (seen.insert(cand.expr.canonical_key()).second || retries >= kOffspringRetries) {
      out.push_back(std::move(cand));
      retries = 0;
    } else {
      ++retries;
    }
  }
  return out;
}

SearchResult SearchEngine::run_generational(bool funnel) {
  const auto t0 = std::chrono::steady_clock::now();
  const long proxy_start = proxy_evals_;
  SearchResult res;

  Rng rng = Rng::derive(cfg_.seed, 0, kTagSearch);
  const LossExpr init = zoo_expr(cfg_.resolved_initial());
  std::vector<PopEntry> pop =
      seed_population(init, cfg_.resolved_population(), rng, cfg_.limits);

  double threshold = kNegInf;
  std::optional<Candidate> best;
  for (int gen = 1; gen <= cfg_.generations; ++gen) {
    GenOutcome out =
        funnel ? run_generation(pop, threshold, gen, res.log,
                                gen == 1 ? init.canonical_key() : 0)
               : run_generation_vanilla(pop, gen, res.log);
    threshold = out.new_threshold;
    const Candidate& top = out.parents.front();
    if (!best || *top.fitness > *best->fitness ||
        (*top.fitness == *best->fitness &&
         top.expr.canonical_key() < best->expr.canonical_key()))
      best = top;
    if (gen < cfg_.generations) pop = offspring(out.parents, rng);
  }
  res.best = std::move(best);
  res.proxy_evals = proxy_evals_ - proxy_start;
  res.wall_seconds = elapsed_ms(t0) / 1000.0;
  return res;
}

SearchEngine::GenOutcome SearchEngine::run_generation_vanilla(
    const std::vector<PopEntry>& pop, int gen, SearchLog& log) {
  const int n = static_cast<int>(pop.size());
  if (n == 0) throw EmptyFunnelError();
  std::vector<uint64_t> keys(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) keys[static_cast<size_t>(i)] = pop[static_cast<size_t>(i)].expr.canonical_key();

  {
    std::vector<int> miss;
    std::unordered_set<uint64_t> pending;
    for (int i = 0; i < n; ++i)
      if (!valid_cache_.count(keys[static_cast<size_t>(i)]) &&
          pending.insert(keys[static_cast<size_t>(i)]).second)
        miss.push_back(i);
    std::vector<char> ok(miss.size());
    parallel_for_index(static_cast<int>(miss.size()), cfg_.workers, [&](int j) {
      ok[static_cast<size_t>(j)] =
          check_validness(pop[static_cast<size_t>(miss[static_cast<size_t>(j)])].expr) ? 1 : 0;
    });
    for (size_t j = 0; j < miss.size(); ++j)
      valid_cache_.emplace(keys[static_cast<size_t>(miss[j])], ok[j] != 0);
  }

  std::vector<int> valid;
  for (int i = 0; i < n; ++i) {
    const bool ok = valid_cache_.at(keys[static_cast<size_t>(i)]);
    if (ok) valid.push_back(i);
    log.records.push_back(
        {gen, print(pop[static_cast<size_t>(i)].expr), "validness", std::nullopt, ok, 0.0});
  }
  if (valid.empty()) throw EmptyFunnelError();

  // no property funnel: everything valid goes straight to the proxy task
  std::vector<int> proxied;
  {
    std::vector<int> miss;
    std::unordered_set<uint64_t> pending;
    for (int i : valid) {
      if (!pending.insert(keys[static_cast<size_t>(i)]).second) continue;
      proxied.push_back(i);
      if (!fitness_cache_.count(keys[static_cast<size_t>(i)])) miss.push_back(i);
    }
    std::vector<double> fits(miss.size());
    parallel_for_index(static_cast<int>(miss.size()), cfg_.workers, [&](int j) {
      fits[static_cast<size_t>(j)] =
          proxy_fitness(pop[static_cast<size_t>(miss[static_cast<size_t>(j)])].expr, task_)
              .metric;
    });
    for (size_t j = 0; j < miss.size(); ++j)
      fitness_cache_.emplace(keys[static_cast<size_t>(miss[j])], fits[j]);
    proxy_evals_ += static_cast<long>(miss.size());
  }

  std::vector<int> pool = proxied;
  {
    std::unordered_set<uint64_t> in_pool;
    for (int i : proxied) in_pool.insert(keys[static_cast<size_t>(i)]);
    for (int i = 0; i < n; ++i)
      if (fitness_cache_.count(keys[static_cast<size_t>(i)]) &&
          in_pool.insert(keys[static_cast<size_t>(i)]).second)
        pool.push_back(i);
  }
  std::stable_sort(pool.begin(), pool.end(), [&](int a, int b) {
    const double fa = fitness_cache_.at(keys[static_cast<size_t>(a)]);
    const double fb = fitness_cache_.at(keys[static_cast<size_t>(b)]);
    if (fa != fb) return fa > fb;
    return keys[static_cast<size_t>(a)] < keys[static_cast<size_t>(b)];
  });

  GenOutcome out;
  for (int i : pool) {
    if (static_cast<int>(out.parents.size()) >= cfg_.parents) break;
    const uint64_t key = keys[static_cast<size_t>(i)];
    Candidate c;
    c.expr = pop[static_cast<size_t>(i)].expr;
    c.fitness = fitness_cache_.at(key);
    c.generation = gen;
    c.lineage = pop[static_cast<size_t>(i)].lineage;
    out.parents.push_back(std::move(c));
  }
  out.new_threshold = kNegInf;

  std::unordered_set<uint64_t> parent_keys;
  for (const Candidate& c : out.parents) parent_keys.insert(c.expr.canonical_key());
  for (int i : proxied) {
    const uint64_t key = keys[static_cast<size_t>(i)];
    log.records.push_back({gen, print(pop[static_cast<size_t>(i)].expr), "proxy",
                           fitness_cache_.at(key), parent_keys.count(key) > 0, 0.0});
  }
  for (const Candidate& c : out.parents)
    log.records.push_back({gen, print(c.expr), "parent", *c.fitness, true, 0.0});

  GenerationSummary row;
  row.gen = gen;
  row.n_seeded = n;
  row.n_valid = static_cast<int>(valid.size());
  row.n_property_pass = static_cast<int>(valid.size());
  row.n_simulated = static_cast<int>(valid.size());
  row.n_proxy = static_cast<int>(proxied.size());
  row.best_sim = 0.0;
  row.best_fitness = *out.parents.front().fitness;
  row.threshold = kNegInf;
  for (const Candidate& c : out.parents) row.parent_keys.push_back(c.expr.canonical_key());
  log.generations.push_back(std::move(row));
  return out;
}

SearchResult SearchEngine::run() { return run_generational(true); }
SearchResult SearchEngine::run_vanilla() { return run_generational(false); }

SearchResult SearchEngine::run_random() {
  const auto t0 = std::chrono::steady_clock::now();
  const long proxy_start = proxy_evals_;
  SearchResult res;

  Rng rng = Rng::derive(cfg_.seed, 0, kTagRandom);
  const int budget = cfg_.random_budget;
  std::vector<LossExpr> cands;
  cands.reserve(static_cast<size_t>(budget));
  for (int i = 0; i < budget; ++i)
    cands.push_back(random_expr(cfg_.branch, rng, kRandomSizeBudget, cfg_.limits));

  // no funnel: every candidate runs every stage
  std::vector<VerificationReport> reports(cands.size());
  std::vector<double> sims(cands.size()), fits(cands.size());
  parallel_for_index(budget, cfg_.workers, [&](int i) {
    reports[static_cast<size_t>(i)] = verify(cands[static_cast<size_t>(i)]);
    sims[static_cast<size_t>(i)] = simulate(cands[static_cast<size_t>(i)], task_).metric;
    fits[static_cast<size_t>(i)] = proxy_fitness(cands[static_cast<size_t>(i)], task_).metric;
  });
  proxy_evals_ += budget;

  int best_i = -1;
  for (int i = 0; i < budget; ++i) {
    const std::string text = print(cands[static_cast<size_t>(i)]);
    log_random_candidate(res.log, text, reports[static_cast<size_t>(i)],
                         sims[static_cast<size_t>(i)], fits[static_cast<size_t>(i)]);
    if (best_i < 0 || fits[static_cast<size_t>(i)] > fits[static_cast<size_t>(best_i)] ||
        (fits[static_cast<size_t>(i)] == fits[static_cast<size_t>(best_i)] &&
         cands[static_cast<size_t>(i)].canonical_key() <
             cands[static_cast<size_t>(best_i)].canonical_key()))
      best_i = i;
  }
  if (best_i >= 0) {
    Candidate c;
    c.expr = cands[static_cast<size_t>(best_i)];
    c.report = reports[static_cast<size_t>(best_i)];
    c.sim = sims[static_cast<size_t>(best_i)];
    c.fitness = fits[static_cast<size_t>(best_i)];
    c.generation = 0;
    res.best = std::move(c);
  }
  res.proxy_evals = proxy_evals_ - proxy_start;
  res.wall_seconds = elapsed_ms(t0) / 1000.0;
  return res;
}

void SearchEngine::log_random_candidate(SearchLog& log, const std::string& text,
                                        const VerificationReport& rep, double sim,
                                        double fit) {
  log.records.push_back({1, text, "verify", std::nullopt, rep.overall, rep.millis});
  log.records.push_back({1, text, "simulate", sim, std::nullopt, 0.0});
  log.records.push_back({1, text, "proxy", fit, std::nullopt, 0.0});
}

SearchResult run_search(const SearchConfig& cfg) {
  SearchEngine engine(cfg);
  return engine.run();
}

SearchResult run_vanilla_ea(const SearchConfig& cfg) {
  SearchEngine engine(cfg);
  return engine.run_vanilla();
}

SearchResult run_random_search(const SearchConfig& cfg) {
  SearchEngine engine(cfg);
  return engine.run_random();
}

// ---------------------------------------------------------------------------
// artifacts

namespace {

void atomic_write(const std::filesystem::path& path, const std::string& content) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
    if (!out.flush()) throw std::runtime_error("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

void write_artifacts(const SearchResult& result, const SearchConfig& cfg,
                     const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);

  std::string jsonl;
  for (const CandidateRecord& r : result.log.records) {
    nlohmann::json j;
    j["gen"] = r.gen;
    j["expr"] = r.expr;
    j["stage"] = r.stage;
    j["value"] = r.value ? nlohmann::json(*r.value) : nlohmann::json(nullptr);
    j["pass"] = r.pass ? nlohmann::json(*r.pass) : nlohmann::json(nullptr);
    j["millis"] = r.millis;
    jsonl += j.dump();
    jsonl += "\n";
  }
  atomic_write(out_dir / "candidates.jsonl", jsonl);

  std::string csv =
      "gen,n_seeded,n_valid,n_property_pass,n_simulated,n_proxy,best_sim,"
      "best_fitness,threshold\n";
  for (const GenerationSummary& g : result.log.generations) {
    csv += std::to_string(g.gen) + "," + std::to_string(g.n_seeded) + "," +
           std::to_string(g.n_valid) + "," + std::to_string(g.n_property_pass) + "," +
           std::to_string(g.n_simulated) + "," + std::to_string(g.n_proxy) + "," +
           fmt_double(g.best_sim) + "," + fmt_double(g.best_fitness) + "," +
           fmt_double(g.threshold) + "\n";
  }
  atomic_write(out_dir / "summary.csv", csv);

  std::string best;
  if (result.best) {
    best = print(result.best->expr) + "\n" + "fitness = " +
           fmt_double(result.best->fitness.value_or(0.0)) + "\n";
  } else {
    best = "none\n";
  }
  atomic_write(out_dir / "best.loss", best);

  atomic_write(out_dir / "config.effective", render_config(cfg));
}

}  // namespace autoloss
