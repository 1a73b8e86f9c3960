#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "autoloss/search.hpp"
#include "autoloss/zoo.hpp"
#include "doctest.h"

using namespace autoloss;
namespace fs = std::filesystem;

namespace {

SearchConfig small_cls(uint64_t seed = 5) {
  SearchConfig cfg;
  cfg.branch = Branch::Classification;
  cfg.population = 120;
  cfg.generations = 3;
  cfg.seed = seed;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

}  // namespace

TEST_CASE("config text round-trips through render and parse") {
  SearchConfig cfg = parse_config("branch = reg\nseed = 9\nparents=2\ntop_k = 4\n");
  CHECK(cfg.branch == Branch::Regression);
  CHECK(cfg.seed == 9);
  CHECK(cfg.parents == 2);
  CHECK(cfg.top_k == 4);
  CHECK(cfg.generations == 5);
  CHECK(cfg.resolved_population() == 1000);
  CHECK(cfg.resolved_initial() == "giou");
  CHECK(cfg.resolved_dataset_seed() == 9);

  SearchConfig back = parse_config(render_config(cfg));
  CHECK(back.branch == cfg.branch);
  CHECK(back.seed == cfg.seed);
  CHECK(back.population == cfg.resolved_population());
  CHECK(back.initial == "giou");
  CHECK(back.crossover_p == cfg.crossover_p);

  SearchConfig commented = parse_config("branch = cls  # the head\n# full line\n");
  CHECK(commented.branch == Branch::Classification);
  CHECK(commented.resolved_initial() == "cei");
}

TEST_CASE("config errors name the offending key") {
  CHECK_THROWS_WITH_AS(parse_config("branch = cls\nfoo = 1\n"),
                       doctest::Contains("foo"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config("seed = 1\n"), doctest::Contains("branch"),
                       ConfigError);
  CHECK_THROWS_AS(parse_config("branch = sideways\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("branch = cls\nseed = banana\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("branch = cls\ncrossover_p = 1.5\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("branch = cls\nparents = 20\ntop_k = 10\n"),
                  ConfigError);
  CHECK_THROWS_AS(parse_config("branch = cls\npopulation = 5\ntop_k = 10\n"),
                  ConfigError);
  CHECK_THROWS_AS(parse_config("branch = cls\ninitial = nonesuch\n"), ConfigError);
  // zoo loss from the wrong branch
  CHECK_THROWS_AS(parse_config("branch = cls\ninitial = giou\n"), ConfigError);
}

TEST_CASE("seed_population pins slot zero and avoids duplicates") {
  const LossExpr cei = zoo_expr("cei");

  Rng one(3);
  auto single = seed_population(cei, 1, one);
  REQUIRE(single.size() == 1);
  CHECK(structurally_equal(single[0].expr, cei));
  CHECK(single[0].lineage.empty());

  Rng a(3), b(3), c(4);
  auto pa = seed_population(cei, 100, a);
  auto pb = seed_population(cei, 100, b);
  auto pc = seed_population(cei, 100, c);
  REQUIRE(pa.size() == 100);
  CHECK(structurally_equal(pa[0].expr, cei));
  std::set<uint64_t> keys;
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].expr.canonical_key() == pb[i].expr.canonical_key());
    keys.insert(pa[i].expr.canonical_key());
    if (i > 0) {
      REQUIRE(pa[i].lineage.size() == 1);
      CHECK(pa[i].lineage[0] == cei.canonical_key());
    }
  }
  CHECK(keys.size() >= 80);  // near-total dedup under the default kernel
  bool differs = false;
  for (size_t i = 0; i < pa.size(); ++i)
    if (pa[i].expr.canonical_key() != pc[i].expr.canonical_key()) differs = true;
  CHECK(differs);
}

TEST_CASE("mutation kernel frequencies match the declared weights") {
  const LossExpr ce = zoo_expr("ce");
  Rng rng(11);
  MutTrace trace;
  const long n = 10000;
  for (long i = 0; i < n; ++i) (void)mutate(ce, rng, {}, &trace);

  double chi2 = 0;
  long total = 0;
  for (size_t k = 0; k < 5; ++k) total += trace.kernel_counts[k];
  CHECK(total == n);
  for (size_t k = 0; k < 5; ++k) {
    const double expected = n * kMutationWeights[k];
    const double d = trace.kernel_counts[k] - expected;
    chi2 += d * d / expected;
  }
  CHECK(chi2 < 18.47);  // chi-square, 4 dof, p = 0.999
}

TEST_CASE("mutation kernels produce the pinned edits") {
  const ExprLimits lim;

  SUBCASE("delete-unary can strip Neg(X) to X") {
    const LossExpr e = parse("Neg(X)", Branch::Classification);
    bool saw_x = false;
    for (uint64_t s = 0; s < 400 && !saw_x; ++s) {
      Rng rng(s);
      if (print(mutate(e, rng, lim)) == "X") saw_x = true;
    }
    CHECK(saw_x);
  }
  SUBCASE("insert-unary can wrap X into Abs(X)") {
    const LossExpr e = parse("X", Branch::Classification);
    bool saw = false;
    for (uint64_t s = 0; s < 2000 && !saw; ++s) {
      Rng rng(s);
      if (print(mutate(e, rng, lim)) == "Abs(X)") saw = true;
    }
    CHECK(saw);
  }
  SUBCASE("kernels that cannot apply fall back to the input") {
    const LossExpr leaf = parse("X", Branch::Classification);
    Rng rng(2);
    MutTrace trace;
    for (int i = 0; i < 2000; ++i) (void)mutate(leaf, rng, lim, &trace);
    CHECK(trace.fallbacks > 0);  // delete-unary has nothing to delete
  }
  SUBCASE("results always respect the limits") {
    const LossExpr big = zoo_expr("searched_b_reg");  // 63 nodes, depth 10
    Rng rng(7);
    for (int i = 0; i < 2000; ++i) {
      LossExpr m = mutate(big, rng, kZooLimits);
      CHECK(m.size() <= kZooLimits.max_nodes);
      CHECK(m.depth() <= kZooLimits.max_depth);
      CHECK(m.branch() == Branch::Regression);
    }
  }
  SUBCASE("mutations of regression losses never borrow classification ops") {
    const LossExpr giou = zoo_expr("giou");
    Rng rng(13);
    for (int i = 0; i < 3000; ++i) {
      LossExpr m = mutate(giou, rng);
      const std::string s = print(m);
      CHECK(s.find("Sig") == std::string::npos);
      CHECK(s.find("Softmax") == std::string::npos);
      CHECK(s.find("Dot") == std::string::npos);
    }
  }
}

TEST_CASE("crossover swaps subtrees with parent fallback") {
  const LossExpr a = parse("Add(X,Y)", Branch::Classification);
  const LossExpr b = parse("Mul(W,Sig(X))", Branch::Classification);

  SUBCASE("root-root swap returns the pair reversed") {
    auto [ca, cb] = crossover_at(a, b, a.root(), b.root());
    CHECK(structurally_equal(ca, b));
    CHECK(structurally_equal(cb, a));
  }
  SUBCASE("self crossover at one point is the identity") {
    for (int32_t i = 0; i < a.size(); ++i) {
      auto [ca, cb] = crossover_at(a, a, i, i);
      CHECK(structurally_equal(ca, a));
      CHECK(structurally_equal(cb, a));
    }
  }
  SUBCASE("branch mismatch is rejected") {
    const LossExpr r = parse("Div(I,U)", Branch::Regression);
    CHECK_THROWS_AS(crossover_at(a, r, 0, 0), ExprError);
  }
  SUBCASE("limit-violating children collapse to their parent") {
    // swapping the big tree into a leaf slot of a mid-size tree overflows
    // the default node limit, so that child must come back unchanged
    const LossExpr big = zoo_expr("searched_b_cls");
    const LossExpr mid = parse("Add(X,Add(Y,Add(W,Add(X,Add(Y,W)))))",
                               Branch::Classification);
    int32_t leaf = -1;
    for (int32_t i = 0; i < mid.size(); ++i)
      if (mid.node(i).kind == NodeKind::Input) leaf = i;
    REQUIRE(leaf >= 0);
    REQUIRE(big.size() + mid.size() > 40);
    auto [cm, cb] = crossover_at(mid, big, leaf, big.root());
    CHECK(structurally_equal(cm, mid));  // overflowed, fell back
    // the other child shrank to a leaf graft and stays legal
    CHECK(cb.size() <= 40);
  }
  SUBCASE("random crossover is reproducible") {
    Rng r1(5), r2(5);
    auto [x1, y1] = crossover(a, b, r1);
    auto [x2, y2] = crossover(a, b, r2);
    CHECK(structurally_equal(x1, x2));
    CHECK(structurally_equal(y1, y2));
  }
}

TEST_CASE("run_generation handles the pinned edge cases") {
  SearchConfig cfg = small_cls();
  cfg.population = 10;  // validate() floor; the hand-built pops below are tiny
  SearchEngine engine(cfg);
  SearchLog log;

  SUBCASE("a lone verified candidate becomes the parent") {
    std::vector<PopEntry> pop{{zoo_expr("ce"), {}}};
    auto out = engine.run_generation(pop, -1e300, 1, log);
    REQUIRE(out.parents.size() == 1);
    CHECK(structurally_equal(out.parents[0].expr, zoo_expr("ce")));
    CHECK(out.parents[0].fitness.has_value());
    CHECK(out.new_threshold == *out.parents[0].sim);
  }
  SUBCASE("infinite threshold takes the logged relaxation path") {
    std::vector<PopEntry> pop{{zoo_expr("ce"), {}}};
    auto out = engine.run_generation(
        pop, std::numeric_limits<double>::infinity(), 1, log);
    REQUIRE(out.parents.size() == 1);
    bool relaxed = false;
    for (const auto& r : log.records)
      if (r.stage == "threshold_relax") relaxed = true;
    CHECK(relaxed);
  }
  SUBCASE("nothing past verification raises EmptyFunnel") {
    std::vector<PopEntry> pop{{parse("Neg(X)", Branch::Classification), {}},
                              {parse("Exp(Exp(X))", Branch::Classification), {}}};
    CHECK_THROWS_AS(engine.run_generation(pop, -1e300, 1, log), EmptyFunnelError);
  }
}

TEST_CASE("search keeps the funnel invariants and beats its seed") {
  SearchConfig cfg = small_cls();
  SearchResult res = run_search(cfg);

  REQUIRE(res.best.has_value());
  REQUIRE(res.log.generations.size() == 3);

  // elitist floor: the unmutated initial loss is proxy-scored in generation 1
  const double seed_fitness =
      proxy_fitness(zoo_expr(cfg.resolved_initial()), SimTask(cfg.seed)).metric;
  CHECK(*res.best->fitness >= seed_fitness);

  CHECK(res.proxy_evals <= static_cast<long>(cfg.generations) * cfg.top_k);
  CHECK(res.proxy_evals > 0);

  double prev_best = -1.0;
  for (const GenerationSummary& g : res.log.generations) {
    CHECK(g.n_seeded == 120);
    CHECK(g.n_valid <= g.n_seeded);
    CHECK(g.n_property_pass <= g.n_valid);
    CHECK(g.n_simulated <= g.n_property_pass);
    CHECK(g.n_proxy <= g.n_simulated);
    CHECK(g.n_proxy <= cfg.top_k);
    CHECK(g.best_fitness >= prev_best);  // parents carry their scores forward
    prev_best = g.best_fitness;
    CHECK(g.parent_keys.size() == static_cast<size_t>(cfg.parents));
  }

  // funnel ordering straight from the log: a candidate only reaches a stage
  // after passing the previous one in the same generation
  std::set<std::pair<int, std::string>> verify_pass, sim_pass;
  for (const CandidateRecord& r : res.log.records) {
    if (r.stage == "verify" && r.pass == true) verify_pass.insert({r.gen, r.expr});
    if (r.stage == "simulate") {
      CHECK(verify_pass.count({r.gen, r.expr}) == 1);
      if (r.pass == true) sim_pass.insert({r.gen, r.expr});
    }
    if (r.stage == "proxy") CHECK(sim_pass.count({r.gen, r.expr}) == 1);
  }
}

TEST_CASE("regression search honors the same elitist floor") {
  SearchConfig cfg;
  cfg.branch = Branch::Regression;
  cfg.population = 80;
  cfg.generations = 2;
  cfg.seed = 3;
  SearchResult res = run_search(cfg);
  REQUIRE(res.best.has_value());
  const double seed_fitness =
      proxy_fitness(zoo_expr("giou"), SimTask(cfg.seed)).metric;
  CHECK(*res.best->fitness >= seed_fitness);
  // the winner still verifies
  CHECK(verify(res.best->expr).overall);
}

TEST_CASE("single-worker reruns are identical; multi-worker picks the same parents") {
  SearchConfig cfg = small_cls(17);

  SearchResult a = run_search(cfg);
  SearchResult b = run_search(cfg);
  REQUIRE(a.log.generations.size() == b.log.generations.size());
  for (size_t g = 0; g < a.log.generations.size(); ++g) {
    const auto& ga = a.log.generations[g];
    const auto& gb = b.log.generations[g];
    CHECK(ga.n_valid == gb.n_valid);
    CHECK(ga.n_property_pass == gb.n_property_pass);
    CHECK(ga.n_simulated == gb.n_simulated);
    CHECK(ga.n_proxy == gb.n_proxy);
    CHECK(ga.best_sim == gb.best_sim);          // bitwise
    CHECK(ga.best_fitness == gb.best_fitness);  // bitwise
    CHECK(ga.parent_keys == gb.parent_keys);
  }
  CHECK(a.best->expr.canonical_key() == b.best->expr.canonical_key());

  SearchConfig wide = cfg;
  wide.workers = 4;
  SearchResult c = run_search(wide);
  REQUIRE(c.log.generations.size() == a.log.generations.size());
  for (size_t g = 0; g < a.log.generations.size(); ++g)
    CHECK(c.log.generations[g].parent_keys == a.log.generations[g].parent_keys);
  CHECK(c.best->expr.canonical_key() == a.best->expr.canonical_key());
}

TEST_CASE("vanilla EA spends far more proxy evaluations") {
  SearchConfig cfg = small_cls(29);
  SearchResult cse = run_search(cfg);
  SearchResult vanilla = run_vanilla_ea(cfg);
  REQUIRE(vanilla.best.has_value());
  CHECK(vanilla.proxy_evals > 3 * cse.proxy_evals);
  // and does not find anything meaningfully better on this task
  CHECK(*cse.best->fitness >= *vanilla.best->fitness - 0.02);
  for (const GenerationSummary& g : vanilla.log.generations) {
    CHECK(g.n_proxy <= g.n_valid);
    CHECK(g.threshold == -std::numeric_limits<double>::infinity());
  }
}

TEST_CASE("random search respects its budget") {
  SearchConfig cfg = small_cls(31);

  SearchConfig none = cfg;
  none.random_budget = 0;
  SearchResult empty = run_random_search(none);
  CHECK_FALSE(empty.best.has_value());
  CHECK(empty.proxy_evals == 0);
  CHECK(empty.log.records.empty());
  CHECK(empty.log.generations.empty());

  cfg.random_budget = 30;
  SearchResult r1 = run_random_search(cfg);
  SearchResult r2 = run_random_search(cfg);
  CHECK(r1.proxy_evals == 30);
  REQUIRE(r1.best.has_value());
  CHECK(r1.best->expr.canonical_key() == r2.best->expr.canonical_key());
  CHECK(*r1.best->fitness == *r2.best->fitness);
  // every candidate hits all three stages: no funnel
  int verifies = 0, proxies = 0;
  for (const CandidateRecord& r : r1.log.records) {
    if (r.stage == "verify") ++verifies;
    if (r.stage == "proxy") ++proxies;
  }
  CHECK(verifies == 30);
  CHECK(proxies == 30);
}

TEST_CASE("artifacts land atomically with the documented shapes") {
  SearchConfig cfg = small_cls(23);
  cfg.generations = 2;
  SearchResult res = run_search(cfg);

  const fs::path dir = fs::temp_directory_path() / "autoloss_test_artifacts";
  fs::remove_all(dir);
  write_artifacts(res, cfg, dir);

  CHECK(fs::exists(dir / "candidates.jsonl"));
  CHECK(fs::exists(dir / "summary.csv"));
  CHECK(fs::exists(dir / "best.loss"));
  CHECK(fs::exists(dir / "config.effective"));
  for (const auto& entry : fs::directory_iterator(dir))
    CHECK(entry.path().extension() != ".tmp");

  const std::string csv = slurp(dir / "summary.csv");
  CHECK(csv.rfind("gen,n_seeded,n_valid,n_property_pass,n_simulated,n_proxy,"
                  "best_sim,best_fitness,threshold\n", 0) == 0);
  size_t lines = 0;
  for (char ch : csv)
    if (ch == '\n') ++lines;
  CHECK(lines == res.log.generations.size() + 1);

  const std::string jsonl = slurp(dir / "candidates.jsonl");
  size_t jl = 0;
  for (char ch : jsonl)
    if (ch == '\n') ++jl;
  CHECK(jl == res.log.records.size());

  // best.loss: first line must parse back in the config branch
  const std::string best = slurp(dir / "best.loss");
  const std::string first = best.substr(0, best.find('\n'));
  CHECK(structurally_equal(parse(first, cfg.branch), res.best->expr));
  CHECK(best.find("fitness = ") != std::string::npos);

  // the effective config is itself a valid config file
  SearchConfig echo = parse_config(slurp(dir / "config.effective"));
  CHECK(echo.seed == cfg.seed);
  CHECK(echo.population == cfg.resolved_population());
  CHECK(echo.branch == cfg.branch);

  fs::remove_all(dir);
}
