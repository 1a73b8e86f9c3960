// Command-line front end: parse/inspect losses, evaluate and gradient-check
// them, run verification and training simulations, and drive full searches.
// Exit codes: 0 success or pass, 1 semantic fail, 2 usage or config error.
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "autoloss/expr.hpp"
#include "autoloss/box.hpp"
#include "autoloss/ops.hpp"
#include "autoloss/parallel.hpp"
#include "autoloss/rng.hpp"
#include "autoloss/search.hpp"
#include "autoloss/simtask.hpp"
#include "autoloss/tensor.hpp"
#include "autoloss/verify.hpp"
#include "autoloss/zoo.hpp"

namespace fs = std::filesystem;
using namespace autoloss;

namespace {

constexpr int kExitPass = 0;
constexpr int kExitFail = 1;
constexpr int kExitUsage = 2;

Branch parse_branch(const std::string& s) {
  if (s == "cls" || s == "classification") return Branch::Classification;
  if (s == "reg" || s == "regression") return Branch::Regression;
  throw ConfigError("branch must be cls or reg");
}

// parse diagnostics with a caret under the offending byte
int report_expr_error(const ExprError& err, const std::string& text) {
  std::fprintf(stderr, "error: %s\n", err.what());
  if (err.pos() != ExprError::npos && err.pos() <= text.size()) {
    std::fprintf(stderr, "  %s\n  %*s^\n", text.c_str(),
                 static_cast<int>(err.pos()), "");
  }
  return kExitUsage;
}

std::vector<double> parse_csv_doubles(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    size_t used = 0;
    out.push_back(std::stod(item, &used));
    while (used < item.size() && std::isspace(static_cast<unsigned char>(item[used])))
      ++used;
    if (used != item.size()) throw std::invalid_argument("trailing text: " + item);
  }
  if (out.empty()) throw std::invalid_argument("empty number list");
  return out;
}

void atomic_write_file(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << content;
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

// ---------------------------------------------------------------- parse

int cmd_parse(const std::string& expr_text, Branch branch) {
  LossExpr e = parse(expr_text, branch);
  std::printf("%s\n", print(e).c_str());
  std::printf("nodes=%d depth=%d\n", e.size(), e.depth());
  return kExitPass;
}

// ----------------------------------------------------------------- eval

struct EvalArgs {
  std::string expr;
  std::string branch;
  std::string x, y, w;             // classification inputs
  std::optional<double> i, u, e;   // regression scalars
  std::string pred, target;        // or regression corner boxes
  bool grad = false;
};

EvalContext eval_context(const EvalArgs& a, Branch branch) {
  if (branch == Branch::Classification) {
    if (a.x.empty() || a.y.empty())
      throw ConfigError("classification eval needs --x and --y");
    std::vector<double> xv = parse_csv_doubles(a.x);
    std::vector<double> yv = parse_csv_doubles(a.y);
    if (xv.size() != yv.size())
      throw ConfigError("--x and --y must have the same length");
    const int c = static_cast<int>(xv.size());
    const double wv = a.w.empty() ? 1.0 : std::stod(a.w);
    return EvalContext::classification(Tensor::matrix(1, c, std::move(xv)),
                                       Tensor::matrix(1, c, std::move(yv)),
                                       Tensor::vector({wv}));
  }
  const bool scalars = a.i.has_value() || a.u.has_value() || a.e.has_value();
  const bool boxes = !a.pred.empty() || !a.target.empty();
  if (scalars == boxes)
    throw ConfigError("regression eval needs either --i/--u/--e or --pred/--target");
  if (scalars) {
    if (!(a.i && a.u && a.e)) throw ConfigError("need all of --i, --u, --e");
    return EvalContext::regression(Tensor::scalar(*a.i), Tensor::scalar(*a.u),
                                   Tensor::scalar(*a.e));
  }
  std::vector<double> p = parse_csv_doubles(a.pred);
  std::vector<double> t = parse_csv_doubles(a.target);
  if (p.size() != 4 || t.size() != 4)
    throw ConfigError("--pred and --target each need x1,y1,x2,y2");
  const Overlap ov = overlap({p[0], p[1], p[2], p[3]}, {t[0], t[1], t[2], t[3]});
  return EvalContext::regression(Tensor::scalar(ov.i), Tensor::scalar(ov.u),
                                 Tensor::scalar(ov.e));
}

int cmd_eval(const EvalArgs& a) {
  const Branch branch = parse_branch(a.branch);
  LossExpr e = parse(a.expr, branch);
  EvalContext ctx = eval_context(a, branch);
  Evaluation ev = forward(e, ctx);
  std::printf("value = %.17g\n", ev.value());
  if (a.grad) {
    GradMap grads = ev.backward(branch_symbols(branch));
    for (const auto& [sym, g] : grads) {
      std::printf("d%s =", symbol_name(sym));
      for (size_t k = 0; k < g.numel(); ++k) std::printf(" %.17g", g[k]);
      std::printf("\n");
    }
  }
  return std::isfinite(ev.value()) ? kExitPass : kExitFail;
}

// ------------------------------------------------------------ gradcheck

EvalContext random_context(Branch branch, Rng& rng) {
  if (branch == Branch::Classification) {
    const int b = 4, c = 4;
    std::vector<double> x(static_cast<size_t>(b) * c), y(x.size()), w(b);
    for (double& v : x) v = rng.normal();
    for (int r = 0; r < b; ++r) y[static_cast<size_t>(r) * c + rng.below(c)] = 1.0;
    for (double& v : w) v = rng.uniform(0.5, 1.5);
    return EvalContext::classification(Tensor::matrix(b, c, std::move(x)),
                                       Tensor::matrix(b, c, std::move(y)),
                                       Tensor::vector(std::move(w)));
  }
  // 0 < i < u < e with margins far wider than the difference step
  const int b = 6;
  std::vector<double> iv(b), uv(b), ev(b);
  for (int s = 0; s < b; ++s) {
    const double u = rng.uniform(0.5, 2.0);
    iv[s] = u * rng.uniform(0.05, 0.95);
    uv[s] = u;
    ev[s] = u * (1.0 + rng.uniform(0.05, 1.0));
  }
  return EvalContext::regression(Tensor::vector(std::move(iv)),
                                 Tensor::vector(std::move(uv)),
                                 Tensor::vector(std::move(ev)));
}

int cmd_gradcheck(const std::string& expr_text, const std::string& branch_text,
                  uint64_t seed, int trials) {
  const Branch branch = parse_branch(branch_text);
  LossExpr e = parse(expr_text, branch);
  const double h = 1e-5;
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    Rng rng(Rng::derive(seed, static_cast<uint64_t>(t), 0x6c).next());
    EvalContext ctx = random_context(branch, rng);
    Evaluation ev = forward(e, ctx);
    if (!std::isfinite(ev.value())) {
      std::fprintf(stderr, "non-finite value on trial %d; cannot check\n", t);
      return kExitFail;
    }
    GradMap grads = forward(e, ctx).backward(branch_symbols(branch));
    for (InputSymbol sym : branch_symbols(branch)) {
      if (sym == InputSymbol::Label) continue;  // one-hot entries cannot be nudged
      const Tensor& base = ctx.get(sym);
      const Tensor& analytic = grads.at(sym);
      for (size_t k = 0; k < base.numel(); ++k) {
        auto value_with = [&](double v) {
          Tensor bumped = base;
          bumped[k] = v;
          std::array<Tensor, 3> in;
          for (size_t s = 0; s < 3; ++s) {
            InputSymbol is = branch_symbols(branch)[s];
            in[s] = (is == sym) ? bumped : ctx.get(is);
          }
          EvalContext c2 = branch == Branch::Classification
                               ? EvalContext::classification(in[0], in[1], in[2])
                               : EvalContext::regression(in[0], in[1], in[2]);
          return forward(e, c2).value();
        };
        const double fd = (value_with(base[k] + h) - value_with(base[k] - h)) / (2 * h);
        const double ad = analytic[k];
        const double rel = std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), 1e-3});
        worst = std::max(worst, rel);
      }
    }
  }
  std::printf("max_rel_err = %.3g over %d trials\n", worst, trials);
  const bool ok = worst <= 1e-5;
  std::printf("%s\n", ok ? "PASS" : "FAIL");
  return ok ? kExitPass : kExitFail;
}

// --------------------------------------------------------------- verify

int cmd_verify(const std::string& expr_text, const std::string& branch_text) {
  LossExpr e = parse(expr_text, parse_branch(branch_text));
  VerificationReport report = verify(e);
  std::printf("%s\n", report.to_json().c_str());
  return report.overall ? kExitPass : kExitFail;
}

// ------------------------------------------------------------- simulate

int cmd_simulate(const std::string& expr_text, const std::string& branch_text,
                 uint64_t seed, bool proxy, std::optional<int> steps) {
  const Branch branch = parse_branch(branch_text);
  LossExpr e = parse(expr_text, branch);
  SimTask task(seed);
  TrainResult r = proxy ? proxy_fitness(e, task, steps.value_or(2000))
                        : simulate(e, task, steps.value_or(300));
  std::printf("metric = %.17g\n", r.metric);
  if (branch == Branch::Regression) std::printf("ap50 = %.17g\n", r.ap50);
  std::printf("diverged = %s\n", r.diverged ? "true" : "false");
  return r.diverged ? kExitFail : kExitPass;
}

// --------------------------------------------------------------- search

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

struct RunArgs {
  std::string config_path;
  std::string out_dir;
  std::optional<uint64_t> seed;
  std::optional<int> workers;
};

SearchConfig load_config(const RunArgs& a) {
  SearchConfig cfg = parse_config(read_file(a.config_path));
  if (a.seed) cfg.seed = *a.seed;  // flag beats file beats default
  if (a.workers)
    cfg.workers = *a.workers;
  else if (std::getenv("AUTOLOSS_WORKERS"))
    cfg.workers = default_workers();
  cfg.validate();
  return cfg;
}

SearchResult run_algo(const std::string& algo, const SearchConfig& cfg) {
  if (algo == "cse") return run_search(cfg);
  if (algo == "vanilla") return run_vanilla_ea(cfg);
  if (algo == "random") return run_random_search(cfg);
  throw ConfigError("unknown algorithm '" + algo + "' (use cse, vanilla, random)");
}

int cmd_search(const RunArgs& a, const std::string& algo) {
  SearchConfig cfg = load_config(a);
  SearchResult res = run_algo(algo, cfg);
  write_artifacts(res, cfg, a.out_dir);
  if (res.best) {
    std::printf("best = %s\n", print(res.best->expr).c_str());
    std::printf("fitness = %.17g\n", res.best->fitness.value_or(0.0));
  } else {
    std::printf("best = none\n");
  }
  std::printf("proxy_evals = %ld\nwall_seconds = %.3f\n", res.proxy_evals,
              res.wall_seconds);
  std::printf("artifacts = %s\n", a.out_dir.c_str());
  return kExitPass;
}

// ---------------------------------------------------------------- bench

int cmd_bench(const RunArgs& a, const std::string& algos_text) {
  std::vector<std::string> algos;
  std::stringstream ss(algos_text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) algos.push_back(item);
  if (algos.empty()) throw ConfigError("--algos needs at least one of cse, vanilla, random");

  SearchConfig cfg = load_config(a);
  std::string csv = "algo,evaluated_loss_count,wall_seconds,best_fitness\n";
  for (const std::string& algo : algos) {
    SearchResult res = run_algo(algo, cfg);
    char line[160];
    std::snprintf(line, sizeof line, "%s,%ld,%.3f,%.17g\n", algo.c_str(),
                  res.proxy_evals, res.wall_seconds,
                  res.best && res.best->fitness ? *res.best->fitness
                                                : std::nan(""));
    csv += line;
  }
  atomic_write_file(fs::path(a.out_dir) / "bench.csv", csv);
  std::fputs(csv.c_str(), stdout);
  return kExitPass;
}

// ------------------------------------------------------------- zoo-list

int cmd_zoo_list() {
  std::printf("%-16s %-4s %-9s %5s %5s  %s\n", "name", "head", "role", "nodes",
              "depth", "expression");
  for (const ZooEntry& entry : zoo_entries()) {
    LossExpr e = zoo_expr(entry.name);
    std::printf("%-16s %-4s %-9s %5d %5d  %s\n", entry.name,
                entry.branch == Branch::Classification ? "cls" : "reg",
                role_name(entry.role), e.size(), e.depth(), entry.dsl);
  }
  return kExitPass;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"loss-function discovery engine for detection heads"};
  app.require_subcommand(1);
  const std::vector<std::string> branch_values{"cls", "reg", "classification",
                                               "regression"};

  std::string expr_text, branch_text;
  auto add_expr_branch = [&](CLI::App* sub) {
    sub->add_option("--expr", expr_text, "loss expression in the DSL")->required();
    sub->add_option("--branch", branch_text, "cls or reg")
        ->required()
        ->check(CLI::IsMember(branch_values));
  };

  CLI::App* sub_parse = app.add_subcommand("parse", "parse and echo the canonical form");
  add_expr_branch(sub_parse);

  EvalArgs eargs;
  CLI::App* sub_eval = app.add_subcommand("eval", "evaluate a loss on explicit inputs");
  sub_eval->add_option("--expr", eargs.expr, "loss expression")->required();
  sub_eval->add_option("--branch", eargs.branch, "cls or reg")
      ->required()
      ->check(CLI::IsMember(branch_values));
  sub_eval->add_option("--x", eargs.x, "scores, comma-separated (cls)");
  sub_eval->add_option("--y", eargs.y, "one-hot labels, comma-separated (cls)");
  sub_eval->add_option("--w", eargs.w, "sample weight (cls, default 1)");
  sub_eval->add_option("--i", eargs.i, "intersection area (reg)");
  sub_eval->add_option("--u", eargs.u, "union area (reg)");
  sub_eval->add_option("--e", eargs.e, "enclosing area (reg)");
  sub_eval->add_option("--pred", eargs.pred, "predicted box x1,y1,x2,y2 (reg)");
  sub_eval->add_option("--target", eargs.target, "target box x1,y1,x2,y2 (reg)");
  sub_eval->add_flag("--grad", eargs.grad, "also print input gradients");

  uint64_t gc_seed = 1;
  int gc_trials = 5;
  CLI::App* sub_gradcheck =
      app.add_subcommand("gradcheck", "reverse-mode vs finite-difference check");
  add_expr_branch(sub_gradcheck);
  sub_gradcheck->add_option("--seed", gc_seed, "context seed");
  sub_gradcheck->add_option("--trials", gc_trials, "random contexts to test")
      ->check(CLI::PositiveNumber);

  CLI::App* sub_verify =
      app.add_subcommand("verify", "run the property checks, report as JSON");
  add_expr_branch(sub_verify);

  uint64_t sim_seed = 42;
  bool sim_proxy = false;
  std::optional<int> sim_steps;
  CLI::App* sub_simulate =
      app.add_subcommand("simulate", "train the toy task with this loss");
  add_expr_branch(sub_simulate);
  sub_simulate->add_option("--seed", sim_seed, "dataset seed");
  sub_simulate->add_flag("--proxy", sim_proxy,
                         "minibatch proxy run scored on the held-out split");
  sub_simulate->add_option("--steps", sim_steps, "training steps")
      ->check(CLI::PositiveNumber);

  RunArgs rargs;
  std::string search_algo = "cse";
  CLI::App* sub_search = app.add_subcommand("search", "run a loss search");
  sub_search->add_option("--config", rargs.config_path, "run config file")->required();
  sub_search->add_option("--out", rargs.out_dir, "artifact directory")->required();
  sub_search->add_option("--seed", rargs.seed, "override the config seed");
  sub_search->add_option("--workers", rargs.workers, "parallel evaluation width")
      ->check(CLI::PositiveNumber);
  sub_search->add_option("--algo", search_algo, "cse, vanilla, or random")
      ->check(CLI::IsMember({"cse", "vanilla", "random"}));

  std::string bench_algos;
  CLI::App* sub_bench =
      app.add_subcommand("bench", "compare search algorithms on one config");
  sub_bench->add_option("--config", rargs.config_path, "run config file")->required();
  sub_bench->add_option("--out", rargs.out_dir, "artifact directory")->required();
  sub_bench->add_option("--algos", bench_algos, "comma list: random,vanilla,cse")
      ->required();
  sub_bench->add_option("--seed", rargs.seed, "override the config seed");
  sub_bench->add_option("--workers", rargs.workers, "parallel evaluation width")
      ->check(CLI::PositiveNumber);

  CLI::App* sub_zoo = app.add_subcommand("zoo-list", "list the built-in losses");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitPass : kExitUsage;
  }

  try {
    if (*sub_parse) return cmd_parse(expr_text, parse_branch(branch_text));
    if (*sub_eval) return cmd_eval(eargs);
    if (*sub_gradcheck)
      return cmd_gradcheck(expr_text, branch_text, gc_seed, gc_trials);
    if (*sub_verify) return cmd_verify(expr_text, branch_text);
    if (*sub_simulate)
      return cmd_simulate(expr_text, branch_text, sim_seed, sim_proxy, sim_steps);
    if (*sub_search) return cmd_search(rargs, search_algo);
    if (*sub_bench) return cmd_bench(rargs, bench_algos);
    if (*sub_zoo) return cmd_zoo_list();
  } catch (const ExprError& err) {
    return report_expr_error(err, expr_text.empty() ? eargs.expr : expr_text);
  } catch (const EmptyFunnelError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kExitFail;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kExitUsage;
  }
  return kExitUsage;
}
