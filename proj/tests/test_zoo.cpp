#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <set>

#include "autoloss/zoo.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace autoloss;

TEST_CASE("zoo inventory") {
  auto entries = zoo_entries();
  CHECK(entries.size() == 11);

  std::set<std::string> names;
  int baselines = 0, initials = 0, searched = 0;
  for (const ZooEntry& e : entries) {
    names.insert(e.name);
    if (e.role == ZooRole::Baseline) ++baselines;
    if (e.role == ZooRole::Initial) ++initials;
    if (e.role == ZooRole::Searched) ++searched;
  }
  CHECK(names.size() == 11);
  CHECK(baselines == 4);
  CHECK(initials == 3);
  CHECK(searched == 4);

  CHECK(zoo_entry("ce").branch == Branch::Classification);
  CHECK(zoo_entry("iou").branch == Branch::Regression);
  CHECK(zoo_entry("cei").role == ZooRole::Initial);
  CHECK(zoo_entry("giou").role == ZooRole::Initial);
  CHECK(zoo_entry("searched_b_reg").branch == Branch::Regression);

  CHECK_THROWS_AS(zoo_entry("nope"), UnknownLossError);
  CHECK_THROWS_AS(zoo_entry(""), UnknownLossError);
  CHECK_THROWS_AS(zoo_entry("CE"), UnknownLossError);  // names are exact
}

TEST_CASE("stored forms are canonical and parse under the zoo limits") {
  for (const ZooEntry& entry : zoo_entries()) {
    LossExpr e = zoo_expr(entry.name);
    CHECK(print(e) == entry.dsl);
    CHECK(e.branch() == entry.branch);
    CHECK(e.size() <= kZooLimits.max_nodes);
    CHECK(e.depth() <= kZooLimits.max_depth);
  }
  // the searched regression loss is the one entry over the search limits
  LossExpr breg = zoo_expr("searched_b_reg");
  CHECK(breg.size() == 63);
  CHECK(breg.depth() == 10);
  CHECK_THROWS_AS(parse(zoo_entry("searched_b_reg").dsl, Branch::Regression),
                  ExprError);
}

TEST_CASE("pinned values") {
  // binary cross-entropy at score 0, label 1: log 2
  {
    auto ctx = EvalContext::classification(Tensor::matrix(1, 1, {0.0}),
                                           Tensor::matrix(1, 1, {1.0}),
                                           Tensor::vector({1.0}));
    CHECK(forward(zoo_expr("bce"), ctx).value() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(reference_value("bce", ctx) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  // cross-entropy under uniform scores over 4 classes: log 4
  {
    auto ctx = EvalContext::classification(Tensor::matrix(1, 4, {0, 0, 0, 0}),
                                           Tensor::matrix(1, 4, {1, 0, 0, 0}),
                                           Tensor::vector({1.0}));
    CHECK(forward(zoo_expr("ce"), ctx).value() ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  // identical boxes: zero loss for both overlap losses
  {
    auto ctx = EvalContext::regression(Tensor::vector({1.0}), Tensor::vector({1.0}),
                                       Tensor::vector({1.0}));
    CHECK(forward(zoo_expr("iou"), ctx).value() == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(forward(zoo_expr("giou"), ctx).value() == doctest::Approx(0.0).epsilon(1e-10));
  }
  // weighted focal form at score 0, label 1, weight 1: 0.5 * log 2
  {
    auto ctx = EvalContext::classification(Tensor::matrix(1, 1, {0.0}),
                                           Tensor::matrix(1, 1, {1.0}),
                                           Tensor::vector({1.0}));
    CHECK(forward(zoo_expr("fli"), ctx).value() ==
          doctest::Approx(0.5 * std::log(2.0)).epsilon(1e-12));
    CHECK(forward(zoo_expr("fl"), ctx).value() ==
          doctest::Approx(0.5 * std::log(2.0)).epsilon(1e-12));
  }
  // the shipped a-variant regression loss at i = u = e = 2
  {
    auto ctx = EvalContext::regression(Tensor::vector({2.0}), Tensor::vector({2.0}),
                                       Tensor::vector({2.0}));
    CHECK(forward(zoo_expr("searched_a_reg"), ctx).value() ==
          doctest::Approx(-1.0).epsilon(1e-10));
  }
}

TEST_CASE("DSL forms match the closed-form references on random contexts") {
  Rng rng(808);
  for (const ZooEntry& entry : zoo_entries()) {
    LossExpr e = zoo_expr(entry.name);
    for (int t = 0; t < 50; ++t) {
      double got, want;
      if (entry.branch == Branch::Classification) {
        auto raw = gradcheck::random_cls_ctx(rng, 5, 4);
        auto ctx = raw.make();
        got = forward(e, ctx).value();
        want = reference_value(entry.name, ctx);
      } else {
        auto raw = gradcheck::random_reg_ctx(rng, 5);
        auto ctx = raw.make();
        got = forward(e, ctx).value();
        want = reference_value(entry.name, ctx);
      }
      INFO(entry.name);
      CHECK(std::fabs(got - want) <= 1e-10 * std::max(1.0, std::fabs(want)));
    }
  }
}

TEST_CASE("reference_value rejects mismatched branches") {
  auto ctx = EvalContext::regression(Tensor::vector({1.0}), Tensor::vector({2.0}),
                                     Tensor::vector({3.0}));
  CHECK_THROWS_AS(reference_value("ce", ctx), ContextError);
  CHECK_THROWS_AS(reference_value("made_up", ctx), UnknownLossError);
}
