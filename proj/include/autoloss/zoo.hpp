#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

#include "autoloss/expr.hpp"
#include "autoloss/tensor.hpp"

namespace autoloss {

class UnknownLossError : public std::runtime_error {
 public:
  explicit UnknownLossError(std::string_view name)
      : std::runtime_error("unknown loss name '" + std::string(name) + "'") {}
};

enum class ZooRole : uint8_t { Baseline, Initial, Searched };

const char* role_name(ZooRole r);

struct ZooEntry {
  const char* name;
  Branch branch;
  ZooRole role;
  const char* dsl;  // canonical form; print(zoo_expr(name)) == dsl
};

// The built-in losses: hand-written baselines, the search starting points,
// and discovered losses shipped as named entries.
std::span<const ZooEntry> zoo_entries();

const ZooEntry& zoo_entry(std::string_view name);  // throws UnknownLossError

// Parsed form. Zoo entries get relaxed limits (80 nodes, depth 12): one
// shipped regression loss is a 63-node rational polynomial.
inline constexpr ExprLimits kZooLimits{80, 12};
LossExpr zoo_expr(std::string_view name);

// Independent closed-form evaluation (plain loops over the context, no
// expression machinery); the oracle the DSL forms are tested against.
double reference_value(std::string_view name, const EvalContext& ctx);

}  // namespace autoloss
