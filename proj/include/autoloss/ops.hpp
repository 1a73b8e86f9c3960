#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace autoloss {

enum class Branch : uint8_t { Classification, Regression };

inline const char* branch_name(Branch b) {
  return b == Branch::Classification ? "classification" : "regression";
}

// Division guard; also used when a derivative needs a pole pushed off zero.
inline constexpr double kDivEps = 1e-12;

enum class UnaryOp : uint8_t {
  Neg, Exp, Log, Abs, Sqrt, Softmax, Softplus, Sig,
  Gd, Alf, Erf, Erfc, Tanh, Relu, Sin, Cos,
};
enum class BinaryOp : uint8_t { Add, Sub, Mul, Div, Dot };

inline constexpr int kUnaryOpCount = 16;
inline constexpr int kBinaryOpCount = 5;

const char* op_name(UnaryOp op);
const char* op_name(BinaryOp op);

// Operators available to a branch. The regression registry is the subset
// needed to express the published regression losses; it is strictly contained
// in the classification registry, which carries everything.
std::span<const UnaryOp> unary_registry(Branch b);
std::span<const BinaryOp> binary_registry(Branch b);
bool in_registry(UnaryOp op, Branch b);
bool in_registry(BinaryOp op, Branch b);

// case-insensitive name lookup; returns false if unknown
bool lookup_unary(std::string_view name, UnaryOp& out);
bool lookup_binary(std::string_view name, BinaryOp& out);

// Scalar kernels for the element-wise unary operators (everything except
// Softmax, which needs a whole row). The four S-shaped curves gd, alf, erf,
// erfc are rescaled into (0,1); tanh is published unrescaled.
inline double unary_value(UnaryOp op, double x) {
  switch (op) {
    case UnaryOp::Neg: return -x;
    case UnaryOp::Exp: return std::exp(x);
    case UnaryOp::Log: return std::log(x);
    case UnaryOp::Abs: return std::fabs(x);
    case UnaryOp::Sqrt: return std::sqrt(x);
    case UnaryOp::Softplus:
      return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    case UnaryOp::Sig: return 1.0 / (1.0 + std::exp(-x));
    case UnaryOp::Gd: return 2.0 * std::atan(std::tanh(0.5 * x)) / M_PI + 0.5;
    case UnaryOp::Alf: return 0.5 * (x / std::sqrt(1.0 + x * x) + 1.0);
    case UnaryOp::Erf: return 0.5 * (std::erf(x) + 1.0);
    case UnaryOp::Erfc: return 0.5 * std::erfc(x);
    case UnaryOp::Tanh: return std::tanh(x);
    case UnaryOp::Relu: return x > 0.0 ? x : 0.0;
    case UnaryOp::Sin: return std::sin(x);
    case UnaryOp::Cos: return std::cos(x);
    case UnaryOp::Softmax: break;
  }
  return std::nan("");
}

// d out/d x given the input x and the already-computed output y.
// Subgradient conventions: d|x|/dx = 0 and dRelu/dx = 0 at x = 0;
// dSqrt/dx uses sqrt(x + eps) so the pole at 0 stays finite.
inline double unary_deriv(UnaryOp op, double x, double y) {
  switch (op) {
    case UnaryOp::Neg: return -1.0;
    case UnaryOp::Exp: return y;
    case UnaryOp::Log: return 1.0 / x;
    case UnaryOp::Abs: return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
    case UnaryOp::Sqrt: return 0.5 / std::sqrt(x + kDivEps);
    case UnaryOp::Softplus: return 1.0 / (1.0 + std::exp(-x));
    case UnaryOp::Sig: {
      double s = y;
      return s * (1.0 - s);
    }
    case UnaryOp::Gd: return 1.0 / (std::cosh(x) * M_PI);
    case UnaryOp::Alf: {
      double t = 1.0 + x * x;
      return 0.5 / (t * std::sqrt(t));
    }
    case UnaryOp::Erf: return std::exp(-x * x) / std::sqrt(M_PI);
    case UnaryOp::Erfc: return -std::exp(-x * x) / std::sqrt(M_PI);
    case UnaryOp::Tanh: return 1.0 - y * y;
    case UnaryOp::Relu: return x > 0.0 ? 1.0 : 0.0;
    case UnaryOp::Sin: return std::cos(x);
    case UnaryOp::Cos: return -std::sin(x);
    case UnaryOp::Softmax: break;
  }
  return std::nan("");
}

inline double binary_value(BinaryOp op, double a, double b) {
  switch (op) {
    case BinaryOp::Add: return a + b;
    case BinaryOp::Sub: return a - b;
    case BinaryOp::Mul: return a * b;
    case BinaryOp::Div: return a / (b + kDivEps);
    case BinaryOp::Dot: break;  // needs whole rows
  }
  return std::nan("");
}

}  // namespace autoloss
