#include "autoloss/ops.hpp"

#include <algorithm>
#include <array>
#include <cctype>

namespace autoloss {

namespace {

constexpr std::array<const char*, kUnaryOpCount> kUnaryNames = {
    "Neg", "Exp", "Log", "Abs", "Sqrt", "Softmax", "Softplus", "Sig",
    "Gd", "Alf", "Erf", "Erfc", "Tanh", "Relu", "Sin", "Cos",
};
constexpr std::array<const char*, kBinaryOpCount> kBinaryNames = {
    "Add", "Sub", "Mul", "Div", "Dot",
};

constexpr std::array<UnaryOp, kUnaryOpCount> kClsUnary = {
    UnaryOp::Neg, UnaryOp::Exp, UnaryOp::Log, UnaryOp::Abs,
    UnaryOp::Sqrt, UnaryOp::Softmax, UnaryOp::Softplus, UnaryOp::Sig,
    UnaryOp::Gd, UnaryOp::Alf, UnaryOp::Erf, UnaryOp::Erfc,
    UnaryOp::Tanh, UnaryOp::Relu, UnaryOp::Sin, UnaryOp::Cos,
};
constexpr std::array<BinaryOp, kBinaryOpCount> kClsBinary = {
    BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div, BinaryOp::Dot,
};

constexpr std::array<UnaryOp, 5> kRegUnary = {
    UnaryOp::Neg, UnaryOp::Exp, UnaryOp::Log, UnaryOp::Abs, UnaryOp::Sqrt,
};
constexpr std::array<BinaryOp, 4> kRegBinary = {
    BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div,
};

bool iequal(std::string_view a, std::string_view b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (std::tolower(static_cast<unsigned char>(a[i])) !=
        std::tolower(static_cast<unsigned char>(b[i])))
      return false;
  }
  return true;
}

}  // namespace

const char* op_name(UnaryOp op) { return kUnaryNames[static_cast<size_t>(op)]; }
const char* op_name(BinaryOp op) { return kBinaryNames[static_cast<size_t>(op)]; }

std::span<const UnaryOp> unary_registry(Branch b) {
  if (b == Branch::Classification) return kClsUnary;
  return kRegUnary;
}

std::span<const BinaryOp> binary_registry(Branch b) {
  if (b == Branch::Classification) return kClsBinary;
  return kRegBinary;
}

bool in_registry(UnaryOp op, Branch b) {
  auto reg = unary_registry(b);
  return std::find(reg.begin(), reg.end(), op) != reg.end();
}

bool in_registry(BinaryOp op, Branch b) {
  auto reg = binary_registry(b);
  return std::find(reg.begin(), reg.end(), op) != reg.end();
}

bool lookup_unary(std::string_view name, UnaryOp& out) {
  for (size_t i = 0; i < kUnaryNames.size(); ++i) {
    if (iequal(name, kUnaryNames[i])) {
      out = static_cast<UnaryOp>(i);
      return true;
    }
  }
  return false;
}

bool lookup_binary(std::string_view name, BinaryOp& out) {
  for (size_t i = 0; i < kBinaryNames.size(); ++i) {
    if (iequal(name, kBinaryNames[i])) {
      out = static_cast<BinaryOp>(i);
      return true;
    }
  }
  return false;
}

}  // namespace autoloss
