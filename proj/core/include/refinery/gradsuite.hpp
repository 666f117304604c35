#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "refinery/gradcheck.hpp"

namespace refinery {

enum class GradScope { kOp, kBlock, kModel };

GradScope parse_grad_scope(const std::string& name);
std::string grad_scope_name(GradScope scope);

struct GradSuiteResult {
  std::string target;  // "conv2d[gemm,stride2]", "crp", "model[cascade4]", ...
  double tol = 0.0;
  GradCheckReport report;
};

// Every primitive op (op), every refine component plus the backbone unit
// (block), or each variant on a 32x32 instance (model).
std::vector<GradSuiteResult> run_grad_suite(GradScope scope, std::uint64_t seed = 7);

// The full four-cascade model on a 32x32 instance; the long-range check.
GradSuiteResult grad_check_cascade4_model(std::uint64_t seed = 7);

}  // namespace refinery
