#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "refinery/tape.hpp"
#include "refinery/tensor.hpp"

namespace refinery {

struct GradCheckOptions {
  double eps = 1e-6;
  double tol = 1e-5;
  // Coordinates per tensor above which a seeded random subset is checked.
  std::size_t max_coords_per_tensor = 64;
  std::uint64_t seed = 1;
  // Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
  double abs_floor = 1e-7;
  // A coordinate whose eps and eps/2 central differences disagree by more
  // than tol straddles a ReLU or max-pool switch and is skipped. At most this
  // fraction of checked coordinates may be skipped.
  double max_nonsmooth_fraction = 0.05;
};

struct GradCheckReport {
  bool passed = false;
  double max_rel_err = 0.0;
  std::string worst;  // "tensor[i] analytic=.. numeric=.."
  std::size_t checked = 0;
  std::size_t nonsmooth = 0;
  std::string failure;  // empty unless something other than tolerance failed
};

// Compares backward() against central finite differences. `loss` must build
// a single-element tensor on the given tape, deterministically, reading the
// current contents of `inputs`. Each entry of `inputs` must be a leaf with
// requires_grad set.
GradCheckReport grad_check(const std::function<Tensor(Tape&)>& loss,
                           std::vector<Tensor> inputs, std::vector<std::string> names,
                           const GradCheckOptions& options = {});

// Random projection of a tensor onto a scalar, for checking tensor-valued ops:
// returns weighted_sum(y, r) with r drawn from N(0, 1) with the given seed.
Tensor random_projection(Tape& tape, const Tensor& y, std::uint64_t seed);

}  // namespace refinery
