#include "refinery/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "refinery/error.hpp"
#include "refinery/ops.hpp"
#include "refinery/rng.hpp"

namespace refinery {
namespace {

double eval(const std::function<Tensor(Tape&)>& loss) {
  Tape tape(Tape::Mode::kInference);
  Tensor v = loss(tape);
  if (v.numel() != 1) throw ShapeError("grad_check: loss must be a single element");
  return v.data()[0];
}

std::vector<std::size_t> pick_coords(std::size_t n, std::size_t limit, SplitMix64& rng) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  if (limit == 0 || n <= limit) return all;
  for (std::size_t i = 0; i < limit; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.next() % (n - i));
    std::swap(all[i], all[j]);
  }
  all.resize(limit);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor(Tape&)>& loss,
                           std::vector<Tensor> inputs, std::vector<std::string> names,
                           const GradCheckOptions& opt) {
  GradCheckReport report;
  names.resize(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (names[i].empty()) names[i] = "input" + std::to_string(i);
  }

  for (auto& t : inputs) {
    if (!t.requires_grad() || !t.is_leaf()) {
      throw ValidationError("grad_check: inputs must be leaves with requires_grad");
    }
    t.zero_grad();
  }
  {
    Tape tape;
    Tensor root = loss(tape);
    if (!std::isfinite(root.data()[0])) {
      report.failure = "non-finite loss at the unperturbed point";
      return report;
    }
    tape.backward(root);
  }

  const double f0 = eval(loss);
  SplitMix64 rng(opt.seed);
  std::size_t nonsmooth = 0;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor& t = inputs[ti];
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    auto data = t.data();
    for (std::size_t idx : pick_coords(t.numel(), opt.max_coords_per_tensor, rng)) {
      const double orig = data[idx];
      auto probe = [&](double delta) {
        data[idx] = orig + delta;
        const double v = eval(loss);
        data[idx] = orig;
        return v;
      };
      const double fp = probe(opt.eps);
      const double fm = probe(-opt.eps);
      const double hp = probe(0.5 * opt.eps);
      const double hm = probe(-0.5 * opt.eps);
      if (!std::isfinite(fp) || !std::isfinite(fm) || !std::isfinite(hp) ||
          !std::isfinite(hm) || !std::isfinite(analytic[idx])) {
        report.failure = "non-finite value at " + names[ti] + "[" + std::to_string(idx) + "]";
        report.passed = false;
        return report;
      }
      const double n_full = (fp - fm) / (2.0 * opt.eps);
      const double n_half = (hp - hm) / opt.eps;
      const double a = analytic[idx];
      ++report.checked;

      // Forward minus backward difference: h * f'' at a smooth point, so it
      // halves with h. A slope jump within the stencil keeps it near the jump.
      const double d_full = (fp - 2.0 * f0 + fm) / opt.eps;
      const double d_half = (hp - 2.0 * f0 + hm) / (0.5 * opt.eps);
      const double scale = std::max({std::abs(n_full), std::abs(n_half), opt.abs_floor});
      if (std::abs(n_full - n_half) / scale > opt.tol ||
          std::abs(d_full - 2.0 * d_half) / scale > opt.tol) {
        ++nonsmooth;
        continue;
      }
      const double rel =
          std::abs(a - n_half) / std::max({std::abs(a), std::abs(n_half), opt.abs_floor});
      if (report.worst.empty() || rel > report.max_rel_err) {
        report.max_rel_err = rel;
        std::ostringstream os;
        os.precision(10);
        os << names[ti] << "[" << idx << "] analytic=" << a << " numeric=" << n_half;
        report.worst = os.str();
      }
    }
  }
  report.nonsmooth = nonsmooth;
  const double frac =
      report.checked ? static_cast<double>(nonsmooth) / static_cast<double>(report.checked) : 0.0;
  if (frac > opt.max_nonsmooth_fraction) {
    report.failure = std::to_string(nonsmooth) + " of " + std::to_string(report.checked) +
                     " coordinates sit on non-differentiable points";
  }
  report.passed = report.failure.empty() && report.max_rel_err <= opt.tol;
  return report;
}

Tensor random_projection(Tape& tape, const Tensor& y, std::uint64_t seed) {
  SplitMix64 rng(seed);
  Tensor r(y.shape());
  for (double& v : r.data()) v = rng.normal();
  return ops::weighted_sum(tape, y, r);
}

}  // namespace refinery
