#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "pncnn/autodiff.hpp"

namespace pncnn {

/// Builds a scalar loss on a fresh tape.
using ScalarFn = std::function<TensorPtr(Tape&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

/// Compares the tape gradient of `f` w.r.t. `x` with central differences
/// (f(x+h) - f(x-h)) / 2h. Relative error uses max(|analytic|, |numeric|, 1e-8)
/// as denominator. `indices` restricts the check to a subset of elements
/// (empty = all). `x` is restored bit-exactly afterwards.
GradCheckReport finite_diff_report(const ScalarFn& f, const TensorPtr& x, double h = 1e-5,
                                   const std::vector<std::size_t>& indices = {});

inline double finite_diff_check(const ScalarFn& f, const TensorPtr& x, double h = 1e-5,
                                const std::vector<std::size_t>& indices = {}) {
  return finite_diff_report(f, x, h, indices).max_rel_error;
}

}  // namespace pncnn
