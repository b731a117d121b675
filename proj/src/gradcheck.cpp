#include "pncnn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pncnn/error.hpp"

namespace pncnn {

namespace {

double eval_scalar(const ScalarFn& f) {
  Tape tape;
  auto loss = f(tape);
  if (loss->size() != 1) throw ShapeError("finite_diff_check: function is not scalar");
  return (*loss)[0];
}

}  // namespace

GradCheckReport finite_diff_report(const ScalarFn& f, const TensorPtr& x, double h,
                                   const std::vector<std::size_t>& indices) {
  if (!x->requires_grad()) throw Error("finite_diff_check: x does not require grad");
  std::vector<double> analytic;
  {
    Tape tape;
    auto loss = f(tape);
    x->zero_grad();
    tape.backward(loss);
    analytic.assign(x->grad().begin(), x->grad().end());
  }
  std::vector<std::size_t> idx = indices;
  if (idx.empty()) {
    idx.resize(x->size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
  }
  GradCheckReport report;
  for (std::size_t i : idx) {
    const double saved = (*x)[i];
    (*x)[i] = saved + h;
    const double up = eval_scalar(f);
    (*x)[i] = saved - h;
    const double down = eval_scalar(f);
    (*x)[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    if (++report.checked == 1 || rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
      report.analytic = analytic[i];
      report.numeric = numeric;
    }
  }
  return report;
}

}  // namespace pncnn
