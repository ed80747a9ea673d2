#pragma once

#include <functional>
#include <vector>

#include "incseg/rng.hpp"
#include "incseg/tape.hpp"

namespace incseg::testing {

using ad::Mat;
using ad::Param;
using ad::Tape;
using ad::Value;

inline Mat random_mat(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  return m;
}

inline Mat random_unit_rows(Rng& rng, Eigen::Index r, Eigen::Index c) {
  Mat m = random_mat(rng, r, c);
  for (Eigen::Index i = 0; i < r; ++i) m.row(i) /= m.row(i).norm();
  return m;
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Central finite differences against the tape gradient. `build` must construct
// the full graph from the current param values and return a scalar loss.
// Perturbs every entry of every listed param unless max_entries_per_param > 0,
// in which case a deterministic random subset is checked.
inline GradCheckResult grad_check(const std::function<Value(Tape&)>& build,
                                  std::vector<Param*> params, double h = 1e-5,
                                  int max_entries_per_param = 0,
                                  std::uint64_t pick_seed = 99) {
  for (Param* p : params) p->zero_grad();
  {
    Tape t;
    Value loss = build(t);
    t.backward(loss);
    t.accumulate_param_grads();
  }
  auto eval = [&]() {
    Tape t(false);
    return t.val(build(t))(0, 0);
  };
  GradCheckResult res;
  Rng pick(pick_seed);
  for (Param* p : params) {
    std::vector<Eigen::Index> idxs;
    if (max_entries_per_param > 0 && p->value.size() > max_entries_per_param) {
      for (int k = 0; k < max_entries_per_param; ++k)
        idxs.push_back(static_cast<Eigen::Index>(pick.below(p->value.size())));
    } else {
      for (Eigen::Index i = 0; i < p->value.size(); ++i) idxs.push_back(i);
    }
    for (Eigen::Index i : idxs) {
      double saved = p->value(i);
      p->value(i) = saved + h;
      double fp = eval();
      p->value(i) = saved - h;
      double fm = eval();
      p->value(i) = saved;
      double num = (fp - fm) / (2.0 * h);
      double ana = p->grad(i);
      double denom = std::max({std::abs(num), std::abs(ana), 1e-6});
      double rel = std::abs(num - ana) / denom;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_analytic = ana;
        res.worst_numeric = num;
      }
    }
  }
  return res;
}

}  // namespace incseg::testing
