#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <string>

#include "sml/param_store.hpp"
#include "sml/rng.hpp"
#include "sml/tape.hpp"

namespace sml::diff {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  long worst_coord = -1;
  long n_checked = 0;
  bool pass = false;
};

// Compares reverse-mode gradients against central finite differences on a
// random subsample of coordinates. build_loss must rebuild the same scalar
// loss from the current parameter values on every call.
inline GradCheckReport grad_check(
    const std::function<Tape::NodeId(Tape&, const ParamStore&)>& build_loss, ParamStore& params,
    double eps, double tol, Rng& rng, long sample_coords = 200) {
  if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be > 0");

  GradVector analytic;
  {
    Tape tape;
    auto loss = build_loss(tape, params);
    analytic = tape.backward(loss, params);
  }

  auto loss_value = [&]() {
    Tape tape;
    auto loss = build_loss(tape, params);
    return tape.val(loss).as_scalar();
  };

  const long n = params.total_len();
  const long want = std::min(n, sample_coords);
  std::set<long> coords;
  while (static_cast<long>(coords.size()) < want)
    coords.insert(static_cast<long>(rng.uniform_u64(static_cast<std::uint64_t>(n))));

  GradCheckReport report;
  for (long i : coords) {
    const double orig = params.flat_get(i);
    params.flat_set(i, orig + eps);
    const double lp = loss_value();
    params.flat_set(i, orig - eps);
    const double lm = loss_value();
    params.flat_set(i, orig);
    const double fd = (lp - lm) / (2.0 * eps);
    const double g = analytic[static_cast<std::size_t>(i)];
    // Relative error with a floor: below the floor the finite-difference
    // noise (~|loss|*1e-11 at eps=1e-5) dominates any true signal.
    const double denom = std::max({std::abs(fd), std::abs(g), 1e-3});
    const double rel = std::abs(fd - g) / denom;
    ++report.n_checked;
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_coord = i;
      report.worst_param = params.owner(i);
    }
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace sml::diff
