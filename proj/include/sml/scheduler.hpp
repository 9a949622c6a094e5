#pragma once

#include <cmath>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sml/param_store.hpp"
#include "sml/rng.hpp"

namespace sml::sched {

using diff::GradVector;

enum class Task { NCT, SentNMT, MRG, XRG, NUD, XNUD, Synthetic };

inline const char* task_name(Task t) {
  switch (t) {
    case Task::NCT: return "nct";
    case Task::SentNMT: return "sent_nmt";
    case Task::MRG: return "mrg";
    case Task::XRG: return "xrg";
    case Task::NUD: return "nud";
    case Task::XNUD: return "xnud";
    case Task::Synthetic: return "synthetic";
  }
  throw std::logic_error("task_name: bad task");
}

inline Task parse_task(const std::string& s) {
  for (Task t : {Task::NCT, Task::SentNMT, Task::MRG, Task::XRG, Task::NUD, Task::XNUD,
                 Task::Synthetic})
    if (s == task_name(t)) return t;
  throw std::runtime_error("unknown task '" + s + "'");
}

// One task's flat gradient. synth_index distinguishes synthetic benchmark
// tasks sharing the Synthetic tag.
struct TaskGradient {
  Task task = Task::Synthetic;
  int synth_index = 0;
  GradVector grad;
};

enum class Strategy { conventional, random, prior_based, sml, sml_no_inverse };

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::conventional: return "conventional";
    case Strategy::random: return "random";
    case Strategy::prior_based: return "prior_based";
    case Strategy::sml: return "sml";
    case Strategy::sml_no_inverse: return "sml_no_inverse";
  }
  throw std::logic_error("strategy_name: bad strategy");
}

inline Strategy parse_strategy(const std::string& s) {
  for (Strategy st : {Strategy::conventional, Strategy::random, Strategy::prior_based,
                      Strategy::sml, Strategy::sml_no_inverse})
    if (s == strategy_name(st)) return st;
  throw std::runtime_error("unknown strategy '" + s + "'");
}

struct ScheduleConfig {
  Strategy strategy = Strategy::sml;
  double alpha_start = 1.0;
  double alpha_end = 0.0;
  long total_steps = 1;
  std::uint64_t rng_seed = 0;
  std::set<Task> prior_active_tasks;  // tasks kept by the prior_based strategy

  void validate() const {
    if (total_steps < 1) throw std::invalid_argument("schedule: total_steps must be >= 1");
    if (!(alpha_start >= alpha_end && alpha_end >= 0.0))
      throw std::invalid_argument("schedule: need alpha_start >= alpha_end >= 0");
  }
};

// Component of g_k along g_nct: ((g_k . g_nct) / |g_nct|^2) g_nct. A
// vanishing main gradient yields the zero vector.
inline GradVector project(const GradVector& g_k, const GradVector& g_nct) {
  if (g_k.size() != g_nct.size())
    throw std::runtime_error("project: length mismatch " + std::to_string(g_k.size()) + " vs " +
                             std::to_string(g_nct.size()));
  const double nsq = norm_sq(g_nct);
  if (nsq < 1e-24) return GradVector(g_nct.size());
  return scaled(g_nct, dot(g_k, g_nct) / nsq);
}

// Combined update direction for one training step. sml projects every
// auxiliary gradient onto the main one (keeping inverse projections);
// sml_no_inverse drops projections whose alignment is negative; the three
// baselines add raw auxiliary gradients, over all tasks, a coin-flipped
// subset, or a fixed prior subset.
inline GradVector combine(const GradVector& g_nct, std::span<const TaskGradient> aux,
                          double alpha, Strategy strategy, Rng& rng,
                          const std::set<Task>* prior_active = nullptr) {
  GradVector out = g_nct;
  for (const TaskGradient& tg : aux) {
    if (tg.grad.size() != g_nct.size())
      throw std::runtime_error("combine: gradient length mismatch for task " +
                               std::string(task_name(tg.task)));
    switch (strategy) {
      case Strategy::conventional:
        axpy(alpha, tg.grad, out);
        break;
      case Strategy::random:
        if (rng.uniform() < 0.5) axpy(alpha, tg.grad, out);
        break;
      case Strategy::prior_based:
        if (!prior_active || prior_active->count(tg.task)) axpy(alpha, tg.grad, out);
        break;
      case Strategy::sml:
        axpy(alpha, project(tg.grad, g_nct), out);
        break;
      case Strategy::sml_no_inverse:
        if (dot(tg.grad, g_nct) > 0.0) axpy(alpha, project(tg.grad, g_nct), out);
        break;
      default:
        throw std::runtime_error("combine: unknown strategy");
    }
  }
  return out;
}

// Linear decay alpha_start -> alpha_end over total_steps; clamps beyond the
// end so the endpoints are exact.
inline double alpha_at(long step, const ScheduleConfig& cfg) {
  cfg.validate();
  if (step < 0) throw std::invalid_argument("alpha_at: negative step");
  if (step >= cfg.total_steps) return cfg.alpha_end;
  const double f = static_cast<double>(step) / static_cast<double>(cfg.total_steps);
  return cfg.alpha_start + (cfg.alpha_end - cfg.alpha_start) * f;
}

// --- synthetic benchmark ---

// Quadratic with diagonal curvature: L = 1/2 sum_i w_i (theta_i - c_i)^2.
struct QuadraticTask {
  std::string name;
  std::vector<double> center;
  std::vector<double> weights;

  double loss(std::span<const double> theta) const {
    double s = 0.0;
    for (std::size_t i = 0; i < center.size(); ++i) {
      const double d = theta[i] - center[i];
      s += 0.5 * weights[i] * d * d;
    }
    return s;
  }

  GradVector grad(std::span<const double> theta) const {
    GradVector g(center.size());
    for (std::size_t i = 0; i < center.size(); ++i)
      g[i] = weights[i] * (theta[i] - center[i]);
    return g;
  }
};

struct SyntheticTaskSet {
  QuadraticTask main;         // identity curvature, optimum at its center
  QuadraticTask conflicting;  // identity curvature, negative alignment at theta0
  QuadraticTask orthogonal;   // lives on coordinates the trajectory never touches
  std::vector<double> theta0;
};

// Fixed geometry: the start point spans the first half of the coordinates,
// the conflicting optimum sits past it along the same ray (plus an off-ray
// component), and the orthogonal task only touches the second half.
inline SyntheticTaskSet make_quadratic_tasks(int dim, std::uint64_t seed) {
  if (dim < 2) throw std::invalid_argument("make_quadratic_tasks: dim must be >= 2");
  Rng rng(seed);
  const int h = std::max(1, dim / 2);

  SyntheticTaskSet set;
  set.theta0.assign(dim, 0.0);
  double n0 = 0.0;
  for (int i = 0; i < h; ++i) {
    set.theta0[i] = rng.normal();
    n0 += set.theta0[i] * set.theta0[i];
  }
  n0 = std::sqrt(n0);
  for (int i = 0; i < h; ++i) set.theta0[i] *= 2.0 / n0;  // |theta0| = 2

  set.main.name = "main";
  set.main.center.assign(dim, 0.0);
  set.main.weights.assign(dim, 1.0);

  // Off-ray component orthogonal to theta0 inside the first half.
  std::vector<double> off(dim, 0.0);
  if (h >= 2) {
    double d0 = 0.0, nn = 0.0;
    for (int i = 0; i < h; ++i) {
      off[i] = rng.normal();
      d0 += off[i] * set.theta0[i];
    }
    for (int i = 0; i < h; ++i) off[i] -= d0 / 4.0 * set.theta0[i];  // |theta0|^2 = 4
    for (int i = 0; i < h; ++i) nn += off[i] * off[i];
    nn = std::sqrt(nn);
    for (int i = 0; i < h; ++i) off[i] /= nn;
  } else {
    off[h] = 1.0;
  }
  set.conflicting.name = "conflicting";
  set.conflicting.weights.assign(dim, 1.0);
  set.conflicting.center.assign(dim, 0.0);
  for (int i = 0; i < dim; ++i) set.conflicting.center[i] = 1.5 * set.theta0[i] + off[i];

  set.orthogonal.name = "orthogonal";
  set.orthogonal.weights.assign(dim, 0.0);
  set.orthogonal.center.assign(dim, 0.0);
  double nc = 0.0;
  for (int i = h; i < dim; ++i) {
    set.orthogonal.weights[i] = 1.0;
    set.orthogonal.center[i] = rng.normal();
    nc += set.orthogonal.center[i] * set.orthogonal.center[i];
  }
  if (nc > 0.0) {
    nc = std::sqrt(nc);
    for (int i = h; i < dim; ++i) set.orthogonal.center[i] /= nc;
  }
  return set;
}

struct ComparisonRow {
  long step = 0;
  Strategy strategy = Strategy::sml;
  double distance_to_optimum = 0.0;
  double cosine = 0.0;  // mean cosine(g_aux, g_main) before the update
};

// Fixed-step descent of the main task plus auxiliaries under each strategy.
// alpha is held constant so the closed-form fixed points apply.
inline std::vector<ComparisonRow> run_comparison(const QuadraticTask& main,
                                                 std::span<const QuadraticTask> aux,
                                                 std::span<const double> theta0,
                                                 std::span<const Strategy> strategies,
                                                 long steps, double eta, double alpha,
                                                 std::uint64_t seed) {
  std::vector<ComparisonRow> rows;
  for (Strategy strat : strategies) {
    std::vector<double> theta(theta0.begin(), theta0.end());
    Rng rng(seed);
    for (long t = 1; t <= steps; ++t) {
      const GradVector g_main = main.grad(theta);
      std::vector<TaskGradient> tg;
      double cos_sum = 0.0;
      for (std::size_t k = 0; k < aux.size(); ++k) {
        TaskGradient g{Task::Synthetic, static_cast<int>(k), aux[k].grad(theta)};
        const double nm = std::sqrt(norm_sq(g_main)), na = std::sqrt(norm_sq(g.grad));
        cos_sum += (nm > 0.0 && na > 0.0) ? dot(g.grad, g_main) / (nm * na) : 0.0;
        tg.push_back(std::move(g));
      }
      const GradVector delta = combine(g_main, tg, alpha, strat, rng);
      for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= eta * delta[i];
      double dist = 0.0;
      for (std::size_t i = 0; i < theta.size(); ++i) {
        const double d = theta[i] - main.center[i];
        dist += d * d;
      }
      rows.push_back({t, strat, std::sqrt(dist),
                      aux.empty() ? 0.0 : cos_sum / static_cast<double>(aux.size())});
    }
  }
  return rows;
}

inline std::string comparison_csv(std::span<const ComparisonRow> rows) {
  std::ostringstream os;
  os << "step,strategy,distance_to_optimum,cosine\n";
  os.precision(17);
  for (const auto& r : rows)
    os << r.step << ',' << strategy_name(r.strategy) << ',' << r.distance_to_optimum << ','
       << r.cosine << '\n';
  return os.str();
}

}  // namespace sml::sched
