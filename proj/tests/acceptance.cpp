// Acceptance suite. Each criterion prints exactly one [PASS]/[FAIL] line;
// the exit code is the number of failed criteria. Run with no arguments for
// all criteria or with a list of criterion numbers.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "sml/beam.hpp"
#include "sml/bleu.hpp"
#include "sml/coherence.hpp"
#include "sml/corpus.hpp"
#include "sml/gradcheck.hpp"
#include "sml/model.hpp"
#include "sml/scheduler.hpp"
#include "sml/trainer.hpp"

using namespace sml;

namespace {

struct Check {
  bool ok = true;
  std::string first_failure;
  void expect(bool cond, const std::string& what) {
    if (!cond && ok) {
      ok = false;
      first_failure = what;
    }
  }
};

double elapsed_s(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(4);
  os << x;
  return os.str();
}

// ---------------------------------------------------------------- criterion 1

void criterion_1(Check& c) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(1001);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t dim =
        static_cast<std::size_t>(std::pow(2.0, rng.uniform(1.0, 12.0)));  // 2..4096
    diff::GradVector g_main(dim), g_k(dim);
    for (auto& x : g_main.values) x = rng.normal();
    for (auto& x : g_k.values) x = rng.normal(0, 2.0);

    auto p = sched::project(g_k, g_main);

    // collinearity residual
    const double gm_sq = diff::norm_sq(g_main);
    const double coeff = diff::dot(p, g_main) / gm_sq;
    double resid = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      const double d = p[i] - coeff * g_main[i];
      resid += d * d;
    }
    c.expect(std::sqrt(resid) <= 1e-10 * std::sqrt(diff::norm_sq(g_k)),
             "collinearity residual too large at dim " + std::to_string(dim));

    // exact sign preservation
    auto sgn = [](double x) { return x > 0 ? 1 : (x < 0 ? -1 : 0); };
    c.expect(sgn(diff::dot(p, g_main)) == sgn(diff::dot(g_k, g_main)), "sign not preserved");

    // scale equivariance in g_k and scale invariance in g_main, 1e-10
    const double ck = std::exp(rng.uniform(-3.0, 3.0));
    auto p_eq = sched::project(diff::scaled(g_k, ck), g_main);
    const double cm = std::exp(rng.uniform(-3.0, 3.0));
    auto p_inv = sched::project(g_k, diff::scaled(g_main, cm));
    for (std::size_t i = 0; i < dim; ++i) {
      const double tol = 1e-10 * std::max(1.0, std::abs(p[i]));
      c.expect(std::abs(p_eq[i] - ck * p[i]) <= tol * std::max(1.0, ck), "scale equivariance");
      c.expect(std::abs(p_inv[i] - p[i]) <= tol, "scale invariance");
    }
  }
  const double dt = elapsed_s(t0);
  c.expect(dt < 10.0, "runtime " + fmt(dt) + "s exceeds 10s");
}

// ------------------------------------------------------- shared model helpers

corpus::Conversation synth_conv(Rng& rng, int turns, int vocab, int min_len, int max_len,
                                const std::string& id) {
  corpus::Conversation conv;
  conv.id = id;
  for (int t = 1; t <= turns; ++t) {
    corpus::Utterance u;
    u.turn_index = t;
    const int len = min_len + static_cast<int>(rng.uniform_u64(max_len - min_len + 1));
    for (int i = 0; i < len; ++i)
      u.tokens.push_back(corpus::kNumSpecials +
                         static_cast<int>(rng.uniform_u64(vocab - corpus::kNumSpecials)));
    u.raw_text = "synthetic";
    auto v = u;
    u.language = corpus::Side::source;
    v.language = corpus::Side::target;
    conv.source_side.push_back(u);
    conv.target_side.push_back(v);
  }
  return conv;
}

struct TaskBatches {
  std::vector<model::Example> nct, mrg, xrg;
  std::vector<corpus::NudSample> nud, xnud;
};

TaskBatches make_batches(Rng& rng, const std::vector<corpus::Conversation>& convs, int max_turns,
                         int max_ctx = 48) {
  TaskBatches b;
  for (const auto& conv : convs) {
    const int u = conv.length();
    const auto& target = conv.target_side[u - 1].tokens;
    b.nct.push_back({corpus::make_context(conv, u, corpus::Side::source, max_ctx, max_turns),
                     target});
    b.mrg.push_back({corpus::make_context_only(conv, u, corpus::Side::target, max_ctx, max_turns),
                     target});
    b.xrg.push_back({corpus::make_context_only(conv, u, corpus::Side::source, max_ctx, max_turns),
                     target});
    auto [np, nn] = corpus::sample_nud(conv, u, rng, false, max_ctx, max_turns);
    b.nud.push_back(np);
    b.nud.push_back(nn);
    auto [xp, xn] = corpus::sample_nud(conv, u, rng, true, max_ctx, max_turns);
    b.xnud.push_back(xp);
    b.xnud.push_back(xn);
  }
  return b;
}

// ---------------------------------------------------------------- criterion 2

void criterion_2(Check& c) {
  const auto t0 = std::chrono::steady_clock::now();
  model::NctConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 16;
  cfg.heads = 2;
  cfg.ffn = 32;
  cfg.max_turns = 8;
  cfg.max_pos = 64;
  cfg.vocab = 50;
  cfg.label_smoothing = 0.1;
  model::Nct m(cfg);
  Rng rng(2002);
  auto params = m.init_params(rng);
  std::vector<corpus::Conversation> convs{synth_conv(rng, 3, cfg.vocab, 2, 4, "a")};
  auto b = make_batches(rng, convs, cfg.max_turns);

  auto check = [&](const char* name, auto build) {
    auto report = diff::grad_check(build, params, 1e-5, 1e-4, rng, 200);
    c.expect(report.pass, std::string(name) + " max rel err " + fmt(report.max_rel_err) +
                              " at " + report.worst_param);
  };
  using Tape = diff::Tape;
  using PS = diff::ParamStore;
  check("nct", [&](Tape& t, const PS& p) { return m.nct_loss(t, p, b.nct); });
  check("mrg", [&](Tape& t, const PS& p) { return m.mrg_loss(t, p, b.mrg); });
  check("xrg", [&](Tape& t, const PS& p) { return m.xrg_loss(t, p, b.xrg); });
  check("nud", [&](Tape& t, const PS& p) { return m.nud_loss(t, p, b.nud); });
  check("xnud", [&](Tape& t, const PS& p) { return m.xnud_loss(t, p, b.xnud); });
  const double dt = elapsed_s(t0);
  c.expect(dt < 120.0, "runtime " + fmt(dt) + "s exceeds 2min");
}

// ---------------------------------------------------------------- criterion 3

void criterion_3(Check& c) {
  model::NctConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 16;
  cfg.heads = 2;
  cfg.ffn = 32;
  cfg.max_turns = 8;
  cfg.max_pos = 64;
  cfg.vocab = 40;
  model::Nct m(cfg);
  Rng rng(3003);

  for (int trial = 0; trial < 3; ++trial) {
    auto params = m.init_params(rng);
    std::vector<corpus::Conversation> convs;
    for (int i = 0; i < 2; ++i)
      convs.push_back(synth_conv(rng, 3, cfg.vocab, 2, 4, "t" + std::to_string(i)));
    auto b = make_batches(rng, convs, cfg.max_turns);
    const double alpha = 0.25 + 0.5 * trial;

    diff::Tape big;
    auto combined = big.add(
        m.nct_loss(big, params, b.nct),
        big.scale(
            big.add(big.add(m.mrg_loss(big, params, b.mrg), m.xrg_loss(big, params, b.xrg)),
                    big.add(m.nud_loss(big, params, b.nud), m.xnud_loss(big, params, b.xnud))),
            alpha));
    auto g_direct = big.backward(combined, params);

    auto grad_of = [&](auto&& fn) {
      diff::Tape t;
      return t.backward(fn(t), params);
    };
    auto g_main = grad_of([&](diff::Tape& t) { return m.nct_loss(t, params, b.nct); });
    std::vector<sched::TaskGradient> aux;
    aux.push_back({sched::Task::MRG, 0,
                   grad_of([&](diff::Tape& t) { return m.mrg_loss(t, params, b.mrg); })});
    aux.push_back({sched::Task::XRG, 0,
                   grad_of([&](diff::Tape& t) { return m.xrg_loss(t, params, b.xrg); })});
    aux.push_back({sched::Task::NUD, 0,
                   grad_of([&](diff::Tape& t) { return m.nud_loss(t, params, b.nud); })});
    aux.push_back({sched::Task::XNUD, 0,
                   grad_of([&](diff::Tape& t) { return m.xnud_loss(t, params, b.xnud); })});
    Rng r2(1);
    auto delta = sched::combine(g_main, aux, alpha, sched::Strategy::conventional, r2);

    double max_diff = 0.0;
    for (std::size_t i = 0; i < delta.size(); ++i)
      max_diff = std::max(max_diff, std::abs(delta[i] - g_direct[i]));
    c.expect(max_diff <= 1e-10, "combined-vs-direct gradient differs by " + fmt(max_diff));
  }
}

// ---------------------------------------------------------------- criterion 4

void criterion_4(Check& c) {
  const auto t0 = std::chrono::steady_clock::now();
  const int dim = 16;
  const long steps = 500;
  const double eta = 0.05, alpha = 1.0;
  auto set = sched::make_quadratic_tasks(dim, 4004);
  const std::size_t n = set.theta0.size();

  // Closed-form expectations, computed before running the strategies.
  std::vector<double> conv_fix(n);
  for (std::size_t i = 0; i < n; ++i)
    conv_fix[i] = (set.main.center[i] + alpha * set.conflicting.center[i]) / (1.0 + alpha);
  const double rho = 1.0 - eta * (1.0 + alpha);
  std::vector<double> conv_theta = set.theta0;
  for (long t = 0; t < steps; ++t)
    for (std::size_t i = 0; i < n; ++i)
      conv_theta[i] = conv_fix[i] + rho * (conv_theta[i] - conv_fix[i]);
  double conv_expected = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = conv_theta[i] - set.main.center[i];
    conv_expected += d * d;
  }
  conv_expected = std::sqrt(conv_expected);

  double r0 = 0.0, b = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = set.theta0[i] - set.main.center[i];
    r0 += d * d;
  }
  r0 = std::sqrt(r0);
  for (std::size_t i = 0; i < n; ++i)
    b += (set.main.center[i] - set.conflicting.center[i]) * (set.theta0[i] - set.main.center[i]) /
         r0;
  double r = r0;
  for (long t = 0; t < steps; ++t) r = rho * r - eta * alpha * b;
  const double sml_expected = std::abs(r);

  const sched::Strategy strategies[] = {sched::Strategy::conventional, sched::Strategy::sml};
  const sched::QuadraticTask conflicting[] = {set.conflicting};
  auto rows = sched::run_comparison(set.main, conflicting, set.theta0, strategies, steps, eta,
                                    alpha, 44);
  const double conv_final = rows[steps - 1].distance_to_optimum;
  const double sml_final = rows[2 * steps - 1].distance_to_optimum;
  c.expect(std::abs(conv_final - conv_expected) <= 1e-8 * std::max(1.0, conv_expected),
           "conventional final " + fmt(conv_final) + " vs closed form " + fmt(conv_expected));
  c.expect(std::abs(sml_final - sml_expected) <= 1e-8 * std::max(1.0, sml_expected),
           "sml final " + fmt(sml_final) + " vs closed form " + fmt(sml_expected));
  c.expect(sml_final < conv_final, "sml " + fmt(sml_final) + " not below conventional " +
                                       fmt(conv_final));

  // orthogonal task: sml == single-task descent to 1e-10
  const sched::QuadraticTask orthogonal[] = {set.orthogonal};
  const sched::Strategy only_sml[] = {sched::Strategy::sml};
  auto rows2 =
      sched::run_comparison(set.main, orthogonal, set.theta0, only_sml, steps, eta, alpha, 44);
  std::vector<double> theta = set.theta0;
  for (long t = 0; t < steps; ++t)
    for (std::size_t i = 0; i < n; ++i) theta[i] -= eta * (theta[i] - set.main.center[i]);
  double dist = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = theta[i] - set.main.center[i];
    dist += d * d;
  }
  c.expect(std::abs(rows2.back().distance_to_optimum - std::sqrt(dist)) <= 1e-10,
           "orthogonal-task trajectory diverged from single-task descent");

  const double dt = elapsed_s(t0);
  c.expect(dt < 5.0, "runtime " + fmt(dt) + "s exceeds 5s");
}

// ---------------------------------------------------------------- criterion 5

void criterion_5(Check& c) {
  model::NctConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 16;
  cfg.heads = 2;
  cfg.ffn = 32;
  cfg.max_turns = 8;
  cfg.max_pos = 64;
  cfg.vocab = 40;
  model::Nct m(cfg);
  Rng rng(5005);
  auto params = m.init_params(rng);
  std::vector<corpus::Conversation> convs{synth_conv(rng, 3, cfg.vocab, 3, 5, "a")};
  auto b = make_batches(rng, convs, cfg.max_turns);

  auto zeros_on = [&](const diff::GradVector& g, const std::string& name) {
    const int idx = params.index_of(name);
    const long off = params.offset(idx);
    for (long k = 0; k < params.at(idx).numel(); ++k)
      if (g[static_cast<std::size_t>(off + k)] != 0.0) return false;
    return true;
  };
  {
    diff::Tape t;
    auto g = t.backward(m.nct_loss(t, params, b.nct), params);
    for (const char* h :
         {"head.mrg.w", "head.mrg.b", "head.xrg.w", "head.xrg.b", "head.nud.w", "head.xnud.w"})
      c.expect(zeros_on(g, h), std::string("nct gradient leaks into ") + h);
  }
  {
    diff::Tape t;
    auto g = t.backward(m.mrg_loss(t, params, b.mrg), params);
    c.expect(zeros_on(g, "head.out.w") && zeros_on(g, "head.out.b"),
             "mrg gradient leaks into the translation head");
  }
  {
    diff::Tape t;
    auto g = t.backward(m.nud_loss(t, params, b.nud), params);
    c.expect(zeros_on(g, "head.xnud.w"), "nud gradient leaks into the xnud head");
  }

  // causality: future-target perturbation leaves earlier decoder rows bit-exact
  const auto& window = b.nct[0].window;
  std::vector<int> in_a{corpus::kBos, 10, 11, 12, 13, 14};
  std::vector<int> in_b{corpus::kBos, 10, 11, 12, 30, 31};
  diff::Tape ta, tb;
  auto ea = m.encode(ta, params, window);
  auto eb = m.encode(tb, params, window);
  const auto& A = ta.val(m.decode_logits(ta, params, ea, in_a, 3, model::GenHead::nct));
  const auto& B = tb.val(m.decode_logits(tb, params, eb, in_b, 3, model::GenHead::nct));
  bool exact = true;
  for (long i = 0; i < 4; ++i)
    for (long j = 0; j < A.cols(); ++j) exact = exact && A(i, j) == B(i, j);
  c.expect(exact, "decoder rows before the perturbation changed");
}

// ---------------------------------------------------------------- criterion 6

struct Stage3Outcome {
  double sml_loss = 0.0;
  double conventional_loss = 0.0;
  double bleu = 0.0;
  double stage1_nll = 0.0;
  double stage1_loss = 0.0;        // smoothed training loss, mean of last 50 steps
  double smoothed_floor = 0.0;     // analytic optimum of that loss on this corpus
};

std::vector<corpus::Conversation> copy_corpus(std::uint64_t seed, int n_convs, int vocab) {
  Rng rng(seed);
  std::vector<corpus::Conversation> convs;
  for (int i = 0; i < n_convs; ++i) {
    corpus::Conversation conv;
    conv.id = "cp" + std::to_string(i);
    for (int t = 1; t <= 4; ++t) {
      corpus::Utterance u;
      u.turn_index = t;
      const int len = 3 + static_cast<int>(rng.uniform_u64(2));  // 3..4 tokens
      for (int k = 0; k < len; ++k)
        u.tokens.push_back(corpus::kNumSpecials +
                           static_cast<int>(rng.uniform_u64(vocab - corpus::kNumSpecials)));
      u.raw_text = "copy";
      auto v = u;
      u.language = corpus::Side::source;
      v.language = corpus::Side::target;
      conv.source_side.push_back(u);   // copy task: target equals source
      conv.target_side.push_back(v);
    }
    convs.push_back(std::move(conv));
  }
  return convs;
}

// Fixture settings validated by pilot runs: peak learning rate 0.02/sqrt(200)
// converges the d=64 copy model to the label-smoothing floor well within the
// stage budgets.
train::StageConfig copy_stage(train::Stage stage, long steps, sched::Strategy strat) {
  train::StageConfig cfg;
  cfg.stage = stage;
  cfg.steps = steps;
  cfg.batch_tokens = 24;
  if (stage != train::Stage::general_pretrain)
    cfg.tasks = {sched::Task::MRG, sched::Task::XRG, sched::Task::NUD, sched::Task::XNUD};
  cfg.schedule.strategy = strat;
  cfg.schedule.alpha_start = 1.0;
  cfg.schedule.alpha_end = 0.0;
  cfg.schedule.total_steps = std::max<long>(steps, 1);
  cfg.schedule.prior_active_tasks = train::StageConfig::default_prior_tasks(stage);
  cfg.lr.warmup_steps = 200;
  cfg.lr.scale = 0.02;
  cfg.log_every = 1000000;
  cfg.max_ctx_tokens = 40;
  return cfg;
}

Stage3Outcome run_copy_pipeline(std::uint64_t seed, int vocab) {
  model::NctConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 64;
  cfg.heads = 4;
  cfg.ffn = 128;
  cfg.max_turns = 10;
  cfg.max_pos = 64;
  cfg.vocab = vocab;
  cfg.label_smoothing = 0.1;
  model::Nct m(cfg);

  auto train_convs = copy_corpus(600 + seed, 200, vocab);
  auto heldout = copy_corpus(9900, 50, vocab);

  auto state = train::make_train_state(m, seed);
  auto s1 = train::run_stage(m, state, copy_stage(train::Stage::general_pretrain, 2000,
                                                  sched::Strategy::conventional),
                             train_convs);

  Stage3Outcome out;
  out.stage1_loss =
      std::accumulate(s1.main_loss.end() - 50, s1.main_loss.end(), 0.0) / 50.0;
  {
    // Analytic optimum of the smoothed objective: per-token entropy of the
    // smoothed target distribution times the mean target length (with EOS).
    const double eps = cfg.label_smoothing;
    const double qt = 1.0 - eps + eps / vocab, qo = eps / vocab;
    const double per_token = -qt * std::log(qt) - (vocab - 1) * qo * std::log(qo);
    double mean_len = 0.0;
    for (const auto& conv : train_convs)
      for (const auto& u : conv.target_side) mean_len += u.tokens.size() + 1.0;
    mean_len /= 4.0 * train_convs.size();
    out.smoothed_floor = per_token * mean_len;
  }
  {
    // plain per-token NLL of the stage-1 model on training pairs
    auto eval_cfg = cfg;
    eval_cfg.label_smoothing = 0.0;
    model::Nct eval_model(eval_cfg);
    double nll = 0.0;
    long tokens = 0;
    for (int i = 0; i < 50; ++i) {
      const auto& conv = train_convs[i];
      std::vector<model::Example> ex{
          {corpus::make_plain_window(conv.source_side[0].tokens, 1, cfg.max_turns),
           conv.target_side[0].tokens}};
      diff::Tape t;
      nll += t.val(eval_model.nct_loss(t, state.params, ex)).as_scalar();
      tokens += static_cast<long>(conv.target_side[0].tokens.size()) + 1;
    }
    out.stage1_nll = nll / tokens;
  }

  train::run_stage(m, state,
                   copy_stage(train::Stage::indomain_pretrain, 2000, sched::Strategy::sml),
                   train_convs);

  auto run_arm = [&](sched::Strategy strat) {
    auto arm = state;  // same post-stage-2 weights, moments and rng
    auto result = train::run_stage(
        m, arm, copy_stage(train::Stage::finetune, 500, strat), train_convs);
    const std::size_t k = 50;
    const double tail =
        std::accumulate(result.main_loss.end() - k, result.main_loss.end(), 0.0) / k;
    return std::make_pair(tail, std::move(arm));
  };
  auto [sml_loss, sml_state] = run_arm(sched::Strategy::sml);
  auto [conv_loss, conv_state] = run_arm(sched::Strategy::conventional);
  out.sml_loss = sml_loss;
  out.conventional_loss = conv_loss;

  // beam-4 decode of held-out data with the sml model
  eval::BeamConfig bc;
  bc.beam_size = 4;
  bc.length_penalty = 0.6;
  bc.max_len = 12;
  corpus::Vocabulary v;
  for (int i = corpus::kNumSpecials; i < vocab; ++i) v.add("tok" + std::to_string(i));
  std::vector<std::string> hyps, refs;
  for (const auto& conv : heldout) {
    const int u = conv.length();
    auto window = corpus::make_context(conv, u, corpus::Side::source, 40, cfg.max_turns);
    auto toks = eval::beam_decode(m, sml_state.params, window, bc);
    hyps.push_back(v.decode(toks));
    refs.push_back(v.decode(conv.target_side[u - 1].tokens));
  }
  out.bleu = eval::corpus_bleu(hyps, refs, 4, eval::BleuMode::word);
  return out;
}

void criterion_6(Check& c) {
  const auto t0 = std::chrono::steady_clock::now();
  const int vocab = corpus::kNumSpecials + 20;
  const std::uint64_t seeds[] = {1, 2, 3};

  std::vector<Stage3Outcome> outcomes(3);
  {
    std::vector<std::thread> threads;
    for (int i = 0; i < 3; ++i)
      threads.emplace_back([&, i] { outcomes[i] = run_copy_pipeline(seeds[i], vocab); });
    for (auto& t : threads) t.join();
  }

  double mean_diff = 0.0;
  for (int i = 0; i < 3; ++i) {
    const auto& o = outcomes[i];
    mean_diff += (o.conventional_loss - o.sml_loss) / 3.0;
    // Stage-1 dynamics, thresholds pinned by pilot runs. Label smoothing 0.1
    // bounds the reachable per-token NLL at -log(0.9 + 0.1/V) = 0.1011 on
    // this vocabulary; 0.11 certifies the copy task is fully learned. The
    // smoothed training loss must also sit within 10% of its analytic floor.
    c.expect(o.stage1_nll < 0.11, "seed " + std::to_string(seeds[i]) + " stage-1 NLL " +
                                      fmt(o.stage1_nll) + " not below 0.11");
    c.expect(o.stage1_loss < 1.1 * o.smoothed_floor,
             "seed " + std::to_string(seeds[i]) + " stage-1 loss " + fmt(o.stage1_loss) +
                 " far from its floor " + fmt(o.smoothed_floor));
    c.expect(o.bleu >= 95.0, "seed " + std::to_string(seeds[i]) + " held-out BLEU " +
                                 fmt(o.bleu) + " below 95");
  }
  c.expect(mean_diff >= 0.0,
           "mean stage-3 loss difference (conventional - sml) = " + fmt(mean_diff));

  const double dt = elapsed_s(t0);
  c.expect(dt < 1200.0, "runtime " + fmt(dt) + "s exceeds 20min");
  std::cerr << "  criterion 6 detail: mean_diff=" << fmt(mean_diff);
  for (const auto& o : outcomes)
    std::cerr << " [nll=" << fmt(o.stage1_nll) << " s1=" << fmt(o.stage1_loss) << "/floor "
              << fmt(o.smoothed_floor) << " sml=" << fmt(o.sml_loss)
              << " conv=" << fmt(o.conventional_loss) << " bleu=" << fmt(o.bleu) << "]";
  std::cerr << " t=" << fmt(dt) << "s\n";
}

// ---------------------------------------------------------------- criterion 7

void criterion_7(Check& c) {
  // BLEU fixture with hand-counted n-grams
  {
    std::vector<std::string> hyp{"the cat sat"};
    std::vector<std::string> ref{"the cat sat down"};
    const double expected = 100.0 * std::exp(1.0 - 4.0 / 3.0);
    const double got = eval::corpus_bleu(hyp, ref);
    c.expect(std::abs(got - expected) <= 1e-6,
             "bleu fixture: got " + fmt(got) + " want " + fmt(expected));
  }

  // coherence against a brute-force mean-vector oracle
  {
    Rng rng(7007);
    eval::WordVectorTable table(6, "test");
    std::map<std::string, std::vector<double>> raw;
    for (int i = 0; i < 12; ++i) {
      std::vector<double> v(6);
      for (auto& x : v) x = rng.normal();
      raw["w" + std::to_string(i)] = v;
      table.add("w" + std::to_string(i), v);
    }
    const std::string s1 = "w0 w2 w4 w2", s2 = "w1 w3 w5";
    auto mean = [&](const std::string& s) {
      auto toks = corpus::tokenize(s);
      std::vector<double> m(6, 0.0);
      for (const auto& t : toks)
        for (int j = 0; j < 6; ++j) m[j] += raw[t][j];
      for (auto& x : m) x /= toks.size();
      return m;
    };
    auto a = mean(s1), b = mean(s2);
    double ab = 0, aa = 0, bb = 0;
    for (int j = 0; j < 6; ++j) {
      ab += a[j] * b[j];
      aa += a[j] * a[j];
      bb += b[j] * b[j];
    }
    const double oracle = ab / std::sqrt(aa * bb);
    c.expect(std::abs(eval::coherence(s1, s2, table) - oracle) <= 1e-12, "coherence oracle");
  }

  // beam search never beats exhaustive enumeration on tiny instances
  {
    Rng rng(7017);
    model::NctConfig cfg;
    cfg.layers = 1;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.ffn = 24;
    cfg.max_turns = 6;
    cfg.max_pos = 32;
    cfg.vocab = 9;  // 3 content tokens + specials
    model::Nct m(cfg);
    for (int trial = 0; trial < 3; ++trial) {
      auto params = m.init_params(rng);
      for (auto& x : params.get("head.out.b").values()) x = rng.normal(0, 1.0);
      std::vector<int> src;
      for (int i = 0; i < 3; ++i)
        src.push_back(corpus::kNumSpecials + static_cast<int>(rng.uniform_u64(3)));
      auto w = corpus::make_plain_window(src, 1, cfg.max_turns);

      eval::BeamConfig bc;
      bc.beam_size = 4;
      bc.length_penalty = 0.6;
      bc.max_len = 4;
      auto result = eval::beam_search(m, params, w, bc);
      const double beam_score = result.best.score(bc.length_penalty);

      // exhaustive enumeration over all sequences up to max_len
      double best = -1e300;
      std::vector<std::vector<int>> frontier{{}};
      std::vector<double> frontier_lp{0.0};
      for (int step = 0; step < bc.max_len; ++step) {
        std::vector<std::vector<int>> next;
        std::vector<double> next_lp;
        for (std::size_t i = 0; i < frontier.size(); ++i) {
          auto dist = m.decode_step(params, w, frontier[i]);
          for (int tok = 0; tok < cfg.vocab; ++tok) {
            const double lp = frontier_lp[i] + std::log(dist[tok]);
            if (tok == corpus::kEos) {
              eval::Hypothesis h{frontier[i], lp, true};
              best = std::max(best, h.score(bc.length_penalty));
            } else if (step + 1 < bc.max_len) {
              auto seq = frontier[i];
              seq.push_back(tok);
              next.push_back(std::move(seq));
              next_lp.push_back(lp);
            } else {
              auto seq = frontier[i];
              seq.push_back(tok);
              eval::Hypothesis h{std::move(seq), lp, false};
              best = std::max(best, h.score(bc.length_penalty));
            }
          }
        }
        frontier = std::move(next);
        frontier_lp = std::move(next_lp);
      }
      c.expect(beam_score <= best + 1e-12,
               "beam " + fmt(beam_score) + " beats exhaustive " + fmt(best));
    }
  }
}

// ---------------------------------------------------------------- criterion 8

void criterion_8(Check& c) {
  model::NctConfig cfg;
  cfg.layers = 1;
  cfg.hidden = 16;
  cfg.heads = 2;
  cfg.ffn = 24;
  cfg.max_turns = 8;
  cfg.max_pos = 64;
  cfg.vocab = 26;
  model::Nct m(cfg);
  auto convs = copy_corpus(808, 10, cfg.vocab);
  auto stage = copy_stage(train::Stage::indomain_pretrain, 12, sched::Strategy::sml);
  stage.lr.warmup_steps = 10;
  stage.lr.scale = 0.05;

  auto run_full = [&](std::uint64_t seed) {
    auto st = train::make_train_state(m, seed);
    train::run_stage(m, st, stage, convs);
    return st;
  };
  auto a = run_full(55);
  auto b = run_full(55);
  const auto fa = a.params.flatten(), fb = b.params.flatten();
  c.expect(fa.size() == fb.size() &&
               std::memcmp(fa.data(), fb.data(), fa.size() * sizeof(double)) == 0,
           "identical seeds diverged");

  // resume from a mid-stage snapshot equals the continuous run bit for bit
  const auto tmp = std::filesystem::temp_directory_path() / "sml_acceptance_resume.ckpt";
  {
    auto st = train::make_train_state(m, 55);
    long n = 0;
    train::run_stage(m, st, stage, convs, nullptr, [&](const train::TrainState& snap) {
      if (++n == 6) train::save_checkpoint(snap, tmp);
    });
  }
  auto resumed = train::load_checkpoint(tmp);
  train::run_stage(m, resumed, stage, convs);
  const auto fr = resumed.params.flatten();
  c.expect(std::memcmp(fa.data(), fr.data(), fa.size() * sizeof(double)) == 0,
           "resumed run diverged from the continuous one");
  c.expect(resumed.rng == a.rng, "rng state diverged after resume");
  c.expect(resumed.adam_m == a.adam_m && resumed.adam_v == a.adam_v,
           "optimizer moments diverged after resume");
}

// ---------------------------------------------------------------- criterion 9

void criterion_9(Check& c) {
  // NUD negative sampling is uniform: chi^2 over {1..4}, 3 dof, p > 0.01
  Rng gen(9009);
  corpus::Conversation conv;
  conv.id = "u5";
  for (int t = 1; t <= 5; ++t) {
    corpus::Utterance u;
    u.turn_index = t;
    u.tokens = {corpus::kNumSpecials + t};
    u.raw_text = "t";
    auto v = u;
    conv.source_side.push_back(u);
    conv.target_side.push_back(v);
  }
  std::map<int, long> counts;
  const long draws = 100000;
  for (long i = 0; i < draws; ++i) {
    auto [pos, neg] = corpus::sample_nud(conv, 5, gen, false, 64, 10);
    ++counts[neg.candidate[0]];
  }
  double chi2 = 0.0;
  const double expected = draws / 4.0;
  for (const auto& [tok, n] : counts) {
    const double d = n - expected;
    chi2 += d * d / expected;
  }
  c.expect(counts.size() == 4, "negative candidates missed some preceding turn");
  c.expect(chi2 < 11.345, "chi^2 " + fmt(chi2) + " rejects uniformity at p=0.01");

  // alpha schedule endpoints are exact
  sched::ScheduleConfig cfg;
  cfg.alpha_start = 1.0;
  cfg.alpha_end = 0.0;
  cfg.total_steps = 5000;
  c.expect(sched::alpha_at(0, cfg) == 1.0, "alpha at step 0 is not exactly 1");
  c.expect(sched::alpha_at(5000, cfg) == 0.0, "alpha at the last step is not exactly 0");
}

struct Criterion {
  int number;
  const char* title;
  void (*fn)(Check&);
};

const Criterion kCriteria[] = {
    {1, "projection algebra on 10k random pairs", criterion_1},
    {2, "finite-difference gradient checks for all five losses", criterion_2},
    {3, "conventional update equals the combined-objective gradient", criterion_3},
    {4, "synthetic scheduler benchmark against closed forms", criterion_4},
    {5, "head isolation and decoder causality", criterion_5},
    {6, "three-stage copy-task run: sml vs conventional and beam-4 BLEU", criterion_6},
    {7, "metric fixtures: BLEU, coherence, beam optimality", criterion_7},
    {8, "determinism and bit-exact resume", criterion_8},
    {9, "NUD sampling uniformity and alpha endpoints", criterion_9},
};

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.push_back(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& crit : kCriteria) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), crit.number) == wanted.end())
      continue;
    Check check;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      crit.fn(check);
    } catch (const std::exception& e) {
      check.expect(false, std::string("exception: ") + e.what());
    }
    const double dt = elapsed_s(t0);
    if (check.ok) {
      std::cout << "[PASS] criterion " << crit.number << ": " << crit.title << " (" << fmt(dt)
                << "s)\n";
    } else {
      std::cout << "[FAIL] criterion " << crit.number << ": " << crit.title << " — "
                << check.first_failure << " (" << fmt(dt) << "s)\n";
      ++failures;
    }
  }
  return failures;
}
