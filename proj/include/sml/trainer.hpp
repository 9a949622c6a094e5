#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sml/checkpoint.hpp"
#include "sml/corpus.hpp"
#include "sml/io.hpp"
#include "sml/model.hpp"
#include "sml/scheduler.hpp"

namespace sml::train {

using diff::GradVector;
using diff::ParamStore;
using sched::Task;

enum class Stage { general_pretrain, indomain_pretrain, finetune };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::general_pretrain: return "general_pretrain";
    case Stage::indomain_pretrain: return "indomain_pretrain";
    case Stage::finetune: return "finetune";
  }
  throw std::logic_error("stage_name: bad stage");
}

inline Stage parse_stage(const std::string& s) {
  for (Stage st : {Stage::general_pretrain, Stage::indomain_pretrain, Stage::finetune})
    if (s == stage_name(st)) return st;
  throw std::runtime_error("unknown stage '" + s + "'");
}

struct LrSchedule {
  long warmup_steps = 400;
  double scale = 0.1;
};

// Inverse-sqrt schedule with linear warmup, per stage, 1-based step.
inline double lr_at(long step, const LrSchedule& lr) {
  if (step < 1) throw std::invalid_argument("lr_at: step must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(std::max<long>(lr.warmup_steps, 1));
  return lr.scale * std::min(1.0 / std::sqrt(s), s / (w * std::sqrt(w)));
}

struct StageConfig {
  Stage stage = Stage::general_pretrain;
  std::string corpus_path;
  long steps = 100;
  long batch_tokens = 24;
  std::vector<Task> tasks;  // auxiliary tasks; empty during general pre-training
  sched::ScheduleConfig schedule;
  LrSchedule lr;
  long log_every = 50;
  long max_ctx_tokens = 48;

  void validate() const {
    if (steps < 0) throw std::invalid_argument("stage: steps must be >= 0");
    if (batch_tokens < 1) throw std::invalid_argument("stage: batch_tokens must be >= 1");
    if (stage == Stage::general_pretrain) {
      if (!tasks.empty())
        throw std::runtime_error("stage general_pretrain trains sentence translation only");
    } else {
      for (Task t : tasks)
        if (t != Task::MRG && t != Task::XRG && t != Task::NUD && t != Task::XNUD)
          throw std::runtime_error(std::string("stage: '") + sched::task_name(t) +
                                   "' is not an auxiliary task");
    }
  }

  static std::set<Task> default_prior_tasks(Stage s) {
    if (s == Stage::finetune) return {Task::MRG, Task::NUD};
    return {Task::MRG, Task::XRG, Task::NUD, Task::XNUD};
  }

  static StageConfig from_kv(const io::KvConfig& kv) {
    for (const auto& [k, v] : kv.values()) {
      static const char* known[] = {"stage",       "corpus",      "steps",     "batch_tokens",
                                    "tasks",       "strategy",    "alpha_start", "alpha_end",
                                    "warmup_steps", "lr_scale",   "log_every", "max_ctx_tokens",
                                    "prior_tasks"};
      bool ok = false;
      for (const char* name : known) ok = ok || k == name;
      if (!ok) throw std::runtime_error("stage config: unknown key '" + k + "'");
    }
    StageConfig c;
    c.stage = parse_stage(kv.get_str("stage"));
    c.corpus_path = kv.get_str("corpus", "");
    c.steps = kv.get_int("steps", c.steps);
    c.batch_tokens = kv.get_int("batch_tokens", c.batch_tokens);
    c.log_every = kv.get_int("log_every", c.log_every);
    c.max_ctx_tokens = kv.get_int("max_ctx_tokens", c.max_ctx_tokens);
    c.lr.warmup_steps = kv.get_int("warmup_steps", c.lr.warmup_steps);
    c.lr.scale = kv.get_real("lr_scale", c.lr.scale);
    const std::string tasks = kv.get_str(
        "tasks", c.stage == Stage::general_pretrain ? "" : "mrg,xrg,nud,xnud");
    std::istringstream in(tasks);
    std::string tok;
    while (std::getline(in, tok, ','))
      if (!io::trim(tok).empty()) c.tasks.push_back(sched::parse_task(io::trim(tok)));
    c.schedule.strategy = sched::parse_strategy(kv.get_str("strategy", "sml"));
    c.schedule.alpha_start = kv.get_real("alpha_start", 1.0);
    c.schedule.alpha_end = kv.get_real("alpha_end", 0.0);
    c.schedule.total_steps = std::max<long>(c.steps, 1);
    if (kv.has("prior_tasks")) {
      std::istringstream in(kv.get_str("prior_tasks"));
      std::string tok;
      while (std::getline(in, tok, ','))
        if (!io::trim(tok).empty()) c.schedule.prior_active_tasks.insert(sched::parse_task(io::trim(tok)));
    } else {
      c.schedule.prior_active_tasks = default_prior_tasks(c.stage);
    }
    c.validate();
    return c;
  }
};

struct TrainState {
  long global_step = 0;
  int stage_index = 0;
  long step_in_stage = 0;
  long adam_t = 0;
  ParamStore params;
  std::vector<double> adam_m, adam_v;
  Rng rng;

  void reset_moments() {
    adam_m.assign(static_cast<std::size_t>(params.total_len()), 0.0);
    adam_v.assign(static_cast<std::size_t>(params.total_len()), 0.0);
  }
};

inline TrainState make_train_state(const model::Nct& model, std::uint64_t seed) {
  TrainState st;
  st.rng = Rng(seed);
  st.params = model.init_params(st.rng);
  st.reset_moments();
  return st;
}

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.998;
inline constexpr double kAdamEps = 1e-8;

// One Adam update with bias correction. Returns false (and leaves the state
// untouched) when the incoming direction has non-finite entries.
inline bool adam_update(TrainState& state, const GradVector& delta, double lr) {
  if (delta.size() != static_cast<std::size_t>(state.params.total_len()))
    throw std::runtime_error("adam_update: direction length mismatch " +
                             std::to_string(delta.size()) + " vs " +
                             std::to_string(state.params.total_len()));
  for (double v : delta.values)
    if (!std::isfinite(v)) return false;
  const long t = ++state.adam_t;
  const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(t));
  std::size_t k = 0;
  for (int p = 0; p < state.params.count(); ++p) {
    auto vals = state.params.at(p).values();
    for (double& theta : vals) {
      const double g = delta.values[k];
      double& m = state.adam_m[k];
      double& v = state.adam_v[k];
      m = kAdamBeta1 * m + (1.0 - kAdamBeta1) * g;
      v = kAdamBeta2 * v + (1.0 - kAdamBeta2) * g * g;
      theta -= lr * (m / bc1) / (std::sqrt(v / bc2) + kAdamEps);
      ++k;
    }
  }
  return true;
}

// --- checkpointing ---

inline constexpr const char* kStateSection = "STATE";

inline std::string pack_train_state(const TrainState& st) {
  diff::BinWriter w;
  w.u64(static_cast<std::uint64_t>(st.global_step));
  w.u32(static_cast<std::uint32_t>(st.stage_index));
  w.u64(static_cast<std::uint64_t>(st.step_in_stage));
  w.u64(static_cast<std::uint64_t>(st.adam_t));
  w.u64(st.adam_m.size());
  w.f64_span(st.adam_m);
  w.u64(st.adam_v.size());
  w.f64_span(st.adam_v);
  w.str(st.rng.serialize());
  return w.take();
}

inline void unpack_train_state(const std::string& payload, TrainState& st) {
  diff::BinReader r(payload);
  st.global_step = static_cast<long>(r.u64());
  st.stage_index = static_cast<int>(r.u32());
  st.step_in_stage = static_cast<long>(r.u64());
  st.adam_t = static_cast<long>(r.u64());
  st.adam_m.resize(r.u64());
  r.f64_span(st.adam_m);
  st.adam_v.resize(r.u64());
  r.f64_span(st.adam_v);
  st.rng.deserialize(r.str());
}

inline void save_checkpoint(const TrainState& st, const std::filesystem::path& path,
                            std::map<std::string, std::string> sections = {}) {
  sections[kStateSection] = pack_train_state(st);
  io::atomic_write(path, diff::serialize_checkpoint(st.params, sections));
}

inline TrainState load_checkpoint(const std::filesystem::path& path,
                                  std::map<std::string, std::string>* sections_out = nullptr) {
  diff::Checkpoint ckpt = diff::parse_checkpoint(io::read_file(path));
  auto it = ckpt.sections.find(kStateSection);
  if (it == ckpt.sections.end())
    throw std::runtime_error("checkpoint " + path.string() + " has no trainer state");
  TrainState st;
  st.params = std::move(ckpt.params);
  unpack_train_state(it->second, st);
  if (st.adam_m.size() != static_cast<std::size_t>(st.params.total_len()) ||
      st.adam_v.size() != st.adam_m.size())
    throw std::runtime_error("checkpoint " + path.string() + ": moment length mismatch");
  ckpt.sections.erase(it);
  if (sections_out) *sections_out = std::move(ckpt.sections);
  return st;
}

// --- one training stage ---

using LogSink = std::function<void(const std::string& json_line)>;

struct StageResult {
  std::vector<double> main_loss;  // main-task loss per executed step
  long skipped_steps = 0;
};

namespace detail {

struct StepBatch {
  std::vector<model::Example> main;
  std::vector<model::Example> mrg, xrg;
  std::vector<corpus::NudSample> nud, xnud;
};

inline bool has_task(const std::vector<Task>& tasks, Task t) {
  return std::find(tasks.begin(), tasks.end(), t) != tasks.end();
}

}  // namespace detail

// Runs (steps - step_in_stage) updates of the stage. Each step evaluates the
// main task and every enabled auxiliary task on the same sampled
// conversations, combines the gradients per the stage strategy, and applies
// Adam. Deterministic given the state's rng. on_step, when set, observes the
// state after every update (used for periodic checkpoints).
inline StageResult run_stage(const model::Nct& model, TrainState& state, const StageConfig& cfg,
                             const std::vector<corpus::Conversation>& conversations,
                             const LogSink& sink = nullptr,
                             const std::function<void(const TrainState&)>& on_step = nullptr) {
  cfg.validate();
  if (conversations.empty()) throw std::runtime_error("run_stage: empty corpus");
  const int vocab = model.config().vocab;
  for (const auto& conv : conversations) {
    conv.validate();
    for (const auto& side : {&conv.source_side, &conv.target_side})
      for (const auto& u : *side) {
        if (u.tokens.empty())
          throw std::runtime_error("run_stage: conversation " + conv.id +
                                   " has an untokenized or empty utterance");
        for (int t : u.tokens)
          if (t < 0 || t >= vocab)
            throw std::runtime_error("run_stage: vocab mismatch: token id " + std::to_string(t) +
                                     " outside model vocab " + std::to_string(vocab) +
                                     " in conversation " + conv.id);
      }
  }

  const bool general = cfg.stage == Stage::general_pretrain;
  // Stage 1 trains on individual sentence pairs; flatten once, in order.
  std::vector<std::pair<const std::vector<int>*, const std::vector<int>*>> pairs;
  if (general)
    for (const auto& conv : conversations)
      for (int i = 0; i < conv.length(); ++i)
        pairs.emplace_back(&conv.source_side[i].tokens, &conv.target_side[i].tokens);

  // Executed steps are 0..steps-1; spanning steps-1 puts alpha_start on the
  // first update and alpha_end exactly on the last.
  sched::ScheduleConfig schedule = cfg.schedule;
  schedule.total_steps = std::max<long>(cfg.steps - 1, 1);

  const int max_turns = model.config().max_turns;
  Rng* drop = model.config().dropout > 0.0 ? &state.rng : nullptr;

  StageResult result;
  while (state.step_in_stage < cfg.steps) {
    const double alpha = sched::alpha_at(state.step_in_stage, schedule);

    // Sample the step's conversations under the token budget.
    detail::StepBatch batch;
    long budget = cfg.batch_tokens;
    while (budget > 0) {
      if (general) {
        const auto& [src, tgt] = pairs[state.rng.uniform_u64(pairs.size())];
        batch.main.push_back({corpus::make_plain_window(*src, 1, max_turns), *tgt});
        budget -= static_cast<long>(tgt->size());
      } else {
        const auto& conv = conversations[state.rng.uniform_u64(conversations.size())];
        const int u = conv.length();
        const auto& target = conv.target_side[u - 1].tokens;
        batch.main.push_back(
            {corpus::make_context(conv, u, corpus::Side::source, cfg.max_ctx_tokens, max_turns),
             target});
        if (detail::has_task(cfg.tasks, Task::MRG))
          batch.mrg.push_back({corpus::make_context_only(conv, u, corpus::Side::target,
                                                         cfg.max_ctx_tokens, max_turns),
                               target});
        if (detail::has_task(cfg.tasks, Task::XRG))
          batch.xrg.push_back({corpus::make_context_only(conv, u, corpus::Side::source,
                                                         cfg.max_ctx_tokens, max_turns),
                               target});
        if (u >= 2 && detail::has_task(cfg.tasks, Task::NUD)) {
          auto [pos, neg] = corpus::sample_nud(conv, u, state.rng, false, cfg.max_ctx_tokens,
                                               max_turns);
          batch.nud.push_back(std::move(pos));
          batch.nud.push_back(std::move(neg));
        }
        if (u >= 2 && detail::has_task(cfg.tasks, Task::XNUD)) {
          auto [pos, neg] = corpus::sample_nud(conv, u, state.rng, true, cfg.max_ctx_tokens,
                                               max_turns);
          batch.xnud.push_back(std::move(pos));
          batch.xnud.push_back(std::move(neg));
        }
        budget -= static_cast<long>(target.size());
      }
    }

    const Task main_task = general ? Task::SentNMT : Task::NCT;
    auto eval_task = [&](Task t, double* loss_out) -> GradVector {
      diff::Tape tape;
      diff::Tape::NodeId loss = -1;
      switch (t) {
        case Task::SentNMT: loss = model.sent_nmt_loss(tape, state.params, batch.main, drop); break;
        case Task::NCT: loss = model.nct_loss(tape, state.params, batch.main, drop); break;
        case Task::MRG: loss = model.mrg_loss(tape, state.params, batch.mrg, drop); break;
        case Task::XRG: loss = model.xrg_loss(tape, state.params, batch.xrg, drop); break;
        case Task::NUD: loss = model.nud_loss(tape, state.params, batch.nud, drop); break;
        case Task::XNUD: loss = model.xnud_loss(tape, state.params, batch.xnud, drop); break;
        default: throw std::logic_error("run_stage: bad task");
      }
      *loss_out = tape.val(loss).as_scalar();
      return tape.backward(loss, state.params);
    };

    double main_loss = 0.0;
    GradVector g_main = eval_task(main_task, &main_loss);

    std::vector<sched::TaskGradient> aux;
    std::vector<double> aux_loss;
    for (Task t : cfg.tasks) {
      if ((t == Task::NUD && batch.nud.empty()) || (t == Task::XNUD && batch.xnud.empty()))
        continue;  // single-turn conversations offer no discrimination pairs
      double lv = 0.0;
      aux.push_back({t, 0, eval_task(t, &lv)});
      aux_loss.push_back(lv);
    }

    GradVector delta = sched::combine(g_main, aux, alpha, schedule.strategy, state.rng,
                                      &schedule.prior_active_tasks);

    const double lr = lr_at(state.step_in_stage + 1, cfg.lr);
    const bool applied = adam_update(state, delta, lr);
    if (!applied) ++result.skipped_steps;

    ++state.step_in_stage;
    ++state.global_step;
    result.main_loss.push_back(main_loss);

    if (sink && (state.step_in_stage % std::max<long>(cfg.log_every, 1) == 0 ||
                 state.step_in_stage == cfg.steps || !applied)) {
      auto emit = [&](Task t, double loss, const GradVector& g) {
        nlohmann::json j;
        j["step"] = state.global_step;
        j["stage"] = stage_name(cfg.stage);
        j["task"] = sched::task_name(t);
        j["loss"] = loss;
        j["alpha"] = alpha;
        j["grad_norm"] = std::sqrt(diff::norm_sq(g));
        if (!applied) j["skipped"] = true;
        sink(j.dump());
      };
      emit(main_task, main_loss, g_main);
      for (std::size_t i = 0; i < aux.size(); ++i) emit(aux[i].task, aux_loss[i], aux[i].grad);
    }
    if (on_step) on_step(state);
  }

  ++state.stage_index;
  state.step_in_stage = 0;
  return result;
}

}  // namespace sml::train
