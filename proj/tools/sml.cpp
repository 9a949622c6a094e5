// Command-line surface: prepare, train, translate, eval, gradcheck,
// sched-demo. Every command is deterministic given --seed (or SML_SEED), and
// every file output goes through an atomic temp-and-rename write.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sml/beam.hpp"
#include "sml/bleu.hpp"
#include "sml/checkpoint.hpp"
#include "sml/coherence.hpp"
#include "sml/corpus.hpp"
#include "sml/gradcheck.hpp"
#include "sml/io.hpp"
#include "sml/manifest.hpp"
#include "sml/model.hpp"
#include "sml/scheduler.hpp"
#include "sml/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using sml::Rng;

namespace {

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("SML_SEED")) return std::stoull(env);
  return 42;
}

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

std::vector<sml::corpus::Conversation> load_corpus(const std::string& path,
                                                   const sml::corpus::Vocabulary* vocab) {
  if (!fs::exists(path)) throw std::runtime_error("missing corpus: " + path);
  auto convs = sml::corpus::conversations_from_jsonl(sml::io::read_file(path));
  if (vocab) sml::corpus::tokenize_conversations(convs, *vocab);
  return convs;
}

constexpr const char* kConfigSection = "CONFIG";
constexpr const char* kVocabSection = "VOCAB";

struct LoadedModel {
  sml::model::NctConfig config;
  sml::corpus::Vocabulary vocab;
  sml::diff::ParamStore params;
};

LoadedModel load_model_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw std::runtime_error("missing checkpoint: " + path);
  auto ckpt = sml::diff::parse_checkpoint(sml::io::read_file(path));
  if (!ckpt.sections.count(kConfigSection) || !ckpt.sections.count(kVocabSection))
    throw std::runtime_error("checkpoint " + path + " lacks embedded model config/vocabulary");
  LoadedModel m;
  m.vocab = sml::corpus::Vocabulary::from_file_text(ckpt.sections.at(kVocabSection));
  m.config = sml::model::NctConfig::from_kv(sml::io::KvConfig::parse(ckpt.sections.at(kConfigSection)));
  m.config.vocab = m.vocab.size();
  m.params = std::move(ckpt.params);
  return m;
}

// --- prepare ---

int cmd_prepare(const std::string& input, const std::string& out_dir, int window, int stride,
                int min_freq, const std::vector<std::string>& raw_args) {
  Timer timer;
  if (!fs::exists(input)) throw std::runtime_error("unreadable input: " + input);

  std::vector<std::pair<std::string, std::string>> pairs;
  long skipped = 0;
  for (const std::string& line : sml::io::read_lines(input)) {
    if (sml::io::trim(line).empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      ++skipped;
      continue;
    }
    std::string src = sml::io::trim(line.substr(0, tab));
    std::string tgt = sml::io::trim(line.substr(tab + 1));
    if (src.empty() || tgt.empty()) {
      ++skipped;
      continue;
    }
    pairs.emplace_back(std::move(src), std::move(tgt));
  }
  if (skipped > 0)
    std::cerr << "warning: skipped " << skipped << " malformed or empty line(s)\n";
  if (pairs.empty()) std::cerr << "warning: no aligned pairs found; writing empty outputs\n";

  auto convs = sml::corpus::window_dialogues(pairs, window, stride);
  const std::size_t before_dedup = convs.size();
  convs = sml::corpus::dedup(std::move(convs));

  std::map<std::string, long> freq;
  for (const auto& c : convs)
    for (const auto* side : {&c.source_side, &c.target_side})
      for (const auto& u : *side)
        for (const auto& tok : sml::corpus::tokenize(u.raw_text)) ++freq[tok];

  const fs::path out(out_dir);
  fs::create_directories(out);
  sml::io::atomic_write(out / "corpus.jsonl", sml::corpus::conversations_to_jsonl(convs));
  std::string vocab_text;
  std::size_t vocab_size = sml::corpus::kNumSpecials;
  if (!freq.empty()) {
    auto vocab = sml::corpus::build_vocab(freq, min_freq);
    vocab_text = vocab.to_file_text();
    vocab_size = static_cast<std::size_t>(vocab.size());
  }
  sml::io::atomic_write(out / "vocab.txt", vocab_text);

  sml::cli::RunManifest manifest;
  manifest.command = "prepare";
  manifest.args = raw_args;
  manifest.wall_seconds = timer.seconds();
  manifest.outputs = {(out / "corpus.jsonl").string(), (out / "vocab.txt").string()};
  manifest.write(out / "manifest.json");

  std::cout << "pairs: " << pairs.size() << "\nconversations: " << before_dedup
            << "\nafter dedup: " << convs.size() << "\nvocab size: " << vocab_size << "\n";
  return 0;
}

// --- train ---

int cmd_train(const std::string& model_cfg_path, const std::string& vocab_path,
              const std::vector<std::string>& stage_cfg_paths, const std::string& out_dir,
              const std::string& resume, std::optional<std::uint64_t> seed_flag,
              const std::string& strategy_override, std::optional<double> alpha_start,
              std::optional<double> alpha_end, long save_every,
              const std::vector<std::string>& raw_args) {
  Timer timer;
  const std::uint64_t seed = resolve_seed(seed_flag);

  const std::string vocab_text = sml::io::read_file(vocab_path);
  auto vocab = sml::corpus::Vocabulary::from_file_text(vocab_text);
  auto model_kv = sml::io::KvConfig::load(model_cfg_path);
  auto cfg = sml::model::NctConfig::from_kv(model_kv);
  cfg.vocab = vocab.size();
  sml::model::Nct model(cfg);

  std::vector<sml::train::StageConfig> stages;
  for (const auto& p : stage_cfg_paths) {
    auto sc = sml::train::StageConfig::from_kv(sml::io::KvConfig::load(p));
    if (!strategy_override.empty()) sc.schedule.strategy = sml::sched::parse_strategy(strategy_override);
    if (alpha_start) sc.schedule.alpha_start = *alpha_start;
    if (alpha_end) sc.schedule.alpha_end = *alpha_end;
    sc.schedule.validate();
    if (!stages.empty() && static_cast<int>(sc.stage) < static_cast<int>(stages.back().stage))
      throw std::runtime_error("stages out of order: " + std::string(sml::train::stage_name(sc.stage)) +
                               " after " + sml::train::stage_name(stages.back().stage));
    stages.push_back(std::move(sc));
  }
  if (stages.empty()) throw std::runtime_error("no training stages given");

  sml::train::TrainState state;
  if (!resume.empty()) {
    state = sml::train::load_checkpoint(resume);
    Rng probe(0);
    const auto expected = model.init_params(probe);
    if (expected.total_len() != state.params.total_len())
      throw std::runtime_error("resume checkpoint does not match the model config: " +
                               std::to_string(state.params.total_len()) + " params vs " +
                               std::to_string(expected.total_len()));
  } else {
    state = sml::train::make_train_state(model, seed);
  }

  const fs::path out(out_dir);
  fs::create_directories(out);

  std::map<std::string, std::string> sections;
  sections[kConfigSection] = cfg.to_kv().dump();
  sections[kVocabSection] = vocab_text;

  std::vector<std::string> outputs;
  std::string log_text;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (state.stage_index > static_cast<int>(i)) continue;  // finished before resume
    const auto& sc = stages[i];
    auto convs = load_corpus(sc.corpus_path, &vocab);
    auto sink = [&](const std::string& line) { log_text += line + "\n"; };
    long since_save = 0;
    auto on_step = [&](const sml::train::TrainState& st) {
      if (save_every > 0 && ++since_save >= save_every) {
        since_save = 0;
        sml::train::save_checkpoint(st, out / "last.ckpt", sections);
      }
    };
    sml::train::run_stage(model, state, sc, convs, sink, on_step);
    const fs::path ckpt =
        out / ("stage" + std::to_string(i + 1) + "_" + sml::train::stage_name(sc.stage) + ".ckpt");
    sml::train::save_checkpoint(state, ckpt, sections);
    outputs.push_back(ckpt.string());
    sml::io::atomic_write(out / "train_log.jsonl", log_text);
  }
  outputs.push_back((out / "train_log.jsonl").string());

  sml::cli::RunManifest manifest;
  manifest.command = "train";
  manifest.args = raw_args;
  manifest.config_paths = stage_cfg_paths;
  manifest.config_paths.push_back(model_cfg_path);
  manifest.seed = seed;
  manifest.wall_seconds = timer.seconds();
  manifest.outputs = outputs;
  manifest.write(out / "manifest.json");

  std::cout << "completed " << stages.size() << " stage(s); global step " << state.global_step
            << "\n";
  return 0;
}

// --- translate ---

int cmd_translate(const std::string& ckpt_path, const std::string& corpus_path,
                  const std::string& out_path, sml::eval::BeamConfig beam, int max_ctx_tokens,
                  const std::vector<std::string>& raw_args) {
  Timer timer;
  LoadedModel lm = load_model_checkpoint(ckpt_path);
  sml::model::Nct model(lm.config);
  auto convs = load_corpus(corpus_path, &lm.vocab);

  std::string hyps;
  for (const auto& conv : convs) {
    conv.validate();
    const int u = conv.length();
    auto window = sml::corpus::make_context(conv, u, sml::corpus::Side::source, max_ctx_tokens,
                                            lm.config.max_turns);
    auto tokens = sml::eval::beam_decode(model, lm.params, window, beam);
    hyps += lm.vocab.decode(tokens);
    hyps += '\n';
  }
  sml::io::atomic_write(out_path, hyps);

  sml::cli::RunManifest manifest;
  manifest.command = "translate";
  manifest.args = raw_args;
  manifest.wall_seconds = timer.seconds();
  manifest.outputs = {out_path};
  manifest.write(out_path + ".manifest.json");
  std::cout << "translated " << convs.size() << " conversation(s) -> " << out_path << "\n";
  return 0;
}

// --- eval ---

int cmd_eval(const std::string& hyps_path, const std::string& refs_path, const std::string& mode,
             const std::string& corpus_path, const std::string& vectors_path,
             const std::string& vectors_from, const std::string& out_path,
             const std::vector<std::string>& raw_args) {
  Timer timer;
  const auto hyps = sml::io::read_lines(hyps_path);
  const auto refs = sml::io::read_lines(refs_path);
  const sml::eval::BleuMode bm =
      mode == "char" ? sml::eval::BleuMode::character : sml::eval::BleuMode::word;
  const double bleu = sml::eval::corpus_bleu(hyps, refs, 4, bm);

  json out;
  out["bleu"] = bleu;
  out["mode"] = mode;
  out["n_examples"] = hyps.size();
  out["coherence_at"] = nullptr;

  if (!corpus_path.empty()) {
    std::optional<sml::eval::WordVectorTable> table;
    if (!vectors_path.empty())
      table = sml::eval::WordVectorTable::from_text(sml::io::read_file(vectors_path));
    else if (!vectors_from.empty()) {
      LoadedModel lm = load_model_checkpoint(vectors_from);
      table = sml::eval::WordVectorTable::from_model_embedding(lm.params, lm.vocab);
    } else {
      throw std::runtime_error("coherence needs --vectors or --vectors-from");
    }
    auto convs = load_corpus(corpus_path, nullptr);
    if (convs.size() != hyps.size())
      throw std::runtime_error("corpus has " + std::to_string(convs.size()) +
                               " conversations for " + std::to_string(hyps.size()) +
                               " hypotheses");
    json coh;
    for (int k = 1; k <= 3; ++k) {
      double sum = 0.0;
      long n = 0;
      for (std::size_t i = 0; i < convs.size(); ++i) {
        const int u = convs[i].length();
        if (u - k < 1) continue;
        sum += sml::eval::coherence(hyps[i], convs[i].target_side[u - k - 1].raw_text, *table);
        ++n;
      }
      coh[std::to_string(k)] = n > 0 ? json(sum / n) : json(nullptr);
    }
    out["coherence_at"] = coh;
  }

  const std::string text = out.dump(2) + "\n";
  std::cout << text;
  if (!out_path.empty()) {
    sml::io::atomic_write(out_path, text);
    sml::cli::RunManifest manifest;
    manifest.command = "eval";
    manifest.args = raw_args;
    manifest.wall_seconds = timer.seconds();
    manifest.outputs = {out_path};
    manifest.write(out_path + ".manifest.json");
  }
  return 0;
}

// --- gradcheck ---

int cmd_gradcheck(const std::string& config_path, std::optional<std::uint64_t> seed_flag,
                  double eps, double tol) {
  const std::uint64_t seed = resolve_seed(seed_flag);
  sml::model::NctConfig cfg;
  if (!config_path.empty()) cfg = sml::model::NctConfig::from_kv(sml::io::KvConfig::load(config_path));
  else {
    cfg.layers = 2;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.ffn = 32;
    cfg.max_turns = 6;
    cfg.max_pos = 64;
  }
  cfg.vocab = 50;
  cfg.dropout = 0.0;
  sml::model::Nct model(cfg);

  Rng rng(seed);
  auto params = model.init_params(rng);

  // Small synthetic conversation batch shared by all five losses.
  sml::corpus::Conversation conv;
  conv.id = "gc";
  for (int t = 1; t <= 3; ++t) {
    auto make = [&](sml::corpus::Side side) {
      sml::corpus::Utterance u;
      u.turn_index = t;
      u.language = side;
      const int len = 2 + static_cast<int>(rng.uniform_u64(3));
      for (int i = 0; i < len; ++i)
        u.tokens.push_back(sml::corpus::kNumSpecials +
                           static_cast<int>(rng.uniform_u64(cfg.vocab - sml::corpus::kNumSpecials)));
      return u;
    };
    conv.source_side.push_back(make(sml::corpus::Side::source));
    conv.target_side.push_back(make(sml::corpus::Side::target));
  }
  const int u = conv.length();
  std::vector<sml::model::Example> nct{{sml::corpus::make_context(conv, u, sml::corpus::Side::source,
                                                                  32, cfg.max_turns),
                                        conv.target_side[u - 1].tokens}};
  std::vector<sml::model::Example> mrg{{sml::corpus::make_context_only(conv, u, sml::corpus::Side::target,
                                                                       32, cfg.max_turns),
                                        conv.target_side[u - 1].tokens}};
  std::vector<sml::model::Example> xrg{{sml::corpus::make_context_only(conv, u, sml::corpus::Side::source,
                                                                       32, cfg.max_turns),
                                        conv.target_side[u - 1].tokens}};
  auto [np, nn] = sml::corpus::sample_nud(conv, u, rng, false, 32, cfg.max_turns);
  std::vector<sml::corpus::NudSample> nud{np, nn};
  auto [xp, xn] = sml::corpus::sample_nud(conv, u, rng, true, 32, cfg.max_turns);
  std::vector<sml::corpus::NudSample> xnud{xp, xn};

  bool all_pass = true;
  auto check = [&](const char* name, auto build) {
    auto report = sml::diff::grad_check(build, params, eps, tol, rng, 200);
    all_pass = all_pass && report.pass;
    std::cout << name << ": max_rel_err=" << report.max_rel_err
              << " worst=" << report.worst_param << (report.pass ? " PASS" : " FAIL") << "\n";
  };
  using Tape = sml::diff::Tape;
  using PS = sml::diff::ParamStore;
  check("nct", [&](Tape& t, const PS& p) { return model.nct_loss(t, p, nct); });
  check("mrg", [&](Tape& t, const PS& p) { return model.mrg_loss(t, p, mrg); });
  check("xrg", [&](Tape& t, const PS& p) { return model.xrg_loss(t, p, xrg); });
  check("nud", [&](Tape& t, const PS& p) { return model.nud_loss(t, p, nud); });
  check("xnud", [&](Tape& t, const PS& p) { return model.xnud_loss(t, p, xnud); });
  std::cout << (all_pass ? "gradcheck PASS" : "gradcheck FAIL") << "\n";
  return all_pass ? 0 : 1;
}

// --- sched-demo ---

int cmd_sched_demo(int dim, long steps, double eta, double alpha, const std::string& out_path,
                   std::optional<std::uint64_t> seed_flag, const std::vector<std::string>& raw_args) {
  Timer timer;
  const std::uint64_t seed = resolve_seed(seed_flag);
  auto set = sml::sched::make_quadratic_tasks(dim, seed);
  const sml::sched::QuadraticTask aux[] = {set.conflicting, set.orthogonal};
  const sml::sched::Strategy strategies[] = {
      sml::sched::Strategy::conventional, sml::sched::Strategy::random,
      sml::sched::Strategy::prior_based, sml::sched::Strategy::sml,
      sml::sched::Strategy::sml_no_inverse};
  auto rows = sml::sched::run_comparison(set.main, aux, set.theta0, strategies, steps, eta, alpha,
                                         seed);
  sml::io::atomic_write(out_path, sml::sched::comparison_csv(rows));

  sml::cli::RunManifest manifest;
  manifest.command = "sched-demo";
  manifest.args = raw_args;
  manifest.seed = seed;
  manifest.wall_seconds = timer.seconds();
  manifest.outputs = {out_path};
  manifest.write(out_path + ".manifest.json");
  std::cout << "wrote " << rows.size() << " rows -> " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> raw_args(argv, argv + argc);
  CLI::App app{"Scheduled multi-task training for context-aware translation"};
  app.require_subcommand(1);

  // prepare
  auto* prepare = app.add_subcommand("prepare", "Window, dedup and index an aligned corpus");
  std::string prep_input, prep_out;
  int prep_window = 4, prep_stride = 0, prep_min_freq = 1;
  prepare->add_option("--input", prep_input, "TSV file: source<TAB>target per line")->required();
  prepare->add_option("--out-dir", prep_out, "output directory")->required();
  prepare->add_option("--window", prep_window, "utterance pairs per dialogue");
  prepare->add_option("--stride", prep_stride, "window stride (default: window)");
  prepare->add_option("--min-freq", prep_min_freq, "vocabulary frequency threshold");

  // train
  auto* train = app.add_subcommand("train", "Run the staged training pipeline");
  std::string tr_model, tr_vocab, tr_out, tr_resume, tr_strategy;
  std::vector<std::string> tr_stages;
  std::optional<std::uint64_t> tr_seed;
  std::optional<double> tr_alpha_start, tr_alpha_end;
  long tr_save_every = 0;
  train->add_option("--model", tr_model, "model config (key=value)")->required();
  train->add_option("--vocab", tr_vocab, "vocabulary file")->required();
  train->add_option("--stage", tr_stages, "stage config, repeatable, in order")->required();
  train->add_option("--out", tr_out, "output directory")->required();
  train->add_option("--resume", tr_resume, "checkpoint to resume from");
  train->add_option("--seed", tr_seed, "rng seed (default: SML_SEED or 42)");
  train->add_option("--strategy", tr_strategy, "override every stage's strategy");
  train->add_option("--alpha-start", tr_alpha_start, "override alpha at stage start");
  train->add_option("--alpha-end", tr_alpha_end, "override alpha at stage end");
  train->add_option("--save-every", tr_save_every, "write last.ckpt every N steps");

  // translate
  auto* translate = app.add_subcommand("translate", "Beam-decode the final turn of each conversation");
  std::string x_ckpt, x_corpus, x_out;
  sml::eval::BeamConfig beam;
  int x_max_ctx = 48;
  translate->add_option("--checkpoint", x_ckpt)->required();
  translate->add_option("--corpus", x_corpus)->required();
  translate->add_option("--out", x_out)->required();
  translate->add_option("--beam", beam.beam_size, "beam size");
  translate->add_option("--length-penalty", beam.length_penalty);
  translate->add_option("--max-len", beam.max_len);
  translate->add_option("--max-ctx-tokens", x_max_ctx);

  // eval
  auto* eval = app.add_subcommand("eval", "BLEU and dialogue-coherence metrics");
  std::string e_hyps, e_refs, e_mode = "word", e_corpus, e_vectors, e_vectors_from, e_out;
  eval->add_option("--hyps", e_hyps)->required();
  eval->add_option("--refs", e_refs)->required();
  eval->add_option("--mode", e_mode)->check(CLI::IsMember({"word", "char"}));
  eval->add_option("--corpus", e_corpus, "conversations for coherence context");
  eval->add_option("--vectors", e_vectors, "word-vector file");
  eval->add_option("--vectors-from", e_vectors_from, "checkpoint to export word vectors from");
  eval->add_option("--out", e_out, "also write metrics JSON here");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of all task losses");
  std::string g_config;
  std::optional<std::uint64_t> g_seed;
  double g_eps = 1e-5, g_tol = 1e-4;
  gradcheck->add_option("--config", g_config, "model config (default: tiny built-in)");
  gradcheck->add_option("--seed", g_seed);
  gradcheck->add_option("--eps", g_eps);
  gradcheck->add_option("--tol", g_tol);

  // sched-demo
  auto* demo = app.add_subcommand("sched-demo", "Synthetic strategy comparison CSV");
  int d_dim = 16;
  long d_steps = 500;
  double d_eta = 0.05, d_alpha = 1.0;
  std::string d_out = "sched_demo.csv";
  std::optional<std::uint64_t> d_seed;
  demo->add_option("--dim", d_dim);
  demo->add_option("--steps", d_steps);
  demo->add_option("--eta", d_eta);
  demo->add_option("--alpha", d_alpha);
  demo->add_option("--out", d_out);
  demo->add_option("--seed", d_seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (prepare->parsed())
      return cmd_prepare(prep_input, prep_out, prep_window, prep_stride, prep_min_freq, raw_args);
    if (train->parsed())
      return cmd_train(tr_model, tr_vocab, tr_stages, tr_out, tr_resume, tr_seed, tr_strategy,
                       tr_alpha_start, tr_alpha_end, tr_save_every, raw_args);
    if (translate->parsed())
      return cmd_translate(x_ckpt, x_corpus, x_out, beam, x_max_ctx, raw_args);
    if (eval->parsed())
      return cmd_eval(e_hyps, e_refs, e_mode, e_corpus, e_vectors, e_vectors_from, e_out, raw_args);
    if (gradcheck->parsed()) return cmd_gradcheck(g_config, g_seed, g_eps, g_tol);
    if (demo->parsed())
      return cmd_sched_demo(d_dim, d_steps, d_eta, d_alpha, d_out, d_seed, raw_args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
