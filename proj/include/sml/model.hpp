#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sml/corpus.hpp"
#include "sml/io.hpp"
#include "sml/param_store.hpp"
#include "sml/rng.hpp"
#include "sml/tape.hpp"
#include "sml/tensor.hpp"

namespace sml::model {

using diff::GradVector;
using diff::Mask;
using diff::ParamStore;
using diff::Tape;
using diff::Tensor;

// How dialogue-context positions behave in encoder layers above the first.
// freeze: context states are carried forward unchanged from layer 1 and
// utterance positions attend only utterance positions. context_self: context
// positions keep updating but attend only context positions.
enum class ContextMaskMode { freeze, context_self };

struct NctConfig {
  int layers = 2;
  int hidden = 64;
  int ffn = 128;
  int heads = 4;
  int max_turns = 10;
  int max_pos = 128;
  int vocab = 0;
  double label_smoothing = 0.1;
  double dropout = 0.0;
  ContextMaskMode context_mask = ContextMaskMode::freeze;
  // Test hook: additionally forbid utterance->context attention at layer 1,
  // cutting the only path from context tokens to utterance states.
  bool ablate_layer1_context = false;

  int head_dim() const { return hidden / heads; }

  void validate() const {
    if (layers < 1) throw std::invalid_argument("config: layers must be >= 1");
    if (heads < 1 || hidden % heads != 0)
      throw std::invalid_argument("config: hidden must be divisible by heads");
    if (max_turns < 2) throw std::invalid_argument("config: max_turns must be >= 2");
    if (vocab < corpus::kNumSpecials) throw std::invalid_argument("config: vocab too small");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0)
      throw std::invalid_argument("config: label_smoothing in [0,1)");
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("config: dropout in [0,1)");
  }

  // Flat key=value round trip. vocab is derived from the vocabulary file, not
  // stored here.
  static NctConfig from_kv(const io::KvConfig& kv) {
    for (const auto& [k, v] : kv.values()) {
      static const char* known[] = {"layers",  "hidden",          "heads",
                                    "ffn",     "max_turns",       "max_pos",
                                    "dropout", "label_smoothing", "context_mask"};
      bool ok = false;
      for (const char* name : known) ok = ok || k == name;
      if (!ok) throw std::runtime_error("model config: unknown key '" + k + "'");
    }
    NctConfig c;
    c.layers = static_cast<int>(kv.get_int("layers", c.layers));
    c.hidden = static_cast<int>(kv.get_int("hidden", c.hidden));
    c.heads = static_cast<int>(kv.get_int("heads", c.heads));
    c.ffn = static_cast<int>(kv.get_int("ffn", c.ffn));
    c.max_turns = static_cast<int>(kv.get_int("max_turns", c.max_turns));
    c.max_pos = static_cast<int>(kv.get_int("max_pos", c.max_pos));
    c.label_smoothing = kv.get_real("label_smoothing", c.label_smoothing);
    c.dropout = kv.get_real("dropout", c.dropout);
    const std::string mode = kv.get_str("context_mask", "freeze");
    if (mode == "freeze")
      c.context_mask = ContextMaskMode::freeze;
    else if (mode == "context_self")
      c.context_mask = ContextMaskMode::context_self;
    else
      throw std::runtime_error("model config: unknown context_mask '" + mode + "'");
    return c;
  }

  io::KvConfig to_kv() const {
    io::KvConfig kv;
    kv.set("layers", std::to_string(layers));
    kv.set("hidden", std::to_string(hidden));
    kv.set("heads", std::to_string(heads));
    kv.set("ffn", std::to_string(ffn));
    kv.set("max_turns", std::to_string(max_turns));
    kv.set("max_pos", std::to_string(max_pos));
    std::ostringstream ls, dr;
    ls << label_smoothing;
    dr << dropout;
    kv.set("label_smoothing", ls.str());
    kv.set("dropout", dr.str());
    kv.set("context_mask",
           context_mask == ContextMaskMode::freeze ? "freeze" : "context_self");
    return kv;
  }
};

// Which generation head reads the top decoder state.
enum class GenHead { nct, mrg, xrg };

inline const char* gen_head_prefix(GenHead h) {
  switch (h) {
    case GenHead::nct: return "head.out";
    case GenHead::mrg: return "head.mrg";
    case GenHead::xrg: return "head.xrg";
  }
  throw std::logic_error("gen_head_prefix: bad head");
}

// One translation-style training example: an encoder window plus the target
// utterance to generate.
struct Example {
  corpus::ContextWindow window;
  std::vector<int> target;
};

struct Encoded {
  Tape::NodeId final = -1;               // [n, d] top states (context rows frozen)
  std::vector<Tape::NodeId> layer_out;   // per layer, full [n, d]
  int length = 0;
  int utterance_start = 0;
};

// Attention mask for encoder layers, as a [n, n] allow matrix over
// ctx_len context positions followed by utt_len utterance positions. At the
// first layer everything attends everything; above it, utterance queries may
// not look at context columns. Context rows are left unrestricted here; under
// the freeze rule they are bypassed entirely.
inline Mask encoder_attention_mask(int ctx_len, int utt_len, bool first_layer) {
  const long n = ctx_len + utt_len;
  Mask m = Tensor::full({n, n}, 1.0);
  if (!first_layer) {
    for (long i = ctx_len; i < n; ++i)
      for (long j = 0; j < ctx_len; ++j) m(i, j) = 0.0;
  }
  return m;
}

inline Mask causal_mask(int n) {
  Mask m = Tensor::zeros({n, n});
  for (long i = 0; i < n; ++i)
    for (long j = 0; j <= i; ++j) m(i, j) = 1.0;
  return m;
}

class Nct {
 public:
  explicit Nct(NctConfig cfg) : cfg_(cfg), pe_(build_sinusoidal_pe(cfg.max_pos, cfg.hidden)) {
    cfg_.validate();
  }

  const NctConfig& config() const { return cfg_; }
  NctConfig& mutable_config() { return cfg_; }

  // Parameters in canonical order. Weights ~ N(0, 0.02), biases zero, layer
  // norm gains one, turn embeddings zero.
  ParamStore init_params(Rng& rng) const {
    const long d = cfg_.hidden, f = cfg_.ffn, v = cfg_.vocab, t = cfg_.max_turns;
    ParamStore ps;
    auto w = [&](const std::string& name, long r, long c) {
      ps.add(name, Tensor::randn(rng, {r, c}, 0.02));
    };
    auto b = [&](const std::string& name, long n) { ps.add(name, Tensor::zeros({n})); };
    auto ln = [&](const std::string& prefix) {
      ps.add(prefix + ".g", Tensor::full({d}, 1.0));
      ps.add(prefix + ".b", Tensor::zeros({d}));
    };
    auto attn = [&](const std::string& prefix) {
      for (const char* nm : {"wq", "wk", "wv", "wo"}) w(prefix + "." + nm, d, d);
      for (const char* nm : {"bq", "bk", "bv", "bo"}) b(prefix + "." + nm, d);
    };
    auto ffn = [&](const std::string& prefix) {
      w(prefix + ".w1", d, f);
      b(prefix + ".b1", f);
      w(prefix + ".w2", f, d);
      b(prefix + ".b2", d);
    };

    w("emb.we", v, d);
    ps.add("emb.te", Tensor::zeros({t, d}));
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string p = "enc.l" + std::to_string(l);
      attn(p + ".attn");
      ln(p + ".ln1");
      ffn(p + ".ffn");
      ln(p + ".ln2");
    }
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string p = "dec.l" + std::to_string(l);
      attn(p + ".self");
      ln(p + ".ln1");
      attn(p + ".cross");
      ln(p + ".ln2");
      ffn(p + ".ffn");
      ln(p + ".ln3");
    }
    w("head.out.w", d, v);
    b("head.out.b", v);
    w("head.mrg.w", d, v);
    b("head.mrg.b", v);
    w("head.xrg.w", d, v);
    b("head.xrg.b", v);
    w("head.nud.w", 2 * d, 2);
    w("head.xnud.w", 2 * d, 2);
    return ps;
  }

  // --- encoder ---

  Encoded encode(Tape& tape, const ParamStore& ps, const corpus::ContextWindow& window,
                 Rng* dropout_rng = nullptr) const {
    const int n = window.length();
    if (n == 0) throw std::runtime_error("encode: empty window");
    if (n > cfg_.max_pos)
      throw std::runtime_error("encode: window length " + std::to_string(n) +
                               " exceeds max_pos " + std::to_string(cfg_.max_pos));
    const int s = window.utterance_start;

    Tape::NodeId x = embed(tape, ps, window.token_ids, window.turn_ids, dropout_rng);

    Encoded enc;
    enc.length = n;
    enc.utterance_start = s;

    // A bare [CLS] prefix is not a dialogue context: the mask degenerates and
    // the stack reduces to a plain bidirectional encoder.
    const bool has_ctx = s > 1;

    std::optional<Mask> l1_mask;
    if (cfg_.ablate_layer1_context && has_ctx)
      l1_mask = encoder_attention_mask(s, n - s, /*first_layer=*/false);

    x = encoder_layer(tape, ps, 0, x, l1_mask ? &*l1_mask : nullptr);
    enc.layer_out.push_back(x);
    const Tape::NodeId h1 = x;

    if (!has_ctx) {
      for (int l = 1; l < cfg_.layers; ++l) {
        x = encoder_layer(tape, ps, l, x, nullptr);
        enc.layer_out.push_back(x);
      }
    } else if (cfg_.context_mask == ContextMaskMode::freeze) {
      if (s == n) {
        // Context-only window: nothing left to update above layer 1.
        for (int l = 1; l < cfg_.layers; ++l) enc.layer_out.push_back(h1);
      } else {
        Tape::NodeId ctx = tape.slice_rows(h1, 0, s);
        Tape::NodeId utt = tape.slice_rows(h1, s, n);
        for (int l = 1; l < cfg_.layers; ++l) {
          utt = encoder_layer(tape, ps, l, utt, nullptr);
          const Tape::NodeId parts[] = {ctx, utt};
          enc.layer_out.push_back(tape.concat_rows(parts));
        }
        x = enc.layer_out.back();
      }
    } else {
      // context_self: both regions keep updating, each attending only itself.
      Mask block = encoder_attention_mask(s, n - s, /*first_layer=*/false);
      for (long i = 0; i < s; ++i)
        for (long j = s; j < n; ++j) block(i, j) = 0.0;
      for (int l = 1; l < cfg_.layers; ++l) {
        x = encoder_layer(tape, ps, l, x, &block);
        enc.layer_out.push_back(x);
      }
    }

    enc.final = enc.layer_out.back();
    return enc;
  }

  // --- decoder ---

  // Teacher-forced decoder logits for input tokens [BOS, y_1, ..]; row t
  // predicts the token after prefix t.
  Tape::NodeId decode_logits(Tape& tape, const ParamStore& ps, const Encoded& enc,
                             std::span<const int> decoder_in, int turn, GenHead head,
                             Rng* dropout_rng = nullptr) const {
    const int m = static_cast<int>(decoder_in.size());
    if (m == 0) throw std::runtime_error("decode_logits: empty decoder input");
    if (m > cfg_.max_pos)
      throw std::runtime_error("decode_logits: length " + std::to_string(m) +
                               " exceeds max_pos " + std::to_string(cfg_.max_pos));
    std::vector<int> turns(m, std::min(turn, cfg_.max_turns - 1));
    std::vector<int> ids(decoder_in.begin(), decoder_in.end());
    Tape::NodeId x = embed(tape, ps, ids, turns, dropout_rng);

    const Mask causal = causal_mask(m);
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string p = "dec.l" + std::to_string(l);
      Tape::NodeId a = attention(tape, ps, p + ".self", x, x, &causal);
      x = tape.layer_norm(tape.add(x, a), tape.param(ps, p + ".ln1.g"),
                          tape.param(ps, p + ".ln1.b"));
      Tape::NodeId c = attention(tape, ps, p + ".cross", x, enc.final, nullptr);
      x = tape.layer_norm(tape.add(x, c), tape.param(ps, p + ".ln2.g"),
                          tape.param(ps, p + ".ln2.b"));
      Tape::NodeId f = ffn_block(tape, ps, p + ".ffn", x);
      x = tape.layer_norm(tape.add(x, f), tape.param(ps, p + ".ln3.g"),
                          tape.param(ps, p + ".ln3.b"));
    }
    const std::string hp = gen_head_prefix(head);
    return tape.add_row(tape.matmul(x, tape.param(ps, hp + ".w")), tape.param(ps, hp + ".b"));
  }

  // Next-token distribution given the generated prefix. Probabilities sum
  // to one.
  std::vector<double> decode_step(const ParamStore& ps, const corpus::ContextWindow& window,
                                  std::span<const int> prev_targets, GenHead head = GenHead::nct) const {
    Tape tape;
    Encoded enc = encode(tape, ps, window);
    std::vector<int> dec_in;
    dec_in.push_back(corpus::kBos);
    dec_in.insert(dec_in.end(), prev_targets.begin(), prev_targets.end());
    Tape::NodeId logits =
        decode_logits(tape, ps, enc, dec_in, window.current_turn(cfg_.max_turns), head);
    Tape::NodeId probs = tape.masked_softmax(logits, nullptr);
    const Tensor& P = tape.val(probs);
    const long last = P.rows() - 1;
    std::vector<double> out(static_cast<std::size_t>(P.cols()));
    for (long j = 0; j < P.cols(); ++j) out[static_cast<std::size_t>(j)] = P(last, j);
    return out;
  }

  // --- losses (scalar tape nodes) ---

  // Token-summed label-smoothed NLL of each target given its window, averaged
  // over the batch. The generation head distinguishes the translation task
  // from the two response-generation tasks.
  Tape::NodeId generation_loss(Tape& tape, const ParamStore& ps, std::span<const Example> batch,
                               GenHead head, Rng* dropout_rng = nullptr) const {
    if (batch.empty()) throw std::runtime_error("generation_loss: empty batch");
    Tape::NodeId total = -1;
    for (const Example& ex : batch) {
      if (ex.target.empty()) throw std::runtime_error("generation_loss: empty target");
      Encoded enc = encode(tape, ps, ex.window, dropout_rng);
      std::vector<int> dec_in, labels;
      dec_in.push_back(corpus::kBos);
      dec_in.insert(dec_in.end(), ex.target.begin(), ex.target.end());
      labels.assign(ex.target.begin(), ex.target.end());
      labels.push_back(corpus::kEos);
      Tape::NodeId logits = decode_logits(tape, ps, enc, dec_in,
                                          ex.window.current_turn(cfg_.max_turns), head,
                                          dropout_rng);
      Tape::NodeId ce = tape.cross_entropy_ls(logits, labels, cfg_.label_smoothing);
      total = total < 0 ? ce : tape.add(total, ce);
    }
    return tape.scale(total, 1.0 / static_cast<double>(batch.size()));
  }

  Tape::NodeId nct_loss(Tape& tape, const ParamStore& ps, std::span<const Example> batch,
                        Rng* dropout_rng = nullptr) const {
    return generation_loss(tape, ps, batch, GenHead::nct, dropout_rng);
  }
  Tape::NodeId mrg_loss(Tape& tape, const ParamStore& ps, std::span<const Example> batch,
                        Rng* dropout_rng = nullptr) const {
    return generation_loss(tape, ps, batch, GenHead::mrg, dropout_rng);
  }
  Tape::NodeId xrg_loss(Tape& tape, const ParamStore& ps, std::span<const Example> batch,
                        Rng* dropout_rng = nullptr) const {
    return generation_loss(tape, ps, batch, GenHead::xrg, dropout_rng);
  }
  // Sentence-level translation: same path, the window is just [CLS] + source.
  Tape::NodeId sent_nmt_loss(Tape& tape, const ParamStore& ps, std::span<const Example> batch,
                             Rng* dropout_rng = nullptr) const {
    return generation_loss(tape, ps, batch, GenHead::nct, dropout_rng);
  }

  // Next-utterance discrimination. p(l=1 | Y, C) = softmax(W [H_Y; H_C]) with
  // H_Y the mean top-layer state over the standalone-encoded candidate and
  // H_C the top-layer [CLS] state of the context window. Sample count must be
  // label-balanced; the loss is the mean over pairs of the two-term NLL.
  Tape::NodeId discrimination_loss(Tape& tape, const ParamStore& ps,
                                   std::span<const corpus::NudSample> samples,
                                   bool cross_lingual, Rng* dropout_rng = nullptr) const {
    if (samples.empty()) throw std::runtime_error("discrimination_loss: empty batch");
    long pos = 0, neg = 0;
    for (const auto& s : samples) (s.label == 1 ? pos : neg)++;
    if (pos != neg)
      throw std::runtime_error("discrimination_loss: unmatched pair counts: " +
                               std::to_string(pos) + " positive vs " + std::to_string(neg) +
                               " negative");
    const Tape::NodeId w = tape.param(ps, cross_lingual ? "head.xnud.w" : "head.nud.w");

    Tape::NodeId total = -1;
    const corpus::ContextWindow* last_ctx = nullptr;
    Tape::NodeId last_hc = -1;
    for (const auto& s : samples) {
      if (s.cross_lingual != cross_lingual)
        throw std::runtime_error("discrimination_loss: sample side does not match head");
      if (s.candidate.empty()) throw std::runtime_error("discrimination_loss: empty candidate");
      Tape::NodeId hc;
      if (last_ctx && last_ctx->token_ids == s.context.token_ids &&
          last_ctx->turn_ids == s.context.turn_ids &&
          last_ctx->utterance_start == s.context.utterance_start) {
        hc = last_hc;  // paired samples share one context encoding
      } else {
        Encoded ctx_enc = encode(tape, ps, s.context, dropout_rng);
        hc = tape.slice_rows(ctx_enc.final, 0, 1);
        last_ctx = &s.context;
        last_hc = hc;
      }
      corpus::ContextWindow cand =
          corpus::make_plain_window(s.candidate, s.turn, cfg_.max_turns, s.context.side);
      Encoded cand_enc = encode(tape, ps, cand, dropout_rng);
      Tape::NodeId hy = tape.mean_rows(tape.slice_rows(cand_enc.final, 1, cand_enc.length));
      const Tape::NodeId parts[] = {hy, hc};
      Tape::NodeId logits = tape.matmul(tape.concat_cols(parts), w);
      Tape::NodeId nll = tape.cross_entropy_ls(logits, {s.label}, 0.0);
      total = total < 0 ? nll : tape.add(total, nll);
    }
    return tape.scale(total, 1.0 / static_cast<double>(pos));
  }

  Tape::NodeId nud_loss(Tape& tape, const ParamStore& ps,
                        std::span<const corpus::NudSample> samples,
                        Rng* dropout_rng = nullptr) const {
    return discrimination_loss(tape, ps, samples, false, dropout_rng);
  }
  Tape::NodeId xnud_loss(Tape& tape, const ParamStore& ps,
                         std::span<const corpus::NudSample> samples,
                         Rng* dropout_rng = nullptr) const {
    return discrimination_loss(tape, ps, samples, true, dropout_rng);
  }

  const Tensor& positional_table() const { return pe_; }

 private:
  // B(x) = sqrt(d) * WE(x) + PE(x) + TE(x), dropout on the sum. The sqrt(d)
  // factor keeps the token signal on the positional encoding's scale.
  Tape::NodeId embed(Tape& tape, const ParamStore& ps, const std::vector<int>& token_ids,
                     const std::vector<int>& turn_ids, Rng* dropout_rng) const {
    const long n = static_cast<long>(token_ids.size());
    Tape::NodeId we = tape.scale(tape.embedding_gather(tape.param(ps, "emb.we"), token_ids),
                                 std::sqrt(static_cast<double>(cfg_.hidden)));
    Tape::NodeId te = tape.embedding_gather(tape.param(ps, "emb.te"), turn_ids);
    Tensor pe_rows({n, static_cast<long>(cfg_.hidden)});
    for (long i = 0; i < n; ++i)
      for (long j = 0; j < cfg_.hidden; ++j) pe_rows(i, j) = pe_(i, j);
    Tape::NodeId x = tape.add(tape.add(we, te), tape.constant(std::move(pe_rows)));
    if (dropout_rng && cfg_.dropout > 0.0) x = tape.dropout(x, cfg_.dropout, *dropout_rng);
    return x;
  }

  Tape::NodeId attention(Tape& tape, const ParamStore& ps, const std::string& prefix,
                         Tape::NodeId q_in, Tape::NodeId kv_in, const Mask* mask) const {
    const long dh = cfg_.head_dim();
    Tape::NodeId q = tape.add_row(tape.matmul(q_in, tape.param(ps, prefix + ".wq")),
                                  tape.param(ps, prefix + ".bq"));
    Tape::NodeId k = tape.add_row(tape.matmul(kv_in, tape.param(ps, prefix + ".wk")),
                                  tape.param(ps, prefix + ".bk"));
    Tape::NodeId v = tape.add_row(tape.matmul(kv_in, tape.param(ps, prefix + ".wv")),
                                  tape.param(ps, prefix + ".bv"));
    std::vector<Tape::NodeId> heads;
    for (int h = 0; h < cfg_.heads; ++h) {
      Tape::NodeId qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
      Tape::NodeId kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
      Tape::NodeId vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
      Tape::NodeId scores = tape.scale(tape.matmul(qh, kh, false, true),
                                       1.0 / std::sqrt(static_cast<double>(dh)));
      Tape::NodeId probs = tape.masked_softmax(scores, mask);
      heads.push_back(tape.matmul(probs, vh));
    }
    Tape::NodeId cat = tape.concat_cols(heads);
    return tape.add_row(tape.matmul(cat, tape.param(ps, prefix + ".wo")),
                        tape.param(ps, prefix + ".bo"));
  }

  Tape::NodeId ffn_block(Tape& tape, const ParamStore& ps, const std::string& prefix,
                         Tape::NodeId x) const {
    Tape::NodeId h = tape.gelu(tape.add_row(tape.matmul(x, tape.param(ps, prefix + ".w1")),
                                            tape.param(ps, prefix + ".b1")));
    return tape.add_row(tape.matmul(h, tape.param(ps, prefix + ".w2")),
                        tape.param(ps, prefix + ".b2"));
  }

  // Post-norm transformer encoder layer.
  Tape::NodeId encoder_layer(Tape& tape, const ParamStore& ps, int layer, Tape::NodeId x,
                             const Mask* mask) const {
    const std::string p = "enc.l" + std::to_string(layer);
    Tape::NodeId a = attention(tape, ps, p + ".attn", x, x, mask);
    x = tape.layer_norm(tape.add(x, a), tape.param(ps, p + ".ln1.g"),
                        tape.param(ps, p + ".ln1.b"));
    Tape::NodeId f = ffn_block(tape, ps, p + ".ffn", x);
    return tape.layer_norm(tape.add(x, f), tape.param(ps, p + ".ln2.g"),
                           tape.param(ps, p + ".ln2.b"));
  }

  static Tensor build_sinusoidal_pe(int max_pos, int d) {
    Tensor pe({static_cast<long>(max_pos), static_cast<long>(d)});
    for (long pos = 0; pos < max_pos; ++pos) {
      for (long i = 0; i < d; i += 2) {
        const double angle = pos / std::pow(10000.0, static_cast<double>(i) / d);
        pe(pos, i) = std::sin(angle);
        if (i + 1 < d) pe(pos, i + 1) = std::cos(angle);
      }
    }
    return pe;
  }

  NctConfig cfg_;
  Tensor pe_;
};

}  // namespace sml::model
