#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sml/io.hpp"
#include "sml/rng.hpp"

namespace sml::corpus {

enum class Side { source, target };

// Token ids 0..5 are reserved, in this fixed order.
enum SpecialToken : int {
  kPad = 0,
  kCls = 1,
  kSep = 2,
  kBos = 3,
  kEos = 4,
  kUnk = 5,
};
inline constexpr int kNumSpecials = 6;
inline constexpr const char* kSpecialNames[kNumSpecials] = {"[PAD]", "[CLS]", "[SEP]",
                                                            "[BOS]", "[EOS]", "[UNK]"};

// Whitespace tokenization plus ASCII lowercasing. Subword segmentation is a
// non-goal here.
inline std::vector<std::string> tokenize(const std::string& text) {
  return io::split_ws(io::lower_ascii(text));
}

class Vocabulary {
 public:
  Vocabulary() {
    for (int i = 0; i < kNumSpecials; ++i) id_to_token_.emplace_back(kSpecialNames[i]);
  }

  // Tokens must not collide with the reserved special names.
  int add(const std::string& token) {
    auto it = token_to_id_.find(token);
    if (it != token_to_id_.end()) return it->second;
    int id = static_cast<int>(id_to_token_.size());
    token_to_id_.emplace(token, id);
    id_to_token_.push_back(token);
    return id;
  }

  int lookup(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return token_to_id_.count(token) != 0; }

  const std::string& token(int id) const {
    if (id < 0 || id >= static_cast<int>(id_to_token_.size()))
      throw std::out_of_range("Vocabulary::token: id " + std::to_string(id) + " out of range");
    return id_to_token_[id];
  }

  int size() const { return static_cast<int>(id_to_token_.size()); }

  int min_frequency() const { return min_frequency_; }
  void set_min_frequency(int f) { min_frequency_ = f; }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& tok : tokenize(text)) ids.push_back(lookup(tok));
    return ids;
  }

  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
      if (!out.empty()) out += ' ';
      out += token(id);
    }
    return out;
  }

  // One non-special token per line; line number = id - 6.
  std::string to_file_text() const {
    std::string out;
    for (int id = kNumSpecials; id < size(); ++id) {
      out += id_to_token_[id];
      out += '\n';
    }
    return out;
  }

  static Vocabulary from_file_text(const std::string& text, int min_freq = 1) {
    Vocabulary v;
    v.set_min_frequency(min_freq);
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      v.add(line);
    }
    return v;
  }

 private:
  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
  int min_frequency_ = 1;
};

// Keeps every token whose corpus frequency is >= min_freq. Ids are assigned
// by descending frequency, ties broken lexicographically, so the vocabulary
// is a pure function of the corpus.
inline Vocabulary build_vocab(const std::map<std::string, long>& freq, int min_freq) {
  if (min_freq < 1) throw std::invalid_argument("build_vocab: min_freq must be >= 1");
  if (freq.empty()) throw std::runtime_error("build_vocab: empty corpus");
  std::vector<std::pair<std::string, long>> kept;
  for (const auto& [tok, n] : freq)
    if (n >= min_freq) kept.emplace_back(tok, n);
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary v;
  v.set_min_frequency(min_freq);
  for (const auto& [tok, n] : kept) v.add(tok);
  return v;
}

inline Vocabulary build_vocab(std::span<const std::string> tokens, int min_freq) {
  if (tokens.empty()) throw std::runtime_error("build_vocab: empty corpus");
  std::map<std::string, long> freq;
  for (const auto& t : tokens) ++freq[t];
  return build_vocab(freq, min_freq);
}

struct Utterance {
  int turn_index = 0;  // 1-based within the conversation
  Side language = Side::source;
  std::vector<int> tokens;  // filled once a vocabulary exists
  std::string raw_text;
};

struct Conversation {
  std::string id;
  std::vector<Utterance> source_side;
  std::vector<Utterance> target_side;

  int length() const { return static_cast<int>(source_side.size()); }

  const std::vector<Utterance>& side(Side s) const {
    return s == Side::source ? source_side : target_side;
  }

  void validate() const {
    if (source_side.size() != target_side.size())
      throw std::runtime_error("conversation " + id + ": side lengths differ");
    for (int i = 0; i < length(); ++i) {
      if (source_side[i].turn_index != i + 1 || target_side[i].turn_index != i + 1)
        throw std::runtime_error("conversation " + id + ": turn indices not consecutive");
    }
  }
};

// Cuts an aligned utterance stream into consecutive windows of `window`
// pairs. stride defaults to window (non-overlapping); the trailing remainder
// is dropped.
inline std::vector<Conversation> window_dialogues(
    std::span<const std::pair<std::string, std::string>> stream, int window,
    int stride = 0, const std::string& id_prefix = "d") {
  if (window < 2) throw std::invalid_argument("window_dialogues: window must be >= 2");
  if (stride == 0) stride = window;
  if (stride < 1) throw std::invalid_argument("window_dialogues: stride must be >= 1");
  std::vector<Conversation> out;
  const std::size_t n = stream.size();
  for (std::size_t start = 0; start + window <= n; start += stride) {
    Conversation conv;
    std::ostringstream id;
    id << id_prefix << out.size();
    conv.id = id.str();
    for (int k = 0; k < window; ++k) {
      const auto& [src, tgt] = stream[start + k];
      conv.source_side.push_back({k + 1, Side::source, {}, src});
      conv.target_side.push_back({k + 1, Side::target, {}, tgt});
    }
    out.push_back(std::move(conv));
  }
  return out;
}

inline std::string dedup_key(const Conversation& conv) {
  std::string key;
  for (const auto& u : conv.source_side) {
    key += u.raw_text;
    key += '\n';
  }
  return key;
}

// Keeps the first occurrence of each distinct conversation, where identity is
// the concatenated source-side raw text. Order preserved.
inline std::vector<Conversation> dedup(std::vector<Conversation> convs) {
  std::unordered_map<std::string, bool> seen;
  std::vector<Conversation> out;
  out.reserve(convs.size());
  for (auto& c : convs) {
    auto [it, inserted] = seen.emplace(dedup_key(c), true);
    if (inserted) out.push_back(std::move(c));
  }
  return out;
}

inline void tokenize_conversations(std::vector<Conversation>& convs, const Vocabulary& vocab) {
  for (auto& c : convs) {
    for (auto& u : c.source_side) u.tokens = vocab.encode(u.raw_text);
    for (auto& u : c.target_side) u.tokens = vocab.encode(u.raw_text);
  }
}

// Encoder input: [CLS] ctx_1 [SEP] ctx_2 [SEP] ... [SEP] current-utterance.
// turn_ids run parallel to token_ids; positions before utterance_start are
// dialogue-context positions.
struct ContextWindow {
  std::vector<int> token_ids;
  std::vector<int> turn_ids;
  int utterance_start = 0;
  Side side = Side::source;

  int length() const { return static_cast<int>(token_ids.size()); }
  bool context_only() const { return utterance_start == length(); }

  // Turn id of the utterance this window is for. For context-only windows it
  // is the turn after the last retained context utterance, under the same
  // clipping rule the builder used.
  int current_turn(int max_turns) const {
    if (utterance_start < length()) return turn_ids[utterance_start];
    return std::min(turn_ids.empty() ? 1 : turn_ids.back() + 1, max_turns - 1);
  }
};

namespace detail {

// Shared layout logic. include_current=false builds the context-only
// variant used by the response-generation and discrimination tasks; every
// retained context utterance then carries a trailing [SEP].
inline ContextWindow build_window(const Conversation& conv, int u, Side side,
                                  int max_ctx_tokens, int max_turns, bool include_current) {
  if (u < 1 || u > conv.length())
    throw std::out_of_range("make_context: turn " + std::to_string(u) + " out of range 1.." +
                            std::to_string(conv.length()));
  if (max_ctx_tokens < 1) throw std::invalid_argument("make_context: max_ctx_tokens must be >= 1");
  if (max_turns < 2) throw std::invalid_argument("make_context: max_turns must be >= 2");

  const auto& utts = conv.side(side);
  auto clip = [max_turns](int turn) { return std::min(turn, max_turns - 1); };

  // Oldest-first truncation: keep the most recent whole context utterances
  // whose tokens (plus one SEP each) fit the budget.
  int first_kept = u - 1;  // index of the first retained context utterance (0-based)
  {
    int budget = max_ctx_tokens;
    for (int i = u - 2; i >= 0; --i) {
      const int cost = static_cast<int>(utts[i].tokens.size()) + 1;  // + [SEP]
      if (cost > budget) break;
      budget -= cost;
      first_kept = i;
    }
  }

  ContextWindow w;
  w.side = side;
  w.token_ids.push_back(kCls);
  w.turn_ids.push_back(0);
  for (int i = first_kept; i <= u - 2; ++i) {
    for (int t : utts[i].tokens) {
      w.token_ids.push_back(t);
      w.turn_ids.push_back(clip(utts[i].turn_index));
    }
    w.token_ids.push_back(kSep);
    w.turn_ids.push_back(clip(utts[i].turn_index));
  }
  w.utterance_start = w.length();
  if (include_current) {
    for (int t : utts[u - 1].tokens) {
      w.token_ids.push_back(t);
      w.turn_ids.push_back(clip(u));
    }
  }
  return w;
}

}  // namespace detail

inline ContextWindow make_context(const Conversation& conv, int u, Side side,
                                  int max_ctx_tokens, int max_turns = 10) {
  return detail::build_window(conv, u, side, max_ctx_tokens, max_turns, true);
}

inline ContextWindow make_context_only(const Conversation& conv, int u, Side side,
                                       int max_ctx_tokens, int max_turns = 10) {
  return detail::build_window(conv, u, side, max_ctx_tokens, max_turns, false);
}

// [CLS] + one utterance, no dialogue context. Used for plain sentence pairs
// and for encoding discrimination candidates standalone.
inline ContextWindow make_plain_window(std::span<const int> tokens, int turn = 1,
                                       int max_turns = 10, Side side = Side::source) {
  ContextWindow w;
  w.side = side;
  w.token_ids.push_back(kCls);
  w.turn_ids.push_back(0);
  w.utterance_start = 1;
  const int clipped = std::min(turn, max_turns - 1);
  for (int t : tokens) {
    w.token_ids.push_back(t);
    w.turn_ids.push_back(clipped);
  }
  return w;
}

struct NudSample {
  ContextWindow context;
  std::vector<int> candidate;
  int label = 0;  // 1 iff candidate is the true next utterance
  bool cross_lingual = false;
  int turn = 0;  // the turn the candidate is judged for
};

// Builds one (positive, negative) discrimination pair for turn u. The
// negative candidate is a uniformly drawn earlier target-side utterance; the
// context comes from the target side, or the source side for the
// cross-lingual variant.
inline std::pair<NudSample, NudSample> sample_nud(const Conversation& conv, int u, Rng& rng,
                                                  bool cross_lingual, int max_ctx_tokens,
                                                  int max_turns = 10) {
  if (u < 2) throw std::runtime_error("sample_nud: no preceding utterance for negative sampling");
  if (u > conv.length()) throw std::out_of_range("sample_nud: turn out of range");
  ContextWindow ctx = make_context_only(conv, u, cross_lingual ? Side::source : Side::target,
                                        max_ctx_tokens, max_turns);
  NudSample pos{ctx, conv.target_side[u - 1].tokens, 1, cross_lingual, u};
  const int j = 1 + static_cast<int>(rng.uniform_u64(static_cast<std::uint64_t>(u - 1)));
  NudSample neg{std::move(ctx), conv.target_side[j - 1].tokens, 0, cross_lingual, u};
  return {std::move(pos), std::move(neg)};
}

// --- corpus file format: one conversation per line ---
// {"id": str, "src": [str...], "tgt": [str...]}

inline std::string conversation_to_json(const Conversation& conv) {
  nlohmann::json j;
  j["id"] = conv.id;
  auto& src = j["src"] = nlohmann::json::array();
  auto& tgt = j["tgt"] = nlohmann::json::array();
  for (const auto& u : conv.source_side) src.push_back(u.raw_text);
  for (const auto& u : conv.target_side) tgt.push_back(u.raw_text);
  return j.dump();
}

inline Conversation conversation_from_json(const std::string& line) {
  nlohmann::json j = nlohmann::json::parse(line);
  Conversation conv;
  conv.id = j.at("id").get<std::string>();
  const auto& src = j.at("src");
  const auto& tgt = j.at("tgt");
  if (!src.is_array() || !tgt.is_array() || src.size() != tgt.size())
    throw std::runtime_error("conversation " + conv.id + ": src/tgt must be equal-length arrays");
  for (std::size_t i = 0; i < src.size(); ++i) {
    conv.source_side.push_back(
        {static_cast<int>(i) + 1, Side::source, {}, src[i].get<std::string>()});
    conv.target_side.push_back(
        {static_cast<int>(i) + 1, Side::target, {}, tgt[i].get<std::string>()});
  }
  return conv;
}

inline std::string conversations_to_jsonl(const std::vector<Conversation>& convs) {
  std::string out;
  for (const auto& c : convs) {
    out += conversation_to_json(c);
    out += '\n';
  }
  return out;
}

inline std::vector<Conversation> conversations_from_jsonl(const std::string& text) {
  std::vector<Conversation> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (io::trim(line).empty()) continue;
    out.push_back(conversation_from_json(line));
  }
  return out;
}

}  // namespace sml::corpus
