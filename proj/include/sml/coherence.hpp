#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "sml/corpus.hpp"
#include "sml/param_store.hpp"

namespace sml::eval {

// token -> distributed vector. Missing tokens read as zero vectors.
class WordVectorTable {
 public:
  WordVectorTable() = default;
  WordVectorTable(int dim, std::string source_tag)
      : dim_(dim), source_tag_(std::move(source_tag)) {
    if (dim < 1) throw std::invalid_argument("WordVectorTable: dim must be >= 1");
  }

  int dim() const { return dim_; }
  const std::string& source_tag() const { return source_tag_; }
  std::size_t size() const { return vecs_.size(); }

  void add(const std::string& token, std::vector<double> vec) {
    if (static_cast<int>(vec.size()) != dim_)
      throw std::runtime_error("WordVectorTable: vector for '" + token + "' has dimension " +
                               std::to_string(vec.size()) + ", table is " + std::to_string(dim_));
    vecs_[token] = std::move(vec);
  }

  std::vector<double> lookup(const std::string& token) const {
    auto it = vecs_.find(token);
    if (it == vecs_.end()) return std::vector<double>(static_cast<std::size_t>(dim_), 0.0);
    return it->second;
  }

  // Mean word vector f(s); an empty sentence gives the zero vector.
  std::vector<double> sentence_vector(const std::string& sentence) const {
    const auto toks = corpus::tokenize(sentence);
    std::vector<double> mean(static_cast<std::size_t>(dim_), 0.0);
    if (toks.empty()) return mean;
    for (const auto& t : toks) {
      const auto v = lookup(t);
      for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += v[i];
    }
    for (auto& x : mean) x /= static_cast<double>(toks.size());
    return mean;
  }

  // First line "dim N", then "token v1 ... vN" per line.
  static WordVectorTable from_text(const std::string& text, std::string source_tag = "file") {
    std::istringstream in(text);
    std::string word;
    int dim = 0;
    in >> word >> dim;
    if (word != "dim" || dim < 1)
      throw std::runtime_error("word-vector file: expected header 'dim N'");
    WordVectorTable table(dim, std::move(source_tag));
    std::string token;
    while (in >> token) {
      std::vector<double> vec(static_cast<std::size_t>(dim));
      for (auto& v : vec)
        if (!(in >> v)) throw std::runtime_error("word-vector file: truncated entry for '" + token + "'");
      table.add(token, std::move(vec));
    }
    return table;
  }

  std::string to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "dim " << dim_ << '\n';
    // Deterministic order for round-trips.
    std::vector<std::string> keys;
    keys.reserve(vecs_.size());
    for (const auto& [k, v] : vecs_) keys.push_back(k);
    std::sort(keys.begin(), keys.end());
    for (const auto& k : keys) {
      os << k;
      for (double v : vecs_.at(k)) os << ' ' << v;
      os << '\n';
    }
    return os.str();
  }

  // Rows of the trained model's word embedding, one vector per non-special
  // vocabulary token.
  static WordVectorTable from_model_embedding(const diff::ParamStore& params,
                                              const corpus::Vocabulary& vocab) {
    const diff::Tensor& we = params.get("emb.we");
    WordVectorTable table(static_cast<int>(we.cols()), "model_we");
    for (int id = corpus::kNumSpecials; id < vocab.size(); ++id) {
      std::vector<double> vec(static_cast<std::size_t>(we.cols()));
      for (long j = 0; j < we.cols(); ++j) vec[static_cast<std::size_t>(j)] = we(id, j);
      table.add(vocab.token(id), std::move(vec));
    }
    return table;
  }

 private:
  int dim_ = 1;
  std::string source_tag_ = "empty";
  std::unordered_map<std::string, std::vector<double>> vecs_;
};

// Dialogue coherence: cosine of the mean word vectors of the two sentences.
// Either side degenerating to the zero vector gives 0.
inline double coherence(const std::string& candidate, const std::string& preceding,
                        const WordVectorTable& table) {
  const auto a = table.sentence_vector(candidate);
  const auto b = table.sentence_vector(preceding);
  double aa = 0.0, bb = 0.0, ab = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa += a[i] * a[i];
    bb += b[i] * b[i];
    ab += a[i] * b[i];
  }
  if (aa <= 0.0 || bb <= 0.0) return 0.0;
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

}  // namespace sml::eval
