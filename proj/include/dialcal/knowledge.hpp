#pragma once

// Knowledge inference: a learned memory of corpus keywords that the decoder
// state attends to, plus the alignment supervision from gold-response keywords.

#include "dialcal/autograd.hpp"
#include "dialcal/corpus.hpp"
#include "dialcal/random.hpp"
#include "dialcal/textrank.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace dialcal {

/// Keyword lexicon ranked by aggregate TextRank score over training responses.
struct KeywordLexicon {
  std::vector<std::string> keywords;
  std::vector<double> scores;

  std::size_t size() const { return keywords.size(); }

  /// Position of `token` in the lexicon, or -1.
  int index_of(const std::string& token) const {
    auto it = std::find(keywords.begin(), keywords.end(), token);
    return it == keywords.end() ? -1 : static_cast<int>(it - keywords.begin());
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write keyword lexicon: " + path);
    out << std::setprecision(17);
    for (std::size_t i = 0; i < keywords.size(); ++i) out << keywords[i] << '\t' << scores[i] << '\n';
  }

  static KeywordLexicon load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read keyword lexicon: " + path);
    KeywordLexicon lex;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw std::runtime_error("bad lexicon line: " + line);
      lex.keywords.push_back(line.substr(0, tab));
      lex.scores.push_back(std::stod(line.substr(tab + 1)));
    }
    return lex;
  }
};

/// Per-token aggregate: the sum of the token's TextRank score in every
/// response it occurs in. Summation runs over sorted per-response scores so
/// the result does not depend on corpus order.
inline std::map<std::string, double> aggregate_textrank(const std::vector<std::vector<std::string>>& responses,
                                                        const std::set<std::string>& stop_words,
                                                        const TextRankOptions& opt = {}) {
  std::map<std::string, std::vector<double>> per_token;
  for (const auto& r : responses)
    for (const auto& kw : textrank_ranking({r}, stop_words, opt)) per_token[kw.token].push_back(kw.score);
  std::map<std::string, double> out;
  for (auto& [tok, scores] : per_token) {
    std::sort(scores.begin(), scores.end());
    double s = 0.0;
    for (double v : scores) s += v;
    out[tok] = s;
  }
  return out;
}

inline KeywordLexicon build_keyword_lexicon(const std::vector<std::vector<std::string>>& responses, std::size_t n_k,
                                            const std::set<std::string>& stop_words,
                                            const TextRankOptions& opt = {}) {
  if (responses.empty()) throw std::invalid_argument("keyword extraction needs a non-empty corpus");
  if (n_k < 1) throw std::invalid_argument("n_k must be >= 1");
  const auto agg = aggregate_textrank(responses, stop_words, opt);
  std::vector<std::pair<std::string, double>> ranked(agg.begin(), agg.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.empty()) throw std::runtime_error("no content tokens survive stop filtering; keyword lexicon is empty");
  if (ranked.size() < n_k) {
    std::clog << "warning: only " << ranked.size() << " distinct content tokens; n_k truncated from " << n_k << '\n';
    n_k = ranked.size();
  }
  KeywordLexicon lex;
  for (std::size_t i = 0; i < n_k; ++i) {
    lex.keywords.push_back(ranked[i].first);
    lex.scores.push_back(ranked[i].second);
  }
  return lex;
}

inline KeywordLexicon build_keyword_lexicon(const TextCorpus& corpus, std::size_t n_k,
                                            const std::set<std::string>& stop_words,
                                            const TextRankOptions& opt = {}) {
  std::vector<std::vector<std::string>> responses;
  for (const auto& p : corpus.pairs()) responses.push_back(p.response);
  return build_keyword_lexicon(responses, n_k, stop_words, opt);
}

/// Lexicon indices of the gold response's own top TextRank keywords (Y^K).
struct KeywordAnnotation {
  std::vector<int> indices;  // sorted, unique
  bool empty() const { return indices.empty(); }
};

inline KeywordAnnotation annotate_keywords(const std::vector<std::string>& response, const KeywordLexicon& lexicon,
                                           std::size_t top_k_per_response, const std::set<std::string>& stop_words,
                                           const TextRankOptions& opt = {}) {
  KeywordAnnotation a;
  for (const auto& kw : textrank_keywords(response, top_k_per_response, stop_words, opt)) {
    const int j = lexicon.index_of(kw.token);
    if (j >= 0) a.indices.push_back(j);
  }
  std::sort(a.indices.begin(), a.indices.end());
  a.indices.erase(std::unique(a.indices.begin(), a.indices.end()), a.indices.end());
  return a;
}

/// One annotation per pair of an encoded corpus, aligned by index.
inline std::vector<KeywordAnnotation> annotate_corpus(const Corpus& corpus, const Vocabulary& vocab,
                                                      const KeywordLexicon& lexicon, std::size_t top_k_per_response,
                                                      const std::set<std::string>& stop_words,
                                                      const TextRankOptions& opt = {}) {
  std::vector<KeywordAnnotation> out;
  out.reserve(corpus.size());
  for (const auto& p : corpus.pairs())
    out.push_back(annotate_keywords(vocab.decode(p.response), lexicon, top_k_per_response, stop_words, opt));
  return out;
}

/// Memory rows K (n_k x dim_k) and the alignment matrix W_K (decoder width x dim_k).
struct KnowledgeMemory {
  KeywordLexicon lexicon;
  Parameter keys;
  Parameter alignment;

  std::size_t n_k() const { return static_cast<std::size_t>(keys.value.rows()); }
  Eigen::Index dim_k() const { return keys.value.cols(); }
};

inline KnowledgeMemory make_knowledge_memory(KeywordLexicon lexicon, Eigen::Index decoder_width, Eigen::Index dim_k,
                                             Rng& rng, double init_radius = 0.08) {
  if (lexicon.size() == 0) throw std::invalid_argument("knowledge memory needs at least one keyword");
  KnowledgeMemory m{std::move(lexicon), Parameter("knowledge.keys", 0, 0), Parameter("knowledge.alignment", 0, 0)};
  m.keys = Parameter("knowledge.keys", static_cast<Eigen::Index>(m.lexicon.size()), dim_k);
  m.alignment = Parameter("knowledge.alignment", decoder_width, dim_k);
  init_uniform(m.keys, init_radius, rng);
  init_uniform(m.alignment, init_radius, rng);
  return m;
}

inline KnowledgeMemory build_knowledge_memory(const TextCorpus& corpus, std::size_t n_k,
                                              const std::set<std::string>& stop_words, Eigen::Index decoder_width,
                                              Eigen::Index dim_k, Rng& rng) {
  return make_knowledge_memory(build_keyword_lexicon(corpus, n_k, stop_words), decoder_width, dim_k, rng);
}

struct KnowledgeReadout {
  Var alignments;  // n_k x 1, tanh(s^T W_K k_j)
  Var summary;     // dim_k x 1, mean_j alignment_j * k_j
};

inline KnowledgeReadout knowledge_attend(Tape& tape, const KnowledgeMemory& memory, const Var& state) {
  const Var keys = tape.param(memory.keys);
  const Var projected = ag::matmul(ag::transpose(tape.param(memory.alignment)), state);  // dim_k x 1
  const Var align = ag::tanh(ag::matmul(keys, projected));                               // n_k x 1
  const Var summary =
      ag::scale(ag::matmul(ag::transpose(keys), align), 1.0 / static_cast<double>(memory.n_k()));
  return {align, summary};
}

/// -sum_t sum_{j in Y^K} sigmoid(alignment_{t,j}).
inline Var ki_loss(Tape& tape, const std::vector<Var>& alignments, const KeywordAnnotation& annotation) {
  if (annotation.empty() || alignments.empty()) return tape.scalar_constant(0.0);
  std::vector<Var> terms;
  for (const Var& a : alignments)
    for (int j : annotation.indices) terms.push_back(ag::sigmoid(ag::pick(a, j)));
  return ag::scale(ag::sum(terms), -1.0);
}

inline double ki_loss(const std::vector<Vector>& alignments, const KeywordAnnotation& annotation) {
  double s = 0.0;
  for (const Vector& a : alignments)
    for (int j : annotation.indices) s += ag::sigmoid(a[j]);
  return -s;
}

}  // namespace dialcal
