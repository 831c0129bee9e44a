#pragma once

// Automatic evaluation: corpus BLEU-n, embedding average / extrema / greedy,
// Dist-n, and the combined report.

#include "dialcal/autograd.hpp"
#include "dialcal/corpus.hpp"
#include "dialcal/seq2seq.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dialcal {

using Sentence = std::vector<std::string>;

namespace detail {
inline std::map<std::vector<std::string>, std::size_t> ngram_counts(const Sentence& s, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[Sentence(s.begin() + static_cast<std::ptrdiff_t>(i),
                                                                 s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return out;
}

inline void check_aligned(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references) {
  if (candidates.empty()) throw std::invalid_argument("empty candidate list");
  if (candidates.size() != references.size()) throw std::invalid_argument("candidate and reference counts differ");
}
}  // namespace detail

/// Corpus totals for BLEU: clipped matches and candidate n-gram counts per order.
struct BleuStatistics {
  std::vector<std::size_t> matches, totals;  // index k holds order k + 1
  std::size_t candidate_length = 0, reference_length = 0;
};

inline BleuStatistics bleu_statistics(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references,
                                      int max_n) {
  detail::check_aligned(candidates, references);
  if (max_n < 1) throw std::invalid_argument("BLEU order must be >= 1");
  BleuStatistics st;
  st.matches.assign(static_cast<std::size_t>(max_n), 0);
  st.totals.assign(static_cast<std::size_t>(max_n), 0);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    st.candidate_length += candidates[i].size();
    st.reference_length += references[i].size();
    for (int n = 1; n <= max_n; ++n) {
      const auto c = detail::ngram_counts(candidates[i], static_cast<std::size_t>(n));
      const auto r = detail::ngram_counts(references[i], static_cast<std::size_t>(n));
      for (const auto& [gram, count] : c) {
        const auto it = r.find(gram);
        st.matches[static_cast<std::size_t>(n - 1)] += std::min(count, it == r.end() ? 0 : it->second);
        st.totals[static_cast<std::size_t>(n - 1)] += count;
      }
    }
  }
  return st;
}

/// Corpus-level BLEU-n: brevity penalty times the geometric mean of the
/// modified precisions of orders 1..n. No smoothing: any zero precision
/// (including an order with no candidate n-grams) gives 0.
inline double bleu_n(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references, int n) {
  const BleuStatistics st = bleu_statistics(candidates, references, n);
  if (st.candidate_length == 0) return 0.0;
  double log_sum = 0.0;
  for (int k = 0; k < n; ++k) {
    const auto m = st.matches[static_cast<std::size_t>(k)];
    const auto t = st.totals[static_cast<std::size_t>(k)];
    if (m == 0 || t == 0) return 0.0;
    log_sum += std::log(static_cast<double>(m) / static_cast<double>(t));
  }
  const double c = static_cast<double>(st.candidate_length), r = static_cast<double>(st.reference_length);
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / n);
}

/// Word vectors with a fallback for unknown words (zero unless "<unk>" is present).
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  explicit EmbeddingTable(std::map<std::string, Vector> vectors) : vectors_(std::move(vectors)) {
    if (vectors_.empty()) throw std::invalid_argument("embedding table is empty");
    dim_ = vectors_.begin()->second.size();
    for (const auto& [w, v] : vectors_)
      if (v.size() != dim_) throw std::invalid_argument("inconsistent vector width for " + w);
    const auto unk = vectors_.find("<unk>");
    unknown_ = unk == vectors_.end() ? Vector::Zero(dim_) : unk->second;
  }

  Eigen::Index dim() const { return dim_; }
  std::size_t size() const { return vectors_.size(); }
  bool contains(const std::string& w) const { return vectors_.count(w) != 0; }

  const Vector& lookup(const std::string& w) const {
    const auto it = vectors_.find(w);
    return it == vectors_.end() ? unknown_ : it->second;
  }

  /// Text format: one "word v1 v2 ..." line per word; a leading "count dim" header is skipped.
  static EmbeddingTable load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read vector file: " + path);
    std::map<std::string, Vector> vectors;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
      const auto fields = split_whitespace(line);
      if (fields.empty()) continue;
      if (first && fields.size() == 2 && fields[0].find_first_not_of("0123456789") == std::string::npos) {
        first = false;
        continue;
      }
      first = false;
      Vector v(static_cast<Eigen::Index>(fields.size() - 1));
      for (std::size_t i = 1; i < fields.size(); ++i) v[static_cast<Eigen::Index>(i - 1)] = std::stod(fields[i]);
      vectors[fields[0]] = std::move(v);
    }
    return EmbeddingTable(std::move(vectors));
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write vector file: " + path);
    out << std::setprecision(17);
    for (const auto& [w, v] : vectors_) {
      out << w;
      for (Eigen::Index i = 0; i < v.size(); ++i) out << ' ' << v[i];
      out << '\n';
    }
  }

 private:
  std::map<std::string, Vector> vectors_;
  Vector unknown_;
  Eigen::Index dim_ = 0;
};

/// The generator's input embedding table, keyed by vocabulary token.
inline EmbeddingTable embedding_table_from_generator(const GeneratorModel& model, const Vocabulary& vocab) {
  std::map<std::string, Vector> vectors;
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    const auto id = static_cast<TokenId>(i);
    if (Vocabulary::is_special(id) && id != Vocabulary::kUnk) continue;
    vectors[vocab.token(id)] = model.embedding.value.row(id).transpose();
  }
  return EmbeddingTable(std::move(vectors));
}

/// Cosine similarity; 0 when either vector is zero.
inline double cosine(const Vector& a, const Vector& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

struct EmbeddingScores {
  double average = 0.0, extrema = 0.0, greedy = 0.0;
};

namespace detail {
inline Vector mean_vector(const Sentence& s, const EmbeddingTable& t) {
  Vector v = Vector::Zero(t.dim());
  if (s.empty()) return v;
  for (const auto& w : s) v += t.lookup(w);
  return v / static_cast<double>(s.size());
}

/// Per dimension, the entry of largest magnitude (the positive one on a tie).
inline Vector extrema_vector(const Sentence& s, const EmbeddingTable& t) {
  Vector v = Vector::Zero(t.dim());
  for (const auto& w : s) {
    const Vector& x = t.lookup(w);
    for (Eigen::Index i = 0; i < v.size(); ++i)
      if (std::abs(x[i]) > std::abs(v[i]) || (std::abs(x[i]) == std::abs(v[i]) && x[i] > v[i])) v[i] = x[i];
  }
  return v;
}

inline double greedy_match(const Sentence& a, const Sentence& b, const EmbeddingTable& t) {
  if (a.empty() || b.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& wa : a) {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& wb : b) best = std::max(best, cosine(t.lookup(wa), t.lookup(wb)));
    sum += best;
  }
  return sum / static_cast<double>(a.size());
}
}  // namespace detail

inline EmbeddingScores sentence_embedding_similarity(const Sentence& candidate, const Sentence& reference,
                                                     const EmbeddingTable& table) {
  EmbeddingScores s;
  s.average = cosine(detail::mean_vector(candidate, table), detail::mean_vector(reference, table));
  s.extrema = cosine(detail::extrema_vector(candidate, table), detail::extrema_vector(reference, table));
  s.greedy = 0.5 * (detail::greedy_match(candidate, reference, table) + detail::greedy_match(reference, candidate, table));
  return s;
}

/// Each score is the mean of its per-pair value over the corpus.
inline EmbeddingScores embedding_similarity(const std::vector<Sentence>& candidates,
                                            const std::vector<Sentence>& references, const EmbeddingTable& table) {
  detail::check_aligned(candidates, references);
  EmbeddingScores total;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto s = sentence_embedding_similarity(candidates[i], references[i], table);
    total.average += s.average;
    total.extrema += s.extrema;
    total.greedy += s.greedy;
  }
  const double n = static_cast<double>(candidates.size());
  return {total.average / n, total.extrema / n, total.greedy / n};
}

/// Distinct n-grams across all candidates over the total n-gram count; 0 if there are none.
inline double distinct_n(const std::vector<Sentence>& candidates, int n) {
  if (n < 1) throw std::invalid_argument("Dist order must be >= 1");
  std::set<Sentence> distinct;
  std::size_t total = 0;
  for (const auto& c : candidates)
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= c.size(); ++i) {
      distinct.emplace(c.begin() + static_cast<std::ptrdiff_t>(i), c.begin() + static_cast<std::ptrdiff_t>(i) + n);
      ++total;
    }
  return total == 0 ? 0.0 : static_cast<double>(distinct.size()) / static_cast<double>(total);
}

struct EvaluationReport {
  double bleu1 = 0, bleu2 = 0, bleu3 = 0;
  double emb_average = 0, emb_extrema = 0, emb_greedy = 0;
  double dist1 = 0, dist2 = 0;
  std::size_t samples = 0;
};

inline EvaluationReport evaluate(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references,
                                 const EmbeddingTable& table) {
  detail::check_aligned(hypotheses, references);
  EvaluationReport r;
  r.bleu1 = bleu_n(hypotheses, references, 1);
  r.bleu2 = bleu_n(hypotheses, references, 2);
  r.bleu3 = bleu_n(hypotheses, references, 3);
  const auto e = embedding_similarity(hypotheses, references, table);
  r.emb_average = e.average;
  r.emb_extrema = e.extrema;
  r.emb_greedy = e.greedy;
  r.dist1 = distinct_n(hypotheses, 1);
  r.dist2 = distinct_n(hypotheses, 2);
  r.samples = hypotheses.size();
  return r;
}

/// One whitespace-tokenised sentence per line.
inline std::vector<Sentence> read_sentences(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<Sentence> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(split_whitespace(line));
  return out;
}

inline EvaluationReport evaluate_files(const std::string& hypotheses_path, const std::string& references_path,
                                       const EmbeddingTable& table) {
  const auto hyps = read_sentences(hypotheses_path);
  const auto refs = read_sentences(references_path);
  if (hyps.size() != refs.size())
    throw std::invalid_argument("hypothesis file has " + std::to_string(hyps.size()) + " lines, reference file has " +
                                std::to_string(refs.size()));
  return evaluate(hyps, refs, table);
}

/// CSV with one row per metric. BLEU is reported as a percentage.
inline void write_report_csv(std::ostream& out, const EvaluationReport& r) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(6);
  s << "metric,value\n";
  s << "BLEU-1," << 100.0 * r.bleu1 << '\n';
  s << "BLEU-2," << 100.0 * r.bleu2 << '\n';
  s << "BLEU-3," << 100.0 * r.bleu3 << '\n';
  s << "Emb-Average," << r.emb_average << '\n';
  s << "Emb-Extrema," << r.emb_extrema << '\n';
  s << "Emb-Greedy," << r.emb_greedy << '\n';
  s << "Dist-1," << r.dist1 << '\n';
  s << "Dist-2," << r.dist2 << '\n';
  s << "samples," << r.samples << '\n';
  out << s.str();
}

}  // namespace dialcal
