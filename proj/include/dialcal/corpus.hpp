#pragma once

// Quality-labelled dialogue corpora: label scheme, vocabulary, TSV I/O,
// query grouping, negative sampling, adjacent-level pair enumeration,
// batching, and the planted-structure synthetic generator.

#include "dialcal/random.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace dialcal {

using TokenId = std::int32_t;
using Sequence = std::vector<TokenId>;

enum class QualityLevel : int { L1 = 1, L2 = 2, L3 = 3, L4 = 4, L5 = 5 };

inline constexpr std::array<QualityLevel, 5> kAllLevels = {QualityLevel::L1, QualityLevel::L2, QualityLevel::L3,
                                                           QualityLevel::L4, QualityLevel::L5};

inline int level_rank(QualityLevel l) { return static_cast<int>(l); }

inline std::string to_string(QualityLevel l) { return "L" + std::to_string(level_rank(l)); }

inline QualityLevel parse_level(std::string_view tag) {
  if (tag.size() == 2 && tag[0] == 'L' && tag[1] >= '1' && tag[1] <= '5')
    return static_cast<QualityLevel>(tag[1] - '0');
  throw std::invalid_argument("bad quality level tag: " + std::string(tag));
}

/// Normalised response quality in [0, 1].
class QualityScore {
 public:
  constexpr QualityScore() = default;
  explicit QualityScore(double v) : value_(v) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::out_of_range("quality score outside [0,1]");
  }
  constexpr double value() const { return value_; }
  friend constexpr auto operator<=>(QualityScore, QualityScore) = default;

 private:
  double value_ = 0.0;
};

/// L1..L5 -> 0, 0.25, 0.5, 0.75, 1.
inline QualityScore level_to_score(QualityLevel l) { return QualityScore((level_rank(l) - 1) * 0.25); }

// ---------------------------------------------------------------------------
// Vocabulary

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr TokenId kNumReserved = 4;

  Vocabulary() : tokens_{"<pad>", "<bos>", "<eos>", "<unk>"} {
    for (TokenId i = 0; i < kNumReserved; ++i) index_.emplace(tokens_[static_cast<std::size_t>(i)], i);
  }

  /// Appends a token; returns its id (existing id if already present).
  TokenId add(const std::string& token) {
    if (auto it = index_.find(token); it != index_.end()) return it->second;
    const auto id = static_cast<TokenId>(tokens_.size());
    tokens_.push_back(token);
    index_.emplace(token, id);
    return id;
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  TokenId id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw std::out_of_range("token id out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  static bool is_special(TokenId id) { return id >= 0 && id < kNumReserved; }

  Sequence encode(const std::vector<std::string>& words) const {
    Sequence out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back(id(w));
    return out;
  }

  /// Drops PAD/BOS/EOS; UNK is rendered as "<unk>".
  std::vector<std::string> decode(const Sequence& ids) const {
    std::vector<std::string> out;
    for (TokenId t : ids) {
      if (t == kPad || t == kBos || t == kEos) continue;
      out.push_back(token(t));
    }
    return out;
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write vocabulary: " + path);
    for (std::size_t i = kNumReserved; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read vocabulary: " + path);
    Vocabulary v;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      v.add(line);
    }
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// ---------------------------------------------------------------------------
// Corpus

template <typename Token>
struct BasicPair {
  std::vector<Token> query;
  std::vector<Token> response;
  std::optional<QualityLevel> level;
};

/// Pairs plus an index from query key (the query sequence itself) to the
/// positions of its responses. Groups are kept in sorted key order.
template <typename Token>
class BasicCorpus {
 public:
  using Pair = BasicPair<Token>;
  using Key = std::vector<Token>;

  BasicCorpus() = default;
  explicit BasicCorpus(std::vector<Pair> pairs) : pairs_(std::move(pairs)) { reindex(); }

  void add(Pair p) {
    groups_[p.query].push_back(pairs_.size());
    pairs_.push_back(std::move(p));
  }

  const std::vector<Pair>& pairs() const { return pairs_; }
  const Pair& operator[](std::size_t i) const { return pairs_[i]; }
  std::size_t size() const { return pairs_.size(); }
  bool empty() const { return pairs_.empty(); }

  const std::map<Key, std::vector<std::size_t>>& groups() const { return groups_; }
  std::size_t query_count() const { return groups_.size(); }

  const std::vector<std::size_t>& group(const Key& key) const {
    auto it = groups_.find(key);
    if (it == groups_.end()) throw std::out_of_range("unknown query key");
    return it->second;
  }

  std::vector<Key> keys() const {
    std::vector<Key> out;
    out.reserve(groups_.size());
    for (const auto& [k, _] : groups_) out.push_back(k);
    return out;
  }

  bool labelled() const {
    return std::all_of(pairs_.begin(), pairs_.end(), [](const Pair& p) { return p.level.has_value(); });
  }

 private:
  void reindex() {
    groups_.clear();
    for (std::size_t i = 0; i < pairs_.size(); ++i) groups_[pairs_[i].query].push_back(i);
  }

  std::vector<Pair> pairs_;
  std::map<Key, std::vector<std::size_t>> groups_;
};

using TextPair = BasicPair<std::string>;
using TextCorpus = BasicCorpus<std::string>;
using QueryResponsePair = BasicPair<TokenId>;
using Corpus = BasicCorpus<TokenId>;

inline std::vector<std::string> split_whitespace(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\r' || s[i] == '\n')) ++i;
    std::size_t j = i;
    while (j < s.size() && !(s[j] == ' ' || s[j] == '\t' || s[j] == '\r' || s[j] == '\n')) ++j;
    if (j > i) out.emplace_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string join(const std::vector<std::string>& words, std::string_view sep = " ") {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += sep;
    out += words[i];
  }
  return out;
}

/// query<TAB>response[<TAB>Lk], one record per line.
inline TextCorpus read_tsv(std::istream& in) {
  TextCorpus corpus;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() < 2 || fields.size() > 3)
      throw std::runtime_error("corpus line " + std::to_string(lineno) + ": expected 2 or 3 tab-separated fields");
    TextPair p{split_whitespace(fields[0]), split_whitespace(fields[1]), std::nullopt};
    if (p.query.empty() || p.response.empty())
      throw std::runtime_error("corpus line " + std::to_string(lineno) + ": empty query or response");
    if (fields.size() == 3 && !fields[2].empty()) p.level = parse_level(fields[2]);
    corpus.add(std::move(p));
  }
  return corpus;
}

inline TextCorpus read_tsv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read corpus: " + path);
  return read_tsv(in);
}

inline void write_tsv(std::ostream& out, const TextCorpus& corpus) {
  for (const auto& p : corpus.pairs()) {
    out << join(p.query) << '\t' << join(p.response);
    if (p.level) out << '\t' << to_string(*p.level);
    out << '\n';
  }
}

inline void write_tsv(const std::string& path, const TextCorpus& corpus) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write corpus: " + path);
  write_tsv(out, corpus);
}

/// Frequency-descending then lexicographic ids after the four reserved ones.
inline Vocabulary build_vocabulary(const TextCorpus& corpus, int min_count = 1) {
  if (min_count < 1) throw std::invalid_argument("min_count must be >= 1");
  if (corpus.empty()) throw std::invalid_argument("cannot build a vocabulary from an empty corpus");
  std::map<std::string, int> freq;
  for (const auto& p : corpus.pairs()) {
    for (const auto& w : p.query) ++freq[w];
    for (const auto& w : p.response) ++freq[w];
  }
  std::vector<std::pair<std::string, int>> entries(freq.begin(), freq.end());
  std::stable_sort(entries.begin(), entries.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (const auto& [w, c] : entries)
    if (c >= min_count && !v.contains(w)) v.add(w);
  return v;
}

/// Maps words to ids and terminates every response with EOS.
inline Corpus encode_corpus(const TextCorpus& corpus, const Vocabulary& vocab) {
  std::vector<QueryResponsePair> pairs;
  pairs.reserve(corpus.size());
  for (const auto& p : corpus.pairs()) {
    QueryResponsePair e{vocab.encode(p.query), vocab.encode(p.response), p.level};
    e.response.push_back(Vocabulary::kEos);
    pairs.push_back(std::move(e));
  }
  return Corpus(std::move(pairs));
}

template <typename Token>
struct Splits {
  BasicCorpus<Token> train, valid, test;
};

/// Assigns whole query groups to train/valid/test so the splits never share a query.
template <typename Token>
Splits<Token> split_by_query(const BasicCorpus<Token>& corpus, double train_fraction, double valid_fraction,
                             std::uint64_t seed) {
  if (train_fraction <= 0 || valid_fraction < 0 || train_fraction + valid_fraction > 1.0)
    throw std::invalid_argument("bad split fractions");
  auto keys = corpus.keys();
  Rng rng(seed);
  shuffle(keys.begin(), keys.end(), rng);
  const auto n = keys.size();
  const auto n_train = static_cast<std::size_t>(static_cast<double>(n) * train_fraction + 0.5);
  const auto n_valid = static_cast<std::size_t>(static_cast<double>(n) * valid_fraction + 0.5);
  Splits<Token> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n_train ? out.train : (i < n_train + n_valid ? out.valid : out.test);
    for (std::size_t idx : corpus.group(keys[i])) dst.add(corpus[idx]);
  }
  return out;
}

/// Uniform draw over every response whose query key differs from `query_key`.
template <typename Token>
const std::vector<Token>& sample_negative(const BasicCorpus<Token>& corpus, const std::vector<Token>& query_key,
                                          Rng& rng) {
  if (corpus.query_count() < 2) throw std::invalid_argument("negative sampling needs at least two queries");
  const auto own = corpus.groups().find(query_key);
  const std::size_t own_size = own == corpus.groups().end() ? 0 : own->second.size();
  const std::size_t eligible = corpus.size() - own_size;
  std::size_t pick = uniform_index(rng, eligible);
  for (const auto& [key, members] : corpus.groups()) {
    if (key == query_key) continue;
    if (pick < members.size()) return corpus[members[pick]].response;
    pick -= members.size();
  }
  throw std::logic_error("sample_negative: index walk overran");
}

/// Every (better, worse) index pair in the group whose levels differ by exactly one.
template <typename Token>
std::vector<std::pair<std::size_t, std::size_t>> enumerate_adjacent_pairs(const BasicCorpus<Token>& corpus,
                                                                          const std::vector<Token>& query_key) {
  const auto& members = corpus.group(query_key);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t a : members) {
    const auto& la = corpus[a].level;
    if (!la) continue;
    for (std::size_t b : members) {
      const auto& lb = corpus[b].level;
      if (lb && level_rank(*la) == level_rank(*lb) + 1) out.emplace_back(a, b);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching

struct Batch {
  std::vector<std::size_t> indices;  // positions in the source corpus
  Eigen::MatrixXi queries;           // batch x max query length, PAD-filled
  Eigen::MatrixXi responses;         // batch x max response length, PAD-filled
  std::vector<int> query_lengths;
  std::vector<int> response_lengths;

  std::size_t size() const { return indices.size(); }

  Sequence query(std::size_t row) const { return row_sequence(queries, row, query_lengths[row]); }
  Sequence response(std::size_t row) const { return row_sequence(responses, row, response_lengths[row]); }

 private:
  static Sequence row_sequence(const Eigen::MatrixXi& m, std::size_t row, int len) {
    Sequence s(static_cast<std::size_t>(len));
    for (int j = 0; j < len; ++j) s[static_cast<std::size_t>(j)] = m(static_cast<Eigen::Index>(row), j);
    return s;
  }
};

/// One epoch of shuffled, PAD-padded batches covering every pair once.
inline std::vector<Batch> make_batches(const Corpus& corpus, std::size_t batch_size, Rng& rng) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(order.begin(), order.end(), rng);
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    Batch b;
    b.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
    std::size_t max_q = 0, max_r = 0;
    for (std::size_t i : b.indices) {
      max_q = std::max(max_q, corpus[i].query.size());
      max_r = std::max(max_r, corpus[i].response.size());
    }
    const auto rows = static_cast<Eigen::Index>(b.indices.size());
    b.queries = Eigen::MatrixXi::Constant(rows, static_cast<Eigen::Index>(max_q), Vocabulary::kPad);
    b.responses = Eigen::MatrixXi::Constant(rows, static_cast<Eigen::Index>(max_r), Vocabulary::kPad);
    for (Eigen::Index r = 0; r < rows; ++r) {
      const auto& p = corpus[b.indices[static_cast<std::size_t>(r)]];
      for (std::size_t j = 0; j < p.query.size(); ++j) b.queries(r, static_cast<Eigen::Index>(j)) = p.query[j];
      for (std::size_t j = 0; j < p.response.size(); ++j)
        b.responses(r, static_cast<Eigen::Index>(j)) = p.response[j];
      b.query_lengths.push_back(static_cast<int>(p.query.size()));
      b.response_lengths.push_back(static_cast<int>(p.response.size()));
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

/// Strips trailing PAD ids.
inline Sequence unpad(const Sequence& s) {
  std::size_t n = s.size();
  while (n > 0 && s[n - 1] == Vocabulary::kPad) --n;
  return Sequence(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(n));
}

// ---------------------------------------------------------------------------
// Synthetic corpus with planted quality structure
//
// Topic t owns a name token "t<t>n" and four word families: subjects
// "t<t>s<k>", query words "t<t>q<k>", response words "t<t>w<k>" and rare
// informative words "t<t>x<k>" (one per subject). Each query
// "what about <name> <s_k> <q_a> <q_b>" receives one response per level:
//   L5  i like the <name> <w_k> <w_(S+a%4)> and <x_k>   topic words + informative word
//   L4  i like the <name> <w_k> <w_(S+a%4)>             topic words only
//   L3  the topic's generic template                    generic words
//   L2  the query itself
//   L1  an L4-style response of another topic
// where S is the number of subjects. The L3 templates are built from words
// shared by all topics; topic t uses template t mod 4, so a template is more
// plausible after some queries than after others. Responses are a
// deterministic function of the query except for the L1 foreign response,
// which is drawn from the seeded stream.

namespace synthetic {

inline constexpr int kSubjects = 2;
inline constexpr int kQueryWords = 4;
inline constexpr int kResponseWords = kSubjects + 4;

inline const std::vector<std::string>& function_words() {
  static const std::vector<std::string> words = {"what", "about", "i",  "like", "the", "and", "me",
                                                 "too",  "do",    "not", "that", "is",  "it",  "a"};
  return words;
}

inline const std::vector<std::string>& generic_words() {
  static const std::vector<std::string> words = {"yes", "see", "haha", "know", "sure", "nice", "okay", "really"};
  return words;
}

inline const std::vector<std::vector<std::string>>& generic_templates() {
  static const std::vector<std::vector<std::string>> t = {
      {"yes", "i", "see"}, {"haha", "me", "too"}, {"i", "do", "not", "know"}, {"sure", "that", "is", "nice"}};
  return t;
}

/// Function words plus generic chit-chat words; filtered before keyword extraction.
inline std::set<std::string> stop_words() {
  std::set<std::string> s(function_words().begin(), function_words().end());
  s.insert(generic_words().begin(), generic_words().end());
  return s;
}

inline std::string word(int topic, char family, int k) {
  return "t" + std::to_string(topic) + family + std::to_string(k);
}

/// The topic's name token, shared by its queries and on-topic responses.
inline std::string topic_name(int topic) { return "t" + std::to_string(topic) + "n"; }

/// Every content word owned by a topic (name and all four families).
inline std::set<std::string> topic_lexicon(int topic) {
  std::set<std::string> s{topic_name(topic)};
  for (int k = 0; k < kSubjects; ++k) s.insert(word(topic, 's', k));
  for (int k = 0; k < kQueryWords; ++k) s.insert(word(topic, 'q', k));
  for (int k = 0; k < kResponseWords; ++k) s.insert(word(topic, 'w', k));
  for (int k = 0; k < kSubjects; ++k) s.insert(word(topic, 'x', k));
  return s;
}

/// Topic index of a synthetic word, or -1 for function/generic words.
inline int topic_of(const std::string& w) {
  if (w.size() < 3 || w[0] != 't') return -1;
  std::size_t i = 1;
  int t = 0;
  while (i < w.size() && w[i] >= '0' && w[i] <= '9') t = t * 10 + (w[i++] - '0');
  return i > 1 && i < w.size() ? t : -1;
}

inline bool is_informative(const std::string& w) {
  const int t = topic_of(w);
  if (t < 0) return false;
  const std::string prefix = "t" + std::to_string(t);
  return w.size() > prefix.size() && w[prefix.size()] == 'x';
}

inline std::vector<std::string> topic_response(int topic, int subject, int qword) {
  return {"i", "like", "the", topic_name(topic), word(topic, 'w', subject), word(topic, 'w', kSubjects + qword % 4)};
}

}  // namespace synthetic

struct SyntheticCorpus {
  TextCorpus corpus;
  std::vector<int> query_topics;  // topic per query, in generation order
};

inline SyntheticCorpus generate_synthetic_corpus(int topics, int pairs_per_topic, std::uint64_t seed) {
  using namespace synthetic;
  if (topics < 2) throw std::invalid_argument("synthetic corpus needs at least two topics");
  if (pairs_per_topic < 5) throw std::invalid_argument("pairs_per_topic must be >= 5");
  constexpr int kCombos = kSubjects * kQueryWords * (kQueryWords - 1);
  if (pairs_per_topic > kCombos) throw std::invalid_argument("pairs_per_topic exceeds distinct queries per topic");

  Rng rng(seed);
  SyntheticCorpus out;
  for (int t = 0; t < topics; ++t) {
    // Distinct (subject, q_a, q_b) combinations, drawn without replacement.
    std::vector<std::array<int, 3>> combos;
    for (int s = 0; s < kSubjects; ++s)
      for (int a = 0; a < kQueryWords; ++a)
        for (int b = 0; b < kQueryWords; ++b)
          if (a != b) combos.push_back({s, a, b});
    shuffle(combos.begin(), combos.end(), rng);

    for (int i = 0; i < pairs_per_topic; ++i) {
      const auto [s, a, b] = combos[static_cast<std::size_t>(i)];
      const std::vector<std::string> query = {"what", "about", topic_name(t), word(t, 's', s), word(t, 'q', a),
                                                word(t, 'q', b)};

      std::vector<std::string> l4 = topic_response(t, s, a);
      std::vector<std::string> l5 = l4;
      l5.push_back("and");
      l5.push_back(word(t, 'x', s));
      const auto& l3 = generic_templates()[static_cast<std::size_t>(t) % generic_templates().size()];
      int foreign = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(topics - 1)));
      if (foreign >= t) ++foreign;
      const std::vector<std::string> l1 =
          topic_response(foreign, static_cast<int>(uniform_index(rng, kSubjects)),
                         static_cast<int>(uniform_index(rng, kQueryWords)));

      out.corpus.add({query, l5, QualityLevel::L5});
      out.corpus.add({query, l4, QualityLevel::L4});
      out.corpus.add({query, l3, QualityLevel::L3});
      out.corpus.add({query, query, QualityLevel::L2});
      out.corpus.add({query, l1, QualityLevel::L1});
      out.query_topics.push_back(t);
    }
  }
  return out;
}

/// Word vectors with planted semantic structure: words of one topic cluster
/// around a shared direction, generic and function words around their own.
/// Used as an embedding source that is independent of any trained model.
inline std::map<std::string, Vector> planted_word_vectors(const TextCorpus& corpus, int dim, std::uint64_t seed) {
  Rng rng(seed);
  auto random_unit = [&] {
    Vector v(dim);
    for (int i = 0; i < dim; ++i) v[i] = 2.0 * uniform01(rng) - 1.0;
    return Vector(v.normalized());
  };
  std::set<std::string> words;
  for (const auto& p : corpus.pairs()) {
    words.insert(p.query.begin(), p.query.end());
    words.insert(p.response.begin(), p.response.end());
  }
  std::map<int, Vector> topic_dirs;
  const Vector generic_dir = random_unit();
  const Vector function_dir = random_unit();
  std::map<std::string, Vector> table;
  for (const auto& w : words) {
    const int t = synthetic::topic_of(w);
    Vector base;
    if (t >= 0) {
      auto it = topic_dirs.find(t);
      if (it == topic_dirs.end()) it = topic_dirs.emplace(t, random_unit()).first;
      base = it->second;
    } else if (std::find(synthetic::generic_words().begin(), synthetic::generic_words().end(), w) !=
               synthetic::generic_words().end()) {
      base = generic_dir;
    } else {
      base = function_dir;
    }
    table.emplace(w, Vector(base + 0.5 * random_unit()));
  }
  return table;
}

}  // namespace dialcal
