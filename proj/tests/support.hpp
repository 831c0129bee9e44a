#pragma once

// Shared helpers for the test suites: finite-difference gradient checks and
// small random models.

#include "dialcal/dialcal.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace dialcal::testing {

struct GradientCheck {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t checked = 0;
};

/// Compares backprop gradients of `loss` with central differences over every
/// entry of every parameter. Per tensor, the error is
/// ||analytic - numeric|| / max(||analytic||, ||numeric||); tensors whose
/// gradients are both below `floor` in norm count as exact.
inline GradientCheck check_gradients(const std::vector<Parameter*>& params, const std::function<Var(Tape&)>& loss,
                                     double h = 1e-6, double floor = 1e-9) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  GradientCheck out;
  for (Parameter* p : params) {
    Matrix numeric(p->value.rows(), p->value.cols());
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const double orig = p->value.data()[i];
      p->value.data()[i] = orig + h;
      double up, down;
      {
        Tape t(false);
        up = loss(t).scalar();
      }
      p->value.data()[i] = orig - h;
      {
        Tape t(false);
        down = loss(t).scalar();
      }
      p->value.data()[i] = orig;
      numeric.data()[i] = (up - down) / (2 * h);
      ++out.checked;
    }
    const double na = p->grad.norm(), nn = numeric.norm();
    const double scale = std::max(na, nn);
    const double err = scale < floor ? 0.0 : (p->grad - numeric).norm() / scale;
    if (err >= out.max_relative_error) {
      out.max_relative_error = err;
      out.worst_parameter = p->name;
    }
  }
  return out;
}

inline GeneratorConfig toy_generator_config(Eigen::Index vocab, Eigen::Index embed, Eigen::Index hidden,
                                            Eigen::Index dim_k = 3, double init = 0.08) {
  GeneratorConfig c;
  c.vocab_size = vocab;
  c.embed_dim = embed;
  c.hidden_dim = hidden;
  c.dim_k = dim_k;
  c.init_radius = init;
  return c;
}

inline KeywordLexicon toy_lexicon(std::size_t n_k) {
  KeywordLexicon lex;
  for (std::size_t j = 0; j < n_k; ++j) {
    lex.keywords.push_back("kw" + std::to_string(j));
    lex.scores.push_back(1.0 / static_cast<double>(j + 1));
  }
  return lex;
}

/// Random content-token sequence of length in [min_len, max_len] (no specials).
inline Sequence random_tokens(Rng& rng, Eigen::Index vocab, std::size_t min_len, std::size_t max_len) {
  const std::size_t len = min_len + uniform_index(rng, max_len - min_len + 1);
  Sequence s;
  for (std::size_t i = 0; i < len; ++i)
    s.push_back(static_cast<TokenId>(Vocabulary::kNumReserved +
                                     uniform_index(rng, static_cast<std::size_t>(vocab - Vocabulary::kNumReserved))));
  return s;
}

/// Random query/response pair; the response ends with EOS.
inline QueryResponsePair random_pair(Rng& rng, Eigen::Index vocab, std::size_t max_len = 6) {
  QueryResponsePair p;
  p.query = random_tokens(rng, vocab, 1, max_len);
  p.response = random_tokens(rng, vocab, 1, max_len);
  p.response.push_back(Vocabulary::kEos);
  p.level = kAllLevels[uniform_index(rng, kAllLevels.size())];
  return p;
}

inline CalibratorConfig toy_calibrator_config(Eigen::Index vocab, Eigen::Index embed = 6, Eigen::Index filters = 5) {
  CalibratorConfig c;
  c.vocab_size = vocab;
  c.embed_dim = embed;
  c.filters = filters;
  c.joint_hidden = 7;
  return c;
}

/// Exact response texts of the synthetic corpus, encoded with a vocabulary built on it.
struct EncodedSynthetic {
  SyntheticCorpus text;
  Vocabulary vocab;
  Corpus corpus;
};

inline EncodedSynthetic encoded_synthetic(int topics, int pairs_per_topic, std::uint64_t seed) {
  EncodedSynthetic e;
  e.text = generate_synthetic_corpus(topics, pairs_per_topic, seed);
  e.vocab = build_vocabulary(e.text.corpus);
  e.corpus = encode_corpus(e.text.corpus, e.vocab);
  return e;
}

/// Held-out quality of a calibrator on a planted corpus.
struct CalibratorEvaluation {
  double adjacent_accuracy = 0.0;  // D^pair ordering on pairs one level apart
  double far_accuracy = 0.0;       // D^pair ordering on pairs two or more levels apart
  double pointwise_mse = 0.0;      // D^pt against the gold scores
  std::array<double, 5> ensemble_means{};  // mean ensemble score per level L1..L5
  double ns_accuracy = 0.0;        // balanced D^ns accuracy at threshold 0.5

  bool ensemble_increasing() const {
    for (std::size_t l = 1; l < ensemble_means.size(); ++l)
      if (!(ensemble_means[l] > ensemble_means[l - 1])) return false;
    return true;
  }
};

/// D^ns positives are each query's own L4/L5 responses; negatives pair the
/// query with the L4/L5 responses of held-out queries from other topics.
inline CalibratorEvaluation evaluate_calibrator(const CalibratorEnsemble& e, const Corpus& held_out,
                                                const Vocabulary& vocab) {
  CalibratorEvaluation ev;
  std::size_t adj = 0, adj_ok = 0, far = 0, far_ok = 0, n = 0;
  std::array<double, 5> sums{};
  std::array<std::size_t, 5> counts{};
  auto topic = [&](const Sequence& q) { return synthetic::topic_of(vocab.token(q[2])); };
  std::vector<std::pair<int, Sequence>> on_topic;  // (topic, L4/L5 response)
  for (const auto& [key, members] : held_out.groups()) {
    const auto bound = e.bind(key);
    for (std::size_t a : members) {
      const auto& pa = held_out[a];
      const int la = level_rank(*pa.level);
      const auto c = bound.components(pa.response);
      ev.pointwise_mse += std::pow(c[1] - level_to_score(*pa.level).value(), 2);
      sums[static_cast<std::size_t>(la - 1)] += bound.score(pa.response).value();
      ++counts[static_cast<std::size_t>(la - 1)];
      ++n;
      if (la >= 4) on_topic.emplace_back(topic(key), pa.response);
      for (std::size_t b : members) {
        const int lb = level_rank(*held_out[b].level);
        if (la <= lb) continue;
        const bool ok = c[2] > bound.components(held_out[b].response)[2];
        if (la - lb == 1) {
          ++adj;
          adj_ok += ok;
        } else {
          ++far;
          far_ok += ok;
        }
      }
    }
  }
  ev.adjacent_accuracy = static_cast<double>(adj_ok) / static_cast<double>(adj);
  ev.far_accuracy = static_cast<double>(far_ok) / static_cast<double>(far);
  ev.pointwise_mse /= static_cast<double>(n);
  for (std::size_t l = 0; l < 5; ++l) ev.ensemble_means[l] = sums[l] / static_cast<double>(counts[l]);

  std::size_t pos = 0, pos_ok = 0, neg = 0, neg_ok = 0;
  for (const auto& key : held_out.keys()) {
    const int t = topic(key);
    for (const auto& [rt, response] : on_topic) {
      const bool positive = e.score(Component::NegativeSampling, key, response).value() >= 0.5;
      if (rt != t) {
        ++neg;
        neg_ok += !positive;
      }
    }
    for (std::size_t idx : held_out.group(key))
      if (level_rank(*held_out[idx].level) >= 4) {
        ++pos;
        pos_ok += e.score(Component::NegativeSampling, key, held_out[idx].response).value() >= 0.5;
      }
  }
  ev.ns_accuracy = 0.5 * (static_cast<double>(pos_ok) / static_cast<double>(pos) +
                          static_cast<double>(neg_ok) / static_cast<double>(neg));
  return ev;
}

/// The planted corpus (20 topics x 10 queries, seed 7), its vocabulary and
/// query-disjoint 80/10/10 splits.
struct PlantedSplits {
  Vocabulary vocab;
  Corpus train, valid, test;
};

inline PlantedSplits planted_splits(int topics = 20, int pairs_per_topic = 10, std::uint64_t seed = 7) {
  const SyntheticCorpus sc = generate_synthetic_corpus(topics, pairs_per_topic, seed);
  const auto sp = split_by_query(sc.corpus, 0.8, 0.1, seed);
  PlantedSplits out;
  out.vocab = build_vocabulary(sc.corpus);
  out.train = encode_corpus(sp.train, out.vocab);
  out.valid = encode_corpus(sp.valid, out.vocab);
  out.test = encode_corpus(sp.test, out.vocab);
  return out;
}

}  // namespace dialcal::testing
