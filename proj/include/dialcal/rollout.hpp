#pragma once

// Token-level quality by Monte-Carlo rollout, and the quality-weighted NLL.
//
// For gold token y_t the frozen generator snapshot continues the gold prefix
// y_1..y_t N times; q_t is the mean calibrator score of the completed
// responses. The knowledge path is switched off during rollouts.

#include "dialcal/autograd.hpp"
#include "dialcal/calibrator.hpp"
#include "dialcal/corpus.hpp"
#include "dialcal/random.hpp"
#include "dialcal/seq2seq.hpp"

#include <concepts>
#include <stdexcept>
#include <vector>

namespace dialcal {

/// Anything that scores a complete response against a fixed query.
template <typename F>
concept ResponseScorer = requires(const F& f, const Sequence& response) {
  { f(response) } -> std::convertible_to<double>;
};

struct RolloutOptions {
  int rollouts = 3;          // N
  std::size_t max_len = 20;
  double temperature = 1.0;  // <= 0 means argmax continuation
};

struct TokenQualityVector {
  std::vector<double> q;
  int rollouts = 0;

  std::size_t size() const { return q.size(); }
};

namespace detail {
inline auto ensemble_scorer(const CalibratorEnsemble::BoundQuery& bound) {
  return [&bound](const Sequence& r) { return bound.score(r).value(); };
}
}  // namespace detail

/// q_t for one position t (1-based) of the pair's response.
template <ResponseScorer Scorer>
double token_quality(const GeneratorModel& snapshot, const Scorer& scorer, const QueryResponsePair& pair,
                     std::size_t t, const RolloutOptions& opt, Rng& rng) {
  if (opt.rollouts < 1) throw std::invalid_argument("rollout count N must be >= 1");
  const Sequence gold = unpad(pair.response);
  if (t < 1 || t > gold.size()) throw std::out_of_range("token position outside the response");
  const Sequence prefix(gold.begin(), gold.begin() + static_cast<std::ptrdiff_t>(t));
  double sum = 0.0;
  for (int i = 0; i < opt.rollouts; ++i)
    sum += scorer(sample_continuation(snapshot, pair.query, prefix, opt.max_len, rng, opt.temperature,
                                      KnowledgeUse::Off));
  return sum / opt.rollouts;
}

inline double token_quality(const GeneratorModel& snapshot, const CalibratorEnsemble& ensemble,
                            const QueryResponsePair& pair, std::size_t t, const RolloutOptions& opt, Rng& rng) {
  const auto bound = ensemble.bind(pair.query);
  return token_quality(snapshot, detail::ensemble_scorer(bound), pair, t, opt, rng);
}

/// q_1..q_m. One teacher-forced pass over the gold response provides the
/// decoder state after every prefix; each rollout branches from there.
template <ResponseScorer Scorer>
TokenQualityVector token_quality_vector(const GeneratorModel& snapshot, const Scorer& scorer,
                                        const QueryResponsePair& pair, const RolloutOptions& opt, Rng& rng) {
  if (opt.rollouts < 1) throw std::invalid_argument("rollout count N must be >= 1");
  const Sequence gold = unpad(pair.response);
  TokenQualityVector out;
  out.rollouts = opt.rollouts;
  Tape tape(false);
  const ForcedPass fp = teacher_force(snapshot, tape, pair.query, gold, KnowledgeUse::Off);
  for (std::size_t t = 1; t <= gold.size(); ++t) {
    const Sequence prefix(gold.begin(), gold.begin() + static_cast<std::ptrdiff_t>(t));
    if (prefix.back() == Vocabulary::kEos || prefix.size() >= opt.max_len) {
      out.q.push_back(scorer(prefix));
      continue;
    }
    double sum = 0.0;
    for (int i = 0; i < opt.rollouts; ++i) {
      Sequence seq = prefix;
      extend_by_sampling(snapshot, tape, fp.encoded, fp.states[t], prefix.back(), seq, opt.max_len, rng,
                         opt.temperature, KnowledgeUse::Off);
      sum += scorer(seq);
    }
    out.q.push_back(sum / opt.rollouts);
  }
  return out;
}

inline TokenQualityVector token_quality_vector(const GeneratorModel& snapshot, const CalibratorEnsemble& ensemble,
                                               const QueryResponsePair& pair, const RolloutOptions& opt, Rng& rng) {
  const auto bound = ensemble.bind(pair.query);
  return token_quality_vector(snapshot, detail::ensemble_scorer(bound), pair, opt, rng);
}

/// -sum_t q_t log p(y_t | X, y_<t) over the gold log-probabilities of a forced pass.
inline Var calibrated_loss(Tape& tape, const std::vector<Var>& gold_log_probs, const TokenQualityVector& q) {
  if (q.size() != gold_log_probs.size()) throw std::invalid_argument("token quality vector length != response length");
  std::vector<Var> terms;
  for (std::size_t t = 0; t < q.size(); ++t)
    if (q.q[t] != 0.0) terms.push_back(ag::scale(gold_log_probs[t], -q.q[t]));
  if (terms.empty()) return tape.scalar_constant(0.0);
  return ag::sum(terms);
}

inline Var calibrated_loss(const GeneratorModel& model, Tape& tape, const QueryResponsePair& pair,
                           const TokenQualityVector& q, KnowledgeUse knowledge_use = KnowledgeUse::Active) {
  const ForcedPass fp = teacher_force(model, tape, pair.query, pair.response, knowledge_use);
  return calibrated_loss(tape, fp.gold_log_probs, q);
}

inline double calibrated_loss(const GeneratorModel& model, const QueryResponsePair& pair, const TokenQualityVector& q,
                              KnowledgeUse knowledge_use = KnowledgeUse::Active) {
  Tape tape(false);
  return calibrated_loss(model, tape, pair, q, knowledge_use).scalar();
}

}  // namespace dialcal
