#pragma once

// N-best generation reranked with an inverse (response-to-query) model:
//   score(Y) = lambda_f * log p(Y | X) + lambda_b * log p(X | Y)

#include "dialcal/corpus.hpp"
#include "dialcal/seq2seq.hpp"
#include "dialcal/trainer.hpp"

#include <algorithm>
#include <stdexcept>
#include <vector>

namespace dialcal {

struct RerankWeights {
  double forward = 1.0;
  double inverse = 1.0;

  void validate() const {
    if (forward < 0 || inverse < 0) throw std::invalid_argument("rerank weights must be non-negative");
    if (forward == 0 && inverse == 0) throw std::invalid_argument("rerank weights cannot both be zero");
  }
};

struct RankedHypothesis {
  Hypothesis hypothesis;
  double forward_log_prob = 0.0;
  double inverse_log_prob = 0.0;
  double score = 0.0;
  std::size_t beam_rank = 0;  // position in the forward beam
};

/// (X, Y) -> (Y, X) over a text corpus; labels are kept.
inline TextCorpus swap_pairs(const TextCorpus& corpus) {
  TextCorpus out;
  for (const auto& p : corpus.pairs()) out.add({p.response, p.query, p.level});
  return out;
}

/// Encoded variant: the response's EOS moves to the end of the new response.
inline Corpus swap_pairs(const Corpus& corpus) {
  Corpus out;
  for (const auto& p : corpus.pairs()) {
    Sequence q = strip_eos(unpad(p.response));
    if (q.empty()) q.push_back(Vocabulary::kEos);
    Sequence r = unpad(p.query);
    r.push_back(Vocabulary::kEos);
    out.add({std::move(q), std::move(r), p.level});
  }
  return out;
}

/// Plain NLL training on swapped pairs; RC and KI are always off.
inline GeneratorModel train_inverse_model(const Corpus& train_set, const Corpus& valid_set, const GeneratorConfig& gcfg,
                                          TrainConfig cfg, std::vector<EpochMetrics>* log = nullptr) {
  cfg.use_rc = false;
  cfg.use_ki = false;
  cfg.use_gt_instance_weight = false;
  Rng init_rng(mix_seed(cfg.seed, 0x1a7e5e));
  GeneratorModel inverse = make_generator(gcfg, init_rng);
  auto metrics = train(inverse, swap_pairs(train_set), swap_pairs(valid_set), cfg);
  if (log) *log = std::move(metrics);
  return inverse;
}

/// log p(X | Y) under the inverse model, length-unnormalised. The
/// hypothesis's EOS is dropped; an empty hypothesis is read as [EOS].
inline double inverse_log_prob(const GeneratorModel& inverse, const Sequence& query, const Sequence& hypothesis) {
  Sequence source = strip_eos(hypothesis);
  if (source.empty()) source.push_back(Vocabulary::kEos);
  Sequence target = unpad(query);
  target.push_back(Vocabulary::kEos);
  Tape tape(false);
  return -sequence_nll(inverse, tape, source, target, KnowledgeUse::Off).scalar();
}

/// Stable descending sort on the combined score; equal scores keep beam order.
inline std::vector<RankedHypothesis> rerank(const std::vector<Hypothesis>& beam, const std::vector<double>& inverse_scores,
                                            const RerankWeights& weights) {
  weights.validate();
  if (beam.empty()) throw std::invalid_argument("cannot rerank an empty beam");
  if (inverse_scores.size() != beam.size()) throw std::invalid_argument("one inverse score per hypothesis required");
  std::vector<RankedHypothesis> out;
  out.reserve(beam.size());
  for (std::size_t i = 0; i < beam.size(); ++i) {
    RankedHypothesis r;
    r.hypothesis = beam[i];
    r.forward_log_prob = beam[i].log_prob;
    r.inverse_log_prob = inverse_scores[i];
    r.score = weights.forward * r.forward_log_prob + weights.inverse * r.inverse_log_prob;
    r.beam_rank = i;
    out.push_back(std::move(r));
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const RankedHypothesis& a, const RankedHypothesis& b) { return a.score > b.score; });
  return out;
}

inline std::vector<RankedHypothesis> mmi_rerank(const GeneratorModel& forward, const GeneratorModel& inverse,
                                                const Sequence& query, std::size_t n_best,
                                                const RerankWeights& weights, std::size_t max_len = 20) {
  weights.validate();
  if (n_best < 1) throw std::invalid_argument("n_best must be >= 1");
  const KnowledgeUse use = forward.has_knowledge() ? KnowledgeUse::Active : KnowledgeUse::Off;
  const auto beam = beam_search(forward, query, n_best, max_len, use);
  if (beam.empty()) throw std::runtime_error("beam search produced no hypotheses");
  std::vector<double> inv;
  inv.reserve(beam.size());
  for (const auto& h : beam) inv.push_back(inverse_log_prob(inverse, query, h.tokens));
  return rerank(beam, inv, weights);
}

}  // namespace dialcal
