#include "support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <tuple>

using namespace dialcal;
using namespace dialcal::testing;

namespace {

constexpr Eigen::Index kV = 20;

GeneratorModel model(std::uint64_t seed, double init = 0.5) {
  Rng rng(seed);
  return make_generator(toy_generator_config(kV, 8, 12, 3, init), rng);
}

std::vector<Hypothesis> random_beam(Rng& rng, std::size_t n) {
  std::vector<Hypothesis> beam;
  for (std::size_t i = 0; i < n; ++i) {
    Hypothesis h;
    h.tokens = random_tokens(rng, kV, 1, 5);
    h.tokens.push_back(Vocabulary::kEos);
    h.log_prob = -10.0 * uniform01(rng);
    beam.push_back(h);
  }
  std::stable_sort(beam.begin(), beam.end(), [](const auto& a, const auto& b) { return a.log_prob > b.log_prob; });
  return beam;
}

std::vector<double> random_scores(Rng& rng, std::size_t n) {
  std::vector<double> s;
  for (std::size_t i = 0; i < n; ++i) s.push_back(-10.0 * uniform01(rng));
  return s;
}

std::vector<std::size_t> beam_ranks(const std::vector<RankedHypothesis>& ranked) {
  std::vector<std::size_t> out;
  for (const auto& r : ranked) out.push_back(r.beam_rank);
  return out;
}

std::vector<std::size_t> identity(std::size_t n) {
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = i;
  return out;
}

}  // namespace

TEST(SwapPairs, TextCorpusSwapsEveryPairAsAMultiset) {
  const auto sc = generate_synthetic_corpus(3, 5, 2);
  const auto swapped = swap_pairs(sc.corpus);
  ASSERT_EQ(swapped.size(), sc.corpus.size());
  using Row = std::tuple<std::vector<std::string>, std::vector<std::string>, int>;
  std::multiset<Row> want, got;
  for (const auto& p : sc.corpus.pairs()) want.insert({p.response, p.query, level_rank(*p.level)});
  for (const auto& p : swapped.pairs()) got.insert({p.query, p.response, level_rank(*p.level)});
  EXPECT_EQ(got, want);
}

TEST(SwapPairs, EncodedCorpusMovesEosToTheNewResponse) {
  Rng rng(1);
  std::vector<QueryResponsePair> pairs;
  for (int i = 0; i < 20; ++i) pairs.push_back(random_pair(rng, kV));
  const Corpus corpus(pairs);
  const Corpus swapped = swap_pairs(corpus);
  ASSERT_EQ(swapped.size(), corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    Sequence expect_query = corpus[i].response;
    expect_query.pop_back();
    Sequence expect_response = corpus[i].query;
    expect_response.push_back(Vocabulary::kEos);
    EXPECT_EQ(swapped[i].query, expect_query);
    EXPECT_EQ(swapped[i].response, expect_response);
    EXPECT_EQ(swapped[i].level, corpus[i].level);
  }
  const Corpus twice = swap_pairs(swapped);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    EXPECT_EQ(twice[i].query, corpus[i].query);
    EXPECT_EQ(twice[i].response, corpus[i].response);
  }
}

TEST(InverseModel, ScoreIsQueryLikelihoodGivenHypothesis) {
  const auto inv = model(3);
  Rng rng(4);
  for (int i = 0; i < 10; ++i) {
    const auto p = random_pair(rng, kV);
    Sequence target = p.query;
    target.push_back(Vocabulary::kEos);
    const Sequence source(p.response.begin(), p.response.end() - 1);
    EXPECT_NEAR(inverse_log_prob(inv, p.query, p.response), -sequence_nll(inv, {source, target, std::nullopt}),
                1e-12);
  }
  const double empty = inverse_log_prob(inv, {5, 6}, {Vocabulary::kEos});
  EXPECT_TRUE(std::isfinite(empty));
  EXPECT_EQ(empty, inverse_log_prob(inv, {5, 6}, {}));
}

TEST(InverseModel, ScoresAreFiniteForEveryTestPair) {
  const PlantedSplits s = planted_splits(4, 6, 3);
  GeneratorConfig g = toy_generator_config(static_cast<Eigen::Index>(s.vocab.size()), 8, 12);
  TrainConfig cfg;
  cfg.learning_rate = 3e-3;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  std::vector<EpochMetrics> log;
  const auto inv = train_inverse_model(s.train, s.valid, g, cfg, &log);
  EXPECT_EQ(log.size(), 2u);
  EXPECT_FALSE(inv.has_knowledge());
  for (const auto& p : s.test.pairs()) {
    const double lp = inverse_log_prob(inv, p.query, p.response);
    EXPECT_TRUE(std::isfinite(lp));
    EXPECT_LT(lp, 0.0);
  }
}

TEST(InverseModel, OverfitsThirtyTwoSwappedPairs) {
  Rng rng(5);
  std::vector<QueryResponsePair> pairs;
  std::set<Sequence> responses;
  while (pairs.size() < 32) {
    auto p = random_pair(rng, kV, 5);
    if (responses.insert(p.response).second) pairs.push_back(p);
  }
  const Corpus corpus(pairs);
  TrainConfig cfg;
  cfg.use_rc = cfg.use_ki = true;  // forced off inside
  cfg.learning_rate = 3e-3;
  cfg.batch_size = 8;
  cfg.epochs = 500;
  const auto inv = train_inverse_model(corpus, corpus, toy_generator_config(kV, 24, 48), cfg);
  const Corpus swapped = swap_pairs(corpus);
  EXPECT_LE(mean_token_nll(inv, swapped), 0.1);
  int exact = 0;
  for (const auto& p : swapped.pairs()) exact += greedy_decode(inv, p.query, 12).tokens == p.response;
  EXPECT_GE(exact, 31);
}

TEST(RerankWeights, Validation) {
  EXPECT_NO_THROW((RerankWeights{1, 1}.validate()));
  EXPECT_NO_THROW((RerankWeights{0, 2}.validate()));
  EXPECT_THROW((RerankWeights{0, 0}.validate()), std::invalid_argument);
  EXPECT_THROW((RerankWeights{-1, 1}.validate()), std::invalid_argument);
  EXPECT_THROW((RerankWeights{1, -0.5}.validate()), std::invalid_argument);
}

TEST(Rerank, ZeroInverseWeightKeepsBeamOrder) {
  Rng rng(6);
  const auto beam = random_beam(rng, 30);
  const auto ranked = rerank(beam, random_scores(rng, 30), {1.0, 0.0});
  EXPECT_EQ(beam_ranks(ranked), identity(30));
}

TEST(Rerank, ZeroForwardWeightOrdersByInverseScore) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const auto beam = random_beam(rng, 2);
    const auto inv = random_scores(rng, 2);
    const auto ranked = rerank(beam, inv, {0.0, 1.0});
    const std::size_t first = inv[0] >= inv[1] ? 0 : 1;
    EXPECT_EQ(ranked[0].beam_rank, first);
    EXPECT_EQ(ranked[1].beam_rank, 1 - first);
  }
}

TEST(Rerank, MatchesExternalScoreAndSortOnFiftyCandidates) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto beam = random_beam(rng, 50);
    const auto inv = random_scores(rng, 50);
    const RerankWeights w{uniform01(rng) * 2, uniform01(rng) * 2};
    std::vector<std::pair<double, std::size_t>> oracle;
    for (std::size_t i = 0; i < 50; ++i) oracle.push_back({w.forward * beam[i].log_prob + w.inverse * inv[i], i});
    std::sort(oracle.begin(), oracle.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    const auto ranked = rerank(beam, inv, w);
    ASSERT_EQ(ranked.size(), 50u);
    for (std::size_t i = 0; i < 50; ++i) {
      EXPECT_EQ(ranked[i].beam_rank, oracle[i].second);
      EXPECT_EQ(ranked[i].score, oracle[i].first);
      EXPECT_EQ(ranked[i].hypothesis.tokens, beam[oracle[i].second].tokens);
    }
  }
}

TEST(Rerank, TiesKeepBeamRank) {
  Rng rng(9);
  auto beam = random_beam(rng, 6);
  for (auto& h : beam) h.log_prob = -2.0;
  const auto ranked = rerank(beam, std::vector<double>(6, -1.0), {1, 1});
  EXPECT_EQ(beam_ranks(ranked), identity(6));
}

TEST(Rerank, IsAPermutationOfTheBeam) {
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + uniform_index(rng, 40);
    const auto beam = random_beam(rng, n);
    const auto ranked = rerank(beam, random_scores(rng, n), {uniform01(rng), 0.1 + uniform01(rng)});
    std::multiset<Sequence> a, b;
    for (const auto& h : beam) a.insert(h.tokens);
    for (const auto& r : ranked) b.insert(r.hypothesis.tokens);
    EXPECT_EQ(a, b);
    auto ranks = beam_ranks(ranked);
    std::sort(ranks.begin(), ranks.end());
    EXPECT_EQ(ranks, identity(n));
  }
}

TEST(Rerank, PositiveScalingOfBothWeightsKeepsOrdering) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const auto beam = random_beam(rng, 25);
    const auto inv = random_scores(rng, 25);
    const RerankWeights w{0.1 + uniform01(rng), 0.1 + uniform01(rng)};
    const auto base = beam_ranks(rerank(beam, inv, w));
    for (double c : {0.5, 2.0, 4.0}) EXPECT_EQ(beam_ranks(rerank(beam, inv, {c * w.forward, c * w.inverse})), base);
  }
}

TEST(Rerank, BadInputsAreErrors) {
  Rng rng(12);
  const auto beam = random_beam(rng, 3);
  EXPECT_THROW(rerank({}, {}, {1, 1}), std::invalid_argument);
  EXPECT_THROW(rerank(beam, random_scores(rng, 2), {1, 1}), std::invalid_argument);
  EXPECT_THROW(rerank(beam, random_scores(rng, 3), {0, 0}), std::invalid_argument);
}

TEST(MmiRerank, CandidatesComeFromTheForwardBeam) {
  const auto fwd = model(13);
  const auto inv = model(14);
  const Sequence query{4, 7, 9};
  const auto beam = beam_search(fwd, query, 50, 5);
  ASSERT_EQ(beam.size(), 50u);
  const auto ranked = mmi_rerank(fwd, inv, query, 50, {1, 1}, 5);
  ASSERT_EQ(ranked.size(), 50u);
  for (const auto& r : ranked) {
    EXPECT_EQ(r.hypothesis.tokens, beam[r.beam_rank].tokens);
    EXPECT_EQ(r.forward_log_prob, beam[r.beam_rank].log_prob);
    EXPECT_EQ(r.inverse_log_prob, inverse_log_prob(inv, query, r.hypothesis.tokens));
    EXPECT_TRUE(std::isfinite(r.score));
  }
  for (std::size_t i = 1; i < ranked.size(); ++i) EXPECT_GE(ranked[i - 1].score, ranked[i].score);
  EXPECT_EQ(beam_ranks(mmi_rerank(fwd, inv, query, 50, {1, 0}, 5)), identity(50));
}

TEST(MmiRerank, BadArgumentsAreErrors) {
  const auto fwd = model(15);
  EXPECT_THROW(mmi_rerank(fwd, fwd, {4}, 0, {1, 1}), std::invalid_argument);
  EXPECT_THROW(mmi_rerank(fwd, fwd, {4}, 5, {0, 0}), std::invalid_argument);
}
