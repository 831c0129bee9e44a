#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace dialcal;
using namespace dialcal::testing;

namespace {

CalibratorEnsemble toy_ensemble(std::uint64_t seed, Eigen::Index V = 15) {
  Rng rng(seed);
  CalibratorEnsemble e(toy_calibrator_config(V));
  e.initialize(rng);
  return e;
}

double logit(double p) { return std::log(p / (1.0 - p)); }

/// Forces every component to a constant score by zeroing the input-dependent
/// part of its output layer.
void pin_scores(CalibratorEnsemble& e, double ns, double pt, double pair) {
  e.ns.out_weight.value.setZero();
  e.ns.out_bias.value(0, 0) = ns;
  e.pt.bilinear.value.setZero();
  e.pt.bias.value(0, 0) = pt;
  e.pair.bilinear.value.setZero();
  e.pair.bias.value(0, 0) = pair;
}

namespace ref {

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

/// Convolution over explicit windows, ReLU, max over positions.
std::vector<double> features(const SentenceEncoder& enc, const Sequence& tokens) {
  std::vector<std::vector<double>> cols;
  const Eigen::Index E = enc.embedding.value.cols();
  for (TokenId t : tokens) {
    if (Vocabulary::is_special(t) && t != Vocabulary::kUnk) continue;
    std::vector<double> c;
    for (Eigen::Index j = 0; j < E; ++j) c.push_back(enc.embedding.value(t, j));
    cols.push_back(c);
  }
  const int max_w = *std::max_element(enc.widths.begin(), enc.widths.end());
  while (static_cast<int>(cols.size()) < max_w) cols.emplace_back(static_cast<std::size_t>(E), 0.0);
  std::vector<double> out;
  for (std::size_t wi = 0; wi < enc.widths.size(); ++wi) {
    const int w = enc.widths[wi];
    const Matrix& W = enc.conv_weight[wi].value;
    for (Eigen::Index f = 0; f < W.rows(); ++f) {
      double best = -1e300;
      for (std::size_t p = 0; p + static_cast<std::size_t>(w) <= cols.size(); ++p) {
        double acc = enc.conv_bias[wi].value(f, 0);
        for (int k = 0; k < w; ++k)
          for (Eigen::Index j = 0; j < E; ++j) acc += W(f, k * E + j) * cols[p + static_cast<std::size_t>(k)][static_cast<std::size_t>(j)];
        best = std::max(best, std::max(acc, 0.0));
      }
      out.push_back(best);
    }
  }
  return out;
}

double matching(const MatchingScorer& m, const Sequence& q, const Sequence& r) {
  const auto a = features(m.encoder, q), b = features(m.encoder, r);
  double s = m.bias.value(0, 0);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      s += a[i] * m.bilinear.value(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * b[j];
  return sig(s);
}

double joint(const JointScorer& m, const Sequence& q, const Sequence& r) {
  auto x = features(m.encoder, q);
  const auto b = features(m.encoder, r);
  x.insert(x.end(), b.begin(), b.end());
  double out = m.out_bias.value(0, 0);
  for (Eigen::Index h = 0; h < m.hidden_weight.value.rows(); ++h) {
    double acc = m.hidden_bias.value(h, 0);
    for (std::size_t j = 0; j < x.size(); ++j) acc += m.hidden_weight.value(h, static_cast<Eigen::Index>(j)) * x[j];
    out += m.out_weight.value(0, h) * std::tanh(acc);
  }
  return sig(out);
}

}  // namespace ref

}  // namespace

TEST(CalibratorScore, ZeroFinalLayerGivesExactlyOneHalf) {
  CalibratorEnsemble e = toy_ensemble(1);
  pin_scores(e, 0.0, 0.0, 0.0);
  const Sequence q{4, 5, 6}, r{7, 8, Vocabulary::kEos};
  for (Component c : kComponents) EXPECT_EQ(e.score(c, q, r).value(), 0.5) << to_string(c);
  EXPECT_EQ(e.ensemble_score(q, r).value(), 0.5);
}

TEST(CalibratorScore, InvariantToPadExtension) {
  const CalibratorEnsemble e = toy_ensemble(2);
  Rng rng(20);
  for (int trial = 0; trial < 20; ++trial) {
    const QueryResponsePair p = random_pair(rng, 15);
    Sequence padded = p.response;
    padded.insert(padded.end(), 1 + trial % 4, Vocabulary::kPad);
    for (Component c : kComponents) EXPECT_EQ(e.score(c, p.query, padded).value(), e.score(c, p.query, p.response).value());
  }
}

TEST(CalibratorScore, MatchesLoopLevelRecomputation) {
  const CalibratorEnsemble e = toy_ensemble(3, 7);  // three content tokens: ids 4, 5, 6
  const Sequence q{4, 6, 5}, r{5, 4, Vocabulary::kEos};
  EXPECT_NEAR(e.score(Component::Pointwise, q, r).value(), ref::matching(e.pt, q, r), 1e-12);
  EXPECT_NEAR(e.score(Component::Pairwise, q, r).value(), ref::matching(e.pair, q, r), 1e-12);
  EXPECT_NEAR(e.score(Component::NegativeSampling, q, r).value(), ref::joint(e.ns, q, r), 1e-12);
  // A single token is padded up to the widest filter.
  EXPECT_NEAR(e.score(Component::Pointwise, {6}, {4}).value(), ref::matching(e.pt, {6}, {4}), 1e-12);
}

TEST(CalibratorScore, AllScoresLieInTheUnitInterval) {
  Rng rng(4);
  CalibratorConfig cfg = toy_calibrator_config(15);
  cfg.init_radius = 3.0;  // push logits far from zero
  CalibratorEnsemble e(cfg);
  e.initialize(rng);
  for (int trial = 0; trial < 100; ++trial) {
    const QueryResponsePair p = random_pair(rng, 15);
    for (Component c : kComponents) {
      const double s = e.score(c, p.query, p.response).value();
      EXPECT_GE(s, 0.0);
      EXPECT_LE(s, 1.0);
    }
  }
}

TEST(CalibratorScore, ComponentsShareNoParameters) {
  const CalibratorEnsemble e = toy_ensemble(5);
  std::set<const Parameter*> seen;
  for (Component c : kComponents)
    for (const Parameter* p : e.parameters(c)) EXPECT_TRUE(seen.insert(p).second) << p->name;
  EXPECT_EQ(seen.size(), e.parameters().size());
}

TEST(CalibratorObjectives, NegativeSamplingPlugIns) {
  EXPECT_EQ(negative_sampling_objective(1.0, 1), 1.0);
  EXPECT_EQ(negative_sampling_objective(0.0, 0), 1.0);
  EXPECT_DOUBLE_EQ(negative_sampling_objective(0.3, 1), 0.3);
  EXPECT_DOUBLE_EQ(negative_sampling_objective(0.3, 0), 0.7);
}

TEST(CalibratorObjectives, PointwisePlugIns) {
  EXPECT_EQ(pointwise_loss(0.75, 0.5), 0.0625);
  EXPECT_EQ(pointwise_loss(0.4, 0.4), 0.0);
}

TEST(CalibratorObjectives, PairwisePlugIns) {
  EXPECT_EQ(pairwise_loss(0.25, 0.9, 0.5), 0.0);
  EXPECT_EQ(pairwise_loss(0.25, 0.6, 0.6), 0.25);
  EXPECT_DOUBLE_EQ(pairwise_loss(0.25, 0.4, 0.6), 0.45);
}

TEST(CalibratorObjectives, PairwiseIsNonNegativeAndZeroExactlyWhenMarginHolds) {
  Rng rng(6);
  for (int i = 0; i < 1000; ++i) {
    const double gb = uniform01(rng), gw = uniform01(rng);
    const double l = pairwise_loss(0.25, gb, gw);
    EXPECT_GE(l, 0.0);
    EXPECT_EQ(l == 0.0, gb - gw >= 0.25);
  }
}

TEST(CalibratorObjectives, EnsembleLossesEvaluateTheirComponentScores) {
  const CalibratorEnsemble e = toy_ensemble(7);
  const Sequence q{4, 5}, good{6, 7, 8}, bad{9, 4};
  const double g_ns = e.score(Component::NegativeSampling, q, good).value();
  EXPECT_NEAR(loss_negative_sampling(e, q, good, 1), g_ns, 1e-15);
  EXPECT_NEAR(loss_negative_sampling(e, q, good, 0), 1 - g_ns, 1e-15);
  EXPECT_THROW(loss_negative_sampling(e, q, good, 2), std::invalid_argument);
  const double g_pt = e.score(Component::Pointwise, q, good).value();
  EXPECT_NEAR(loss_pointwise(e, q, good, QualityScore(0.75)), pointwise_loss(0.75, g_pt), 1e-15);
  EXPECT_NEAR(loss_pairwise(e, q, good, bad),
              pairwise_loss(0.25, e.score(Component::Pairwise, q, good).value(),
                            e.score(Component::Pairwise, q, bad).value()),
              1e-15);
}

TEST(CalibratorObjectives, BatchPointwiseMeanEqualsExternalMse) {
  const auto planted = encoded_synthetic(4, 6, 3);
  CalibratorEnsemble e = toy_ensemble(8, static_cast<Eigen::Index>(planted.vocab.size()));
  double loss = 0.0, mse = 0.0;
  for (const auto& p : planted.corpus.pairs()) {
    loss += loss_pointwise(e, p.query, p.response, level_to_score(*p.level));
    const double d = level_to_score(*p.level).value() - e.score(Component::Pointwise, p.query, p.response).value();
    mse += d * d;
  }
  EXPECT_NEAR(loss / planted.corpus.size(), mse / planted.corpus.size(), 1e-14);
}

TEST(CalibratorGradients, AllThreeObjectivesMatchFiniteDifferences) {
  CalibratorConfig cfg = toy_calibrator_config(20);
  cfg.joint_init_radius = cfg.init_radius;  // the default D^ns start is too flat for a meaningful check
  Rng rng(9);
  CalibratorEnsemble e(cfg);
  e.initialize(rng);
  const Sequence q{4, 9, 12, 5}, better{7, 8, 15, Vocabulary::kEos}, worse{11, 6, Vocabulary::kEos};
  ASSERT_GT(loss_pairwise(e, q, better, worse), 0.0) << "hinge must be active for a meaningful check";
  for (int b : {1, 0}) {
    const auto ns = check_gradients(e.mutable_parameters(Component::NegativeSampling),
                                    [&](Tape& t) { return loss_negative_sampling(t, e, q, b ? better : worse, b); });
    EXPECT_LE(ns.max_relative_error, 1e-4) << ns.worst_parameter;
  }
  const auto pt = check_gradients(e.mutable_parameters(Component::Pointwise), [&](Tape& t) {
    return loss_pointwise(t, e, q, better, QualityScore(0.75));
  });
  EXPECT_LE(pt.max_relative_error, 1e-4) << pt.worst_parameter;
  const auto pair = check_gradients(e.mutable_parameters(Component::Pairwise),
                                    [&](Tape& t) { return loss_pairwise(t, e, q, better, worse); });
  EXPECT_LE(pair.max_relative_error, 1e-4) << pair.worst_parameter;
}

TEST(EnsembleScore, MeanOfPinnedComponents) {
  CalibratorEnsemble e = toy_ensemble(10);
  const Sequence q{4, 5}, r{6};
  pin_scores(e, logit(0.6), logit(0.6), logit(0.6));
  EXPECT_NEAR(e.ensemble_score(q, r).value(), 0.6, 1e-12);
  pin_scores(e, 1000.0, 0.0, -1000.0);
  EXPECT_NEAR(e.ensemble_score(q, r).value(), 0.5, 1e-12);
}

TEST(EnsembleScore, EqualsExternalMeanOnRandomPairs) {
  const CalibratorEnsemble e = toy_ensemble(11);
  Rng rng(110);
  for (int trial = 0; trial < 100; ++trial) {
    const QueryResponsePair p = random_pair(rng, 15);
    double sum = 0.0;
    for (Component c : kComponents) sum += e.score(c, p.query, p.response).value();
    EXPECT_NEAR(e.ensemble_score(p.query, p.response).value(), sum / 3.0, 1e-12);
    const double s = e.ensemble_score(p.query, p.response).value();
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, 1.0);
  }
}

TEST(Pretraining, RejectsUnusableCorpora) {
  const auto planted = encoded_synthetic(2, 5, 1);
  const CalibratorConfig cfg = toy_calibrator_config(static_cast<Eigen::Index>(planted.vocab.size()));
  CalibratorTrainConfig tc;
  tc.epochs = 1;

  Corpus unlabelled;
  for (const auto& p : planted.corpus.pairs()) unlabelled.add({p.query, p.response, std::nullopt});
  EXPECT_THROW(pretrain_calibrator(unlabelled, cfg, tc), std::invalid_argument);

  Corpus one_query;
  for (std::size_t i : planted.corpus.group(planted.corpus.keys().front())) one_query.add(planted.corpus[i]);
  EXPECT_THROW(pretrain_calibrator(one_query, cfg, tc), std::invalid_argument);

  Corpus no_adjacent;  // only L5 and L3 responses
  for (const auto& p : planted.corpus.pairs())
    if (*p.level == QualityLevel::L5 || *p.level == QualityLevel::L3) no_adjacent.add(p);
  EXPECT_THROW(pretrain_calibrator(no_adjacent, cfg, tc), std::invalid_argument);
}

TEST(Pretraining, IsDeterministicAndImprovesEveryObjective) {
  const auto planted = encoded_synthetic(4, 6, 2);
  CalibratorConfig cfg;
  cfg.vocab_size = static_cast<Eigen::Index>(planted.vocab.size());
  cfg.embed_dim = 16;
  cfg.filters = 12;
  cfg.joint_hidden = 12;
  CalibratorTrainConfig tc;
  tc.epochs = 8;
  CalibratorTrainLog log_a, log_b;
  const auto a = pretrain_calibrator(planted.corpus, cfg, tc, &log_a);
  const auto b = pretrain_calibrator(planted.corpus, cfg, tc, &log_b);
  EXPECT_EQ(a.checksum(), b.checksum());
  ASSERT_EQ(log_a.pt_loss.size(), 8u);
  EXPECT_GT(log_a.ns_objective.back(), log_a.ns_objective.front());
  EXPECT_LT(log_a.pt_loss.back(), log_a.pt_loss.front());
  EXPECT_LT(log_a.pair_loss.back(), log_a.pair_loss.front());
}

class PlantedCalibrator : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = new PlantedSplits(planted_splits());
    CalibratorConfig cfg;
    cfg.vocab_size = static_cast<Eigen::Index>(data_->vocab.size());
    ensemble_ = new CalibratorEnsemble(pretrain_calibrator(data_->train, cfg, CalibratorTrainConfig{}));
    eval_ = new CalibratorEvaluation(evaluate_calibrator(*ensemble_, data_->test, data_->vocab));
  }
  static void TearDownTestSuite() {
    delete eval_;
    delete ensemble_;
    delete data_;
  }
  static PlantedSplits* data_;
  static CalibratorEnsemble* ensemble_;
  static CalibratorEvaluation* eval_;
};

PlantedSplits* PlantedCalibrator::data_ = nullptr;
CalibratorEnsemble* PlantedCalibrator::ensemble_ = nullptr;
CalibratorEvaluation* PlantedCalibrator::eval_ = nullptr;

TEST_F(PlantedCalibrator, PairwiseOrdersHeldOutPairsTwoLevelsApart) { EXPECT_GE(eval_->far_accuracy, 0.9); }

TEST_F(PlantedCalibrator, PointwiseHeldOutMseIsSmall) { EXPECT_LE(eval_->pointwise_mse, 0.02); }

TEST_F(PlantedCalibrator, EnsembleMeansIncreaseAcrossLevels) {
  EXPECT_TRUE(eval_->ensemble_increasing()) << eval_->ensemble_means[0] << ' ' << eval_->ensemble_means[1] << ' '
                                           << eval_->ensemble_means[2] << ' ' << eval_->ensemble_means[3] << ' '
                                           << eval_->ensemble_means[4];
}
