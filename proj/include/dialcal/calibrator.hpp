#pragma once

// Rank-aware calibrator: three independently parameterised quality scorers.
//
//   D^ns    joint scorer    g_J = sigmoid(w . tanh(W [q; r] + b) + b')
//   D^pt    matching scorer g_M = sigmoid(q^T M r + b)
//   D^pair  matching scorer g_M with its own parameters
//
// q and r are sentence vectors from a multi-channel CNN (one encoder per
// component, shared between query and response). The ensemble quality of a
// response is the mean of the three scores.

#include "dialcal/autograd.hpp"
#include "dialcal/checkpoint.hpp"
#include "dialcal/corpus.hpp"
#include "dialcal/optim.hpp"
#include "dialcal/random.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace dialcal {

struct CalibratorConfig {
  Eigen::Index vocab_size = 0;
  Eigen::Index embed_dim = 64;
  Eigen::Index filters = 100;      // per width
  std::vector<int> widths{1, 2, 3};
  Eigen::Index joint_hidden = 100;
  double margin = 0.25;
  double init_radius = 0.08;
  double embedding_init_radius = 0.25;
  double joint_init_radius = 0.02;  // D^ns hidden and output layers
  double bilinear_identity = 1.0;   // matching forms start at this multiple of I plus noise

  Eigen::Index feature_dim() const { return filters * static_cast<Eigen::Index>(widths.size()); }
  int max_width() const { return *std::max_element(widths.begin(), widths.end()); }
};

enum class Component { NegativeSampling, Pointwise, Pairwise };

inline constexpr std::array<Component, 3> kComponents = {Component::NegativeSampling, Component::Pointwise,
                                                         Component::Pairwise};

inline const char* to_string(Component c) {
  switch (c) {
    case Component::NegativeSampling: return "ns";
    case Component::Pointwise: return "pt";
    case Component::Pairwise: return "pair";
  }
  return "?";
}

/// Multi-channel convolution + max-over-time pooling. Special tokens are
/// dropped and inputs shorter than the widest filter are zero-padded.
struct SentenceEncoder {
  Parameter embedding;
  std::vector<Parameter> conv_weight, conv_bias;
  std::vector<int> widths;

  SentenceEncoder() = default;
  SentenceEncoder(const std::string& prefix, const CalibratorConfig& cfg) : widths(cfg.widths) {
    embedding = Parameter(prefix + ".embedding", cfg.vocab_size, cfg.embed_dim);
    for (int w : cfg.widths) {
      conv_weight.emplace_back(prefix + ".conv" + std::to_string(w) + ".weight", cfg.filters, w * cfg.embed_dim);
      conv_bias.emplace_back(prefix + ".conv" + std::to_string(w) + ".bias", cfg.filters, 1);
    }
  }

  void collect(std::vector<const Parameter*>& out) const {
    out.push_back(&embedding);
    for (std::size_t i = 0; i < widths.size(); ++i) {
      out.push_back(&conv_weight[i]);
      out.push_back(&conv_bias[i]);
    }
  }

  Var encode(Tape& tape, const Sequence& tokens) const {
    std::vector<Var> cols;
    for (TokenId t : tokens) {
      if (t == Vocabulary::kPad || t == Vocabulary::kBos || t == Vocabulary::kEos) continue;
      if (t < 0 || t >= embedding.value.rows()) throw std::out_of_range("calibrator token id out of range");
      cols.push_back(ag::lookup(tape, embedding, t));
    }
    const int max_w = *std::max_element(widths.begin(), widths.end());
    while (static_cast<int>(cols.size()) < max_w) cols.push_back(tape.constant(Matrix::Zero(embedding.value.cols(), 1)));
    const Var x = ag::concat_cols(cols);
    std::vector<Var> pooled;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const Var windows = ag::unfold_windows(x, widths[i]);
      pooled.push_back(ag::max_over_cols(
          ag::relu(ag::affine(tape.param(conv_weight[i]), windows, tape.param(conv_bias[i])))));
    }
    return ag::concat_rows(pooled);
  }

  Vector features(const Sequence& tokens) const {
    Tape tape(false);
    return encode(tape, tokens).value().col(0);
  }
};

struct MatchingScorer {
  SentenceEncoder encoder;
  Parameter bilinear;  // F x F
  Parameter bias;      // 1 x 1

  MatchingScorer() = default;
  MatchingScorer(const std::string& prefix, const CalibratorConfig& cfg)
      : encoder(prefix, cfg),
        bilinear(prefix + ".bilinear", cfg.feature_dim(), cfg.feature_dim()),
        bias(prefix + ".bias", 1, 1) {}

  void collect(std::vector<const Parameter*>& out) const {
    encoder.collect(out);
    out.push_back(&bilinear);
    out.push_back(&bias);
  }

  Var score(Tape& tape, const Var& q, const Var& r) const {
    const Var s = ag::matmul(ag::transpose(q), ag::matmul(tape.param(bilinear), r));
    return ag::sigmoid(ag::add(s, tape.param(bias)));
  }

  double score(const Vector& q, const Vector& r) const {
    return ag::sigmoid(q.dot(bilinear.value * r) + bias.value(0, 0));
  }
};

struct JointScorer {
  SentenceEncoder encoder;
  Parameter hidden_weight;  // J x 2F
  Parameter hidden_bias;    // J x 1
  Parameter out_weight;     // 1 x J
  Parameter out_bias;       // 1 x 1

  JointScorer() = default;
  JointScorer(const std::string& prefix, const CalibratorConfig& cfg)
      : encoder(prefix, cfg),
        hidden_weight(prefix + ".hidden.weight", cfg.joint_hidden, 2 * cfg.feature_dim()),
        hidden_bias(prefix + ".hidden.bias", cfg.joint_hidden, 1),
        out_weight(prefix + ".out.weight", 1, cfg.joint_hidden),
        out_bias(prefix + ".out.bias", 1, 1) {}

  void collect(std::vector<const Parameter*>& out) const {
    encoder.collect(out);
    out.push_back(&hidden_weight);
    out.push_back(&hidden_bias);
    out.push_back(&out_weight);
    out.push_back(&out_bias);
  }

  Var score(Tape& tape, const Var& q, const Var& r) const {
    const Var hidden =
        ag::tanh(ag::affine(tape.param(hidden_weight), ag::concat_rows({q, r}), tape.param(hidden_bias)));
    return ag::sigmoid(ag::affine(tape.param(out_weight), hidden, tape.param(out_bias)));
  }

  double score(const Vector& q, const Vector& r) const {
    Vector joint(q.size() + r.size());
    joint << q, r;
    const Vector hidden = (hidden_weight.value * joint + hidden_bias.value.col(0)).array().tanh();
    return ag::sigmoid(out_weight.value.row(0).dot(hidden) + out_bias.value(0, 0));
  }
};

class CalibratorEnsemble {
 public:
  CalibratorEnsemble() = default;
  explicit CalibratorEnsemble(const CalibratorConfig& cfg)
      : ns("ns", cfg), pt("pt", cfg), pair("pair", cfg), config_(cfg) {
    if (cfg.vocab_size < Vocabulary::kNumReserved + 1) throw std::invalid_argument("vocabulary too small");
    if (cfg.widths.empty()) throw std::invalid_argument("calibrator needs at least one filter width");
  }

  const CalibratorConfig& config() const { return config_; }
  double margin() const { return config_.margin; }

  std::vector<const Parameter*> parameters() const {
    std::vector<const Parameter*> out;
    ns.collect(out);
    pt.collect(out);
    pair.collect(out);
    return out;
  }

  std::vector<const Parameter*> parameters(Component c) const {
    std::vector<const Parameter*> out;
    switch (c) {
      case Component::NegativeSampling: ns.collect(out); break;
      case Component::Pointwise: pt.collect(out); break;
      case Component::Pairwise: pair.collect(out); break;
    }
    return out;
  }

  std::vector<Parameter*> mutable_parameters(Component c) {
    std::vector<Parameter*> out;
    for (const Parameter* p : parameters(c)) out.push_back(const_cast<Parameter*>(p));
    return out;
  }

  void initialize(Rng& rng) {
    for (Component c : kComponents)
      for (Parameter* p : mutable_parameters(c)) {
        init_uniform(*p, init_radius_for(p->name), rng);
        if (p->name.ends_with(".bilinear")) p->value.diagonal().array() += config_.bilinear_identity;
      }
  }

  double init_radius_for(const std::string& name) const {
    if (name.ends_with(".embedding")) return config_.embedding_init_radius;
    if (name.starts_with("ns.hidden.") || name.starts_with("ns.out.")) return config_.joint_init_radius;
    return config_.init_radius;
  }

  std::uint64_t checksum() const { return parameter_checksum(parameters()); }

  /// Score of one component on a tape (for training and gradient checks).
  Var score(Tape& tape, Component c, const Sequence& query, const Sequence& response) const {
    switch (c) {
      case Component::NegativeSampling:
        return ns.score(tape, ns.encoder.encode(tape, query), ns.encoder.encode(tape, response));
      case Component::Pointwise:
        return pt.score(tape, pt.encoder.encode(tape, query), pt.encoder.encode(tape, response));
      case Component::Pairwise:
        return pair.score(tape, pair.encoder.encode(tape, query), pair.encoder.encode(tape, response));
    }
    throw std::logic_error("unknown component");
  }

  QualityScore score(Component c, const Sequence& query, const Sequence& response) const {
    Tape tape(false);
    return QualityScore(std::clamp(score(tape, c, query, response).scalar(), 0.0, 1.0));
  }

  /// Arithmetic mean of the three component scores.
  QualityScore ensemble_score(const Sequence& query, const Sequence& response) const {
    return bind(query).score(response);
  }

  /// Query-side features computed once, for scoring many responses to one query.
  class BoundQuery {
   public:
    BoundQuery(const CalibratorEnsemble& e, const Sequence& query)
        : e_(&e), ns_(e.ns.encoder.features(query)), pt_(e.pt.encoder.features(query)),
          pair_(e.pair.encoder.features(query)) {}

    std::array<double, 3> components(const Sequence& response) const {
      return {e_->ns.score(ns_, e_->ns.encoder.features(response)), e_->pt.score(pt_, e_->pt.encoder.features(response)),
              e_->pair.score(pair_, e_->pair.encoder.features(response))};
    }

    QualityScore score(const Sequence& response) const {
      const auto c = components(response);
      return QualityScore(std::clamp((c[0] + c[1] + c[2]) / 3.0, 0.0, 1.0));
    }

   private:
    const CalibratorEnsemble* e_;
    Vector ns_, pt_, pair_;
  };

  BoundQuery bind(const Sequence& query) const { return BoundQuery(*this, query); }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.format = CheckpointFormat::Calibrator;
    ck.dims = {{"vocab_size", static_cast<std::uint64_t>(config_.vocab_size)},
               {"embed_dim", static_cast<std::uint64_t>(config_.embed_dim)},
               {"filters", static_cast<std::uint64_t>(config_.filters)},
               {"joint_hidden", static_cast<std::uint64_t>(config_.joint_hidden)},
               {"num_widths", static_cast<std::uint64_t>(config_.widths.size())},
               // margin stored in micro-units
               {"margin_micro", static_cast<std::uint64_t>(std::llround(config_.margin * 1e6))}};
    for (std::size_t i = 0; i < config_.widths.size(); ++i)
      ck.dims["width" + std::to_string(i)] = static_cast<std::uint64_t>(config_.widths[i]);
    ck.blocks = snapshot_blocks(parameters());
    return ck;
  }

  static CalibratorEnsemble from_checkpoint(const Checkpoint& ck) {
    if (ck.format != CheckpointFormat::Calibrator) throw std::runtime_error("checkpoint is not a calibrator");
    CalibratorConfig cfg;
    cfg.vocab_size = static_cast<Eigen::Index>(ck.dim("vocab_size"));
    cfg.embed_dim = static_cast<Eigen::Index>(ck.dim("embed_dim"));
    cfg.filters = static_cast<Eigen::Index>(ck.dim("filters"));
    cfg.joint_hidden = static_cast<Eigen::Index>(ck.dim("joint_hidden"));
    cfg.margin = static_cast<double>(ck.dim("margin_micro")) / 1e6;
    cfg.widths.clear();
    for (std::uint64_t i = 0; i < ck.dim("num_widths"); ++i)
      cfg.widths.push_back(static_cast<int>(ck.dim("width" + std::to_string(i))));
    CalibratorEnsemble e(cfg);
    std::vector<Parameter*> params;
    for (Component c : kComponents)
      for (Parameter* p : e.mutable_parameters(c)) params.push_back(p);
    restore_parameters(ck, params);
    return e;
  }

  JointScorer ns;
  MatchingScorer pt;
  MatchingScorer pair;

 private:
  CalibratorConfig config_;
};

// ---------------------------------------------------------------------------
// Objectives

/// b * g + (1 - b) * (1 - g); maximised during pre-training.
inline double negative_sampling_objective(double g, int b) { return b * g + (1 - b) * (1.0 - g); }

inline double pointwise_loss(double gold, double g) { return (gold - g) * (gold - g); }

inline double pairwise_loss(double margin, double g_better, double g_worse) {
  return std::max(0.0, margin - g_better + g_worse);
}

inline Var loss_negative_sampling(Tape& tape, const CalibratorEnsemble& e, const Sequence& query,
                                  const Sequence& response, int b) {
  if (b != 0 && b != 1) throw std::invalid_argument("b must be 0 or 1");
  const Var g = e.score(tape, Component::NegativeSampling, query, response);
  return b == 1 ? g : ag::add_scalar(ag::scale(g, -1.0), 1.0);
}

inline Var loss_pointwise(Tape& tape, const CalibratorEnsemble& e, const Sequence& query, const Sequence& response,
                          QualityScore gold) {
  const Var g = e.score(tape, Component::Pointwise, query, response);
  return ag::square(ag::add_scalar(ag::scale(g, -1.0), gold.value()));
}

inline Var loss_pairwise(Tape& tape, const CalibratorEnsemble& e, const Sequence& query, const Sequence& better,
                         const Sequence& worse) {
  const Var gb = e.score(tape, Component::Pairwise, query, better);
  const Var gw = e.score(tape, Component::Pairwise, query, worse);
  return ag::relu(ag::add_scalar(ag::sub(gw, gb), e.margin()));
}

inline double loss_negative_sampling(const CalibratorEnsemble& e, const Sequence& query, const Sequence& response,
                                     int b) {
  Tape tape(false);
  return loss_negative_sampling(tape, e, query, response, b).scalar();
}

inline double loss_pointwise(const CalibratorEnsemble& e, const Sequence& query, const Sequence& response,
                             QualityScore gold) {
  Tape tape(false);
  return loss_pointwise(tape, e, query, response, gold).scalar();
}

inline double loss_pairwise(const CalibratorEnsemble& e, const Sequence& query, const Sequence& better,
                            const Sequence& worse) {
  Tape tape(false);
  return loss_pairwise(tape, e, query, better, worse).scalar();
}

// ---------------------------------------------------------------------------
// Pre-training

struct CalibratorTrainConfig {
  int epochs = 20;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 7;
};

struct CalibratorTrainLog {
  std::vector<double> ns_objective, pt_loss, pair_loss;  // per-epoch means
};

/// Trains each component on its own stream: D^ns on every pair plus one
/// sampled negative per pair, D^pt on every labelled pair, D^pair on every
/// adjacent-level pair of every query. Batches of the three streams are
/// interleaved; the components share no parameters.
inline CalibratorEnsemble pretrain_calibrator(const Corpus& corpus, const CalibratorConfig& cfg,
                                              const CalibratorTrainConfig& tc, CalibratorTrainLog* log = nullptr) {
  if (!corpus.labelled()) throw std::invalid_argument("calibrator pre-training needs quality labels");
  if (corpus.query_count() < 2) throw std::invalid_argument("calibrator pre-training needs at least two queries");
  std::vector<std::pair<std::size_t, std::size_t>> ranked_pairs;
  for (const auto& [key, _] : corpus.groups()) {
    auto adj = enumerate_adjacent_pairs(corpus, key);
    ranked_pairs.insert(ranked_pairs.end(), adj.begin(), adj.end());
  }
  if (ranked_pairs.empty()) throw std::invalid_argument("no adjacent-level response pairs: D^pair is untrainable");

  Rng rng(tc.seed);
  CalibratorEnsemble e(cfg);
  e.initialize(rng);
  Adam opt_ns(e.mutable_parameters(Component::NegativeSampling), {tc.learning_rate, 0.9, 0.999, 1e-8, tc.weight_decay});
  Adam opt_pt(e.mutable_parameters(Component::Pointwise), {tc.learning_rate, 0.9, 0.999, 1e-8, tc.weight_decay});
  Adam opt_pair(e.mutable_parameters(Component::Pairwise), {tc.learning_rate, 0.9, 0.999, 1e-8, tc.weight_decay});

  struct NsExample {
    std::size_t pair;
    Sequence negative;
  };
  const std::size_t bs = std::max<std::size_t>(1, tc.batch_size);

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::vector<NsExample> ns_stream;
    for (std::size_t i = 0; i < corpus.size(); ++i)
      ns_stream.push_back({i, sample_negative(corpus, corpus[i].query, rng)});
    std::vector<std::size_t> pt_stream(corpus.size());
    for (std::size_t i = 0; i < pt_stream.size(); ++i) pt_stream[i] = i;
    std::vector<std::pair<std::size_t, std::size_t>> pair_stream = ranked_pairs;
    shuffle(ns_stream.begin(), ns_stream.end(), rng);
    shuffle(pt_stream.begin(), pt_stream.end(), rng);
    shuffle(pair_stream.begin(), pair_stream.end(), rng);

    double ns_sum = 0, pt_sum = 0, pair_sum = 0;
    std::size_t ns_pos = 0, pt_pos = 0, pair_pos = 0;
    while (ns_pos < ns_stream.size() || pt_pos < pt_stream.size() || pair_pos < pair_stream.size()) {
      if (ns_pos < ns_stream.size()) {
        const std::size_t end = std::min(ns_stream.size(), ns_pos + bs);
        Tape tape;
        std::vector<Var> terms;
        for (std::size_t k = ns_pos; k < end; ++k) {
          const auto& p = corpus[ns_stream[k].pair];
          terms.push_back(loss_negative_sampling(tape, e, p.query, p.response, 1));
          terms.push_back(loss_negative_sampling(tape, e, p.query, ns_stream[k].negative, 0));
        }
        const Var objective = ag::sum(terms);
        ns_sum += objective.scalar();
        opt_ns.zero_grad();
        tape.backward(ag::scale(objective, -1.0 / static_cast<double>(terms.size())));
        opt_ns.step();
        ns_pos = end;
      }
      if (pt_pos < pt_stream.size()) {
        const std::size_t end = std::min(pt_stream.size(), pt_pos + bs);
        Tape tape;
        std::vector<Var> terms;
        for (std::size_t k = pt_pos; k < end; ++k) {
          const auto& p = corpus[pt_stream[k]];
          terms.push_back(loss_pointwise(tape, e, p.query, p.response, level_to_score(*p.level)));
        }
        const Var loss = ag::sum(terms);
        pt_sum += loss.scalar();
        opt_pt.zero_grad();
        tape.backward(ag::scale(loss, 1.0 / static_cast<double>(terms.size())));
        opt_pt.step();
        pt_pos = end;
      }
      if (pair_pos < pair_stream.size()) {
        const std::size_t end = std::min(pair_stream.size(), pair_pos + bs);
        Tape tape;
        std::vector<Var> terms;
        for (std::size_t k = pair_pos; k < end; ++k) {
          const auto& better = corpus[pair_stream[k].first];
          const auto& worse = corpus[pair_stream[k].second];
          terms.push_back(loss_pairwise(tape, e, better.query, better.response, worse.response));
        }
        const Var loss = ag::sum(terms);
        pair_sum += loss.scalar();
        opt_pair.zero_grad();
        tape.backward(ag::scale(loss, 1.0 / static_cast<double>(terms.size())));
        opt_pair.step();
        pair_pos = end;
      }
    }
    if (log) {
      log->ns_objective.push_back(ns_sum / static_cast<double>(2 * ns_stream.size()));
      log->pt_loss.push_back(pt_sum / static_cast<double>(pt_stream.size()));
      log->pair_loss.push_back(pair_sum / static_cast<double>(pair_stream.size()));
    }
  }
  return e;
}

}  // namespace dialcal
