#pragma once

// Joint training of the generator: J = L_NLL + L_RC + L_KI with a frozen
// calibrator, per-epoch rollout snapshots, and ablation switches.

#include "dialcal/autograd.hpp"
#include "dialcal/calibrator.hpp"
#include "dialcal/corpus.hpp"
#include "dialcal/knowledge.hpp"
#include "dialcal/optim.hpp"
#include "dialcal/random.hpp"
#include "dialcal/rollout.hpp"
#include "dialcal/seq2seq.hpp"

#include <cmath>
#include <functional>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dialcal {

struct TrainConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;  // Adam first-moment decay
  double beta2 = 0.999;
  std::size_t batch_size = 32;
  int epochs = 10;
  int rollouts = 3;
  std::size_t max_len = 20;
  double rollout_temperature = 1.0;
  bool use_rc = true;
  bool use_ki = true;
  bool use_gt_instance_weight = false;
  std::size_t keywords_per_response = 3;
  double clip_norm = 5.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(learning_rate > 0)) throw std::invalid_argument("learning_rate must be > 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("betas must lie in [0, 1)");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (rollouts < 1) throw std::invalid_argument("rollouts must be >= 1");
    if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
  }

  RolloutOptions rollout_options() const { return {rollouts, max_len, rollout_temperature}; }
};

namespace detail {
inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("bad boolean for " + key + ": " + v);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}
}  // namespace detail

/// Reads `key = value` lines; '#' starts a comment. Unknown keys are errors.
inline TrainConfig parse_train_config(std::istream& in, TrainConfig cfg = {}) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    try {
      if (key == "learning_rate") cfg.learning_rate = std::stod(value);
      else if (key == "beta1" || key == "decay_rate") cfg.beta1 = std::stod(value);
      else if (key == "beta2") cfg.beta2 = std::stod(value);
      else if (key == "batch_size") cfg.batch_size = std::stoul(value);
      else if (key == "epochs") cfg.epochs = std::stoi(value);
      else if (key == "rollouts") cfg.rollouts = std::stoi(value);
      else if (key == "max_len") cfg.max_len = std::stoul(value);
      else if (key == "rollout_temperature") cfg.rollout_temperature = std::stod(value);
      else if (key == "use_rc") cfg.use_rc = detail::parse_bool(key, value);
      else if (key == "use_ki") cfg.use_ki = detail::parse_bool(key, value);
      else if (key == "use_gt_instance_weight") cfg.use_gt_instance_weight = detail::parse_bool(key, value);
      else if (key == "keywords_per_response") cfg.keywords_per_response = std::stoul(value);
      else if (key == "clip_norm") cfg.clip_norm = std::stod(value);
      else if (key == "seed") cfg.seed = std::stoull(value);
      else throw std::invalid_argument("unknown config key: " + key);
    } catch (const std::invalid_argument&) {
      throw;
    } catch (const std::exception&) {
      throw std::invalid_argument("bad value for " + key + ": " + value);
    }
  }
  cfg.validate();
  return cfg;
}

inline TrainConfig parse_train_config(const std::string& text, TrainConfig cfg = {}) {
  std::istringstream in(text);
  return parse_train_config(in, cfg);
}

struct LossBreakdown {
  double nll = 0.0, rc = 0.0, ki = 0.0;
  double total() const { return nll + rc + ki; }
};

struct JointTerms {
  Var nll, rc, ki, total;
  LossBreakdown values() const { return {nll.scalar(), rc.scalar(), ki.scalar()}; }
};

/// level_to_score(level) * NLL: sentence-level weighting by the gold label.
inline Var instance_weighted_loss(const GeneratorModel& model, Tape& tape, const QueryResponsePair& pair) {
  if (!pair.level) throw std::invalid_argument("instance weighting needs a labelled pair");
  const double w = level_to_score(*pair.level).value();
  const KnowledgeUse use = model.has_knowledge() ? KnowledgeUse::Active : KnowledgeUse::Off;
  return ag::scale(sequence_nll(model, tape, pair.query, pair.response, use), w);
}

inline double instance_weighted_loss(const GeneratorModel& model, const QueryResponsePair& pair) {
  Tape tape(false);
  return instance_weighted_loss(model, tape, pair).scalar();
}

/// All three terms from one teacher-forced pass. `q` is required when RC is
/// on and `annotation` when KI is on; disabled terms are exact zeros.
inline JointTerms joint_loss(const GeneratorModel& model, Tape& tape, const QueryResponsePair& pair,
                             const TrainConfig& cfg, const TokenQualityVector* q,
                             const KeywordAnnotation* annotation) {
  if (cfg.use_rc && !q) throw std::invalid_argument("RC is enabled but no token quality vector was given");
  if (cfg.use_ki && !model.has_knowledge()) throw std::invalid_argument("KI is enabled but the model has no knowledge memory");
  if (cfg.use_ki && !annotation) throw std::invalid_argument("KI is enabled but no keyword annotation was given");
  if (cfg.use_gt_instance_weight && !pair.level) throw std::invalid_argument("instance weighting needs a labelled pair");

  const KnowledgeUse use = model.has_knowledge() ? KnowledgeUse::Active : KnowledgeUse::Off;
  const ForcedPass fp = teacher_force(model, tape, pair.query, pair.response, use);
  if (fp.gold_log_probs.empty()) throw std::invalid_argument("joint_loss needs a non-empty response");

  JointTerms t;
  t.nll = ag::scale(ag::sum(fp.gold_log_probs), -1.0);
  if (cfg.use_gt_instance_weight) t.nll = ag::scale(t.nll, level_to_score(*pair.level).value());
  t.rc = cfg.use_rc ? calibrated_loss(tape, fp.gold_log_probs, *q) : tape.scalar_constant(0.0);
  t.ki = cfg.use_ki ? ki_loss(tape, fp.alignments, *annotation) : tape.scalar_constant(0.0);
  t.total = ag::add(ag::add(t.nll, t.rc), t.ki);
  return t;
}

/// Self-contained evaluation of J: the rollout policy is the model itself.
inline LossBreakdown joint_loss(const GeneratorModel& model, const CalibratorEnsemble* calibrator,
                                const QueryResponsePair& pair, const KeywordAnnotation* annotation,
                                const TrainConfig& cfg, Rng& rng) {
  if (cfg.use_rc && !calibrator) throw std::invalid_argument("RC is enabled but no calibrator was given");
  std::optional<TokenQualityVector> q;
  if (cfg.use_rc) q = token_quality_vector(model, *calibrator, pair, cfg.rollout_options(), rng);
  Tape tape(false);
  return joint_loss(model, tape, pair, cfg, q ? &*q : nullptr, annotation).values();
}

/// Per-token NLL over a corpus (sum of NLL / number of response tokens).
inline double mean_token_nll(const GeneratorModel& model, const Corpus& corpus) {
  if (corpus.empty()) return std::numeric_limits<double>::quiet_NaN();
  const KnowledgeUse use = model.has_knowledge() ? KnowledgeUse::Active : KnowledgeUse::Off;
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const auto& p : corpus.pairs()) {
    nll += sequence_nll(model, p, use);
    tokens += unpad(p.response).size();
  }
  return nll / static_cast<double>(tokens);
}

struct EpochMetrics {
  int epoch = 0;
  double nll = 0.0, rc = 0.0, ki = 0.0;  // per-sample means over the epoch
  double val_nll = 0.0;                  // per-token
};

inline void write_metric_log_header(std::ostream& out) { out << "epoch,L_NLL,L_RC,L_KI,val_NLL\n"; }

inline void write_metric_log_row(std::ostream& out, const EpochMetrics& m) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(8) << m.epoch << ',' << m.nll << ',' << m.rc << ',' << m.ki << ','
    << m.val_nll << '\n';
  out << s.str();
}

inline void write_metric_log(std::ostream& out, const std::vector<EpochMetrics>& log) {
  write_metric_log_header(out);
  for (const auto& m : log) write_metric_log_row(out, m);
}

struct TrainHooks {
  std::function<void(const EpochMetrics&, const GeneratorModel&)> on_epoch;
};

/// Trains `model` in place. Batches come from an Rng seeded with cfg.seed;
/// rollouts for sample i in epoch e use the stream mix_seed(seed, e, i), so
/// turning RC on does not change the batch order.
inline std::vector<EpochMetrics> train(GeneratorModel& model, const Corpus& train_set, const Corpus& valid_set,
                                       const TrainConfig& cfg, const CalibratorEnsemble* calibrator = nullptr,
                                       const std::vector<KeywordAnnotation>* annotations = nullptr,
                                       const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("training corpus is empty");
  if (cfg.use_rc) {
    if (!calibrator) throw std::invalid_argument("RC is enabled but no pretrained calibrator was supplied");
    if (calibrator->config().vocab_size != model.vocab_size())
      throw std::invalid_argument("calibrator and generator vocabularies differ");
  }
  if (cfg.use_ki) {
    if (!model.has_knowledge()) throw std::invalid_argument("KI is enabled but the model has no knowledge memory");
    if (!annotations || annotations->size() != train_set.size())
      throw std::invalid_argument("KI needs one keyword annotation per training pair");
  }
  const std::uint64_t calibrator_sum = calibrator ? calibrator->checksum() : 0;

  auto params = model.parameters();
  Adam opt(params, {cfg.learning_rate, cfg.beta1, cfg.beta2});
  Rng batch_rng(cfg.seed);
  std::vector<EpochMetrics> log;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const GeneratorModel snapshot = cfg.use_rc ? model : GeneratorModel{};
    EpochMetrics m;
    m.epoch = epoch;
    const auto batches = make_batches(train_set, cfg.batch_size, batch_rng);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const Batch& batch = batches[b];
      Tape tape;
      std::vector<Var> totals;
      for (std::size_t row = 0; row < batch.size(); ++row) {
        const std::size_t idx = batch.indices[row];
        const QueryResponsePair& pair = train_set[idx];
        std::optional<TokenQualityVector> q;
        if (cfg.use_rc && calibrator) {
          Rng rollout_rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch), idx));
          q = token_quality_vector(snapshot, *calibrator, pair, cfg.rollout_options(), rollout_rng);
        }
        const JointTerms terms =
            joint_loss(model, tape, pair, cfg, q ? &*q : nullptr, cfg.use_ki ? &(*annotations)[idx] : nullptr);
        m.nll += terms.nll.scalar();
        m.rc += terms.rc.scalar();
        m.ki += terms.ki.scalar();
        totals.push_back(terms.total);
      }
      const Var loss = ag::scale(ag::sum(totals), 1.0 / static_cast<double>(totals.size()));
      if (!std::isfinite(loss.scalar()))
        throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b));
      opt.zero_grad();
      tape.backward(loss);
      clip_grad_norm(params, cfg.clip_norm);
      opt.step();
    }
    const double n = static_cast<double>(train_set.size());
    m.nll /= n;
    m.rc /= n;
    m.ki /= n;
    m.val_nll = mean_token_nll(model, valid_set);
    log.push_back(m);
    if (hooks.on_epoch) hooks.on_epoch(m, model);
  }
  if (calibrator && calibrator->checksum() != calibrator_sum)
    throw std::logic_error("calibrator parameters changed during generator training");
  return log;
}

}  // namespace dialcal
