#pragma once

// Attention encoder-decoder generator.
//
//   encoder   stacked bidirectional LSTM; memory h_i = [fwd_i; bwd_i] (2H wide)
//   bridge    decoder layer l starts at h = B_l [fwd_n; bwd_1] + b_l, c = 0
//   attention a_t = softmax_i(s_{t-1}^T W_a h_i), c_t = sum_i a_t,i h_i
//   decoder   stacked LSTM fed [emb(y_{t-1}); c_t]; s_t is the top hidden state
//   output    p(. | X, y_<t) = softmax(W_o [s_t; c^k_t] + b_o), where the
//             knowledge summary c^k_t is present only when a memory is attached

#include "dialcal/autograd.hpp"
#include "dialcal/checkpoint.hpp"
#include "dialcal/corpus.hpp"
#include "dialcal/knowledge.hpp"
#include "dialcal/random.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace dialcal {

struct GeneratorConfig {
  Eigen::Index vocab_size = 0;
  Eigen::Index embed_dim = 300;
  Eigen::Index hidden_dim = 500;
  int encoder_layers = 2;
  int decoder_layers = 2;
  Eigen::Index dim_k = 30;  // knowledge memory width, used only when a lexicon is attached
  double init_radius = 0.08;
};

struct LstmLayer {
  Parameter weight;  // 4H x (input + H), gate order (input, forget, output, candidate)
  Parameter bias;    // 4H x 1

  LstmLayer() = default;
  LstmLayer(const std::string& name, Eigen::Index input, Eigen::Index hidden)
      : weight(name + ".weight", 4 * hidden, input + hidden), bias(name + ".bias", 4 * hidden, 1) {}
};

class GeneratorModel {
 public:
  GeneratorModel() = default;

  GeneratorModel(const GeneratorConfig& cfg, std::optional<KeywordLexicon> lexicon = std::nullopt)
      : config_(cfg) {
    if (cfg.vocab_size < Vocabulary::kNumReserved + 1) throw std::invalid_argument("vocabulary too small");
    if (cfg.encoder_layers < 1 || cfg.decoder_layers < 1) throw std::invalid_argument("need at least one layer");
    const auto E = cfg.embed_dim, H = cfg.hidden_dim, V = cfg.vocab_size;
    embedding = Parameter("embedding", V, E);
    for (int l = 0; l < cfg.encoder_layers; ++l) {
      const auto in = l == 0 ? E : 2 * H;
      encoder_fwd.emplace_back("encoder.fwd." + std::to_string(l), in, H);
      encoder_bwd.emplace_back("encoder.bwd." + std::to_string(l), in, H);
    }
    for (int l = 0; l < cfg.decoder_layers; ++l) {
      bridge_weight.emplace_back("bridge." + std::to_string(l) + ".weight", H, 2 * H);
      bridge_bias.emplace_back("bridge." + std::to_string(l) + ".bias", H, 1);
      decoder.emplace_back("decoder." + std::to_string(l), l == 0 ? E + 2 * H : H, H);
    }
    attention = Parameter("attention", H, 2 * H);
    Eigen::Index out_in = H;
    if (lexicon) {
      knowledge = KnowledgeMemory{std::move(*lexicon), Parameter("knowledge.keys", 0, 0),
                                  Parameter("knowledge.alignment", 0, 0)};
      knowledge->keys = Parameter("knowledge.keys", static_cast<Eigen::Index>(knowledge->lexicon.size()), cfg.dim_k);
      knowledge->alignment = Parameter("knowledge.alignment", H, cfg.dim_k);
      out_in += cfg.dim_k;
    }
    output_weight = Parameter("output.weight", V, out_in);
    output_bias = Parameter("output.bias", V, 1);
  }

  const GeneratorConfig& config() const { return config_; }
  Eigen::Index vocab_size() const { return config_.vocab_size; }
  Eigen::Index hidden_dim() const { return config_.hidden_dim; }
  bool has_knowledge() const { return knowledge.has_value(); }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (const Parameter* p : std::as_const(*this).parameters()) out.push_back(const_cast<Parameter*>(p));
    return out;
  }

  std::vector<const Parameter*> parameters() const {
    std::vector<const Parameter*> out{&embedding};
    for (std::size_t l = 0; l < encoder_fwd.size(); ++l) {
      out.push_back(&encoder_fwd[l].weight);
      out.push_back(&encoder_fwd[l].bias);
      out.push_back(&encoder_bwd[l].weight);
      out.push_back(&encoder_bwd[l].bias);
    }
    for (std::size_t l = 0; l < decoder.size(); ++l) {
      out.push_back(&bridge_weight[l]);
      out.push_back(&bridge_bias[l]);
      out.push_back(&decoder[l].weight);
      out.push_back(&decoder[l].bias);
    }
    out.push_back(&attention);
    out.push_back(&output_weight);
    out.push_back(&output_bias);
    if (knowledge) {
      out.push_back(&knowledge->keys);
      out.push_back(&knowledge->alignment);
    }
    return out;
  }

  void initialize(Rng& rng) {
    for (Parameter* p : parameters()) init_uniform(*p, config_.init_radius, rng);
  }

  void zero_grad() const {
    for (const Parameter* p : parameters()) p->zero_grad();
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.format = CheckpointFormat::Generator;
    ck.dims = {{"vocab_size", static_cast<std::uint64_t>(config_.vocab_size)},
               {"embed_dim", static_cast<std::uint64_t>(config_.embed_dim)},
               {"hidden_dim", static_cast<std::uint64_t>(config_.hidden_dim)},
               {"encoder_layers", static_cast<std::uint64_t>(config_.encoder_layers)},
               {"decoder_layers", static_cast<std::uint64_t>(config_.decoder_layers)},
               {"dim_k", static_cast<std::uint64_t>(knowledge ? config_.dim_k : 0)},
               {"n_k", static_cast<std::uint64_t>(knowledge ? knowledge->n_k() : 0)}};
    ck.blocks = snapshot_blocks(parameters());
    return ck;
  }

  /// Rebuilds a model from a checkpoint. A knowledge-enabled checkpoint
  /// needs its lexicon (keywords only matter for annotation; sizes must agree).
  static GeneratorModel from_checkpoint(const Checkpoint& ck, std::optional<KeywordLexicon> lexicon = std::nullopt) {
    if (ck.format != CheckpointFormat::Generator) throw std::runtime_error("checkpoint is not a generator");
    GeneratorConfig cfg;
    cfg.vocab_size = static_cast<Eigen::Index>(ck.dim("vocab_size"));
    cfg.embed_dim = static_cast<Eigen::Index>(ck.dim("embed_dim"));
    cfg.hidden_dim = static_cast<Eigen::Index>(ck.dim("hidden_dim"));
    cfg.encoder_layers = static_cast<int>(ck.dim("encoder_layers"));
    cfg.decoder_layers = static_cast<int>(ck.dim("decoder_layers"));
    const auto n_k = ck.dim("n_k");
    if (n_k > 0) {
      cfg.dim_k = static_cast<Eigen::Index>(ck.dim("dim_k"));
      if (!lexicon) {
        lexicon = KeywordLexicon{};
        for (std::uint64_t j = 0; j < n_k; ++j) {
          lexicon->keywords.push_back("<keyword" + std::to_string(j) + ">");
          lexicon->scores.push_back(0.0);
        }
      }
      if (lexicon->size() != n_k) throw std::runtime_error("keyword lexicon size does not match checkpoint n_k");
    } else {
      lexicon.reset();
    }
    GeneratorModel m(cfg, std::move(lexicon));
    restore_parameters(ck, m.parameters());
    return m;
  }

  /// Loads parameters into this model; any dimension mismatch is an error.
  void load(const Checkpoint& ck) {
    if (ck.format != CheckpointFormat::Generator) throw std::runtime_error("checkpoint is not a generator");
    if (static_cast<Eigen::Index>(ck.dim("vocab_size")) != config_.vocab_size ||
        static_cast<Eigen::Index>(ck.dim("embed_dim")) != config_.embed_dim ||
        static_cast<Eigen::Index>(ck.dim("hidden_dim")) != config_.hidden_dim)
      throw std::runtime_error("checkpoint dimensions do not match the model");
    restore_parameters(ck, parameters());
  }

  Parameter embedding;
  std::vector<LstmLayer> encoder_fwd, encoder_bwd, decoder;
  std::vector<Parameter> bridge_weight, bridge_bias;
  Parameter attention;
  Parameter output_weight, output_bias;
  std::optional<KnowledgeMemory> knowledge;

 private:
  GeneratorConfig config_;
};

inline GeneratorModel make_generator(const GeneratorConfig& cfg, Rng& rng,
                                     std::optional<KeywordLexicon> lexicon = std::nullopt) {
  GeneratorModel m(cfg, std::move(lexicon));
  m.initialize(rng);
  return m;
}

/// Knowledge-enabled copy of a trained plain model. Shared weights are copied,
/// the new memory is drawn from `rng`, and the output columns reading the
/// knowledge summary start at zero, so the copy's distributions equal the
/// source's until it is trained further.
inline GeneratorModel attach_knowledge(const GeneratorModel& plain, KeywordLexicon lexicon, Rng& rng) {
  if (plain.has_knowledge()) throw std::invalid_argument("model already has a knowledge memory");
  GeneratorModel out = make_generator(plain.config(), rng, std::move(lexicon));
  const auto src = plain.parameters();
  const auto dst = out.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    Matrix& v = dst[i]->value;
    const Eigen::Index cols = src[i]->value.cols();
    v.leftCols(cols) = src[i]->value;
    v.rightCols(v.cols() - cols).setZero();
  }
  return out;
}

/// Whether the knowledge summary feeds the output layer on this step.
enum class KnowledgeUse { Active, Off };

struct EncodedQuery {
  Var memories;  // 2H x n, column i = h_i
  Var final;     // 2H x 1, [fwd_n; bwd_1]
  Eigen::Index length = 0;
};

struct DecoderState {
  std::vector<Var> h, c;
  const Var& top() const { return h.back(); }
};

struct StepResult {
  DecoderState state;
  Var log_probs;  // V x 1
  Var attention;  // n x 1
  std::optional<Var> alignments;  // n_k x 1 when the knowledge path ran
};

namespace detail {

inline std::pair<Var, Var> lstm_step(Tape& tape, const LstmLayer& layer, const Var& x, const Var& h, const Var& c) {
  const Eigen::Index H = h.rows();
  const Var gates = ag::affine(tape.param(layer.weight), ag::concat_rows({x, h}), tape.param(layer.bias));
  const Var hc = ag::lstm_cell(gates, c);
  return {ag::slice_rows(hc, 0, H), ag::slice_rows(hc, H, H)};
}

inline void check_ids(const GeneratorModel& m, const Sequence& s) {
  for (TokenId t : s)
    if (t < 0 || t >= m.vocab_size()) throw std::out_of_range("token id " + std::to_string(t) + " >= vocabulary size");
}

}  // namespace detail

inline EncodedQuery encode(const GeneratorModel& model, Tape& tape, const Sequence& query) {
  if (query.empty()) throw std::invalid_argument("cannot encode an empty query");
  detail::check_ids(model, query);
  const std::size_t n = query.size();
  const Eigen::Index H = model.hidden_dim();
  std::vector<Var> inputs;
  inputs.reserve(n);
  for (TokenId t : query) inputs.push_back(ag::lookup(tape, model.embedding, t));

  std::vector<Var> fwd(n), bwd(n);
  for (std::size_t l = 0; l < model.encoder_fwd.size(); ++l) {
    Var h = tape.constant(Matrix::Zero(H, 1)), c = tape.constant(Matrix::Zero(H, 1));
    for (std::size_t i = 0; i < n; ++i) {
      std::tie(h, c) = detail::lstm_step(tape, model.encoder_fwd[l], inputs[i], h, c);
      fwd[i] = h;
    }
    h = tape.constant(Matrix::Zero(H, 1));
    c = tape.constant(Matrix::Zero(H, 1));
    for (std::size_t i = n; i-- > 0;) {
      std::tie(h, c) = detail::lstm_step(tape, model.encoder_bwd[l], inputs[i], h, c);
      bwd[i] = h;
    }
    for (std::size_t i = 0; i < n; ++i) inputs[i] = ag::concat_rows({fwd[i], bwd[i]});
  }
  EncodedQuery enc;
  enc.memories = ag::concat_cols(inputs);
  enc.final = ag::concat_rows({fwd[n - 1], bwd[0]});
  enc.length = static_cast<Eigen::Index>(n);
  return enc;
}

inline DecoderState initial_state(const GeneratorModel& model, Tape& tape, const EncodedQuery& enc) {
  DecoderState s;
  const Eigen::Index H = model.hidden_dim();
  for (std::size_t l = 0; l < model.decoder.size(); ++l) {
    s.h.push_back(ag::affine(tape.param(model.bridge_weight[l]), enc.final, tape.param(model.bridge_bias[l])));
    s.c.push_back(tape.constant(Matrix::Zero(H, 1)));
  }
  return s;
}

inline StepResult decode_step(const GeneratorModel& model, Tape& tape, TokenId y_prev, const DecoderState& prev,
                              const EncodedQuery& enc, KnowledgeUse knowledge_use = KnowledgeUse::Active) {
  if (!enc.memories.valid() || enc.length == 0) throw std::invalid_argument("decode_step needs encoder memories");
  if (y_prev < 0 || y_prev >= model.vocab_size()) throw std::out_of_range("previous token id out of range");
  StepResult r;
  const Var query_vec = ag::matmul(ag::transpose(tape.param(model.attention)), prev.top());  // 2H x 1
  r.attention = ag::softmax(ag::matmul(ag::transpose(enc.memories), query_vec));            // n x 1
  const Var context = ag::matmul(enc.memories, r.attention);

  Var x = ag::concat_rows({ag::lookup(tape, model.embedding, y_prev), context});
  for (std::size_t l = 0; l < model.decoder.size(); ++l) {
    auto [h, c] = detail::lstm_step(tape, model.decoder[l], x, prev.h[l], prev.c[l]);
    r.state.h.push_back(h);
    r.state.c.push_back(c);
    x = h;
  }
  Var out_in = r.state.top();
  if (model.knowledge) {
    if (knowledge_use == KnowledgeUse::Active) {
      auto readout = knowledge_attend(tape, *model.knowledge, out_in);
      r.alignments = readout.alignments;
      out_in = ag::concat_rows({out_in, readout.summary});
    } else {
      out_in = ag::concat_rows({out_in, tape.constant(Matrix::Zero(model.knowledge->dim_k(), 1))});
    }
  }
  r.log_probs =
      ag::log_softmax(ag::affine(tape.param(model.output_weight), out_in, tape.param(model.output_bias)));
  return r;
}

/// One teacher-forced pass: per-step gold log-probabilities, knowledge
/// alignments, and the decoder state after each consumed gold token.
struct ForcedPass {
  EncodedQuery encoded;
  std::vector<Var> gold_log_probs;  // 1x1 per response token
  std::vector<Var> step_log_probs;  // V x 1 per response token
  std::vector<Var> alignments;      // per token, when knowledge is active
  std::vector<DecoderState> states; // states[t] = state after step t (t = 0 is the bridge state)
};

inline ForcedPass teacher_force(const GeneratorModel& model, Tape& tape, const Sequence& query,
                                const Sequence& response, KnowledgeUse knowledge_use = KnowledgeUse::Active) {
  const Sequence gold = unpad(response);
  detail::check_ids(model, gold);
  ForcedPass fp;
  fp.encoded = encode(model, tape, query);
  fp.states.push_back(initial_state(model, tape, fp.encoded));
  TokenId prev = Vocabulary::kBos;
  for (TokenId y : gold) {
    StepResult step = decode_step(model, tape, prev, fp.states.back(), fp.encoded, knowledge_use);
    fp.gold_log_probs.push_back(ag::pick(step.log_probs, y));
    fp.step_log_probs.push_back(step.log_probs);
    if (step.alignments) fp.alignments.push_back(*step.alignments);
    fp.states.push_back(std::move(step.state));
    prev = y;
  }
  return fp;
}

/// -sum_t log p(y_t | X, y_<t); trailing PAD in the response is ignored.
inline Var sequence_nll(const GeneratorModel& model, Tape& tape, const Sequence& query, const Sequence& response,
                        KnowledgeUse knowledge_use = KnowledgeUse::Active) {
  const ForcedPass fp = teacher_force(model, tape, query, response, knowledge_use);
  if (fp.gold_log_probs.empty()) throw std::invalid_argument("sequence_nll needs a non-empty response");
  return ag::scale(ag::sum(fp.gold_log_probs), -1.0);
}

inline double sequence_nll(const GeneratorModel& model, const QueryResponsePair& pair,
                           KnowledgeUse knowledge_use = KnowledgeUse::Active) {
  Tape tape(false);
  return sequence_nll(model, tape, pair.query, pair.response, knowledge_use).scalar();
}

struct Hypothesis {
  Sequence tokens;  // ends with EOS unless cut at max_len
  double log_prob = 0.0;
};

/// Extends `seq` in place by sampling from `state` (which has consumed
/// everything but `prev`) until EOS or until `seq` holds max_len tokens.
inline void extend_by_sampling(const GeneratorModel& model, Tape& tape, const EncodedQuery& enc, DecoderState state,
                               TokenId prev, Sequence& seq, std::size_t max_len, Rng& rng, double temperature,
                               KnowledgeUse knowledge_use) {
  while (seq.size() < max_len) {
    StepResult step = decode_step(model, tape, prev, state, enc, knowledge_use);
    const auto lp = step.log_probs.value().col(0);
    TokenId next;
    if (temperature <= 0.0) {
      Eigen::Index arg = 0;
      lp.maxCoeff(&arg);
      next = static_cast<TokenId>(arg);
    } else {
      const Vector p = (lp / temperature).array().exp();
      next = static_cast<TokenId>(sample_categorical(p, rng));
    }
    seq.push_back(next);
    if (next == Vocabulary::kEos) break;
    state = std::move(step.state);
    prev = next;
  }
}

/// Continues `prefix` (response tokens, BOS implied) by sampling until EOS or
/// until the sequence holds max_len tokens. temperature <= 0 takes the argmax.
inline Sequence sample_continuation(const GeneratorModel& model, const Sequence& query, const Sequence& prefix,
                                    std::size_t max_len, Rng& rng, double temperature = 1.0,
                                    KnowledgeUse knowledge_use = KnowledgeUse::Active) {
  if (prefix.empty()) throw std::invalid_argument("sample_continuation needs a non-empty prefix");
  Sequence out = prefix;
  if (out.back() == Vocabulary::kEos || out.size() >= max_len) return out;
  Tape tape(false);
  const ForcedPass fp = teacher_force(model, tape, query, prefix, knowledge_use);
  extend_by_sampling(model, tape, fp.encoded, fp.states.back(), out.back(), out, max_len, rng, temperature,
                     knowledge_use);
  return out;
}

/// Beam search from BOS. Finished hypotheses leave the beam; the beam keeps
/// the best `beam_width` live expansions per step. Ties are broken by the
/// parent's rank, then by token id.
inline std::vector<Hypothesis> beam_search(const GeneratorModel& model, const Sequence& query, std::size_t beam_width,
                                           std::size_t max_len, KnowledgeUse knowledge_use = KnowledgeUse::Active) {
  if (beam_width < 1) throw std::invalid_argument("beam_width must be >= 1");
  if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
  Tape tape(false);
  const EncodedQuery enc = encode(model, tape, query);
  struct Live {
    Hypothesis hyp;
    DecoderState state;
    TokenId last;
  };
  std::vector<Live> live{{Hypothesis{}, initial_state(model, tape, enc), Vocabulary::kBos}};
  std::vector<Hypothesis> finished;

  for (std::size_t step = 0; step < max_len && !live.empty(); ++step) {
    struct Cand {
      double score;
      std::size_t parent;
      TokenId token;
    };
    std::vector<Cand> cands;
    std::vector<StepResult> results;
    results.reserve(live.size());
    for (std::size_t b = 0; b < live.size(); ++b) {
      results.push_back(decode_step(model, tape, live[b].last, live[b].state, enc, knowledge_use));
      const Vector& lp = results.back().log_probs.value().col(0);
      for (Eigen::Index v = 0; v < lp.size(); ++v)
        cands.push_back({live[b].hyp.log_prob + lp[v], b, static_cast<TokenId>(v)});
    }
    const std::size_t keep = std::min(beam_width, cands.size());
    auto better = [](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.parent != b.parent) return a.parent < b.parent;
      return a.token < b.token;
    };
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(), better);
    std::vector<Live> next;
    for (std::size_t i = 0; i < keep; ++i) {
      const Cand& c = cands[i];
      Hypothesis h = live[c.parent].hyp;
      h.tokens.push_back(c.token);
      h.log_prob = c.score;
      if (c.token == Vocabulary::kEos || h.tokens.size() >= max_len) {
        finished.push_back(std::move(h));
      } else {
        next.push_back({std::move(h), results[c.parent].state, c.token});
      }
    }
    live = std::move(next);
  }
  std::stable_sort(finished.begin(), finished.end(),
                   [](const Hypothesis& a, const Hypothesis& b) { return a.log_prob > b.log_prob; });
  if (finished.size() > beam_width) finished.resize(beam_width);
  return finished;
}

/// Argmax decoding from BOS.
inline Hypothesis greedy_decode(const GeneratorModel& model, const Sequence& query, std::size_t max_len,
                                KnowledgeUse knowledge_use = KnowledgeUse::Active) {
  Tape tape(false);
  const EncodedQuery enc = encode(model, tape, query);
  DecoderState state = initial_state(model, tape, enc);
  Hypothesis h;
  TokenId prev = Vocabulary::kBos;
  while (h.tokens.size() < max_len) {
    StepResult step = decode_step(model, tape, prev, state, enc, knowledge_use);
    Eigen::Index arg = 0;
    const double best = step.log_probs.value().col(0).maxCoeff(&arg);
    h.tokens.push_back(static_cast<TokenId>(arg));
    h.log_prob += best;
    if (arg == Vocabulary::kEos) break;
    state = std::move(step.state);
    prev = static_cast<TokenId>(arg);
  }
  return h;
}

/// Response tokens with the terminating EOS (and anything after it) removed.
inline Sequence strip_eos(const Sequence& s) {
  Sequence out;
  for (TokenId t : s) {
    if (t == Vocabulary::kEos) break;
    out.push_back(t);
  }
  return out;
}

}  // namespace dialcal
