// Command-line front end: corpus generation, preparation, calibrator
// pre-training, generator training, decoding, evaluation and token-quality
// inspection.

#include "dialcal/dialcal.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace dialcal;

namespace {

std::vector<std::vector<std::string>> read_lines_as_words(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<std::vector<std::string>> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(split_whitespace(line));
  return out;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& l : lines) out << l << '\n';
}

/// `explicit_path` if given, otherwise `name` in the directory of `anchor`.
std::string sibling(const std::string& explicit_path, const std::string& anchor, const std::string& name) {
  if (!explicit_path.empty()) return explicit_path;
  return (fs::path(anchor).parent_path() / name).string();
}

// ---------------------------------------------------------------------------

struct GenerateCorpusArgs {
  int topics = 20;
  int pairs_per_topic = 10;
  std::uint64_t seed = 7;
  std::string out;
  std::string vectors_out;
  int vector_dim = 16;
};

int run_generate_corpus(const GenerateCorpusArgs& a) {
  const SyntheticCorpus sc = generate_synthetic_corpus(a.topics, a.pairs_per_topic, a.seed);
  write_tsv(a.out, sc.corpus);
  if (!a.vectors_out.empty()) EmbeddingTable(planted_word_vectors(sc.corpus, a.vector_dim, a.seed)).save(a.vectors_out);
  std::cout << "wrote " << sc.corpus.size() << " pairs over " << sc.corpus.query_count() << " queries to " << a.out
            << '\n';
  return 0;
}

struct PrepareArgs {
  std::string corpus;
  std::string out_dir;
  double train_fraction = 0.8;
  double valid_fraction = 0.1;
  std::uint64_t seed = 7;
  bool extract_keywords = false;
  std::size_t n_k = 200;
};

int run_prepare(const PrepareArgs& a) {
  const TextCorpus corpus = read_tsv(a.corpus);
  if (corpus.empty()) throw std::runtime_error("corpus is empty: " + a.corpus);
  fs::create_directories(a.out_dir);
  const fs::path dir(a.out_dir);
  const auto splits = split_by_query(corpus, a.train_fraction, a.valid_fraction, a.seed);
  write_tsv((dir / "train.tsv").string(), splits.train);
  write_tsv((dir / "valid.tsv").string(), splits.valid);
  write_tsv((dir / "test.tsv").string(), splits.test);
  build_vocabulary(corpus).save((dir / "vocab.txt").string());

  std::vector<std::string> queries, refs;
  for (const auto& p : splits.test.pairs()) {
    queries.push_back(join(p.query));
    refs.push_back(join(p.response));
  }
  write_lines((dir / "test.queries.txt").string(), queries);
  write_lines((dir / "test.refs.txt").string(), refs);

  if (a.extract_keywords) {
    const auto lexicon = build_keyword_lexicon(splits.train, a.n_k, synthetic::stop_words());
    lexicon.save((dir / "keywords.txt").string());
    std::cout << "keyword lexicon: " << lexicon.size() << " entries\n";
  }
  std::cout << "splits: train " << splits.train.size() << ", valid " << splits.valid.size() << ", test "
            << splits.test.size() << " pairs\n";
  return 0;
}

struct PretrainArgs {
  std::string corpus;
  std::string vocab;
  std::string out;
  double margin = 0.25;
  CalibratorConfig model;
  CalibratorTrainConfig train;
};

int run_pretrain(PretrainArgs a) {
  const Vocabulary vocab = Vocabulary::load(sibling(a.vocab, a.corpus, "vocab.txt"));
  const Corpus corpus = encode_corpus(read_tsv(a.corpus), vocab);
  a.model.vocab_size = static_cast<Eigen::Index>(vocab.size());
  a.model.margin = a.margin;
  CalibratorTrainLog log;
  const CalibratorEnsemble e = pretrain_calibrator(corpus, a.model, a.train, &log);
  save_checkpoint(a.out, e.to_checkpoint());
  std::cout << std::fixed << std::setprecision(6);
  for (std::size_t i = 0; i < log.pt_loss.size(); ++i)
    std::cout << "epoch " << i + 1 << " ns " << log.ns_objective[i] << " pt " << log.pt_loss[i] << " pair "
              << log.pair_loss[i] << '\n';
  std::cout << "calibrator checksum " << e.checksum() << '\n';
  return 0;
}

struct TrainArgs {
  std::string corpus;
  std::string valid;
  std::string vocab;
  std::string keywords;
  std::string calibrator;
  std::string config;
  std::string out_dir;
  bool inverse = false;
  GeneratorConfig model;
};

int run_train(TrainArgs a) {
  a.model.decoder_layers = a.model.encoder_layers;
  TrainConfig cfg;
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) throw std::runtime_error("cannot read config " + a.config);
    cfg = parse_train_config(in);
  }
  const std::string vocab_path = sibling(a.vocab, a.corpus, "vocab.txt");
  const Vocabulary vocab = Vocabulary::load(vocab_path);
  const TextCorpus train_text = read_tsv(a.corpus);
  const Corpus train_set = encode_corpus(train_text, vocab);
  const std::string valid_path = sibling(a.valid, a.corpus, "valid.tsv");
  const Corpus valid_set = fs::exists(valid_path) ? encode_corpus(read_tsv(valid_path), vocab) : Corpus{};
  a.model.vocab_size = static_cast<Eigen::Index>(vocab.size());

  fs::create_directories(a.out_dir);
  const fs::path dir(a.out_dir);
  fs::copy_file(vocab_path, dir / "vocab.txt", fs::copy_options::overwrite_existing);

  std::ofstream log_file(dir / "metrics.csv");
  write_metric_log_header(log_file);
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochMetrics& m, const GeneratorModel& model) {
    write_metric_log_row(log_file, m);
    log_file.flush();
    save_checkpoint((dir / ("epoch-" + std::to_string(m.epoch) + ".ckpt")).string(), model.to_checkpoint());
    std::cout << std::fixed << std::setprecision(6) << "epoch " << m.epoch << " L_NLL " << m.nll << " L_RC " << m.rc
              << " L_KI " << m.ki << " val_NLL " << m.val_nll << '\n';
  };

  if (a.inverse) {
    cfg.use_rc = cfg.use_ki = cfg.use_gt_instance_weight = false;
    Rng init_rng(mix_seed(cfg.seed, 0x1a7e5e));
    GeneratorModel model = make_generator(a.model, init_rng);
    train(model, swap_pairs(train_set), swap_pairs(valid_set), cfg, nullptr, nullptr, hooks);
    save_checkpoint((dir / "generator.ckpt").string(), model.to_checkpoint());
    return 0;
  }

  std::optional<CalibratorEnsemble> calibrator;
  if (cfg.use_rc) {
    if (a.calibrator.empty()) throw std::runtime_error("use_rc is on: --calibrator is required");
    calibrator = CalibratorEnsemble::from_checkpoint(load_checkpoint(a.calibrator));
  }
  std::optional<KeywordLexicon> lexicon;
  std::vector<KeywordAnnotation> annotations;
  if (cfg.use_ki) {
    lexicon = KeywordLexicon::load(sibling(a.keywords, a.corpus, "keywords.txt"));
    annotations = annotate_corpus(train_set, vocab, *lexicon, cfg.keywords_per_response, synthetic::stop_words());
    lexicon->save((dir / "keywords.txt").string());
  }
  Rng init_rng(cfg.seed);
  GeneratorModel model = make_generator(a.model, init_rng, lexicon);
  const std::uint64_t before = calibrator ? calibrator->checksum() : 0;
  train(model, train_set, valid_set, cfg, calibrator ? &*calibrator : nullptr, cfg.use_ki ? &annotations : nullptr,
        hooks);
  save_checkpoint((dir / "generator.ckpt").string(), model.to_checkpoint());
  if (calibrator) std::cout << "calibrator checksum " << before << " -> " << calibrator->checksum() << '\n';
  return 0;
}

/// Generator plus the vocabulary and lexicon stored next to its checkpoint.
struct LoadedGenerator {
  Vocabulary vocab;
  GeneratorModel model;
};

LoadedGenerator load_generator(const std::string& checkpoint, const std::string& vocab_path,
                               const std::string& keywords_path) {
  LoadedGenerator g;
  g.vocab = Vocabulary::load(sibling(vocab_path, checkpoint, "vocab.txt"));
  const Checkpoint ck = load_checkpoint(checkpoint);
  std::optional<KeywordLexicon> lexicon;
  const std::string kw = sibling(keywords_path, checkpoint, "keywords.txt");
  if (ck.dim("n_k") > 0 && fs::exists(kw)) lexicon = KeywordLexicon::load(kw);
  g.model = GeneratorModel::from_checkpoint(ck, lexicon);
  if (static_cast<std::size_t>(g.model.vocab_size()) != g.vocab.size())
    throw std::runtime_error("vocabulary size does not match the checkpoint");
  return g;
}

struct GenerateArgs {
  std::string checkpoint;
  std::string vocab;
  std::string keywords;
  std::string input;
  std::string out;
  bool mmi = false;
  std::string inverse_checkpoint;
  std::size_t nbest = 50;
  double lambda_f = 1.0;
  double lambda_b = 1.0;
  std::size_t max_len = 20;
};

int run_generate(const GenerateArgs& a) {
  const LoadedGenerator fwd = load_generator(a.checkpoint, a.vocab, a.keywords);
  std::optional<GeneratorModel> inverse;
  if (a.mmi) {
    if (a.inverse_checkpoint.empty()) throw std::runtime_error("--mmi needs --inverse-checkpoint");
    inverse = GeneratorModel::from_checkpoint(load_checkpoint(a.inverse_checkpoint));
    if (inverse->vocab_size() != fwd.model.vocab_size())
      throw std::runtime_error("forward and inverse vocabularies differ");
  }
  const RerankWeights weights{a.lambda_f, a.lambda_b};
  weights.validate();
  std::vector<std::string> out;
  for (const auto& words : read_lines_as_words(a.input)) {
    const Sequence query = fwd.vocab.encode(words);
    Sequence best;
    if (query.empty()) {
      best = {};
    } else if (inverse) {
      best = mmi_rerank(fwd.model, *inverse, query, a.nbest, weights, a.max_len).front().hypothesis.tokens;
    } else {
      best = greedy_decode(fwd.model, query, a.max_len).tokens;
    }
    out.push_back(join(fwd.vocab.decode(strip_eos(best))));
  }
  write_lines(a.out, out);
  std::cout << "wrote " << out.size() << " hypotheses to " << a.out << '\n';
  return 0;
}

struct EvaluateArgs {
  std::string hyps;
  std::string refs;
  std::string vectors;
  std::string checkpoint;
  std::string vocab;
  std::string report;
};

int run_evaluate(const EvaluateArgs& a) {
  EmbeddingTable table;
  if (!a.vectors.empty()) {
    table = EmbeddingTable::load(a.vectors);
  } else if (!a.checkpoint.empty()) {
    const LoadedGenerator g = load_generator(a.checkpoint, a.vocab, "");
    table = embedding_table_from_generator(g.model, g.vocab);
  } else {
    throw std::runtime_error("evaluate needs --vectors or --checkpoint for the embedding metrics");
  }
  const EvaluationReport r = evaluate_files(a.hyps, a.refs, table);
  std::ofstream out(a.report);
  if (!out) throw std::runtime_error("cannot write " + a.report);
  write_report_csv(out, r);
  write_report_csv(std::cout, r);
  return 0;
}

struct InspectArgs {
  std::string checkpoint;
  std::string calibrator;
  std::string vocab;
  std::string query;
  std::string response;
  int n = 10;
  std::size_t max_len = 20;
  double temperature = 1.0;
  std::uint64_t seed = 1;
};

int run_inspect(const InspectArgs& a) {
  const LoadedGenerator g = load_generator(a.checkpoint, a.vocab, "");
  const CalibratorEnsemble e = CalibratorEnsemble::from_checkpoint(load_checkpoint(a.calibrator));
  QueryResponsePair pair;
  pair.query = g.vocab.encode(split_whitespace(a.query));
  const auto response_words = split_whitespace(a.response);
  pair.response = g.vocab.encode(response_words);
  pair.response.push_back(Vocabulary::kEos);
  if (pair.query.empty() || response_words.empty()) throw std::runtime_error("query and response must be non-empty");
  Rng rng(a.seed);
  const auto q = token_quality_vector(g.model, e, pair, {a.n, a.max_len, a.temperature}, rng);
  std::cout << std::fixed << std::setprecision(4);
  for (std::size_t t = 0; t < q.size(); ++t)
    std::cout << (t < response_words.size() ? response_words[t] : std::string("<eos>")) << '\t' << q.q[t] << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Calibrated dialogue generation toolkit"};
  app.require_subcommand(1);

  GenerateCorpusArgs gc;
  auto* cmd_gc = app.add_subcommand("generate-corpus", "Write the planted synthetic corpus as TSV");
  cmd_gc->add_option("--topics", gc.topics, "Number of topics")->capture_default_str();
  cmd_gc->add_option("--pairs-per-topic", gc.pairs_per_topic, "Queries per topic")->capture_default_str();
  cmd_gc->add_option("--seed", gc.seed, "Random seed")->capture_default_str();
  cmd_gc->add_option("--out", gc.out, "Output TSV")->required();
  cmd_gc->add_option("--vectors-out", gc.vectors_out, "Also write planted word vectors here");
  cmd_gc->add_option("--vector-dim", gc.vector_dim, "Planted vector width")->capture_default_str();

  PrepareArgs pr;
  auto* cmd_pr = app.add_subcommand("prepare", "Split a corpus, build the vocabulary, optionally extract keywords");
  cmd_pr->add_option("--corpus", pr.corpus, "Input TSV")->required()->check(CLI::ExistingFile);
  cmd_pr->add_option("--out-dir", pr.out_dir, "Output directory")->required();
  cmd_pr->add_option("--train-fraction", pr.train_fraction)->capture_default_str();
  cmd_pr->add_option("--valid-fraction", pr.valid_fraction)->capture_default_str();
  cmd_pr->add_option("--seed", pr.seed, "Split seed")->capture_default_str();
  cmd_pr->add_flag("--extract-keywords", pr.extract_keywords, "Write the keyword lexicon from training responses");
  cmd_pr->add_option("--n-k", pr.n_k, "Keyword lexicon size")->capture_default_str();

  PretrainArgs pt;
  auto* cmd_pt = app.add_subcommand("pretrain-calibrator", "Pre-train the three-component calibrator ensemble");
  cmd_pt->add_option("--corpus", pt.corpus, "Labelled training TSV")->required()->check(CLI::ExistingFile);
  cmd_pt->add_option("--vocab", pt.vocab, "Vocabulary (default: vocab.txt beside the corpus)");
  cmd_pt->add_option("--out", pt.out, "Checkpoint path")->required();
  cmd_pt->add_option("--margin", pt.margin, "Pairwise ranking margin")->capture_default_str();
  cmd_pt->add_option("--epochs", pt.train.epochs)->capture_default_str();
  cmd_pt->add_option("--batch-size", pt.train.batch_size)->capture_default_str();
  cmd_pt->add_option("--learning-rate", pt.train.learning_rate)->capture_default_str();
  cmd_pt->add_option("--seed", pt.train.seed)->capture_default_str();
  cmd_pt->add_option("--embed-dim", pt.model.embed_dim)->capture_default_str();
  cmd_pt->add_option("--filters", pt.model.filters)->capture_default_str();
  cmd_pt->add_option("--joint-hidden", pt.model.joint_hidden)->capture_default_str();

  TrainArgs tr;
  auto* cmd_tr = app.add_subcommand("train", "Train a generator on the joint objective");
  cmd_tr->add_option("--corpus", tr.corpus, "Training TSV")->required()->check(CLI::ExistingFile);
  cmd_tr->add_option("--valid", tr.valid, "Validation TSV (default: valid.tsv beside the corpus)");
  cmd_tr->add_option("--vocab", tr.vocab, "Vocabulary (default: vocab.txt beside the corpus)");
  cmd_tr->add_option("--keywords", tr.keywords, "Keyword lexicon (default: keywords.txt beside the corpus)");
  cmd_tr->add_option("--calibrator", tr.calibrator, "Pre-trained calibrator checkpoint");
  cmd_tr->add_option("--config", tr.config, "key = value training config");
  cmd_tr->add_option("--out-dir", tr.out_dir, "Run directory")->required();
  cmd_tr->add_flag("--inverse", tr.inverse, "Train the response-to-query model used for MMI reranking");
  cmd_tr->add_option("--embed-dim", tr.model.embed_dim)->capture_default_str();
  cmd_tr->add_option("--hidden-dim", tr.model.hidden_dim)->capture_default_str();
  cmd_tr->add_option("--layers", tr.model.encoder_layers, "Encoder and decoder depth")->capture_default_str();
  cmd_tr->add_option("--dim-k", tr.model.dim_k, "Knowledge memory width")->capture_default_str();

  GenerateArgs ge;
  auto* cmd_ge = app.add_subcommand("generate", "Decode one response per input query");
  cmd_ge->add_option("--checkpoint", ge.checkpoint, "Generator checkpoint")->required()->check(CLI::ExistingFile);
  cmd_ge->add_option("--vocab", ge.vocab, "Vocabulary (default: vocab.txt beside the checkpoint)");
  cmd_ge->add_option("--keywords", ge.keywords, "Keyword lexicon (default: keywords.txt beside the checkpoint)");
  cmd_ge->add_option("--input", ge.input, "Queries, one per line")->required()->check(CLI::ExistingFile);
  cmd_ge->add_option("--out", ge.out, "Hypotheses output")->required();
  cmd_ge->add_flag("--mmi", ge.mmi, "Rerank the N-best list with the inverse model");
  cmd_ge->add_option("--inverse-checkpoint", ge.inverse_checkpoint, "Inverse model checkpoint");
  cmd_ge->add_option("--nbest", ge.nbest, "Beam width for MMI")->capture_default_str();
  cmd_ge->add_option("--lambda-f", ge.lambda_f, "Forward weight")->capture_default_str();
  cmd_ge->add_option("--lambda-b", ge.lambda_b, "Inverse weight")->capture_default_str();
  cmd_ge->add_option("--max-len", ge.max_len, "Maximum response length")->capture_default_str();

  EvaluateArgs ev;
  auto* cmd_ev = app.add_subcommand("evaluate", "BLEU, embedding similarity and Dist-n report");
  cmd_ev->add_option("--hyps", ev.hyps, "Hypotheses, one per line")->required()->check(CLI::ExistingFile);
  cmd_ev->add_option("--refs", ev.refs, "References, one per line")->required()->check(CLI::ExistingFile);
  cmd_ev->add_option("--vectors", ev.vectors, "Word vector file");
  cmd_ev->add_option("--checkpoint", ev.checkpoint, "Use this generator's embedding table instead");
  cmd_ev->add_option("--vocab", ev.vocab, "Vocabulary for --checkpoint");
  cmd_ev->add_option("--report", ev.report, "CSV report path")->required();

  InspectArgs in;
  auto* cmd_in = app.add_subcommand("inspect-token-quality", "Print the per-token quality q_t of a response");
  cmd_in->add_option("--checkpoint", in.checkpoint, "Generator checkpoint")->required()->check(CLI::ExistingFile);
  cmd_in->add_option("--calibrator", in.calibrator, "Calibrator checkpoint")->required()->check(CLI::ExistingFile);
  cmd_in->add_option("--vocab", in.vocab, "Vocabulary (default: vocab.txt beside the checkpoint)");
  cmd_in->add_option("--query", in.query, "Query text")->required();
  cmd_in->add_option("--response", in.response, "Response text")->required();
  cmd_in->add_option("--n", in.n, "Rollouts per token")->capture_default_str();
  cmd_in->add_option("--max-len", in.max_len)->capture_default_str();
  cmd_in->add_option("--temperature", in.temperature)->capture_default_str();
  cmd_in->add_option("--seed", in.seed)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*cmd_gc) return run_generate_corpus(gc);
    if (*cmd_pr) return run_prepare(pr);
    if (*cmd_pt) return run_pretrain(pt);
    if (*cmd_tr) return run_train(tr);
    if (*cmd_ge) return run_generate(ge);
    if (*cmd_ev) return run_evaluate(ev);
    if (*cmd_in) return run_inspect(in);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
