// ddnmt -- experiment runner for the data diversification training strategy
// on synthetic translation tasks: task generation, manifest runs, single
// diversification runs, translation and evaluation utilities.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "ddnmt/experiment.hpp"
#include "ddnmt/json_io.hpp"
#include "ddnmt/metrics.hpp"

using namespace ddnmt;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<std::string> sentences_to_lines(const std::vector<Sentence>& sentences,
                                            const Vocabulary& vocab) {
  std::vector<std::string> lines;
  lines.reserve(sentences.size());
  for (const auto& s : sentences) {
    std::string line;
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      if (i) line += ' ';
      line += vocab.token_of(s.tokens[i]);
    }
    lines.push_back(std::move(line));
  }
  return lines;
}

std::vector<Sentence> corpus_sides(const ParallelCorpus& c, bool source) {
  return source ? c.sources() : c.targets();
}

// Tokenized text files scored as string n-grams via an ad-hoc shared vocab.
BleuScore bleu_from_files(const std::string& hyp_path, const std::string& ref_path) {
  auto hyp_lines = read_lines(hyp_path);
  auto ref_lines = read_lines(ref_path);
  std::set<std::string> tokens;
  auto collect = [&](const std::vector<std::string>& lines) {
    for (const auto& line : lines) {
      std::istringstream ss(line);
      std::string tok;
      while (ss >> tok) tokens.insert(tok);
    }
  };
  collect(hyp_lines);
  collect(ref_lines);
  auto vocab = std::make_shared<Vocabulary>(std::vector<std::string>(tokens.begin(), tokens.end()));
  auto to_sentences = [&](const std::vector<std::string>& lines) {
    std::vector<Sentence> out;
    for (const auto& line : lines) {
      Sentence s;
      std::istringstream ss(line);
      std::string tok;
      while (ss >> tok) s.tokens.push_back(vocab->id_of(tok));
      out.push_back(std::move(s));
    }
    return out;
  };
  return corpus_bleu(to_sentences(hyp_lines), to_sentences(ref_lines));
}

std::vector<Sentence> lines_to_sentences(const std::vector<std::string>& lines,
                                         const Vocabulary& vocab, const BpeModel* bpe) {
  std::vector<Sentence> out;
  out.reserve(lines.size());
  for (const auto& line : lines) {
    std::vector<std::string> toks;
    if (bpe) {
      toks = bpe_encode(*bpe, line);
    } else {
      std::istringstream ss(line);
      std::string tok;
      while (ss >> tok) toks.push_back(tok);
    }
    Sentence s;
    for (const auto& t : toks) s.tokens.push_back(vocab.id_of(t));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"data diversification experiments on synthetic translation tasks"};
  app.require_subcommand(1);
  int threads = default_thread_count();
  app.add_option("--threads", threads, "worker threads (default: DDNMT_THREADS or hardware)");

  // ---- gen-task ----
  auto* gen = app.add_subcommand("gen-task", "generate a synthetic translation task");
  ToyTaskSpec task_spec;
  std::string gen_out;
  gen->add_option("--vocab-size", task_spec.vocab_size, "content token count");
  gen->add_option("--min-len", task_spec.min_len, "minimum sentence length");
  gen->add_option("--max-len", task_spec.max_len, "maximum sentence length");
  gen->add_option("--train", task_spec.train_size, "training pairs");
  gen->add_option("--valid", task_spec.valid_size, "validation pairs");
  gen->add_option("--test", task_spec.test_size, "test pairs");
  gen->add_option("--rule-seed", task_spec.rule_seed, "seed for the mapping and sampling");
  gen->add_option("--out", gen_out, "output directory")->required();

  // ---- run ----
  auto* run = app.add_subcommand("run", "run an experiment manifest");
  std::string run_manifest_path, run_out;
  bool run_default_manifest = false;
  run->add_option("--manifest", run_manifest_path, "manifest JSON path");
  run->add_flag("--default-acceptance", run_default_manifest,
                "use the built-in acceptance manifest");
  run->add_option("--out", run_out, "output directory")->required();

  // ---- diff ----
  auto* diff = app.add_subcommand("diff", "compare two run reports");
  std::string diff_a, diff_b, diff_out;
  diff->add_option("--a", diff_a, "first report.json or run directory")->required();
  diff->add_option("--b", diff_b, "second report.json or run directory")->required();
  diff->add_option("--out", diff_out, "write the delta table here instead of stdout");

  // ---- bleu ----
  auto* bleu_cmd = app.add_subcommand("bleu", "corpus BLEU between tokenized text files");
  std::string bleu_hyp, bleu_ref;
  bleu_cmd->add_option("--hyp", bleu_hyp, "hypothesis file")->required();
  bleu_cmd->add_option("--ref", bleu_ref, "reference file")->required();

  // ---- ppl ----
  auto* ppl_cmd = app.add_subcommand("ppl", "perplexity of a model on aligned text");
  std::string ppl_model, ppl_src, ppl_tgt, ppl_vocab, ppl_bpe;
  ppl_cmd->add_option("--model", ppl_model, "checkpoint path")->required();
  ppl_cmd->add_option("--source", ppl_src, "source text file")->required();
  ppl_cmd->add_option("--target", ppl_tgt, "target text file")->required();
  ppl_cmd->add_option("--vocab", ppl_vocab, "shared vocabulary file")->required();
  ppl_cmd->add_option("--bpe", ppl_bpe, "BPE merges file (optional)");

  // ---- diversify ----
  auto* div = app.add_subcommand("diversify", "one diversification run on a task directory");
  std::string div_task, div_out, div_config;
  DiversifyConfig div_cfg;
  int div_updates = -1;
  div->add_option("--task", div_task, "task directory from gen-task")->required();
  div->add_option("--out", div_out, "run directory")->required();
  div->add_option("--config", div_config, "DiversifyConfig JSON file");
  div->add_option("--k", div_cfg.k, "diversification factor");
  div->add_option("--rounds", div_cfg.rounds, "number of rounds");
  std::string div_direction = "bidirectional", div_policy = "random";
  div->add_option("--direction", div_direction, "bidirectional|forward_only|backward_only");
  div->add_option("--seed-policy", div_policy, "random|fixed");
  bool div_no_dedup = false;
  div->add_flag("--no-dedup", div_no_dedup, "keep duplicate pairs");
  div->add_option("--seed", div_cfg.base_seed, "base seed");
  div->add_option("--updates", div_updates, "max updates for every model");

  // ---- translate ----
  auto* tr = app.add_subcommand("translate", "translate text with one model or an ensemble");
  std::vector<std::string> tr_models;
  std::string tr_input, tr_output, tr_vocab_src, tr_vocab_tgt, tr_bpe;
  DecodeConfig tr_cfg;
  tr->add_option("--model", tr_models, "checkpoint path (repeat for an ensemble)")->required();
  tr->add_option("--input", tr_input, "source text file")->required();
  tr->add_option("--output", tr_output, "output file (default: stdout)");
  tr->add_option("--vocab-source", tr_vocab_src, "source vocabulary file")->required();
  tr->add_option("--vocab-target", tr_vocab_tgt, "target vocabulary file")->required();
  tr->add_option("--bpe", tr_bpe, "BPE merges file (optional)");
  tr->add_option("--beam", tr_cfg.beam_size, "beam size");
  tr->add_option("--length-penalty", tr_cfg.length_penalty, "length penalty");
  tr->add_option("--max-len-factor", tr_cfg.max_len_factor, "output cap factor");

  // ---- inspect-corpus ----
  auto* inspect = app.add_subcommand("inspect-corpus", "summary of a corpus archive");
  std::string inspect_path;
  inspect->add_option("--corpus", inspect_path, "corpus archive path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      auto task = generate_toy_task(task_spec);
      fs::create_directories(gen_out);
      {
        std::ofstream out(fs::path(gen_out) / "task.json");
        out << json(task_spec).dump(2) << '\n';
      }
      task.vocab->save_file((fs::path(gen_out) / "vocab.txt").string());
      save_corpus(task.train, (fs::path(gen_out) / "train.corpus").string());
      save_corpus(task.valid, (fs::path(gen_out) / "valid.corpus").string());
      save_corpus(task.test, (fs::path(gen_out) / "test.corpus").string());
      for (auto [name, corpus] :
           {std::pair<const char*, const ParallelCorpus*>{"train", &task.train},
            {"valid", &task.valid},
            {"test", &task.test}}) {
        write_lines((fs::path(gen_out) / (std::string(name) + ".src")).string(),
                    sentences_to_lines(corpus_sides(*corpus, true), *task.vocab));
        write_lines((fs::path(gen_out) / (std::string(name) + ".tgt")).string(),
                    sentences_to_lines(corpus_sides(*corpus, false), *task.vocab));
      }
      std::cout << "task written to " << gen_out << " (" << task.train.size() << "/"
                << task.valid.size() << "/" << task.test.size() << " pairs)\n";
    } else if (*run) {
      ExperimentManifest manifest;
      if (run_default_manifest)
        manifest = default_acceptance_manifest();
      else if (!run_manifest_path.empty())
        manifest = load_manifest_file(run_manifest_path);
      else
        throw std::runtime_error("run: need --manifest or --default-acceptance");
      auto outcome = run_manifest(manifest, run_out, threads);
      std::ifstream md(outcome.markdown_path);
      std::cout << md.rdbuf();
      std::cout << "trainings performed: " << outcome.trainings_performed << '\n'
                << "report: " << outcome.report_path << '\n';
    } else if (*diff) {
      auto load_report = [](std::string path) {
        if (fs::is_directory(path)) path = (fs::path(path) / "report.json").string();
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot read " + path);
        return json::parse(in);
      };
      json delta = report_diff(load_report(diff_a), load_report(diff_b));
      if (diff_out.empty()) {
        std::cout << delta.dump(2) << '\n';
      } else {
        std::ofstream out(diff_out);
        out << delta.dump(2) << '\n';
      }
    } else if (*bleu_cmd) {
      auto score = bleu_from_files(bleu_hyp, bleu_ref);
      std::printf("BLEU = %.2f  (precisions %.1f/%.1f/%.1f/%.1f, BP %.3f, hyp %lld, ref %lld)\n",
                  score.score, 100 * score.precisions[0], 100 * score.precisions[1],
                  100 * score.precisions[2], 100 * score.precisions[3], score.brevity_penalty,
                  static_cast<long long>(score.hypothesis_length),
                  static_cast<long long>(score.reference_length));
    } else if (*ppl_cmd) {
      auto params = load_checkpoint(ppl_model);
      auto vocab = std::make_shared<Vocabulary>(Vocabulary::load_file(ppl_vocab));
      std::optional<BpeModel> bpe;
      if (!ppl_bpe.empty()) bpe = BpeModel::load_file(ppl_bpe);
      auto sources = lines_to_sentences(read_lines(ppl_src), *vocab, bpe ? &*bpe : nullptr);
      auto targets = lines_to_sentences(read_lines(ppl_tgt), *vocab, bpe ? &*bpe : nullptr);
      if (sources.size() != targets.size()) throw std::runtime_error("line-count mismatch");
      std::vector<SentencePair> pairs;
      for (std::size_t i = 0; i < sources.size(); ++i)
        pairs.push_back({sources[i], targets[i], Provenance::original()});
      ParallelCorpus corpus(std::move(pairs), vocab, vocab);
      std::printf("perplexity = %.6f over %zu pairs\n", perplexity(params, corpus),
                  corpus.size());
    } else if (*div) {
      if (!div_config.empty()) {
        std::ifstream in(div_config);
        if (!in) throw std::runtime_error("cannot read " + div_config);
        div_cfg = json::parse(in).get<DiversifyConfig>();
      }
      div_cfg.direction_mode = direction_mode_from_string(div_direction);
      div_cfg.seed_policy = seed_policy_from_string(div_policy);
      if (div_no_dedup) div_cfg.dedup_enabled = false;
      if (div_updates >= 0) {
        div_cfg.teacher_train.max_updates = div_updates;
        div_cfg.final_train.max_updates = div_updates;
      }
      auto train_corpus = load_corpus((fs::path(div_task) / "train.corpus").string());
      auto valid_corpus = load_corpus((fs::path(div_task) / "valid.corpus").string());
      RealEngine engine(valid_corpus, 1);
      DiversifyOptions opts;
      opts.run_dir = div_out;
      opts.teacher_parallelism = threads;
      auto result = data_diverse(train_corpus, div_cfg, engine, opts);
      std::cout << "run written to " << div_out << '\n';
      for (const auto& round : result.rounds)
        std::printf("round %d: %zu pairs, duplicate fraction %.4f\n", round.round,
                    round.data.size(), round.duplicate_fraction);
      if (!result.final_trace.entries.empty())
        std::printf("final model: %lld updates, validation ppl %.4f\n",
                    static_cast<long long>(result.final_trace.entries.back().updates),
                    result.final_trace.entries.back().validation_ppl);
    } else if (*tr) {
      auto vocab_src = std::make_shared<Vocabulary>(Vocabulary::load_file(tr_vocab_src));
      auto vocab_tgt = std::make_shared<Vocabulary>(Vocabulary::load_file(tr_vocab_tgt));
      std::optional<BpeModel> bpe;
      if (!tr_bpe.empty()) bpe = BpeModel::load_file(tr_bpe);
      auto sources = lines_to_sentences(read_lines(tr_input), *vocab_src,
                                        bpe ? &*bpe : nullptr);
      std::vector<ModelParametersPtr> models;
      for (const auto& path : tr_models)
        models.push_back(std::make_shared<const ModelParameters>(load_checkpoint(path)));
      std::vector<std::shared_ptr<const DecodeStepper>> steppers;
      for (const auto& model : models) steppers.push_back(std::make_shared<ModelStepper>(model));
      EnsembleStepper ensemble(std::move(steppers));
      auto outputs = translate_corpus(ensemble, sources, tr_cfg, threads);
      std::vector<std::string> lines;
      for (const auto& s : outputs) {
        std::vector<std::string> toks;
        for (TokenId id : s.tokens) toks.push_back(vocab_tgt->token_of(id));
        lines.push_back(bpe ? bpe_decode(toks) : [&] {
          std::string joined;
          for (std::size_t i = 0; i < toks.size(); ++i) {
            if (i) joined += ' ';
            joined += toks[i];
          }
          return joined;
        }());
      }
      if (tr_output.empty())
        for (const auto& line : lines) std::cout << line << '\n';
      else
        write_lines(tr_output, lines);
    } else if (*inspect) {
      auto corpus = load_corpus(inspect_path);
      auto stats = duplicate_statistics(corpus);
      std::printf("pairs: %zu\n", corpus.size());
      std::printf("source vocab: %zu tokens, target vocab: %zu tokens\n",
                  corpus.source_vocab()->size(), corpus.target_vocab()->size());
      std::map<std::string, std::size_t> by_kind;
      for (const auto& p : corpus.pairs()) ++by_kind[to_string(p.provenance.kind)];
      for (const auto& [kind, count] : by_kind)
        std::printf("  %-20s %zu\n", kind.c_str(), count);
      std::printf("duplicates: %lld (%.2f%%)\n",
                  static_cast<long long>(stats.duplicate_count), 100.0 * stats.fraction);
      for (const auto& [kind, count] : stats.duplicates_by_kind)
        std::printf("  duplicate %-20s %lld\n", kind.c_str(), static_cast<long long>(count));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
