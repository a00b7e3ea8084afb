#include "divseq/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <set>

#include "divseq/checkpoint.hpp"
#include "divseq/decoding.hpp"
#include "divseq/error.hpp"
#include "divseq/metrics.hpp"
#include "divseq/moe.hpp"
#include "divseq/trainer.hpp"

namespace divseq {

namespace fs = std::filesystem;

namespace {

// One writer per output directory.
class DirLock {
 public:
  explicit DirLock(const std::string& dir) : path_(fs::path(dir) / ".lock") {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (fs::exists(path_)) {
      throw IoError("output directory " + dir + " is locked by another run (remove " +
                    path_.string() + " if stale)");
    }
    std::ofstream lock(path_);
    if (!lock) throw IoError("cannot create lock file " + path_.string());
    lock << "locked\n";
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  fs::path path_;
};

Corpus load_corpus_from_paths(const CorpusPaths& paths) {
  Corpus corpus;
  corpus.vocab = Vocabulary(paths.vocab_content, paths.vocab_markers);
  auto to_pairs = [](const MultiRefCorpus& mrc) {
    std::vector<SentencePair> out;
    out.reserve(mrc.entries.size());
    for (const auto& e : mrc.entries) {
      SentencePair p;
      p.id = e.id;
      p.src = e.src;
      p.tgt = e.refs.front();
      out.push_back(std::move(p));
    }
    return out;
  };
  corpus.train = to_pairs(read_corpus(paths.train));
  corpus.valid = to_pairs(read_corpus(paths.valid));
  corpus.test = read_corpus(paths.test);
  return corpus;
}

void check_token_range(const MultiRefCorpus& corpus, std::int32_t vocab_size) {
  for (const auto& e : corpus.entries) {
    for (auto t : e.src) {
      if (t < 0 || t >= vocab_size) {
        throw IoError("corpus token id " + std::to_string(t) + " incompatible with checkpoint vocab " +
                      std::to_string(vocab_size));
      }
    }
  }
}

MultiRefCorpus pairs_to_multiref(const std::vector<SentencePair>& pairs) {
  MultiRefCorpus out;
  out.entries.reserve(pairs.size());
  for (const auto& p : pairs) {
    MultiRefEntry e;
    e.id = p.id;
    e.src = p.src;
    e.refs = {p.tgt};
    out.entries.push_back(std::move(e));
  }
  return out;
}

template <typename Real>
TrainResult train_impl(const RunConfig& cfg, const std::string& out_dir) {
  Corpus corpus = cfg.data.synth ? generate_corpus(*cfg.data.synth) : load_corpus_from_paths(*cfg.data.paths);
  const std::int32_t vocab = corpus.vocab.size();

  TransformerModel<Real> model(cfg.model_config(vocab, vocab), cfg.method == Method::TargetEncoder);

  const std::string log_path = (fs::path(out_dir) / "run.log").string();
  const std::string ckpt_path = (fs::path(out_dir) / "checkpoint.bin").string();
  const std::string test_path = (fs::path(out_dir) / "test.jsonl").string();
  write_corpus(test_path, corpus.test);
  write_corpus((fs::path(out_dir) / "train.jsonl").string(), pairs_to_multiref(corpus.train));
  write_corpus((fs::path(out_dir) / "valid.jsonl").string(), pairs_to_multiref(corpus.valid));

  RunLogger logger(log_path);
  logger.log_config(cfg.resolved_json());

  TrainResult result;
  result.out_dir = out_dir;
  result.log_path = log_path;
  result.checkpoint_path = ckpt_path;
  result.test_corpus_path = test_path;

  TrainingSnapshot snap;
  AdamState<Real>* adam = nullptr;

  if (cfg.method == Method::Moe) {
    MoeTrainer<Real> trainer(model, cfg.optimizer, cfg.seed);
    std::int64_t step = 0, epoch = 0;
    while (step < cfg.train.steps) {
      BatchIter iter(corpus.train, cfg.train.batch_size, cfg.seed, epoch++);
      Batch batch;
      while (step < cfg.train.steps && iter.next(batch)) {
        const StepReport rep = trainer.moe_train_step(batch);
        logger.log_step(rep);
        ++step;
        if (cfg.train.valid_every > 0 && step % cfg.train.valid_every == 0) {
          logger.log_validation(step, trainer.validation_nll(corpus.valid, cfg.train.batch_size));
        }
      }
    }
    result.steps_run = step;
    result.final_valid_nll = trainer.validation_nll(corpus.valid, cfg.train.batch_size);
    result.valid_domain_histogram.assign(static_cast<std::size_t>(cfg.n_domains), 0);
    snap.step = step;
    adam = &trainer.adam_state();
    save_checkpoint(ckpt_path, model, *adam, snap, cfg);
  } else {
    AnnealSchedule schedule = cfg.schedule;
    TargetEncoderTrainer<Real> trainer(model, schedule, cfg.regularizer.lambda, cfg.optimizer, cfg.seed,
                                       cfg.target_encoder_input, cfg.regularizer.grad_on_hard);
    std::int64_t step = 0, epoch = 0;
    double last_T = 1.0;
    while (step < cfg.train.steps) {
      BatchIter iter(corpus.train, cfg.train.batch_size, cfg.seed, epoch++);
      Batch batch;
      while (step < cfg.train.steps && iter.next(batch)) {
        const StepReport rep = trainer.train_step(batch);
        logger.log_step(rep);
        last_T = rep.temperature;
        ++step;
        if (cfg.train.valid_every > 0 && step % cfg.train.valid_every == 0) {
          logger.log_validation(step, trainer.validation_nll(corpus.valid, cfg.train.batch_size));
        }
      }
    }
    result.steps_run = step;
    result.final_valid_nll = trainer.validation_nll(corpus.valid, cfg.train.batch_size);
    const auto assignments = trainer.assign_domains(corpus.valid, cfg.train.batch_size);
    const auto stats = domain_usage_stats(assignments, cfg.n_domains);
    result.valid_domain_histogram.assign(stats.histogram.size(), 0);
    for (std::size_t i = 0; i < stats.histogram.size(); ++i) {
      result.valid_domain_histogram[i] = static_cast<std::int64_t>(stats.histogram[i]);
    }
    result.valid_usage_entropy = stats.entropy;
    snap.step = step;
    snap.temperature = last_T;
    snap.frozen = trainer.schedule().frozen;
    adam = &trainer.adam_state();
    save_checkpoint(ckpt_path, model, *adam, snap, cfg);
  }
  return result;
}

template <typename Real>
TranslateResult translate_impl(const std::string& checkpoint_path, const std::string& corpus_path,
                               const std::string& mode, std::int64_t beam_size,
                               const std::string& out_path) {
  auto loaded = load_checkpoint<Real>(checkpoint_path);
  const RunConfig& cfg = loaded.config;
  MultiRefCorpus corpus = read_corpus(corpus_path);
  check_token_range(corpus, loaded.model->config().src_vocab_size);

  Vocabulary vocab = cfg.data.synth
                         ? Vocabulary(cfg.data.synth->vocab_size, cfg.data.synth->marker_count())
                         : Vocabulary(cfg.data.paths->vocab_content, cfg.data.paths->vocab_markers);

  DecodeMode dm;
  if (mode == "greedy") dm = DecodeMode::Greedy;
  else if (mode == "beam") dm = DecodeMode::Beam;
  else if (mode == "sample") dm = DecodeMode::Sample;
  else throw ContractError("translate: mode must be greedy, beam or sample");

  const std::int64_t max_new = loaded.model->config().max_len - 1;
  std::vector<HypothesisSet> sets;
  if (cfg.method == Method::Vanilla) {
    sets = generate_baseline(*loaded.model, corpus.entries, dm, beam_size, max_new, cfg.seed);
  } else {
    sets = generate_all_domains(*loaded.model, corpus.entries, dm, beam_size, max_new);
  }

  std::vector<HypRecord> records;
  for (const auto& set : sets) {
    for (const auto& h : set.hyps) {
      HypRecord r;
      r.source_id = set.source_id;
      r.domain = h.domain;
      r.tokens = h.tokens;
      r.text = vocab.detok(h.tokens);
      r.score = h.score;
      records.push_back(std::move(r));
    }
  }
  write_hypotheses(out_path, records);
  TranslateResult res;
  res.out_path = out_path;
  res.n_sources = static_cast<std::int64_t>(sets.size());
  res.n_records = static_cast<std::int64_t>(records.size());
  return res;
}

template <typename Real>
Batch fixed_shape_batch(std::int64_t batch_size, std::int64_t len, std::int32_t vocab,
                        std::uint64_t seed) {
  Rng rng = stream_rng(seed, "bench-batch");
  std::vector<SentencePair> pairs(static_cast<std::size_t>(batch_size));
  std::vector<const SentencePair*> ptrs;
  for (auto& p : pairs) {
    p.src.resize(static_cast<std::size_t>(len));
    p.tgt.resize(static_cast<std::size_t>(len - 1));  // +1 start shift keeps tgt_in at `len`
    for (auto& t : p.src) t = kNumReserved + static_cast<std::int32_t>(rng.uniform_int(static_cast<std::uint64_t>(vocab)));
    for (auto& t : p.tgt) t = kNumReserved + static_cast<std::int32_t>(rng.uniform_int(static_cast<std::uint64_t>(vocab)));
    ptrs.push_back(&p);
  }
  return make_batch(ptrs);
}

template <typename Real>
std::vector<BenchRow> bench_impl(const RunConfig& cfg, const std::vector<std::int64_t>& domain_counts,
                                 std::int64_t warmup_steps, std::int64_t timed_steps) {
  using clock = std::chrono::steady_clock;
  const std::int32_t content = cfg.data.synth ? cfg.data.synth->vocab_size : 20;
  const std::int32_t vocab = kNumReserved + content;
  const std::int64_t len = cfg.data.synth ? cfg.data.synth->len_max : 8;

  std::vector<BenchRow> rows;
  for (const char* method : {"target_encoder", "moe"}) {
    for (std::int64_t n : domain_counts) {
      RunConfig rc = cfg;
      rc.n_domains = static_cast<std::int32_t>(n);
      TransformerModel<Real> model(rc.model_config(vocab, vocab),
                                   std::string(method) == "target_encoder");
      Batch batch = fixed_shape_batch<Real>(cfg.train.batch_size, len, content, cfg.seed);
      const double words = static_cast<double>(batch.target_words());

      std::vector<double> step_seconds;
      std::int64_t fwd_total = 0;
      auto run_step = [&](auto& trainer, bool timed) {
        const std::int64_t before = model.decoder_forward_count();
        const auto t0 = clock::now();
        if constexpr (std::is_same_v<std::decay_t<decltype(trainer)>, MoeTrainer<Real>>) {
          trainer.moe_train_step(batch);
        } else {
          trainer.train_step(batch);
        }
        const auto t1 = clock::now();
        if (timed) {
          step_seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
          fwd_total += model.decoder_forward_count() - before;
        }
      };

      if (std::string(method) == "moe") {
        MoeTrainer<Real> trainer(model, cfg.optimizer, cfg.seed);
        for (std::int64_t i = 0; i < warmup_steps; ++i) run_step(trainer, false);
        for (std::int64_t i = 0; i < timed_steps; ++i) run_step(trainer, true);
      } else {
        AnnealSchedule sched = cfg.schedule;
        sched.total_steps = std::max<std::int64_t>(warmup_steps + timed_steps + 1, 2);
        TargetEncoderTrainer<Real> trainer(model, sched, cfg.regularizer.lambda, cfg.optimizer, cfg.seed);
        for (std::int64_t i = 0; i < warmup_steps; ++i) run_step(trainer, false);
        for (std::int64_t i = 0; i < timed_steps; ++i) run_step(trainer, true);
      }

      std::sort(step_seconds.begin(), step_seconds.end());
      const double median = step_seconds[step_seconds.size() / 2];
      BenchRow row;
      row.method = method;
      row.n_domains = n;
      row.words_per_sec = words / median;
      row.decoder_forwards_per_step = static_cast<double>(fwd_total) / static_cast<double>(timed_steps);
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace

std::string resolve_out_dir(const RunConfig& config) {
  if (const char* env = std::getenv("DIVSEQ_OUT_DIR")) {
    if (*env) return env;
  }
  return config.out_dir;
}

TrainResult cmd_train(const RunConfig& config) {
  config.validate();
  const std::string out_dir = resolve_out_dir(config);
  DirLock lock(out_dir);
  return config.precision == Precision::Float64 ? train_impl<double>(config, out_dir)
                                                : train_impl<float>(config, out_dir);
}

TranslateResult cmd_translate(const std::string& checkpoint_path, const std::string& corpus_path,
                              const std::string& mode, std::int64_t beam_size,
                              const std::string& out_path) {
  const std::string dtype = checkpoint_dtype_of(checkpoint_path);
  return dtype == "f64" ? translate_impl<double>(checkpoint_path, corpus_path, mode, beam_size, out_path)
                        : translate_impl<float>(checkpoint_path, corpus_path, mode, beam_size, out_path);
}

EvalReport cmd_evaluate(const std::string& hyp_path, const std::string& ref_path,
                        const std::string& out_path) {
  const auto records = read_hypotheses(hyp_path);
  const MultiRefCorpus ref_corpus = read_corpus(ref_path);
  if (records.empty()) throw ContractError("evaluate: hypothesis file is empty");

  std::map<std::int64_t, std::vector<const HypRecord*>> by_source;
  for (const auto& r : records) by_source[r.source_id].push_back(&r);

  std::map<std::int64_t, const MultiRefEntry*> refs_by_id;
  for (const auto& e : ref_corpus.entries) refs_by_id[e.id] = &e;

  std::vector<std::int64_t> missing;
  for (const auto& [id, _] : by_source) {
    if (!refs_by_id.count(id)) missing.push_back(id);
  }
  for (const auto& [id, _] : refs_by_id) {
    if (!by_source.count(id)) missing.push_back(id);
  }
  if (!missing.empty()) {
    std::string ids;
    for (std::size_t i = 0; i < missing.size() && i < 20; ++i) {
      if (i) ids += ", ";
      ids += std::to_string(missing[i]);
    }
    throw Error("evaluate: hypothesis/reference alignment failed for source ids: " + ids);
  }

  const std::size_t n = by_source.begin()->second.size();
  std::vector<std::vector<TokenSeq>> hyp_sets, ref_sets;
  std::int64_t covered = 0;
  for (const auto& e : ref_corpus.entries) {
    const auto& hyps = by_source.at(e.id);
    if (hyps.size() != n) {
      throw ContractError("evaluate: source " + std::to_string(e.id) + " has " +
                          std::to_string(hyps.size()) + " hypotheses, expected " + std::to_string(n));
    }
    std::vector<TokenSeq> set;
    std::set<std::int32_t> domains;
    for (const auto* h : hyps) {
      set.push_back(h->tokens);
      domains.insert(h->domain);
    }
    bool full = true;
    for (std::int32_t d = 0; d < static_cast<std::int32_t>(n); ++d) full = full && domains.count(d);
    if (full) ++covered;
    hyp_sets.push_back(std::move(set));
    ref_sets.push_back(e.refs);
  }

  EvalReport rep;
  rep.n_sources = static_cast<std::int64_t>(hyp_sets.size());
  rep.hyps_per_source = static_cast<std::int64_t>(n);
  const BleuReport mb = mbleu(hyp_sets, ref_sets);
  rep.mbleu = mb.score;
  rep.mbleu_precisions = mb.precisions;
  rep.mbleu_bp = mb.brevity_penalty;
  if (n >= 2) {
    const BleuReport pw = pairwise_bleu(hyp_sets);
    rep.pairwise = pw.score;
    rep.pairwise_precisions = pw.precisions;
    rep.pairwise_bp = pw.brevity_penalty;
  }
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<TokenSeq> slot;
    for (const auto& set : hyp_sets) slot.push_back(set[j]);
    rep.per_domain_bleu.push_back(corpus_bleu(slot, ref_sets).score);
  }
  rep.domain_coverage = static_cast<double>(covered) / static_cast<double>(rep.n_sources);
  write_eval_report(out_path, rep);
  return rep;
}

std::vector<BenchRow> cmd_bench_speed(const RunConfig& config,
                                      const std::vector<std::int64_t>& domain_counts,
                                      const std::string& out_csv_path, std::int64_t warmup_steps,
                                      std::int64_t timed_steps) {
  config.validate();
  const auto rows = config.precision == Precision::Float64
                        ? bench_impl<double>(config, domain_counts, warmup_steps, timed_steps)
                        : bench_impl<float>(config, domain_counts, warmup_steps, timed_steps);
  std::ofstream csv(out_csv_path, std::ios::trunc);
  if (!csv) throw IoError("bench: cannot open " + out_csv_path);
  csv << "method,n_domains,words_per_sec,decoder_forwards_per_step\n";
  for (const auto& r : rows) {
    csv << r.method << ',' << r.n_domains << ',' << r.words_per_sec << ','
        << r.decoder_forwards_per_step << '\n';
  }
  return rows;
}

}  // namespace divseq
