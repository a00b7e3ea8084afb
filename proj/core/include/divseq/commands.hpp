#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "divseq/config.hpp"
#include "divseq/records.hpp"

namespace divseq {

struct TrainResult {
  std::string out_dir;
  std::string checkpoint_path;
  std::string log_path;
  std::string test_corpus_path;
  std::int64_t steps_run = 0;
  double final_valid_nll = 0.0;
  // Hard domain assignments of the final model over the validation split.
  std::vector<std::int64_t> valid_domain_histogram;
  double valid_usage_entropy = 0.0;
};

// Runs the selected method's training loop; emits per-step records, a final
// checkpoint and canonical corpus files under the output directory. Fully
// deterministic per (config, seed).
TrainResult cmd_train(const RunConfig& config);

struct TranslateResult {
  std::string out_path;
  std::int64_t n_sources = 0;
  std::int64_t n_records = 0;
};

// Decodes the corpus with the checkpointed model: one hypothesis per domain
// (top-1 of each per-domain beam in beam mode) for domain-conditioned
// methods, beam_size hypotheses (beam/sample) for the vanilla baseline.
TranslateResult cmd_translate(const std::string& checkpoint_path, const std::string& corpus_path,
                              const std::string& mode, std::int64_t beam_size,
                              const std::string& out_path);

// Scores a hypothesis file against a reference corpus; writes the JSON report
// plus a flat CSV row.
EvalReport cmd_evaluate(const std::string& hyp_path, const std::string& ref_path,
                        const std::string& out_path);

struct BenchRow {
  std::string method;
  std::int64_t n_domains = 0;
  double words_per_sec = 0.0;
  double decoder_forwards_per_step = 0.0;
};

// Fixed-shape training throughput per (method, N): median words/sec over
// timed steps after warmup, plus exact decoder-forward counts.
std::vector<BenchRow> cmd_bench_speed(const RunConfig& config,
                                      const std::vector<std::int64_t>& domain_counts,
                                      const std::string& out_csv_path,
                                      std::int64_t warmup_steps = 3, std::int64_t timed_steps = 12);

// Resolves the run output directory: the DIVSEQ_OUT_DIR environment variable
// overrides the configured one.
std::string resolve_out_dir(const RunConfig& config);

}  // namespace divseq
