#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "divseq/corpus.hpp"
#include "divseq/metrics.hpp"
#include "divseq/trainer.hpp"

namespace divseq {

// One decoded hypothesis as stored on disk.
struct HypRecord {
  std::int64_t source_id = 0;
  std::int32_t domain = -1;  // -1 for baseline hypotheses
  TokenSeq tokens;
  std::string text;
  double score = 0.0;
};

void write_hypotheses(const std::string& path, const std::vector<HypRecord>& records);
std::vector<HypRecord> read_hypotheses(const std::string& path);

// Line-delimited run log; the first record embeds the full resolved config.
class RunLogger {
 public:
  explicit RunLogger(const std::string& path);
  void log_config(const std::string& resolved_config_json);
  void log_step(const StepReport& report);
  void log_validation(std::int64_t step, double valid_nll);

 private:
  std::ofstream out_;
};

struct EvalReport {
  double mbleu = 0.0;
  double pairwise = -1.0;  // -1 when N < 2
  std::array<double, 4> mbleu_precisions{0, 0, 0, 0};
  double mbleu_bp = 0.0;
  std::array<double, 4> pairwise_precisions{0, 0, 0, 0};
  double pairwise_bp = 0.0;
  std::vector<double> per_domain_bleu;
  double domain_coverage = 0.0;  // fraction of sources with all domain slots present
  std::int64_t n_sources = 0;
  std::int64_t hyps_per_source = 0;
};

// Writes the JSON report to `path` and a flat CSV row next to it
// (same path with a .csv extension).
void write_eval_report(const std::string& path, const EvalReport& report);

std::string csv_path_for(const std::string& report_path);

}  // namespace divseq
