#include "divseq/records.hpp"

#include <nlohmann/json.hpp>

#include "divseq/error.hpp"

namespace divseq {

using nlohmann::json;

void write_hypotheses(const std::string& path, const std::vector<HypRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("write_hypotheses: cannot open " + path);
  for (const auto& r : records) {
    json j;
    j["source_id"] = r.source_id;
    j["domain"] = r.domain;
    j["tokens"] = r.tokens;
    j["text"] = r.text;
    j["score"] = r.score;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write_hypotheses: write failed for " + path);
}

std::vector<HypRecord> read_hypotheses(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("read_hypotheses: cannot open " + path);
  std::vector<HypRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      HypRecord r;
      r.source_id = j.at("source_id").get<std::int64_t>();
      r.domain = j.at("domain").get<std::int32_t>();
      r.tokens = j.at("tokens").get<TokenSeq>();
      r.text = j.at("text").get<std::string>();
      r.score = j.at("score").get<double>();
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ParseError(std::string("read_hypotheses: ") + e.what(), lineno);
    }
  }
  return out;
}

RunLogger::RunLogger(const std::string& path) : out_(path, std::ios::trunc) {
  if (!out_) throw IoError("RunLogger: cannot open " + path);
}

void RunLogger::log_config(const std::string& resolved_config_json) {
  json j;
  j["config"] = json::parse(resolved_config_json);
  out_ << j.dump() << '\n';
}

void RunLogger::log_step(const StepReport& r) {
  json j;
  j["step"] = r.step;
  j["nll"] = r.nll;
  j["l_xe"] = r.l_xe;
  j["T"] = r.temperature;
  j["mode"] = r.mode;
  j["hist"] = r.histogram;
  j["fwd"] = r.decoder_forwards;
  j["lr"] = r.lr;
  out_ << j.dump() << '\n';
}

void RunLogger::log_validation(std::int64_t step, double valid_nll) {
  json j;
  j["step"] = step;
  j["valid_nll"] = valid_nll;
  out_ << j.dump() << '\n';
}

std::string csv_path_for(const std::string& report_path) {
  const auto dot = report_path.find_last_of('.');
  const auto slash = report_path.find_last_of('/');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) {
    return report_path + ".csv";
  }
  return report_path.substr(0, dot) + ".csv";
}

void write_eval_report(const std::string& path, const EvalReport& r) {
  {
    json j;
    j["mbleu"] = r.mbleu;
    j["pairwise"] = r.pairwise;
    j["mbleu_precisions"] = r.mbleu_precisions;
    j["mbleu_bp"] = r.mbleu_bp;
    j["pairwise_precisions"] = r.pairwise_precisions;
    j["pairwise_bp"] = r.pairwise_bp;
    j["per_domain_bleu"] = r.per_domain_bleu;
    j["domain_coverage"] = r.domain_coverage;
    j["n_sources"] = r.n_sources;
    j["hyps_per_source"] = r.hyps_per_source;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("write_eval_report: cannot open " + path);
    out << j.dump(2) << '\n';
  }
  {
    std::ofstream csv(csv_path_for(path), std::ios::trunc);
    if (!csv) throw IoError("write_eval_report: cannot open " + csv_path_for(path));
    csv << "mbleu,pairwise,domain_coverage,n_sources,hyps_per_source\n";
    csv << json(r.mbleu).dump() << ',' << json(r.pairwise).dump() << ','
        << json(r.domain_coverage).dump() << ',' << r.n_sources << ',' << r.hyps_per_source << '\n';
  }
}

}  // namespace divseq
