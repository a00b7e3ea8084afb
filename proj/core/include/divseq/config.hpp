#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "divseq/corpus.hpp"
#include "divseq/latent.hpp"
#include "divseq/trainer.hpp"
#include "divseq/transformer.hpp"

namespace divseq {

enum class Method { TargetEncoder, Moe, Vanilla };
enum class Precision { Float32, Float64 };

const char* method_name(Method m);
const char* precision_name(Precision p);

struct TrainSection {
  std::int64_t steps = 8000;
  std::int64_t batch_size = 16;
  std::int64_t valid_every = 500;  // 0 disables periodic validation
};

struct RegularizerSection {
  double lambda = 0.1;
  bool grad_on_hard = false;
};

struct DecodingSection {
  std::string mode = "greedy";  // greedy | beam | sample
  std::int64_t beam_size = 4;
};

struct CorpusPaths {
  std::string train;
  std::string valid;
  std::string test;
  std::int32_t vocab_content = 0;
  std::int32_t vocab_markers = 0;
};

struct DataSection {
  std::optional<SynthSpec> synth;
  std::optional<CorpusPaths> paths;
};

// Everything a run needs; parsed from a single JSON file with strict schema
// validation (unknown keys are errors, method-specific sections enforced).
struct RunConfig {
  Method method = Method::TargetEncoder;
  TargetEncoderInput target_encoder_input = TargetEncoderInput::Target;
  Precision precision = Precision::Float32;
  std::uint64_t seed = 1;
  std::string out_dir = "run";

  // model section (vocab sizes resolved from data later)
  std::int64_t d_model = 64;
  std::int64_t n_layers = 2;
  std::int64_t n_heads = 2;
  std::int64_t d_ff = 128;
  std::int32_t n_domains = 4;
  double dropout = 0.1;
  std::int64_t max_len = 32;

  AnnealSchedule schedule;  // total_steps defaults to train.steps when unset
  bool schedule_total_steps_set = false;
  RegularizerSection regularizer;
  OptimizerConfig optimizer;
  TrainSection train;
  DataSection data;
  DecodingSection decoding;

  void validate() const;
  ModelConfig model_config(std::int32_t src_vocab, std::int32_t tgt_vocab) const;
  std::string resolved_json() const;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

}  // namespace divseq
