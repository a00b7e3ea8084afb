#include "divseq/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "divseq/error.hpp"

namespace divseq {

using nlohmann::json;

const char* method_name(Method m) {
  switch (m) {
    case Method::TargetEncoder: return "target_encoder";
    case Method::Moe: return "moe";
    case Method::Vanilla: return "vanilla";
  }
  return "?";
}

const char* precision_name(Precision p) {
  return p == Precision::Float32 ? "float32" : "float64";
}

namespace {

[[noreturn]] void fail(const std::string& where, const std::string& what) {
  throw ConfigError("config: " + where + ": " + what);
}

void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) fail(where, "expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) fail(where + "." + key, "unknown key");
  }
}

template <typename T>
T get_or(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  return j.at(key).get<T>();
}

}  // namespace

void RunConfig::validate() const {
  if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1) fail("model", "dimensions must be positive");
  if (d_model % n_heads != 0) fail("model", "d_model must be divisible by n_heads");
  if (n_domains < 1) fail("model.n_domains", "must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) fail("model.dropout", "must be in [0, 1)");
  if (max_len < 4) fail("model.max_len", "must be >= 4");
  if (method == Method::Vanilla && n_domains != 1) {
    fail("model.n_domains", "method 'vanilla' requires n_domains = 1");
  }
  if (train.steps < 1 || train.batch_size < 1) fail("train", "steps and batch_size must be positive");
  if (train.valid_every < 0) fail("train.valid_every", "must be >= 0");
  if (optimizer.lr_peak <= 0.0 || optimizer.warmup < 1) fail("optimizer", "lr_peak must be > 0, warmup >= 1");
  if (regularizer.lambda < 0.0 || !std::isfinite(regularizer.lambda)) fail("regularizer.lambda", "must be finite and >= 0");
  schedule.validate();
  const bool has_synth = data.synth.has_value();
  const bool has_paths = data.paths.has_value();
  if (has_synth == has_paths) fail("data", "exactly one of 'synth' or 'paths' is required");
  if (has_synth) data.synth->validate();
  if (has_paths && (data.paths->vocab_content < 1)) fail("data.paths.vocab_content", "must be >= 1");
  if (decoding.mode != "greedy" && decoding.mode != "beam" && decoding.mode != "sample") {
    fail("decoding.mode", "must be greedy, beam or sample");
  }
  if (decoding.beam_size < 1) fail("decoding.beam_size", "must be >= 1");
}

ModelConfig RunConfig::model_config(std::int32_t src_vocab, std::int32_t tgt_vocab) const {
  ModelConfig mc;
  mc.d_model = d_model;
  mc.n_layers = n_layers;
  mc.n_heads = n_heads;
  mc.d_ff = d_ff;
  mc.src_vocab_size = src_vocab;
  mc.tgt_vocab_size = tgt_vocab;
  mc.n_domains = n_domains;
  mc.dropout_enc_dec = dropout;
  mc.dropout_target_enc = 0.0;
  mc.max_len = max_len;
  mc.seed = seed;
  return mc;
}

std::string RunConfig::resolved_json() const {
  json j;
  j["method"] = method_name(method);
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  j["precision"] = precision_name(precision);
  j["model"] = {{"d_model", d_model}, {"n_layers", n_layers}, {"n_heads", n_heads},
                {"d_ff", d_ff},       {"n_domains", n_domains}, {"dropout", dropout},
                {"max_len", max_len}, {"dropout_target_enc", 0.0}};
  if (method == Method::TargetEncoder) {
    j["target_encoder_input"] = target_encoder_input == TargetEncoderInput::Target ? "target" : "source";
    j["schedule"] = {{"total_steps", schedule.total_steps}, {"t_min", schedule.t_min},
                     {"p_hard", schedule.p_hard},           {"gumbel", schedule.use_gumbel}};
    j["regularizer"] = {{"lambda", regularizer.lambda}, {"grad_on_hard", regularizer.grad_on_hard}};
  }
  j["optimizer"] = {{"lr_peak", optimizer.lr_peak}, {"warmup", optimizer.warmup}};
  j["train"] = {{"steps", train.steps}, {"batch_size", train.batch_size}, {"valid_every", train.valid_every}};
  if (data.synth) {
    j["data"] = {{"synth", {{"vocab_size", data.synth->vocab_size}, {"modes", data.synth->modes},
                            {"len_min", data.synth->len_min},       {"len_max", data.synth->len_max},
                            {"train", data.synth->train_size},      {"valid", data.synth->valid_size},
                            {"test", data.synth->test_size},        {"seed", data.synth->seed}}}};
  } else if (data.paths) {
    j["data"] = {{"paths", {{"train", data.paths->train}, {"valid", data.paths->valid},
                            {"test", data.paths->test},   {"vocab_content", data.paths->vocab_content},
                            {"vocab_markers", data.paths->vocab_markers}}}};
  }
  j["decoding"] = {{"mode", decoding.mode}, {"beam_size", decoding.beam_size}};
  return j.dump();
}

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  check_keys(j, "root",
             {"method", "seed", "out_dir", "precision", "model", "target_encoder_input", "schedule",
              "regularizer", "optimizer", "train", "data", "decoding"});
  RunConfig c;
  try {
    const std::string method = get_or<std::string>(j, "method", "target_encoder");
    if (method == "target_encoder") c.method = Method::TargetEncoder;
    else if (method == "moe") c.method = Method::Moe;
    else if (method == "vanilla") c.method = Method::Vanilla;
    else fail("method", "must be target_encoder, moe or vanilla");

    if (c.method != Method::TargetEncoder) {
      for (const char* key : {"target_encoder_input", "schedule", "regularizer"}) {
        if (j.contains(key)) fail(key, std::string("only valid for method 'target_encoder'"));
      }
    }

    c.seed = get_or<std::uint64_t>(j, "seed", 1);
    c.out_dir = get_or<std::string>(j, "out_dir", "run");
    const std::string prec = get_or<std::string>(j, "precision", "float32");
    if (prec == "float32") c.precision = Precision::Float32;
    else if (prec == "float64") c.precision = Precision::Float64;
    else fail("precision", "must be float32 or float64");

    if (j.contains("model")) {
      const json& m = j.at("model");
      check_keys(m, "model", {"d_model", "n_layers", "n_heads", "d_ff", "n_domains", "dropout",
                              "max_len", "dropout_target_enc"});
      c.d_model = get_or<std::int64_t>(m, "d_model", c.d_model);
      c.n_layers = get_or<std::int64_t>(m, "n_layers", c.n_layers);
      c.n_heads = get_or<std::int64_t>(m, "n_heads", c.n_heads);
      c.d_ff = get_or<std::int64_t>(m, "d_ff", c.d_ff);
      c.n_domains = get_or<std::int32_t>(m, "n_domains", c.n_domains);
      c.dropout = get_or<double>(m, "dropout", c.dropout);
      c.max_len = get_or<std::int64_t>(m, "max_len", c.max_len);
      if (get_or<double>(m, "dropout_target_enc", 0.0) != 0.0) {
        fail("model.dropout_target_enc", "the target encoder must not use dropout");
      }
    }
    if (c.method == Method::Vanilla && !j.contains("model")) c.n_domains = 1;

    const std::string tei = get_or<std::string>(j, "target_encoder_input", "target");
    if (tei == "target") c.target_encoder_input = TargetEncoderInput::Target;
    else if (tei == "source") c.target_encoder_input = TargetEncoderInput::Source;
    else fail("target_encoder_input", "must be target or source");

    if (j.contains("schedule")) {
      const json& s = j.at("schedule");
      check_keys(s, "schedule", {"total_steps", "t_min", "p_hard", "gumbel"});
      if (s.contains("total_steps")) {
        c.schedule.total_steps = s.at("total_steps").get<std::int64_t>();
        c.schedule_total_steps_set = true;
      }
      c.schedule.t_min = get_or<double>(s, "t_min", c.schedule.t_min);
      c.schedule.p_hard = get_or<double>(s, "p_hard", c.schedule.p_hard);
      c.schedule.use_gumbel = get_or<bool>(s, "gumbel", false);
    }
    if (j.contains("regularizer")) {
      const json& r = j.at("regularizer");
      check_keys(r, "regularizer", {"lambda", "grad_on_hard"});
      c.regularizer.lambda = get_or<double>(r, "lambda", c.regularizer.lambda);
      c.regularizer.grad_on_hard = get_or<bool>(r, "grad_on_hard", false);
    }
    if (j.contains("optimizer")) {
      const json& o = j.at("optimizer");
      check_keys(o, "optimizer", {"lr_peak", "warmup"});
      c.optimizer.lr_peak = get_or<double>(o, "lr_peak", c.optimizer.lr_peak);
      c.optimizer.warmup = get_or<std::int64_t>(o, "warmup", c.optimizer.warmup);
    }
    if (j.contains("train")) {
      const json& t = j.at("train");
      check_keys(t, "train", {"steps", "batch_size", "valid_every"});
      c.train.steps = get_or<std::int64_t>(t, "steps", c.train.steps);
      c.train.batch_size = get_or<std::int64_t>(t, "batch_size", c.train.batch_size);
      c.train.valid_every = get_or<std::int64_t>(t, "valid_every", c.train.valid_every);
    }
    if (!j.contains("data")) fail("data", "required");
    {
      const json& d = j.at("data");
      check_keys(d, "data", {"synth", "paths"});
      if (d.contains("synth")) {
        const json& s = d.at("synth");
        check_keys(s, "data.synth",
                   {"vocab_size", "modes", "len_min", "len_max", "train", "valid", "test", "seed"});
        SynthSpec spec;
        spec.vocab_size = get_or<std::int32_t>(s, "vocab_size", spec.vocab_size);
        spec.modes = get_or<std::int32_t>(s, "modes", spec.modes);
        spec.len_min = get_or<std::int32_t>(s, "len_min", spec.len_min);
        spec.len_max = get_or<std::int32_t>(s, "len_max", spec.len_max);
        spec.train_size = get_or<std::int64_t>(s, "train", spec.train_size);
        spec.valid_size = get_or<std::int64_t>(s, "valid", spec.valid_size);
        spec.test_size = get_or<std::int64_t>(s, "test", spec.test_size);
        spec.seed = get_or<std::uint64_t>(s, "seed", spec.seed);
        c.data.synth = spec;
      }
      if (d.contains("paths")) {
        const json& p = d.at("paths");
        check_keys(p, "data.paths", {"train", "valid", "test", "vocab_content", "vocab_markers"});
        CorpusPaths cp;
        cp.train = get_or<std::string>(p, "train", "");
        cp.valid = get_or<std::string>(p, "valid", "");
        cp.test = get_or<std::string>(p, "test", "");
        cp.vocab_content = get_or<std::int32_t>(p, "vocab_content", 0);
        cp.vocab_markers = get_or<std::int32_t>(p, "vocab_markers", 0);
        c.data.paths = cp;
      }
    }
    if (j.contains("decoding")) {
      const json& d = j.at("decoding");
      check_keys(d, "decoding", {"mode", "beam_size"});
      c.decoding.mode = get_or<std::string>(d, "mode", c.decoding.mode);
      c.decoding.beam_size = get_or<std::int64_t>(d, "beam_size", c.decoding.beam_size);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (!c.schedule_total_steps_set) c.schedule.total_steps = c.train.steps;
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_run_config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

}  // namespace divseq
