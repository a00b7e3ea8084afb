#pragma once

// Checkpoint format: a textual header (magic + dtype, one JSON line with the
// run config echo, array names and shapes, optimizer metadata) followed by
// raw little-endian IEEE-754 arrays in declared order: parameters, Adam first
// moments, Adam second moments. load(save(x)) reproduces forward outputs
// bit-exactly in the same precision.

#include <cstdint>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "divseq/config.hpp"
#include "divseq/error.hpp"
#include "divseq/optim.hpp"
#include "divseq/transformer.hpp"

namespace divseq {

inline constexpr const char* kCheckpointMagic = "DIVSEQ-CKPT";
inline constexpr int kCheckpointVersion = 1;

template <typename Real>
const char* checkpoint_dtype();
template <>
inline const char* checkpoint_dtype<float>() { return "f32"; }
template <>
inline const char* checkpoint_dtype<double>() { return "f64"; }

// Reads just the dtype tag so callers can dispatch on precision.
inline std::string checkpoint_dtype_of(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  std::string magic;
  int version = 0;
  std::string dtype;
  in >> magic >> version >> dtype;
  if (magic != kCheckpointMagic || version != kCheckpointVersion || (dtype != "f32" && dtype != "f64")) {
    throw IoError("checkpoint: " + path + " is not a version-" + std::to_string(kCheckpointVersion) +
                  " checkpoint");
  }
  return dtype;
}

struct TrainingSnapshot {
  std::int64_t step = 0;
  double temperature = 0.0;
  bool frozen = false;
};

template <typename Real>
void save_checkpoint(const std::string& path, const TransformerModel<Real>& model,
                     const AdamState<Real>& adam, const TrainingSnapshot& snap,
                     const RunConfig& config) {
  nlohmann::json header;
  header["run_config"] = nlohmann::json::parse(config.resolved_json());
  header["src_vocab"] = model.config().src_vocab_size;
  header["tgt_vocab"] = model.config().tgt_vocab_size;
  header["step"] = snap.step;
  header["temperature"] = snap.temperature;
  header["frozen"] = snap.frozen;
  header["adam_step"] = adam.step;
  nlohmann::json arrays = nlohmann::json::array();
  for (const auto& p : model.parameters()) {
    arrays.push_back({{"name", p.name}, {"shape", p.tensor->shape()}});
  }
  header["arrays"] = arrays;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("save_checkpoint: cannot open " + path);
  out << kCheckpointMagic << ' ' << kCheckpointVersion << ' ' << checkpoint_dtype<Real>() << '\n';
  out << header.dump() << '\n';
  out << "BIN\n";
  auto write_array = [&](const std::vector<Real>& v) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(Real)));
  };
  for (const auto& p : model.parameters()) write_array(p.tensor->vec());
  for (const auto& m : adam.m) write_array(m);
  for (const auto& v : adam.v) write_array(v);
  if (!out) throw IoError("save_checkpoint: write failed for " + path);
}

template <typename Real>
struct LoadedCheckpoint {
  RunConfig config;
  std::unique_ptr<TransformerModel<Real>> model;
  AdamState<Real> adam;
  TrainingSnapshot snapshot;
};

template <typename Real>
LoadedCheckpoint<Real> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open " + path);
  std::string magic, dtype;
  int version = 0;
  in >> magic >> version >> dtype;
  in.ignore(1);  // newline
  if (magic != kCheckpointMagic) throw IoError("load_checkpoint: bad magic in " + path);
  if (version != kCheckpointVersion) {
    throw IoError("load_checkpoint: unsupported version " + std::to_string(version));
  }
  if (dtype != checkpoint_dtype<Real>()) {
    throw IoError(std::string("load_checkpoint: dtype mismatch (file is ") + dtype + ", expected " +
                  checkpoint_dtype<Real>() + ")");
  }
  std::string header_line, bin_line;
  if (!std::getline(in, header_line)) throw IoError("load_checkpoint: truncated header in " + path);
  if (!std::getline(in, bin_line) || bin_line != "BIN") {
    throw IoError("load_checkpoint: missing BIN marker in " + path);
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(std::string("load_checkpoint: malformed header: ") + e.what());
  }

  LoadedCheckpoint<Real> out;
  out.config = parse_run_config(header.at("run_config").dump());
  const auto src_vocab = header.at("src_vocab").get<std::int32_t>();
  const auto tgt_vocab = header.at("tgt_vocab").get<std::int32_t>();
  out.model = std::make_unique<TransformerModel<Real>>(out.config.model_config(src_vocab, tgt_vocab),
                                                       out.config.method == Method::TargetEncoder);
  out.snapshot.step = header.at("step").get<std::int64_t>();
  out.snapshot.temperature = header.at("temperature").get<double>();
  out.snapshot.frozen = header.at("frozen").get<bool>();

  const auto& arrays = header.at("arrays");
  auto& params = out.model->parameters();
  if (arrays.size() != params.size()) {
    throw IoError("load_checkpoint: header declares " + std::to_string(arrays.size()) +
                  " arrays, model has " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string name = arrays[i].at("name").get<std::string>();
    const Shape shape = arrays[i].at("shape").get<Shape>();
    if (name != params[i].name || shape != params[i].tensor->shape()) {
      throw IoError("load_checkpoint: array '" + name + "' " + shape_str(shape) +
                    " does not match model parameter '" + params[i].name + "' " +
                    shape_str(params[i].tensor->shape()));
    }
  }

  auto read_array = [&](std::vector<Real>& v) {
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(Real)));
    if (in.gcount() != static_cast<std::streamsize>(v.size() * sizeof(Real))) {
      throw IoError("load_checkpoint: truncated array data in " + path);
    }
  };
  for (auto& p : params) read_array(p.tensor->vec());
  out.adam.init(params);
  out.adam.step = header.at("adam_step").get<std::int64_t>();
  for (auto& m : out.adam.m) read_array(m);
  for (auto& v : out.adam.v) read_array(v);
  char extra = 0;
  if (in.read(&extra, 1) && in.gcount() > 0) {
    throw IoError("load_checkpoint: trailing bytes in " + path);
  }
  return out;
}

}  // namespace divseq
