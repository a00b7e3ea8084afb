#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "divseq/tensor.hpp"

namespace divseq {

using TokenSeq = std::vector<std::int32_t>;

// Reserved ids shared by every vocabulary.
inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kStartId = 1;
inline constexpr std::int32_t kEosId = 2;
inline constexpr std::int32_t kUnkId = 3;
inline constexpr std::int32_t kNumReserved = 4;

// Bijective id<->token mapping: {pad, start, eos, unk}, then content tokens
// w0..w{V-1}, then one marker token per mode that appends one.
class Vocabulary {
 public:
  Vocabulary() = default;
  Vocabulary(std::int32_t content_tokens, std::int32_t marker_tokens);

  std::int32_t size() const { return kNumReserved + content_ + markers_; }
  std::int32_t content_tokens() const { return content_; }
  std::int32_t marker_tokens() const { return markers_; }

  std::int32_t content_id(std::int32_t i) const { return kNumReserved + i; }
  std::int32_t marker_id(std::int32_t i) const { return kNumReserved + content_ + i; }
  bool is_content(std::int32_t id) const { return id >= kNumReserved && id < kNumReserved + content_; }
  bool is_marker(std::int32_t id) const { return id >= kNumReserved + content_ && id < size(); }

  std::string token(std::int32_t id) const;
  std::int32_t id_of(const std::string& token) const;  // kUnkId when unknown

  std::string detok(const TokenSeq& ids) const;

 private:
  std::int32_t content_ = 0;
  std::int32_t markers_ = 0;
};

// Generator spec for the synthetic one-to-many task: each source has K
// enumerable target modes.
struct SynthSpec {
  std::int32_t vocab_size = 20;  // content tokens
  std::int32_t modes = 4;        // K
  std::int32_t len_min = 5;
  std::int32_t len_max = 10;
  std::int64_t train_size = 5000;
  std::int64_t valid_size = 500;
  std::int64_t test_size = 200;
  std::uint64_t seed = 1;

  void validate() const;
  std::int32_t marker_count() const { return modes > 3 ? modes - 3 : 0; }
};

struct SentencePair {
  std::int64_t id = 0;
  TokenSeq src;
  TokenSeq tgt;
};

struct MultiRefEntry {
  std::int64_t id = 0;
  TokenSeq src;
  std::vector<TokenSeq> refs;
};

struct MultiRefCorpus {
  std::vector<MultiRefEntry> entries;
  std::int32_t refs_per_source() const {
    return entries.empty() ? 0 : static_cast<std::int32_t>(entries.front().refs.size());
  }
};

struct Corpus {
  SynthSpec spec;
  Vocabulary vocab;
  std::vector<SentencePair> train;
  std::vector<SentencePair> valid;
  MultiRefCorpus test;
};

// The fixed mode family. Deterministic and injective per mode; the seeded
// substitution permutation maps vocabulary class C0<->C2 and C1<->C3 so that
// the first/last tokens of a target identify its mode.
class ModeFamily {
 public:
  ModeFamily(const SynthSpec& spec);

  std::int32_t modes() const { return spec_.modes; }
  TokenSeq apply(const TokenSeq& source, std::int32_t mode) const;

  // The substitution table pi over content ids (index = content index).
  const std::vector<std::int32_t>& permutation() const { return perm_; }

  // All modes m whose image of `source` equals `target`.
  std::vector<std::int32_t> consistent_modes(const TokenSeq& source, const TokenSeq& target) const;

 private:
  SynthSpec spec_;
  std::vector<std::int32_t> perm_;       // content index -> content index
  std::vector<std::int32_t> comp_subst_; // per composed mode: substitution power (1 or 2)
  std::vector<std::int32_t> comp_rot_;   // per composed mode: left-rotation amount
};

// Fully determined by spec.seed; train/valid pair each source with one mode
// drawn uniformly, the test split carries all K references.
Corpus generate_corpus(const SynthSpec& spec);

// Token-id batch with teacher-forcing layout: tgt_in is start-shifted and
// tgt_out is tgt_in shifted left with eos appended; pad positions masked.
struct Batch {
  TokenMatrix src;
  MaskMatrix src_mask;
  TokenMatrix tgt_in;
  TokenMatrix tgt_out;
  MaskMatrix tgt_mask;
  std::int64_t size() const { return src.rows; }
  std::int64_t target_words() const { return tgt_mask.count(); }
};

Batch make_batch(const std::vector<const SentencePair*>& pairs);

// Seeded shuffle per epoch, padding to the per-batch max length.
class BatchIter {
 public:
  BatchIter(const std::vector<SentencePair>& pairs, std::int64_t batch_size, std::uint64_t seed,
            std::int64_t epoch);
  bool next(Batch& out);

 private:
  const std::vector<SentencePair>* pairs_;
  std::vector<std::size_t> order_;
  std::int64_t batch_size_;
  std::size_t pos_ = 0;
};

// Line-delimited records {id, source tokens, references list}.
MultiRefCorpus read_corpus(const std::string& path);
void write_corpus(const std::string& path, const MultiRefCorpus& corpus);

}  // namespace divseq
