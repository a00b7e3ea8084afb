#include "divseq/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "divseq/error.hpp"
#include "divseq/rng.hpp"

namespace divseq {

using nlohmann::json;

Vocabulary::Vocabulary(std::int32_t content_tokens, std::int32_t marker_tokens)
    : content_(content_tokens), markers_(marker_tokens) {
  if (content_tokens < 1) throw ContractError("Vocabulary: need at least one content token");
}

std::string Vocabulary::token(std::int32_t id) const {
  switch (id) {
    case kPadId: return "<pad>";
    case kStartId: return "<s>";
    case kEosId: return "</s>";
    case kUnkId: return "<unk>";
    default: break;
  }
  if (is_content(id)) return "w" + std::to_string(id - kNumReserved);
  if (is_marker(id)) return "m" + std::to_string(id - kNumReserved - content_);
  throw IndexError("Vocabulary: id " + std::to_string(id) + " out of range");
}

std::int32_t Vocabulary::id_of(const std::string& tok) const {
  if (tok == "<pad>") return kPadId;
  if (tok == "<s>") return kStartId;
  if (tok == "</s>") return kEosId;
  if (tok == "<unk>") return kUnkId;
  if (tok.size() > 1 && (tok[0] == 'w' || tok[0] == 'm')) {
    std::int32_t idx = 0;
    for (std::size_t i = 1; i < tok.size(); ++i) {
      if (tok[i] < '0' || tok[i] > '9') return kUnkId;
      idx = idx * 10 + (tok[i] - '0');
    }
    if (tok[0] == 'w' && idx < content_) return content_id(idx);
    if (tok[0] == 'm' && idx < markers_) return marker_id(idx);
  }
  return kUnkId;
}

std::string Vocabulary::detok(const TokenSeq& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

void SynthSpec::validate() const {
  if (vocab_size < 4) throw ContractError("SynthSpec: vocab_size must be >= 4");
  if (modes < 2) throw ContractError("SynthSpec: modes must be >= 2");
  if (len_min < 2) throw ContractError("SynthSpec: len_min must be >= 2 (mode separability needs distinct first/last tokens)");
  if (len_max < len_min) throw ContractError("SynthSpec: len_max must be >= len_min");
  if (train_size < 1 || valid_size < 1 || test_size < 1) {
    throw ContractError("SynthSpec: split sizes must be positive");
  }
}

ModeFamily::ModeFamily(const SynthSpec& spec) : spec_(spec) {
  spec_.validate();
  const std::int32_t v = spec_.vocab_size;
  const std::int32_t q = v / 4;
  // pi swaps class C0=[0,q) with C2=[2q,3q) and C1=[q,2q) with C3=[3q,4q);
  // the pairings within each swap are seeded. Leftover ids rotate among
  // themselves. This keeps pi a seeded permutation of the content vocabulary
  // while guaranteeing that substitution moves the first/last token class.
  perm_.assign(static_cast<std::size_t>(v), 0);
  Rng rng = stream_rng(spec_.seed, "mode-permutation");
  auto pair_classes = [&](std::int32_t lo_a, std::int32_t lo_b) {
    std::vector<std::int32_t> targets(static_cast<std::size_t>(q));
    for (std::int32_t i = 0; i < q; ++i) targets[static_cast<std::size_t>(i)] = lo_b + i;
    rng.shuffle(targets);
    for (std::int32_t i = 0; i < q; ++i) {
      const std::int32_t a = lo_a + i;
      const std::int32_t b = targets[static_cast<std::size_t>(i)];
      perm_[static_cast<std::size_t>(a)] = b;
      perm_[static_cast<std::size_t>(b)] = a;
    }
  };
  pair_classes(0, 2 * q);
  pair_classes(q, 3 * q);
  for (std::int32_t i = 4 * q; i < v; ++i) {
    perm_[static_cast<std::size_t>(i)] = (i + 1 < v) ? i + 1 : 4 * q;
  }
  // Composed modes (m >= 4): seeded substitution power and rotation amount.
  Rng crng = stream_rng(spec_.seed, "mode-compose");
  for (std::int32_t m = 4; m < spec_.modes; ++m) {
    comp_subst_.push_back(1 + static_cast<std::int32_t>(crng.uniform_int(2)));
    comp_rot_.push_back(1 + static_cast<std::int32_t>(crng.uniform_int(2)));
  }
}

TokenSeq ModeFamily::apply(const TokenSeq& source, std::int32_t mode) const {
  if (mode < 0 || mode >= spec_.modes) {
    throw ContractError("apply_mode: mode " + std::to_string(mode) + " out of range [0, " +
                        std::to_string(spec_.modes) + ")");
  }
  const std::int64_t n = static_cast<std::int64_t>(source.size());
  auto subst = [&](std::int32_t id) {
    const std::int32_t idx = id - kNumReserved;
    return kNumReserved + perm_[static_cast<std::size_t>(idx)];
  };
  auto rotate_left = [&](const TokenSeq& s, std::int32_t r) {
    TokenSeq out(s.size());
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = s[static_cast<std::size_t>((i + r) % n)];
    return out;
  };
  const Vocabulary vocab(spec_.vocab_size, spec_.marker_count());
  switch (mode) {
    case 0:
      return source;
    case 1: {
      TokenSeq out(source.rbegin(), source.rend());
      return out;
    }
    case 2: {
      TokenSeq out(source.size());
      for (std::size_t i = 0; i < source.size(); ++i) out[i] = subst(source[i]);
      return out;
    }
    case 3: {
      TokenSeq out = rotate_left(source, 1);
      out.push_back(vocab.marker_id(0));
      return out;
    }
    default: {
      const std::size_t ci = static_cast<std::size_t>(mode - 4);
      TokenSeq out = source;
      for (std::int32_t p = 0; p < comp_subst_[ci]; ++p) {
        for (auto& id : out) id = subst(id);
      }
      out = rotate_left(out, comp_rot_[ci]);
      out.push_back(vocab.marker_id(mode - 3));
      return out;
    }
  }
}

std::vector<std::int32_t> ModeFamily::consistent_modes(const TokenSeq& source,
                                                       const TokenSeq& target) const {
  std::vector<std::int32_t> out;
  for (std::int32_t m = 0; m < spec_.modes; ++m) {
    if (apply(source, m) == target) out.push_back(m);
  }
  return out;
}

namespace {

TokenSeq draw_source(Rng& rng, const SynthSpec& spec) {
  const std::int32_t v = spec.vocab_size;
  const std::int32_t q = v / 4;
  const std::int64_t len =
      spec.len_min + static_cast<std::int64_t>(rng.uniform_int(
                         static_cast<std::uint64_t>(spec.len_max - spec.len_min + 1)));
  TokenSeq s(static_cast<std::size_t>(len));
  // First token in class C0, last in class C1, interior unrestricted.
  s.front() = kNumReserved + static_cast<std::int32_t>(rng.uniform_int(static_cast<std::uint64_t>(q)));
  s.back() = kNumReserved + q + static_cast<std::int32_t>(rng.uniform_int(static_cast<std::uint64_t>(q)));
  for (std::int64_t i = 1; i + 1 < len; ++i) {
    s[static_cast<std::size_t>(i)] =
        kNumReserved + static_cast<std::int32_t>(rng.uniform_int(static_cast<std::uint64_t>(v)));
  }
  return s;
}

bool modes_separable(const ModeFamily& family, const TokenSeq& src, std::int32_t k) {
  std::vector<TokenSeq> refs;
  refs.reserve(static_cast<std::size_t>(k));
  for (std::int32_t m = 0; m < k; ++m) refs.push_back(family.apply(src, m));
  for (std::size_t a = 0; a < refs.size(); ++a)
    for (std::size_t b = a + 1; b < refs.size(); ++b)
      if (refs[a] == refs[b]) return false;
  return true;
}

}  // namespace

Corpus generate_corpus(const SynthSpec& spec) {
  spec.validate();
  Corpus corpus;
  corpus.spec = spec;
  corpus.vocab = Vocabulary(spec.vocab_size, spec.marker_count());
  const ModeFamily family(spec);

  Rng src_rng = stream_rng(spec.seed, "sources");
  Rng mode_rng = stream_rng(spec.seed, "modes");

  std::set<TokenSeq> seen;
  auto fresh_source = [&]() {
    for (;;) {
      TokenSeq s = draw_source(src_rng, spec);
      if (!modes_separable(family, s, spec.modes)) continue;
      if (!seen.insert(s).second) continue;
      return s;
    }
  };

  std::int64_t next_id = 0;
  auto fill_pairs = [&](std::vector<SentencePair>& out, std::int64_t count) {
    out.reserve(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) {
      SentencePair p;
      p.id = next_id++;
      p.src = fresh_source();
      const std::int32_t m = static_cast<std::int32_t>(mode_rng.uniform_int(static_cast<std::uint64_t>(spec.modes)));
      p.tgt = family.apply(p.src, m);
      out.push_back(std::move(p));
    }
  };

  fill_pairs(corpus.train, spec.train_size);
  fill_pairs(corpus.valid, spec.valid_size);

  corpus.test.entries.reserve(static_cast<std::size_t>(spec.test_size));
  for (std::int64_t i = 0; i < spec.test_size; ++i) {
    MultiRefEntry e;
    e.id = next_id++;
    e.src = fresh_source();
    for (std::int32_t m = 0; m < spec.modes; ++m) e.refs.push_back(family.apply(e.src, m));
    corpus.test.entries.push_back(std::move(e));
  }
  return corpus;
}

Batch make_batch(const std::vector<const SentencePair*>& pairs) {
  const std::int64_t B = static_cast<std::int64_t>(pairs.size());
  if (B == 0) throw ContractError("make_batch: empty batch");
  std::int64_t ls = 0, lt = 0;
  for (const auto* p : pairs) {
    ls = std::max(ls, static_cast<std::int64_t>(p->src.size()));
    lt = std::max(lt, static_cast<std::int64_t>(p->tgt.size()) + 1);  // start shift + eos
  }
  Batch b;
  b.src = TokenMatrix(B, ls, kPadId);
  b.src_mask = MaskMatrix(B, ls, false);
  b.tgt_in = TokenMatrix(B, lt, kPadId);
  b.tgt_out = TokenMatrix(B, lt, kPadId);
  b.tgt_mask = MaskMatrix(B, lt, false);
  for (std::int64_t i = 0; i < B; ++i) {
    const auto& src = pairs[static_cast<std::size_t>(i)]->src;
    const auto& tgt = pairs[static_cast<std::size_t>(i)]->tgt;
    for (std::size_t j = 0; j < src.size(); ++j) {
      b.src.at(i, static_cast<std::int64_t>(j)) = src[j];
      b.src_mask.set(i, static_cast<std::int64_t>(j), true);
    }
    b.tgt_in.at(i, 0) = kStartId;
    for (std::size_t j = 0; j < tgt.size(); ++j) {
      b.tgt_in.at(i, static_cast<std::int64_t>(j) + 1) = tgt[j];
      b.tgt_out.at(i, static_cast<std::int64_t>(j)) = tgt[j];
    }
    b.tgt_out.at(i, static_cast<std::int64_t>(tgt.size())) = kEosId;
    for (std::size_t j = 0; j <= tgt.size(); ++j) b.tgt_mask.set(i, static_cast<std::int64_t>(j), true);
  }
  return b;
}

BatchIter::BatchIter(const std::vector<SentencePair>& pairs, std::int64_t batch_size,
                     std::uint64_t seed, std::int64_t epoch)
    : pairs_(&pairs), batch_size_(batch_size) {
  if (batch_size < 1) throw ContractError("batch_iter: batch_size must be >= 1");
  order_.resize(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) order_[i] = i;
  Rng rng = stream_rng(seed, "batch-shuffle", static_cast<std::uint64_t>(epoch));
  rng.shuffle(order_);
}

bool BatchIter::next(Batch& out) {
  if (pos_ >= order_.size()) return false;
  std::vector<const SentencePair*> chunk;
  while (pos_ < order_.size() && static_cast<std::int64_t>(chunk.size()) < batch_size_) {
    chunk.push_back(&(*pairs_)[order_[pos_++]]);
  }
  out = make_batch(chunk);
  return true;
}

MultiRefCorpus read_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("read_corpus: cannot open " + path);
  MultiRefCorpus corpus;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("read_corpus: ") + e.what(), lineno);
    }
    if (!j.is_object() || !j.contains("id") || !j.contains("src") || !j.contains("refs")) {
      throw ParseError("read_corpus: record must have id, src, refs", lineno);
    }
    MultiRefEntry e;
    try {
      e.id = j.at("id").get<std::int64_t>();
      e.src = j.at("src").get<TokenSeq>();
      e.refs = j.at("refs").get<std::vector<TokenSeq>>();
    } catch (const json::exception& ex) {
      throw ParseError(std::string("read_corpus: ") + ex.what(), lineno);
    }
    if (e.refs.empty()) throw ParseError("read_corpus: refs must be non-empty", lineno);
    corpus.entries.push_back(std::move(e));
  }
  return corpus;
}

void write_corpus(const std::string& path, const MultiRefCorpus& corpus) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("write_corpus: cannot open " + path);
  for (const auto& e : corpus.entries) {
    json j;
    j["id"] = e.id;
    j["src"] = e.src;
    j["refs"] = e.refs;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write_corpus: write failed for " + path);
}

}  // namespace divseq
