#pragma once

// Inference-time generation: greedy, beam and ancestral-sampling decoders,
// plus the per-domain hypothesis fan-out. The decoders are generic over a
// session type exposing
//   State start() const / step(State&, token) -> logits
// so tests can drive them with rigged models; DecoderSession supplies the
// real transformer path. Decoding never reads target references.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "divseq/corpus.hpp"
#include "divseq/rng.hpp"
#include "divseq/transformer.hpp"

namespace divseq {

struct Hypothesis {
  TokenSeq tokens;     // generated tokens, end-of-sequence stripped
  double score = 0.0;  // sum of token log-probabilities (including eos when emitted)
  std::int32_t domain = -1;  // -1 for baselines
};

struct HypothesisSet {
  std::int64_t source_id = 0;
  std::vector<Hypothesis> hyps;
};

namespace decode_detail {

template <typename Real>
std::vector<double> log_softmax(const std::vector<Real>& logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (Real v : logits) mx = std::max(mx, static_cast<double>(v));
  double sum = 0.0;
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = static_cast<double>(logits[i]) - mx;
    sum += std::exp(out[i]);
  }
  const double lse = std::log(sum);
  for (auto& v : out) v -= lse;
  return out;
}

}  // namespace decode_detail

// Argmax token at every step (ties -> lowest id); stops at eos or max_len.
template <typename Session>
Hypothesis greedy_decode(Session& session, std::int64_t max_len) {
  auto st = session.start();
  Hypothesis hyp;
  std::int32_t last = -1;
  for (std::int64_t t = 0; t < max_len; ++t) {
    const auto lp = decode_detail::log_softmax(session.step(st, last));
    std::size_t best = 0;
    for (std::size_t v = 1; v < lp.size(); ++v)
      if (lp[v] > lp[best]) best = v;
    hyp.score += lp[best];
    if (static_cast<std::int32_t>(best) == kEosId) return hyp;
    hyp.tokens.push_back(static_cast<std::int32_t>(best));
    last = static_cast<std::int32_t>(best);
  }
  return hyp;
}

// Beam search over summed log-probabilities, no length normalization by
// default. The beam keeps the top-B non-eos continuations live at every step;
// an eos candidate ranked within the overall top-B of a step retires into a
// completed pool. Search stops once no live hypothesis can still beat the
// B-th completed score (token log-probabilities are strictly negative, so
// partial scores only decrease). Returns the top-B completed, padded with the
// best live hypotheses if fewer complete; ties break by earlier expansion
// order. With B = 1 this reduces to greedy decoding token-for-token.
template <typename Session>
std::vector<Hypothesis> beam_decode(Session& session, std::int64_t beam_size, std::int64_t max_len,
                                    bool length_normalize = false) {
  if (beam_size < 1) throw ContractError("beam_decode: beam size must be >= 1");
  using State = typename Session::State;
  struct Live {
    State st;
    TokenSeq tokens;
    double score = 0.0;
    std::vector<double> next_lp;
  };
  auto rank_of = [length_normalize](double score, std::size_t len) {
    return length_normalize ? score / static_cast<double>(len + 1) : score;
  };

  std::vector<Live> live(1);
  live[0].st = session.start();
  live[0].next_lp = decode_detail::log_softmax(session.step(live[0].st, -1));
  std::vector<Hypothesis> completed;

  for (std::int64_t t = 0; t < max_len && !live.empty(); ++t) {
    struct Cand {
      std::size_t from;
      std::int32_t token;
      double score;
    };
    std::vector<Cand> cands;
    cands.reserve(live.size() * live[0].next_lp.size());
    for (std::size_t i = 0; i < live.size(); ++i) {
      for (std::size_t v = 0; v < live[i].next_lp.size(); ++v) {
        cands.push_back({i, static_cast<std::int32_t>(v), live[i].score + live[i].next_lp[v]});
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [&](const Cand& a, const Cand& b) {
      return rank_of(a.score, live[a.from].tokens.size() + 1) >
             rank_of(b.score, live[b.from].tokens.size() + 1);
    });

    std::vector<Live> next_live;
    std::size_t seen = 0;
    for (const auto& c : cands) {
      if (next_live.size() >= static_cast<std::size_t>(beam_size)) break;
      ++seen;
      if (c.token == kEosId) {
        // Retire only candidates inside the step's top-B window.
        if (seen <= static_cast<std::size_t>(beam_size)) {
          Hypothesis h;
          h.tokens = live[c.from].tokens;
          h.score = c.score;
          completed.push_back(std::move(h));
        }
        continue;
      }
      Live nl;
      nl.st = live[c.from].st;
      nl.tokens = live[c.from].tokens;
      nl.tokens.push_back(c.token);
      nl.score = c.score;
      next_live.push_back(std::move(nl));
    }
    live = std::move(next_live);

    if (static_cast<std::int64_t>(completed.size()) >= beam_size) {
      std::vector<double> top(completed.size());
      for (std::size_t i = 0; i < completed.size(); ++i) top[i] = rank_of(completed[i].score, completed[i].tokens.size() + 1);
      std::sort(top.begin(), top.end(), std::greater<>());
      const double bar = top[static_cast<std::size_t>(beam_size) - 1];
      bool viable = false;
      for (const auto& l : live) {
        if (rank_of(l.score, l.tokens.size() + 1) > bar) {
          viable = true;
          break;
        }
      }
      if (!viable) {
        live.clear();
        break;
      }
    }
    if (t + 1 >= max_len) break;
    for (auto& l : live) l.next_lp = decode_detail::log_softmax(session.step(l.st, l.tokens.back()));
  }

  std::stable_sort(completed.begin(), completed.end(), [&](const Hypothesis& a, const Hypothesis& b) {
    return rank_of(a.score, a.tokens.size() + 1) > rank_of(b.score, b.tokens.size() + 1);
  });
  if (static_cast<std::int64_t>(completed.size()) < beam_size) {
    std::stable_sort(live.begin(), live.end(), [&](const Live& a, const Live& b) {
      return rank_of(a.score, a.tokens.size() + 1) > rank_of(b.score, b.tokens.size() + 1);
    });
    for (const auto& l : live) {
      if (static_cast<std::int64_t>(completed.size()) >= beam_size) break;
      Hypothesis h;
      h.tokens = l.tokens;
      h.score = l.score;
      completed.push_back(std::move(h));
    }
  }
  if (static_cast<std::int64_t>(completed.size()) > beam_size) completed.resize(static_cast<std::size_t>(beam_size));
  return completed;
}

// Ancestral sampling at temperature 1.
template <typename Session>
Hypothesis sample_decode(Session& session, Rng& rng, std::int64_t max_len) {
  auto st = session.start();
  Hypothesis hyp;
  std::int32_t last = -1;
  for (std::int64_t t = 0; t < max_len; ++t) {
    const auto lp = decode_detail::log_softmax(session.step(st, last));
    const double u = rng.uniform();
    double acc = 0.0;
    std::size_t pick = lp.size() - 1;
    for (std::size_t v = 0; v < lp.size(); ++v) {
      acc += std::exp(lp[v]);
      if (u < acc) {
        pick = v;
        break;
      }
    }
    hyp.score += lp[pick];
    if (static_cast<std::int32_t>(pick) == kEosId) return hyp;
    hyp.tokens.push_back(static_cast<std::int32_t>(pick));
    last = static_cast<std::int32_t>(pick);
  }
  return hyp;
}

enum class DecodeMode { Greedy, Beam, Sample };

// Extracts column k of E as a plain embedding vector.
template <typename Real>
std::vector<Real> domain_column(const TransformerModel<Real>& model, std::int64_t k) {
  const auto& e = *model.domain_embeddings();
  const std::int64_t d = e.dim(0), n = e.dim(1);
  if (k < 0 || k >= n) throw IndexError("domain_column: domain index out of range");
  std::vector<Real> col(static_cast<std::size_t>(d));
  for (std::int64_t j = 0; j < d; ++j) col[static_cast<std::size_t>(j)] = e.at(j, k);
  return col;
}

// One hypothesis per domain: hypothesis k is produced with the one-hot domain
// k; beam mode keeps only the top-1 of each per-domain beam.
template <typename Real>
std::vector<HypothesisSet> generate_all_domains(const TransformerModel<Real>& model,
                                                const std::vector<MultiRefEntry>& sources,
                                                DecodeMode mode, std::int64_t beam_size,
                                                std::int64_t max_len) {
  const std::int64_t n = model.config().n_domains;
  std::vector<HypothesisSet> out;
  out.reserve(sources.size());
  for (const auto& src : sources) {
    HypothesisSet set;
    set.source_id = src.id;
    for (std::int64_t k = 0; k < n; ++k) {
      DecoderSession<Real> session(model, src.src, domain_column(model, k));
      Hypothesis hyp;
      if (mode == DecodeMode::Beam) {
        hyp = beam_decode(session, beam_size, max_len).front();
      } else {
        hyp = greedy_decode(session, max_len);
      }
      hyp.domain = static_cast<std::int32_t>(k);
      set.hyps.push_back(std::move(hyp));
    }
    out.push_back(std::move(set));
  }
  return out;
}

// Baseline fan-outs over a single-domain (vanilla) model: K beam hypotheses
// or K independent samples per source.
template <typename Real>
std::vector<HypothesisSet> generate_baseline(const TransformerModel<Real>& model,
                                             const std::vector<MultiRefEntry>& sources,
                                             DecodeMode mode, std::int64_t k, std::int64_t max_len,
                                             std::uint64_t seed) {
  std::vector<HypothesisSet> out;
  out.reserve(sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const auto& src = sources[i];
    HypothesisSet set;
    set.source_id = src.id;
    DecoderSession<Real> session(model, src.src, domain_column(model, 0));
    switch (mode) {
      case DecodeMode::Greedy:
        set.hyps.push_back(greedy_decode(session, max_len));
        break;
      case DecodeMode::Beam:
        set.hyps = beam_decode(session, k, max_len);
        break;
      case DecodeMode::Sample: {
        for (std::int64_t s = 0; s < k; ++s) {
          Rng rng = stream_rng(seed, "sample", static_cast<std::uint64_t>(i) * 1000003ULL +
                                                   static_cast<std::uint64_t>(s));
          set.hyps.push_back(sample_decode(session, rng, max_len));
        }
        break;
      }
    }
    out.push_back(std::move(set));
  }
  return out;
}

}  // namespace divseq
