#include "divseq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>

#include "divseq/error.hpp"

namespace divseq {

namespace {

using NgramCounts = std::map<std::vector<std::int32_t>, std::int64_t>;

NgramCounts count_ngrams(const TokenSeq& s, std::size_t n) {
  NgramCounts counts;
  if (s.size() < n) return counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) {
    counts[std::vector<std::int32_t>(s.begin() + static_cast<std::ptrdiff_t>(i),
                                     s.begin() + static_cast<std::ptrdiff_t>(i + n))] += 1;
  }
  return counts;
}

}  // namespace

BleuReport corpus_bleu(const std::vector<TokenSeq>& hyps,
                       const std::vector<std::vector<TokenSeq>>& refs) {
  if (hyps.empty()) throw ContractError("corpus_bleu: empty corpus");
  if (hyps.size() != refs.size()) {
    throw ContractError("corpus_bleu: hypothesis/reference count mismatch");
  }
  std::array<std::int64_t, 4> matched{0, 0, 0, 0};
  std::array<std::int64_t, 4> total{0, 0, 0, 0};
  std::int64_t hyp_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const TokenSeq& h = hyps[i];
    const auto& rlist = refs[i];
    if (rlist.empty()) throw ContractError("corpus_bleu: a hypothesis has no references");
    hyp_len += static_cast<std::int64_t>(h.size());
    // closest reference length, ties resolved to the shorter
    std::int64_t best_ref = static_cast<std::int64_t>(rlist[0].size());
    for (const auto& r : rlist) {
      const std::int64_t rl = static_cast<std::int64_t>(r.size());
      const std::int64_t hl = static_cast<std::int64_t>(h.size());
      if (std::llabs(rl - hl) < std::llabs(best_ref - hl) ||
          (std::llabs(rl - hl) == std::llabs(best_ref - hl) && rl < best_ref)) {
        best_ref = rl;
      }
    }
    ref_len += best_ref;
    for (std::size_t n = 1; n <= 4; ++n) {
      const NgramCounts hyp_counts = count_ngrams(h, n);
      NgramCounts max_ref;
      for (const auto& r : rlist) {
        for (const auto& [gram, c] : count_ngrams(r, n)) {
          auto& slot = max_ref[gram];
          slot = std::max(slot, c);
        }
      }
      for (const auto& [gram, c] : hyp_counts) {
        total[n - 1] += c;
        auto it = max_ref.find(gram);
        if (it != max_ref.end()) matched[n - 1] += std::min(c, it->second);
      }
    }
  }
  BleuReport rep;
  rep.hyp_length = hyp_len;
  rep.ref_length = ref_len;
  bool zero = false;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    rep.precisions[n] = total[n] > 0 ? static_cast<double>(matched[n]) / static_cast<double>(total[n]) : 0.0;
    if (rep.precisions[n] <= 0.0) {
      zero = true;
    } else {
      log_sum += std::log(rep.precisions[n]);
    }
  }
  rep.brevity_penalty =
      (hyp_len >= ref_len || hyp_len == 0)
          ? (hyp_len == 0 ? 0.0 : 1.0)
          : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  rep.score = zero ? 0.0 : 100.0 * rep.brevity_penalty * std::exp(log_sum / 4.0);
  return rep;
}

BleuReport mbleu(const std::vector<std::vector<TokenSeq>>& hyp_sets,
                 const std::vector<std::vector<TokenSeq>>& refs) {
  if (hyp_sets.empty()) throw ContractError("mbleu: empty corpus");
  if (hyp_sets.size() != refs.size()) throw ContractError("mbleu: hypothesis/reference count mismatch");
  const std::size_t n = hyp_sets.front().size();
  std::vector<TokenSeq> flat_hyps;
  std::vector<std::vector<TokenSeq>> flat_refs;
  for (std::size_t i = 0; i < hyp_sets.size(); ++i) {
    if (hyp_sets[i].size() != n) {
      throw ContractError("mbleu: ragged hypothesis counts (source " + std::to_string(i) + " has " +
                          std::to_string(hyp_sets[i].size()) + ", expected " + std::to_string(n) + ")");
    }
    for (const auto& h : hyp_sets[i]) {
      flat_hyps.push_back(h);
      flat_refs.push_back(refs[i]);
    }
  }
  return corpus_bleu(flat_hyps, flat_refs);
}

BleuReport pairwise_bleu(const std::vector<std::vector<TokenSeq>>& hyp_sets) {
  if (hyp_sets.empty()) throw ContractError("pairwise_bleu: empty corpus");
  std::vector<TokenSeq> hyps;
  std::vector<std::vector<TokenSeq>> refs;
  for (const auto& set : hyp_sets) {
    if (set.size() < 2) throw ContractError("pairwise_bleu: need at least 2 hypotheses per source");
    for (std::size_t j = 0; j < set.size(); ++j) {
      for (std::size_t k = 0; k < set.size(); ++k) {
        if (j == k) continue;
        hyps.push_back(set[j]);
        refs.push_back({set[k]});
      }
    }
  }
  return corpus_bleu(hyps, refs);
}

namespace {

DomainUsageStats finish_stats(std::vector<double> hist) {
  DomainUsageStats s;
  s.histogram = std::move(hist);
  double count = 0.0;
  for (double h : s.histogram) count += h;
  if (count <= 0.0) throw ContractError("domain_usage_stats: empty input");
  double entropy = 0.0, max_share = 0.0;
  for (double h : s.histogram) {
    const double p = h / count;
    max_share = std::max(max_share, p);
    if (p > 0.0) entropy -= p * std::log(p);
  }
  s.entropy = entropy;
  s.max_share = max_share;
  return s;
}

}  // namespace

DomainUsageStats domain_usage_stats(const std::vector<std::int64_t>& assignments,
                                    std::int64_t n_domains) {
  if (assignments.empty()) throw ContractError("domain_usage_stats: empty input");
  std::vector<double> hist(static_cast<std::size_t>(n_domains), 0.0);
  for (auto a : assignments) {
    if (a < 0 || a >= n_domains) throw IndexError("domain_usage_stats: assignment out of range");
    hist[static_cast<std::size_t>(a)] += 1.0;
  }
  return finish_stats(std::move(hist));
}

DomainUsageStats domain_usage_stats(const std::vector<std::vector<double>>& posteriors) {
  if (posteriors.empty()) throw ContractError("domain_usage_stats: empty input");
  std::vector<double> hist(posteriors.front().size(), 0.0);
  for (const auto& p : posteriors) {
    if (p.size() != hist.size()) throw ContractError("domain_usage_stats: ragged posteriors");
    for (std::size_t k = 0; k < p.size(); ++k) hist[k] += p[k];
  }
  return finish_stats(std::move(hist));
}

}  // namespace divseq
