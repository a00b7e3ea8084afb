#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "divseq/corpus.hpp"

namespace divseq {

// Corpus-level BLEU-4 breakdown. score = bp * exp(mean of ln p_n), scaled to
// [0, 100]; any zero modified precision zeroes the score (no smoothing).
struct BleuReport {
  double score = 0.0;
  std::array<double, 4> precisions{0.0, 0.0, 0.0, 0.0};
  double brevity_penalty = 0.0;
  std::int64_t hyp_length = 0;
  std::int64_t ref_length = 0;  // closest-reference lengths, summed
};

// Modified (clipped) n-gram precision aggregated corpus-wide; per-hypothesis
// clipping uses the max count over that hypothesis's references; brevity
// penalty uses the closest reference length (ties -> shorter).
BleuReport corpus_bleu(const std::vector<TokenSeq>& hyps,
                       const std::vector<std::vector<TokenSeq>>& refs);

// BLEU of the flattened per-domain hypothesis sets against the
// multi-reference corpus (references duplicated per domain).
// hyp_sets[i] holds the N hypotheses for source i; refs[i] its P references.
BleuReport mbleu(const std::vector<std::vector<TokenSeq>>& hyp_sets,
                 const std::vector<std::vector<TokenSeq>>& refs);

// BLEU over all ordered pairs (j, k), j != k, of a source's own hypotheses.
BleuReport pairwise_bleu(const std::vector<std::vector<TokenSeq>>& hyp_sets);

struct DomainUsageStats {
  std::vector<double> histogram;  // sums to the observation count
  double entropy = 0.0;           // nats, of the normalized histogram
  double max_share = 0.0;
};

DomainUsageStats domain_usage_stats(const std::vector<std::int64_t>& assignments,
                                    std::int64_t n_domains);
// Soft counts: histogram[k] = sum_i posteriors[i][k].
DomainUsageStats domain_usage_stats(const std::vector<std::vector<double>>& posteriors);

}  // namespace divseq
