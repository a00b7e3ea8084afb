#pragma once

// Hard-EM mixture-of-experts baseline with shared parameters: the E-step
// scores every sentence under each domain embedding (N decoder forwards, no
// gradients) and picks the argmax; the M-step trains on the assignment.

#include <cstdint>
#include <vector>

#include "divseq/autodiff.hpp"
#include "divseq/corpus.hpp"
#include "divseq/latent.hpp"
#include "divseq/trainer.hpp"
#include "divseq/transformer.hpp"

namespace divseq {

struct MoeAssignment {
  std::vector<std::int64_t> d_star;  // per-sentence selected domain, in [0, N)
};

namespace moe_detail {

// Per-sentence sum of token log-probabilities under the given posterior rows.
template <typename Real>
std::vector<double> sentence_log_likelihood(const TransformerModel<Real>& model,
                                            const SourceEncoding<Real>& src_enc, const Batch& batch,
                                            const TensorPtr<Real>& p) {
  auto e = mix_domain_embedding(model.domain_embeddings(), p);
  auto logits = model.decode_teacher_forced(src_enc, e, batch.tgt_in);
  const std::int64_t B = logits->dim(0), L = logits->dim(1), V = logits->dim(2);
  std::vector<double> ll(static_cast<std::size_t>(B), 0.0);
  std::vector<Real> probs(static_cast<std::size_t>(V));
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t t = 0; t < L; ++t) {
      if (!batch.tgt_mask.at(b, t)) continue;
      detail::softmax_row(logits->data() + (b * L + t) * V, probs.data(), V);
      ll[static_cast<std::size_t>(b)] +=
          std::log(static_cast<double>(probs[static_cast<std::size_t>(batch.tgt_out.at(b, t))]));
    }
  }
  return ll;
}

template <typename Real>
TensorPtr<Real> one_hot_rows(std::int64_t batch, std::int64_t n_domains,
                             const std::vector<std::int64_t>& idx) {
  auto p = make_tensor<Real>({batch, n_domains});
  for (std::int64_t b = 0; b < batch; ++b) p->at(b, idx[static_cast<std::size_t>(b)]) = Real(1);
  return p;
}

}  // namespace moe_detail

// E-step: teacher-forced log-likelihood under each of the N domains; argmax
// per sentence, ties broken by lowest index. No gradients.
template <typename Real>
MoeAssignment moe_e_step(TransformerModel<Real>& model, const Batch& batch) {
  NoGradScope<Real> ng;
  const std::int64_t N = model.config().n_domains;
  const std::int64_t B = batch.size();
  auto src_enc = model.encode_source(batch.src, batch.src_mask);
  MoeAssignment out;
  out.d_star.assign(static_cast<std::size_t>(B), 0);
  std::vector<double> best(static_cast<std::size_t>(B), -std::numeric_limits<double>::infinity());
  for (std::int64_t d = 0; d < N; ++d) {
    auto p = moe_detail::one_hot_rows<Real>(B, N, std::vector<std::int64_t>(static_cast<std::size_t>(B), d));
    const auto ll = moe_detail::sentence_log_likelihood(model, src_enc, batch, p);
    for (std::int64_t b = 0; b < B; ++b) {
      if (ll[static_cast<std::size_t>(b)] > best[static_cast<std::size_t>(b)]) {
        best[static_cast<std::size_t>(b)] = ll[static_cast<std::size_t>(b)];
        out.d_star[static_cast<std::size_t>(b)] = d;
      }
    }
  }
  return out;
}

template <typename Real>
class MoeTrainer {
 public:
  MoeTrainer(TransformerModel<Real>& model, OptimizerConfig opt, std::uint64_t run_seed)
      : model_(&model), opt_(opt), seed_(run_seed) {
    adam_.init(model.parameters());
  }

  AdamState<Real>& adam_state() { return adam_; }
  std::int64_t step_count() const { return step_; }
  void set_step_count(std::int64_t s) { step_ = s; }

  // M-step: one teacher-forced forward with the assigned one-hot domains,
  // backward, Adam update.
  StepReport moe_m_step(const Batch& batch, const MoeAssignment& assignment) {
    step_ += 1;
    if (static_cast<std::int64_t>(assignment.d_star.size()) != batch.size()) {
      throw ContractError("moe_m_step: assignment size does not match batch");
    }
    const std::int64_t fwd_before = model_->decoder_forward_count();
    Rng dropout_rng = stream_rng(seed_, "dropout", static_cast<std::uint64_t>(step_));
    ForwardMode fm{true, &dropout_rng};

    model_->zero_grad();
    Tape<Real> tape;
    TapeScope<Real> scope(tape);

    auto src_enc = model_->encode_source(batch.src, batch.src_mask, fm);
    auto p = moe_detail::one_hot_rows<Real>(batch.size(), model_->config().n_domains, assignment.d_star);
    auto e = mix_domain_embedding(model_->domain_embeddings(), p);
    auto logits = model_->decode_teacher_forced(src_enc, e, batch.tgt_in, fm);
    auto nll = ops::cross_entropy(logits, batch.tgt_out, batch.tgt_mask);
    if (!nll->all_finite()) {
      throw Error("moe_m_step: non-finite loss at step " + std::to_string(step_));
    }
    backward(nll);

    const double lr = lr_schedule(step_, opt_.warmup, opt_.lr_peak);
    adam_step(model_->parameters(), adam_, lr);

    StepReport rep;
    rep.step = step_;
    rep.nll = static_cast<double>(nll->data()[0]);
    rep.mode = "hard";
    rep.histogram.assign(static_cast<std::size_t>(model_->config().n_domains), 0);
    for (auto d : assignment.d_star) rep.histogram[static_cast<std::size_t>(d)] += 1;
    rep.decoder_forwards = model_->decoder_forward_count() - fwd_before;
    rep.lr = lr;
    return rep;
  }

  // Full EM step; exactly N + 1 decoder forwards.
  StepReport moe_train_step(const Batch& batch) {
    const std::int64_t fwd_before = model_->decoder_forward_count();
    const MoeAssignment assignment = moe_e_step(*model_, batch);
    StepReport rep = moe_m_step(batch, assignment);
    rep.decoder_forwards = model_->decoder_forward_count() - fwd_before;
    return rep;
  }

  double validation_nll(const std::vector<SentencePair>& pairs, std::int64_t batch_size) const {
    NoGradScope<Real> ng;
    double total = 0.0;
    std::int64_t words = 0;
    for (std::size_t start = 0; start < pairs.size();) {
      std::vector<const SentencePair*> chunk;
      while (start < pairs.size() && static_cast<std::int64_t>(chunk.size()) < batch_size) {
        chunk.push_back(&pairs[start++]);
      }
      Batch b = make_batch(chunk);
      const MoeAssignment a = moe_e_step(*model_, b);
      auto src_enc = model_->encode_source(b.src, b.src_mask);
      auto p = moe_detail::one_hot_rows<Real>(b.size(), model_->config().n_domains, a.d_star);
      auto e = mix_domain_embedding(model_->domain_embeddings(), p);
      auto logits = model_->decode_teacher_forced(src_enc, e, b.tgt_in);
      auto nll = ops::cross_entropy(logits, b.tgt_out, b.tgt_mask);
      total += static_cast<double>(nll->data()[0]) * static_cast<double>(b.target_words());
      words += b.target_words();
    }
    return total / static_cast<double>(words);
  }

 private:
  TransformerModel<Real>* model_;
  OptimizerConfig opt_;
  std::uint64_t seed_;
  AdamState<Real> adam_;
  std::int64_t step_ = 0;
};

}  // namespace divseq
