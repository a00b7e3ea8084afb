#pragma once

// Training loops for the target-encoder method (and its vanilla reduction).
// One train_step = one forward (source encode, target-latent encode,
// posterior, mix, teacher-forced decode), one backward, one Adam update;
// exactly one decoder forward per step.

#include <cstdint>
#include <string>
#include <vector>

#include "divseq/autodiff.hpp"
#include "divseq/corpus.hpp"
#include "divseq/latent.hpp"
#include "divseq/optim.hpp"
#include "divseq/rng.hpp"
#include "divseq/transformer.hpp"

namespace divseq {

enum class TargetEncoderInput { Target, Source };

struct StepReport {
  std::int64_t step = 0;  // 1-based
  double nll = 0.0;
  double l_xe = 0.0;
  double temperature = 0.0;
  std::string mode;  // soft | hard | gumbel
  std::vector<std::int64_t> histogram;
  std::int64_t decoder_forwards = 0;
  double lr = 0.0;
};

struct OptimizerConfig {
  double lr_peak = 3e-4;
  std::int64_t warmup = 400;
};

namespace train_detail {

// E_t input: [start, sentence tokens...] with a matching mask.
inline void build_latent_input(const TokenMatrix& tokens, const MaskMatrix& mask, TokenMatrix& out_tokens,
                               MaskMatrix& out_mask) {
  out_tokens = TokenMatrix(tokens.rows, tokens.cols + 1, kPadId);
  out_mask = MaskMatrix(tokens.rows, tokens.cols + 1, false);
  for (std::int64_t b = 0; b < tokens.rows; ++b) {
    out_tokens.at(b, 0) = kStartId;
    out_mask.set(b, 0, true);
    for (std::int64_t t = 0; t < tokens.cols; ++t) {
      out_tokens.at(b, t + 1) = tokens.at(b, t);
      out_mask.set(b, t + 1, mask.at(b, t));
    }
  }
}

template <typename Real>
std::vector<std::int64_t> posterior_histogram(const Tensor<Real>& p) {
  const auto idx = ops::argmax_last(p);
  std::vector<std::int64_t> hist(static_cast<std::size_t>(p.dim(1)), 0);
  for (auto i : idx) hist[static_cast<std::size_t>(i)] += 1;
  return hist;
}

}  // namespace train_detail

template <typename Real>
class TargetEncoderTrainer {
 public:
  TargetEncoderTrainer(TransformerModel<Real>& model, AnnealSchedule schedule, double lambda,
                       OptimizerConfig opt, std::uint64_t run_seed,
                       TargetEncoderInput input = TargetEncoderInput::Target,
                       bool regularizer_grad_on_hard = false)
      : model_(&model), schedule_(schedule), lambda_(lambda), opt_(opt), seed_(run_seed),
        input_(input), reg_grad_on_hard_(regularizer_grad_on_hard) {
    schedule_.validate();
    adam_.init(model.parameters());
  }

  const AnnealSchedule& schedule() const { return schedule_; }
  AdamState<Real>& adam_state() { return adam_; }
  std::int64_t step_count() const { return step_; }
  void set_step_count(std::int64_t s) { step_ = s; }
  void set_frozen(bool f) { schedule_.frozen = f; }

  StepReport train_step(const Batch& batch) {
    step_ += 1;
    const std::int64_t sched_step = step_ - 1;
    const double T = temperature(sched_step, schedule_);
    if (T <= 0.0) schedule_.frozen = true;

    Rng mode_rng = stream_rng(seed_, "mode", static_cast<std::uint64_t>(step_));
    PosteriorMode mode = PosteriorMode::Hard;
    if (model_->has_target_encoder()) {
      mode = sample_mode(mode_rng, schedule_);
      // The soft path is numerically ill-conditioned below t_min; execute the
      // step as hard while the schedule still reports the linear T.
      if (mode != PosteriorMode::Hard && T < schedule_.t_min) mode = PosteriorMode::Hard;
    }

    const std::int64_t fwd_before = model_->decoder_forward_count();
    Rng dropout_rng = stream_rng(seed_, "dropout", static_cast<std::uint64_t>(step_));
    Rng gumbel_rng = stream_rng(seed_, "gumbel", static_cast<std::uint64_t>(step_));
    ForwardMode fm{true, &dropout_rng};

    model_->zero_grad();
    Tape<Real> tape;
    TapeScope<Real> scope(tape);

    auto src_enc = model_->encode_source(batch.src, batch.src_mask, fm);

    DomainPosterior<Real> post;
    TensorPtr<Real> bookkeeping;  // soft posterior view used for the log/regularizer
    if (model_->has_target_encoder()) {
      TokenMatrix latent_tokens;
      MaskMatrix latent_mask;
      if (input_ == TargetEncoderInput::Target) {
        latent_tokens = batch.tgt_in;
        latent_mask = batch.tgt_mask;
      } else {
        train_detail::build_latent_input(batch.src, batch.src_mask, latent_tokens, latent_mask);
      }

      if (mode == PosteriorMode::Hard && !reg_grad_on_hard_) {
        NoGradScope<Real> ng;
        auto h = model_->encode_target_latent(latent_tokens, latent_mask);
        auto s = domain_scores(h.h, model_->latent_head());
        post = domain_posterior(s, T, PosteriorMode::Hard);
        bookkeeping = T >= schedule_.t_min
                          ? domain_posterior(s, T, PosteriorMode::Soft).p
                          : post.p;  // at T ~ 0 the soft posterior is the one-hot limit
      } else {
        auto h = model_->encode_target_latent(latent_tokens, latent_mask);
        auto s = domain_scores(h.h, model_->latent_head());
        if (mode == PosteriorMode::Hard) {
          // reg_grad_on_hard: decoder sees the hard one-hot, the regularizer
          // keeps the differentiable soft posterior.
          post = domain_posterior(s, T, PosteriorMode::Hard);
          bookkeeping = domain_posterior(s, std::max(T, schedule_.t_min), PosteriorMode::Soft).p;
        } else {
          post = domain_posterior(s, T, mode, &gumbel_rng);
          bookkeeping = post.p;
        }
      }
    } else {
      // Vanilla reduction: a single always-selected domain.
      auto p = make_tensor<Real>({batch.size(), static_cast<std::int64_t>(model_->config().n_domains)});
      for (std::int64_t b = 0; b < batch.size(); ++b) p->at(b, 0) = Real(1);
      post = {p, PosteriorMode::Hard};
      bookkeeping = p;
    }

    auto e = mix_domain_embedding(model_->domain_embeddings(), post.p);
    auto logits = model_->decode_teacher_forced(src_enc, e, batch.tgt_in, fm);
    auto nll = ops::cross_entropy(logits, batch.tgt_out, batch.tgt_mask);
    auto l_xe = entropy_regularizer(bookkeeping);
    auto loss = total_loss(nll, l_xe, lambda_);

    if (!loss->all_finite() || !nll->all_finite()) {
      throw Error("train_step: non-finite loss at step " + std::to_string(step_) + " (nll=" +
                  std::to_string(static_cast<double>(nll->data()[0])) + ", l_xe=" +
                  std::to_string(static_cast<double>(l_xe->data()[0])) + ")");
    }
    backward(loss);

    const double lr = lr_schedule(step_, opt_.warmup, opt_.lr_peak);
    adam_step(model_->parameters(), adam_, lr,
              schedule_.frozen ? &model_->target_encoder_param_mask() : nullptr);

    StepReport rep;
    rep.step = step_;
    rep.nll = static_cast<double>(nll->data()[0]);
    rep.l_xe = static_cast<double>(l_xe->data()[0]);
    rep.temperature = T;
    rep.mode = posterior_mode_name(post.mode);
    rep.histogram = train_detail::posterior_histogram(*post.p);
    rep.decoder_forwards = model_->decoder_forward_count() - fwd_before;
    rep.lr = lr;
    return rep;
  }

  // Teacher-forced validation NLL under the hard (argmax) posterior.
  double validation_nll(const std::vector<SentencePair>& pairs, std::int64_t batch_size) const {
    NoGradScope<Real> ng;
    double total = 0.0;
    std::int64_t words = 0;
    BatchIter iter(pairs, batch_size, /*seed=*/0, /*epoch=*/0);
    Batch b;
    while (iter.next(b)) {
      auto src_enc = model_->encode_source(b.src, b.src_mask);
      TensorPtr<Real> p;
      if (model_->has_target_encoder()) {
        TokenMatrix latent_tokens;
        MaskMatrix latent_mask;
        if (input_ == TargetEncoderInput::Target) {
          latent_tokens = b.tgt_in;
          latent_mask = b.tgt_mask;
        } else {
          train_detail::build_latent_input(b.src, b.src_mask, latent_tokens, latent_mask);
        }
        auto h = model_->encode_target_latent(latent_tokens, latent_mask);
        p = hard_one_hot(*domain_scores(h.h, model_->latent_head()));
      } else {
        p = make_tensor<Real>({b.size(), static_cast<std::int64_t>(model_->config().n_domains)});
        for (std::int64_t i = 0; i < b.size(); ++i) p->at(i, 0) = Real(1);
      }
      auto e = mix_domain_embedding(model_->domain_embeddings(), p);
      auto logits = model_->decode_teacher_forced(src_enc, e, b.tgt_in);
      auto nll = ops::cross_entropy(logits, b.tgt_out, b.tgt_mask);
      total += static_cast<double>(nll->data()[0]) * static_cast<double>(b.target_words());
      words += b.target_words();
    }
    return total / static_cast<double>(words);
  }

  // Hard domain assignments of the latent encoder over a set of pairs.
  std::vector<std::int64_t> assign_domains(const std::vector<SentencePair>& pairs,
                                           std::int64_t batch_size) const {
    if (!model_->has_target_encoder()) {
      return std::vector<std::int64_t>(pairs.size(), 0);
    }
    NoGradScope<Real> ng;
    std::vector<std::int64_t> out;
    out.reserve(pairs.size());
    BatchIter iter(pairs, batch_size, /*seed=*/0, /*epoch=*/0);
    // BatchIter shuffles; assignment here must follow corpus order.
    for (std::size_t start = 0; start < pairs.size();) {
      std::vector<const SentencePair*> chunk;
      while (start < pairs.size() && static_cast<std::int64_t>(chunk.size()) < batch_size) {
        chunk.push_back(&pairs[start++]);
      }
      Batch b = make_batch(chunk);
      TokenMatrix latent_tokens;
      MaskMatrix latent_mask;
      if (input_ == TargetEncoderInput::Target) {
        latent_tokens = b.tgt_in;
        latent_mask = b.tgt_mask;
      } else {
        train_detail::build_latent_input(b.src, b.src_mask, latent_tokens, latent_mask);
      }
      auto h = model_->encode_target_latent(latent_tokens, latent_mask);
      auto s = domain_scores(h.h, model_->latent_head());
      for (auto a : ops::argmax_last(*s)) out.push_back(a);
    }
    return out;
  }

 private:
  TransformerModel<Real>* model_;
  AnnealSchedule schedule_;
  double lambda_;
  OptimizerConfig opt_;
  std::uint64_t seed_;
  TargetEncoderInput input_;
  bool reg_grad_on_hard_;
  AdamState<Real> adam_;
  std::int64_t step_ = 0;
};

}  // namespace divseq
