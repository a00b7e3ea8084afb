#pragma once

// The discrete target-encoder mechanism: h -> scores -> annealed/discretized
// domain posterior -> mixed domain embedding -> regularized loss.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "divseq/autodiff.hpp"
#include "divseq/optim.hpp"
#include "divseq/rng.hpp"
#include "divseq/tensor.hpp"
#include "divseq/transformer.hpp"

namespace divseq {

enum class PosteriorMode { Soft, Hard, Gumbel };

inline const char* posterior_mode_name(PosteriorMode m) {
  switch (m) {
    case PosteriorMode::Soft: return "soft";
    case PosteriorMode::Hard: return "hard";
    case PosteriorMode::Gumbel: return "gumbel";
  }
  return "?";
}

// Linear temperature decay from 1 at step 0 to 0 at step total_steps; the
// schedule freezes (and stays frozen) once the temperature reaches 0.
struct AnnealSchedule {
  std::int64_t total_steps = 1;
  double t_min = 1e-3;   // below this, soft mode is executed as hard
  double p_hard = 0.25;  // per-step probability of the argmax path
  bool use_gumbel = false;
  bool frozen = false;

  void validate() const {
    if (total_steps < 1) throw ContractError("AnnealSchedule: total_steps must be >= 1");
    if (t_min <= 0.0) throw ContractError("AnnealSchedule: t_min must be positive");
    if (p_hard < 0.0 || p_hard > 1.0) throw ContractError("AnnealSchedule: p_hard must be in [0, 1]");
  }
};

inline double temperature(std::int64_t step, const AnnealSchedule& schedule) {
  if (step < 0) throw ContractError("temperature: step must be >= 0");
  const double t = 1.0 - static_cast<double>(step) / static_cast<double>(schedule.total_steps);
  return t > 0.0 ? t : 0.0;
}

// Hard with probability p_hard, always hard once frozen. Consumes exactly one
// draw per call either way.
inline PosteriorMode sample_mode(Rng& rng, const AnnealSchedule& schedule) {
  const double u = rng.uniform();
  if (schedule.frozen) return PosteriorMode::Hard;
  if (u < schedule.p_hard) return PosteriorMode::Hard;
  return schedule.use_gumbel ? PosteriorMode::Gumbel : PosteriorMode::Soft;
}

// s = h M^T (no bias).
template <typename Real>
TensorPtr<Real> domain_scores(const TensorPtr<Real>& h, const TensorPtr<Real>& m) {
  if (h->rank() != 2 || m->rank() != 2 || h->dim(1) != m->dim(1)) {
    throw ContractError("domain_scores: h " + shape_str(h->shape()) + " incompatible with M " +
                        shape_str(m->shape()));
  }
  return ops::matmul_nt(h, m);
}

template <typename Real>
struct DomainPosterior {
  TensorPtr<Real> p;  // [B x N]
  PosteriorMode mode = PosteriorMode::Soft;
};

// One-hot rows at the argmax of each score row (ties -> lowest index). The
// result is a constant: no gradient flows back through it.
template <typename Real>
TensorPtr<Real> hard_one_hot(const Tensor<Real>& scores) {
  const std::int64_t B = scores.dim(0), N = scores.dim(1);
  auto p = make_tensor<Real>({B, N});
  const auto idx = ops::argmax_last(scores);
  for (std::int64_t b = 0; b < B; ++b) p->at(b, idx[static_cast<std::size_t>(b)]) = Real(1);
  return p;
}

// Soft: softmax(s / T); hard: exact one-hot at argmax(s); gumbel:
// softmax((s + g) / T) with g i.i.d. standard Gumbel.
template <typename Real>
DomainPosterior<Real> domain_posterior(const TensorPtr<Real>& s, double T, PosteriorMode mode,
                                       Rng* gumbel_rng = nullptr) {
  if (s->rank() != 2) throw ContractError("domain_posterior: scores must be [B x N]");
  switch (mode) {
    case PosteriorMode::Hard:
      return {hard_one_hot(*s), PosteriorMode::Hard};
    case PosteriorMode::Soft: {
      if (T <= 0.0) throw ContractError("domain_posterior: soft mode requires T > 0 (schedule must have switched to hard)");
      return {ops::softmax(ops::scale(s, static_cast<Real>(1.0 / T)), 1), PosteriorMode::Soft};
    }
    case PosteriorMode::Gumbel: {
      if (T <= 0.0) throw ContractError("domain_posterior: gumbel mode requires T > 0");
      if (!gumbel_rng) throw ContractError("domain_posterior: gumbel mode requires an rng");
      auto noise = make_tensor<Real>(s->shape());
      for (std::int64_t i = 0; i < noise->size(); ++i) noise->data()[i] = static_cast<Real>(gumbel_rng->gumbel());
      return {ops::softmax(ops::scale(ops::add(s, noise), static_cast<Real>(1.0 / T)), 1),
              PosteriorMode::Gumbel};
    }
  }
  throw ContractError("domain_posterior: unknown mode");
}

// e = E p, one mixed embedding per batch row: [B x N] * [d x N]^T -> [B x d].
template <typename Real>
TensorPtr<Real> mix_domain_embedding(const TensorPtr<Real>& domain_embed, const TensorPtr<Real>& p) {
  if (domain_embed->rank() != 2 || p->rank() != 2 || p->dim(1) != domain_embed->dim(1)) {
    throw ContractError("mix_domain_embedding: E " + shape_str(domain_embed->shape()) +
                        " incompatible with p " + shape_str(p->shape()));
  }
  return ops::matmul_nt(p, domain_embed);
}

// L_XE = -sum_k ptilde_k ln ptilde_k with ptilde = batch mean of the
// posteriors; 0 * log 0 := 0. Differentiable through soft posteriors.
template <typename Real>
TensorPtr<Real> entropy_regularizer(const TensorPtr<Real>& p) {
  if (p->rank() != 2) throw ContractError("entropy_regularizer: posteriors must be [B x N]");
  const std::int64_t B = p->dim(0), N = p->dim(1);
  if (B < 1) throw ContractError("entropy_regularizer: empty batch");
  std::vector<double> ptilde(static_cast<std::size_t>(N), 0.0);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t k = 0; k < N; ++k) ptilde[static_cast<std::size_t>(k)] += static_cast<double>(p->at(b, k));
  double entropy = 0.0;
  for (std::int64_t k = 0; k < N; ++k) {
    ptilde[static_cast<std::size_t>(k)] /= static_cast<double>(B);
    const double v = ptilde[static_cast<std::size_t>(k)];
    if (v > 0.0) entropy -= v * std::log(v);
  }
  auto out = make_scalar<Real>(static_cast<Real>(entropy));
  if (ops::recording(p)) {
    out->requires_grad = true;
    auto pt = std::make_shared<std::vector<double>>(std::move(ptilde));
    Tape<Real>::active()->record([p, out, pt, B, N] {
      p->ensure_grad();
      const double g = static_cast<double>(out->grad()[0]);
      for (std::int64_t k = 0; k < N; ++k) {
        const double v = (*pt)[static_cast<std::size_t>(k)];
        if (v <= 0.0) continue;  // 0 log 0 convention: flat at exact zeros
        const double dk = -g * (std::log(v) + 1.0) / static_cast<double>(B);
        for (std::int64_t b = 0; b < B; ++b) p->grad()[b * N + k] += static_cast<Real>(dk);
      }
    });
  }
  return out;
}

// nll - lambda * l_xe
template <typename Real>
TensorPtr<Real> total_loss(const TensorPtr<Real>& nll, const TensorPtr<Real>& l_xe, double lambda) {
  if (nll->size() != 1 || l_xe->size() != 1) throw ContractError("total_loss: inputs must be scalars");
  return ops::axpy(nll, l_xe, static_cast<Real>(-lambda));
}

}  // namespace divseq
