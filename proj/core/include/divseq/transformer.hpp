#pragma once

// Source encoder, target-encoder trunk and decoder. The decoder consumes the
// source encoding plus a width-d vector `e` that replaces the start-symbol
// embedding at position 0 (positional encoding is still applied there).

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "divseq/autodiff.hpp"
#include "divseq/corpus.hpp"
#include "divseq/optim.hpp"
#include "divseq/rng.hpp"
#include "divseq/tensor.hpp"

namespace divseq {

struct ModelConfig {
  std::int64_t d_model = 64;
  std::int64_t n_layers = 2;
  std::int64_t n_heads = 2;
  std::int64_t d_ff = 128;
  std::int32_t src_vocab_size = 0;
  std::int32_t tgt_vocab_size = 0;
  std::int32_t n_domains = 1;
  double dropout_enc_dec = 0.1;
  double dropout_target_enc = 0.0;  // must stay 0
  std::int64_t max_len = 64;
  std::uint64_t seed = 1;

  void validate() const {
    if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1) {
      throw ContractError("ModelConfig: dimensions must be positive");
    }
    if (d_model % n_heads != 0) throw ContractError("ModelConfig: d_model must be divisible by n_heads");
    if (src_vocab_size < 1 || tgt_vocab_size < 1) throw ContractError("ModelConfig: vocab sizes must be positive");
    if (n_domains < 1) throw ContractError("ModelConfig: n_domains must be >= 1");
    if (dropout_enc_dec < 0.0 || dropout_enc_dec >= 1.0) throw ContractError("ModelConfig: dropout must be in [0, 1)");
    if (dropout_target_enc != 0.0) throw ContractError("ModelConfig: the target encoder must not use dropout");
    if (max_len < 2) throw ContractError("ModelConfig: max_len too small");
  }
};

template <typename Real>
struct SourceEncoding {
  TensorPtr<Real> states;  // [B x L_src x d]
  MaskMatrix mask;
};

template <typename Real>
struct TargetLatent {
  TensorPtr<Real> h;  // [B x d], last-layer state at the start position
};

namespace nets_detail {

template <typename Real>
struct LinearP {
  TensorPtr<Real> w;  // [in x out]
  TensorPtr<Real> b;  // [out]
};

template <typename Real>
struct NormP {
  TensorPtr<Real> g;
  TensorPtr<Real> b;
};

template <typename Real>
struct AttnP {
  LinearP<Real> q, k, v, o;
};

template <typename Real>
struct EncLayerP {
  AttnP<Real> self;
  NormP<Real> ln1;
  LinearP<Real> ff1, ff2;
  NormP<Real> ln2;
};

template <typename Real>
struct DecLayerP {
  AttnP<Real> self;
  NormP<Real> ln1;
  AttnP<Real> cross;
  NormP<Real> ln2;
  LinearP<Real> ff1, ff2;
  NormP<Real> ln3;
};

}  // namespace nets_detail

// Sinusoidal table [max_len x d].
template <typename Real>
Tensor<Real> sinusoidal_positions(std::int64_t max_len, std::int64_t d) {
  Tensor<Real> pe({max_len, d});
  for (std::int64_t t = 0; t < max_len; ++t) {
    for (std::int64_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      pe.at(t, i) = static_cast<Real>(std::sin(static_cast<double>(t) * freq));
      if (i + 1 < d) pe.at(t, i + 1) = static_cast<Real>(std::cos(static_cast<double>(t) * freq));
    }
  }
  return pe;
}

// Per-forward mutable context: dropout only applies in training mode.
struct ForwardMode {
  bool train = false;
  Rng* dropout_rng = nullptr;
};

template <typename Real>
class TransformerModel {
 public:
  TransformerModel(const ModelConfig& cfg, bool with_target_encoder)
      : cfg_(cfg), with_target_encoder_(with_target_encoder),
        pos_(sinusoidal_positions<Real>(cfg.max_len, cfg.d_model)) {
    cfg_.validate();
    build();
  }

  const ModelConfig& config() const { return cfg_; }
  bool has_target_encoder() const { return with_target_encoder_; }

  std::vector<NamedParam<Real>>& parameters() { return params_; }
  const std::vector<NamedParam<Real>>& parameters() const { return params_; }
  // Marks parameters belonging to the target-encoder path (E_t trunk and M).
  const std::vector<bool>& target_encoder_param_mask() const { return is_tgt_enc_param_; }

  TensorPtr<Real> domain_embeddings() const { return domain_embed_; }  // E, [d x N]
  TensorPtr<Real> latent_head() const { return latent_m_; }            // M, [N x d]
  TensorPtr<Real> target_embedding() const { return tgt_embed_; }

  void zero_grad() {
    for (auto& p : params_) p.tensor->zero_grad();
  }

  std::int64_t decoder_forward_count() const { return decoder_forwards_; }
  void reset_decoder_forward_count() { decoder_forwards_ = 0; }

  SourceEncoding<Real> encode_source(const TokenMatrix& tokens, const MaskMatrix& mask,
                                     const ForwardMode& fm = {}) const {
    check_len(tokens.cols);
    auto x = embed_with_positions(src_embed_, tokens, cfg_.dropout_enc_dec, fm);
    for (const auto& layer : enc_) {
      x = self_attention_block(layer.self, layer.ln1, x, &mask, /*causal=*/false, cfg_.dropout_enc_dec, fm);
      x = feed_forward_block(layer.ff1, layer.ff2, layer.ln2, x, cfg_.dropout_enc_dec, fm);
    }
    return {x, mask};
  }

  // Runs the target-encoder trunk and returns the last-layer state at
  // position 0 (the start token). Never applies dropout.
  TargetLatent<Real> encode_target_latent(const TokenMatrix& tokens, const MaskMatrix& mask) const {
    if (!with_target_encoder_) throw ContractError("encode_target_latent: model has no target encoder");
    if (tokens.cols < 1) throw InputError("encode_target_latent: empty sequence");
    check_len(tokens.cols);
    ForwardMode eval{};
    auto x = embed_with_positions(tgt_embed_, tokens, 0.0, eval);
    for (const auto& layer : tgt_enc_) {
      x = self_attention_block(layer.self, layer.ln1, x, &mask, /*causal=*/false, 0.0, eval);
      x = feed_forward_block(layer.ff1, layer.ff2, layer.ln2, x, 0.0, eval);
    }
    return {ops::select_time0(x)};
  }

  // Teacher-forced decode. tgt_in is the start-shifted target; its position-0
  // slot is replaced by `e` (plus positional encoding).
  TensorPtr<Real> decode_teacher_forced(const SourceEncoding<Real>& src, const TensorPtr<Real>& e,
                                        const TokenMatrix& tgt_in, const ForwardMode& fm = {}) const {
    if (e->rank() != 2 || e->dim(0) != tgt_in.rows || e->dim(1) != cfg_.d_model) {
      throw ContractError("decode_teacher_forced: e must be [B x d_model], got " + shape_str(e->shape()));
    }
    check_len(tgt_in.cols);
    ++decoder_forwards_;
    auto emb = ops::embedding(tgt_embed_, tgt_in);
    auto x = ops::add_time_rows(ops::splice_time0(emb, e), pos_);
    if (fm.train && cfg_.dropout_enc_dec > 0.0) x = ops::dropout(x, cfg_.dropout_enc_dec, *fm.dropout_rng);
    for (const auto& layer : dec_) {
      x = self_attention_block(layer.self, layer.ln1, x, nullptr, /*causal=*/true, cfg_.dropout_enc_dec, fm);
      x = cross_attention_block(layer.cross, layer.ln2, x, src, cfg_.dropout_enc_dec, fm);
      x = feed_forward_block(layer.ff1, layer.ff2, layer.ln3, x, cfg_.dropout_enc_dec, fm);
    }
    return ops::linear(x, out_.w, out_.b);  // [B x L x V]
  }

 private:
  friend class DecoderSessionFriend;

  void check_len(std::int64_t len) const {
    if (len > cfg_.max_len) {
      throw InputError("sequence length " + std::to_string(len) + " exceeds max_len " +
                       std::to_string(cfg_.max_len));
    }
  }

  TensorPtr<Real> embed_with_positions(const TensorPtr<Real>& table, const TokenMatrix& tokens,
                                       double dropout, const ForwardMode& fm) const {
    auto x = ops::add_time_rows(ops::embedding(table, tokens), pos_);
    if (fm.train && dropout > 0.0) x = ops::dropout(x, dropout, *fm.dropout_rng);
    return x;
  }

  TensorPtr<Real> split_heads(const TensorPtr<Real>& x) const {
    const std::int64_t B = x->dim(0), L = x->dim(1);
    const std::int64_t H = cfg_.n_heads, dh = cfg_.d_model / H;
    return ops::reshape(ops::permute0213(ops::reshape(x, {B, L, H, dh})), {B * H, L, dh});
  }

  TensorPtr<Real> merge_heads(const TensorPtr<Real>& x, std::int64_t B, std::int64_t L) const {
    const std::int64_t H = cfg_.n_heads, dh = cfg_.d_model / H;
    return ops::reshape(ops::permute0213(ops::reshape(x, {B, H, L, dh})), {B, L, cfg_.d_model});
  }

  TensorPtr<Real> attention(const nets_detail::AttnP<Real>& p, const TensorPtr<Real>& x_q,
                            const TensorPtr<Real>& x_kv, const MaskMatrix* key_mask,
                            bool causal) const {
    const std::int64_t B = x_q->dim(0), Lq = x_q->dim(1);
    const std::int64_t dh = cfg_.d_model / cfg_.n_heads;
    auto qh = split_heads(ops::linear(x_q, p.q.w, p.q.b));
    auto kh = split_heads(ops::linear(x_kv, p.k.w, p.k.b));
    auto vh = split_heads(ops::linear(x_kv, p.v.w, p.v.b));
    auto scores = ops::scale(ops::bmm_nt(qh, kh), static_cast<Real>(1.0 / std::sqrt(static_cast<double>(dh))));
    TensorPtr<Real> attn;
    if (causal) {
      attn = ops::causal_softmax(scores);
    } else {
      attn = ops::masked_softmax_keys(scores, *key_mask, cfg_.n_heads);
    }
    auto ctx = merge_heads(ops::bmm(attn, vh), B, Lq);
    return ops::linear(ctx, p.o.w, p.o.b);
  }

  TensorPtr<Real> residual_norm(const nets_detail::NormP<Real>& ln, const TensorPtr<Real>& x,
                                TensorPtr<Real> sub, double dropout, const ForwardMode& fm) const {
    if (fm.train && dropout > 0.0) sub = ops::dropout(sub, dropout, *fm.dropout_rng);
    return ops::layer_norm(ops::add(x, sub), ln.g, ln.b);
  }

  TensorPtr<Real> self_attention_block(const nets_detail::AttnP<Real>& p, const nets_detail::NormP<Real>& ln,
                                       const TensorPtr<Real>& x, const MaskMatrix* key_mask, bool causal,
                                       double dropout, const ForwardMode& fm) const {
    return residual_norm(ln, x, attention(p, x, x, key_mask, causal), dropout, fm);
  }

  TensorPtr<Real> cross_attention_block(const nets_detail::AttnP<Real>& p, const nets_detail::NormP<Real>& ln,
                                        const TensorPtr<Real>& x, const SourceEncoding<Real>& src,
                                        double dropout, const ForwardMode& fm) const {
    return residual_norm(ln, x, attention(p, x, src.states, &src.mask, false), dropout, fm);
  }

  TensorPtr<Real> feed_forward_block(const nets_detail::LinearP<Real>& ff1, const nets_detail::LinearP<Real>& ff2,
                                     const nets_detail::NormP<Real>& ln, const TensorPtr<Real>& x,
                                     double dropout, const ForwardMode& fm) const {
    return residual_norm(ln, x, ops::linear(ops::relu(ops::linear(x, ff1.w, ff1.b)), ff2.w, ff2.b),
                         dropout, fm);
  }

  // ---- construction ----

  TensorPtr<Real> init_weight(const std::string& name, Shape shape, std::int64_t fan_in) {
    auto t = make_param<Real>(std::move(shape));
    Rng rng = stream_rng(cfg_.seed, "init:" + name);
    const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::int64_t i = 0; i < t->size(); ++i) t->data()[i] = static_cast<Real>(rng.uniform(-a, a));
    params_.push_back({name, t});
    is_tgt_enc_param_.push_back(in_target_encoder_);
    return t;
  }

  TensorPtr<Real> init_const(const std::string& name, Shape shape, Real value) {
    auto t = make_param<Real>(std::move(shape));
    for (std::int64_t i = 0; i < t->size(); ++i) t->data()[i] = value;
    params_.push_back({name, t});
    is_tgt_enc_param_.push_back(in_target_encoder_);
    return t;
  }

  nets_detail::LinearP<Real> init_linear(const std::string& name, std::int64_t in, std::int64_t out) {
    return {init_weight(name + ".w", {in, out}, in), init_const(name + ".b", {out}, Real(0))};
  }

  nets_detail::NormP<Real> init_norm(const std::string& name) {
    return {init_const(name + ".g", {cfg_.d_model}, Real(1)), init_const(name + ".b", {cfg_.d_model}, Real(0))};
  }

  nets_detail::AttnP<Real> init_attn(const std::string& name) {
    const std::int64_t d = cfg_.d_model;
    return {init_linear(name + ".q", d, d), init_linear(name + ".k", d, d),
            init_linear(name + ".v", d, d), init_linear(name + ".o", d, d)};
  }

  nets_detail::EncLayerP<Real> init_enc_layer(const std::string& name) {
    nets_detail::EncLayerP<Real> l;
    l.self = init_attn(name + ".self");
    l.ln1 = init_norm(name + ".ln1");
    l.ff1 = init_linear(name + ".ff1", cfg_.d_model, cfg_.d_ff);
    l.ff2 = init_linear(name + ".ff2", cfg_.d_ff, cfg_.d_model);
    l.ln2 = init_norm(name + ".ln2");
    return l;
  }

  void build() {
    src_embed_ = init_weight("src_embed", {cfg_.src_vocab_size, cfg_.d_model}, cfg_.d_model);
    tgt_embed_ = init_weight("tgt_embed", {cfg_.tgt_vocab_size, cfg_.d_model}, cfg_.d_model);
    for (std::int64_t i = 0; i < cfg_.n_layers; ++i) {
      enc_.push_back(init_enc_layer("enc." + std::to_string(i)));
    }
    for (std::int64_t i = 0; i < cfg_.n_layers; ++i) {
      const std::string name = "dec." + std::to_string(i);
      nets_detail::DecLayerP<Real> l;
      l.self = init_attn(name + ".self");
      l.ln1 = init_norm(name + ".ln1");
      l.cross = init_attn(name + ".cross");
      l.ln2 = init_norm(name + ".ln2");
      l.ff1 = init_linear(name + ".ff1", cfg_.d_model, cfg_.d_ff);
      l.ff2 = init_linear(name + ".ff2", cfg_.d_ff, cfg_.d_model);
      l.ln3 = init_norm(name + ".ln3");
      dec_.push_back(std::move(l));
    }
    out_ = init_linear("out", cfg_.d_model, cfg_.tgt_vocab_size);
    domain_embed_ = init_weight("domain.E", {cfg_.d_model, cfg_.n_domains}, cfg_.d_model);
    if (with_target_encoder_) {
      in_target_encoder_ = true;
      for (std::int64_t i = 0; i < cfg_.n_layers; ++i) {
        tgt_enc_.push_back(init_enc_layer("tgtenc." + std::to_string(i)));
      }
      latent_m_ = init_weight("latent.M", {cfg_.n_domains, cfg_.d_model}, cfg_.d_model);
      in_target_encoder_ = false;
    }
  }

 public:
  // Exposed for the incremental decoding session below.
  struct Internals {
    const std::vector<nets_detail::DecLayerP<Real>>* dec;
    const nets_detail::LinearP<Real>* out;
    const TensorPtr<Real>* tgt_embed;
    const Tensor<Real>* pos;
  };
  Internals internals() const { return {&dec_, &out_, &tgt_embed_, &pos_}; }

 private:
  ModelConfig cfg_;
  bool with_target_encoder_;
  bool in_target_encoder_ = false;
  Tensor<Real> pos_;

  TensorPtr<Real> src_embed_, tgt_embed_;
  std::vector<nets_detail::EncLayerP<Real>> enc_;
  std::vector<nets_detail::EncLayerP<Real>> tgt_enc_;
  std::vector<nets_detail::DecLayerP<Real>> dec_;
  nets_detail::LinearP<Real> out_;
  TensorPtr<Real> domain_embed_;
  TensorPtr<Real> latent_m_;

  std::vector<NamedParam<Real>> params_;
  std::vector<bool> is_tgt_enc_param_;

  mutable std::int64_t decoder_forwards_ = 0;
};

// Incremental decoding over a single source sentence. Holds the source
// encoding and precomputed cross-attention keys/values; State carries the
// growing self-attention cache and is cheap to copy for beam branching.
// next-token logits match decode_teacher_forced at the same position exactly
// (shared arithmetic kernels, same summation order).
template <typename Real>
class DecoderSession {
 public:
  struct State {
    std::vector<std::vector<Real>> self_k;  // per layer, t * d flat
    std::vector<std::vector<Real>> self_v;
    TokenSeq consumed;  // tokens fed after the initial e
    bool started = false;
  };

  DecoderSession(const TransformerModel<Real>& model, const TokenSeq& source,
                 std::vector<Real> e)
      : model_(&model), e_(std::move(e)) {
    const auto& cfg = model.config();
    if (static_cast<std::int64_t>(e_.size()) != cfg.d_model) {
      throw ContractError("DecoderSession: e must have width d_model");
    }
    NoGradScope<Real> ng;
    TokenMatrix tokens(1, static_cast<std::int64_t>(source.size()));
    MaskMatrix mask(1, static_cast<std::int64_t>(source.size()), true);
    for (std::size_t i = 0; i < source.size(); ++i) tokens.at(0, static_cast<std::int64_t>(i)) = source[i];
    src_ = model.encode_source(tokens, mask);
    const auto in = model.internals();
    const std::int64_t d = cfg.d_model;
    const std::int64_t ls = src_.states->dim(1);
    cross_k_.resize(in.dec->size());
    cross_v_.resize(in.dec->size());
    for (std::size_t l = 0; l < in.dec->size(); ++l) {
      const auto& layer = (*in.dec)[l];
      cross_k_[l].assign(static_cast<std::size_t>(ls * d), Real(0));
      cross_v_[l].assign(static_cast<std::size_t>(ls * d), Real(0));
      for (std::int64_t t = 0; t < ls; ++t) {
        affine(src_.states->data() + t * d, layer.cross.k, cross_k_[l].data() + t * d);
        affine(src_.states->data() + t * d, layer.cross.v, cross_v_[l].data() + t * d);
      }
    }
  }

  State start() const {
    State st;
    st.self_k.resize(model_->internals().dec->size());
    st.self_v.resize(model_->internals().dec->size());
    return st;
  }

  std::int64_t vocab_size() const { return model_->config().tgt_vocab_size; }
  std::int64_t max_len() const { return model_->config().max_len; }

  // Feeds one position (e when the state is fresh, otherwise `token`) and
  // returns the next-token logits.
  std::vector<Real> step(State& st, std::int32_t token) {
    const auto in = model_->internals();
    const auto& cfg = model_->config();
    const std::int64_t d = cfg.d_model;
    const std::int64_t H = cfg.n_heads, dh = d / H;
    const std::int64_t t = st.started ? static_cast<std::int64_t>(st.consumed.size()) + 1 : 0;
    if (t >= cfg.max_len) throw InputError("DecoderSession: exceeded max_len");

    std::vector<Real> x(static_cast<std::size_t>(d));
    if (!st.started) {
      for (std::int64_t j = 0; j < d; ++j) x[static_cast<std::size_t>(j)] = e_[static_cast<std::size_t>(j)] + in.pos->at(0, j);
      st.started = true;
    } else {
      if (token < 0 || token >= cfg.tgt_vocab_size) throw IndexError("DecoderSession: token id out of range");
      const Real* row = (*in.tgt_embed)->data() + static_cast<std::int64_t>(token) * d;
      for (std::int64_t j = 0; j < d; ++j) x[static_cast<std::size_t>(j)] = row[j] + in.pos->at(t, j);
      st.consumed.push_back(token);
    }

    const Real inv_sqrt_dh = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<Real> q(static_cast<std::size_t>(d)), k(static_cast<std::size_t>(d)), v(static_cast<std::size_t>(d));
    std::vector<Real> sub(static_cast<std::size_t>(d));
    const std::int64_t ls = src_.states->dim(1);
    std::vector<Real> scores(static_cast<std::size_t>(std::max(t + 1, ls)));
    std::vector<Real> attn(scores.size());

    for (std::size_t l = 0; l < in.dec->size(); ++l) {
      const auto& layer = (*in.dec)[l];
      // self attention over cached positions (causal by construction)
      affine(x.data(), layer.self.q, q.data());
      affine(x.data(), layer.self.k, k.data());
      affine(x.data(), layer.self.v, v.data());
      auto& ck = st.self_k[l];
      auto& cv = st.self_v[l];
      ck.insert(ck.end(), k.begin(), k.end());
      cv.insert(cv.end(), v.begin(), v.end());
      const std::int64_t nk = t + 1;
      std::fill(sub.begin(), sub.end(), Real(0));
      for (std::int64_t h = 0; h < H; ++h) {
        head_attention(q.data() + h * dh, ck.data() + h * dh, cv.data() + h * dh, nk, d, dh,
                       inv_sqrt_dh, scores.data(), attn.data(), sub.data() + h * dh);
      }
      project_residual_norm(layer.self.o, layer.ln1, sub, x, d);

      // cross attention over the precomputed source keys/values
      affine(x.data(), layer.cross.q, q.data());
      std::fill(sub.begin(), sub.end(), Real(0));
      for (std::int64_t h = 0; h < H; ++h) {
        head_attention(q.data() + h * dh, cross_k_[l].data() + h * dh, cross_v_[l].data() + h * dh,
                       ls, d, dh, inv_sqrt_dh, scores.data(), attn.data(), sub.data() + h * dh);
      }
      project_residual_norm(layer.cross.o, layer.ln2, sub, x, d);

      // feed-forward
      std::vector<Real> hmid(static_cast<std::size_t>(cfg.d_ff));
      affine(x.data(), layer.ff1, hmid.data());
      for (auto& hv : hmid) hv = hv > Real(0) ? hv : Real(0);
      std::fill(sub.begin(), sub.end(), Real(0));
      for (std::int64_t j = 0; j < static_cast<std::int64_t>(sub.size()); ++j) sub[static_cast<std::size_t>(j)] = layer.ff2.b->data()[j];
      detail::gemm_nn(hmid.data(), layer.ff2.w->data(), sub.data(), 1, cfg.d_ff, d);
      add_norm(layer.ln3, sub, x, d);
    }

    std::vector<Real> logits(static_cast<std::size_t>(cfg.tgt_vocab_size));
    for (std::int64_t j = 0; j < cfg.tgt_vocab_size; ++j) logits[static_cast<std::size_t>(j)] = in.out->b->data()[j];
    detail::gemm_nn(x.data(), in.out->w->data(), logits.data(), 1, d, cfg.tgt_vocab_size);
    return logits;
  }

  const SourceEncoding<Real>& source_encoding() const { return src_; }

 private:
  void affine(const Real* x, const nets_detail::LinearP<Real>& p, Real* out) const {
    const std::int64_t in_dim = p.w->dim(0), out_dim = p.w->dim(1);
    for (std::int64_t j = 0; j < out_dim; ++j) out[j] = p.b->data()[j];
    detail::gemm_nn(x, p.w->data(), out, 1, in_dim, out_dim);
  }

  // Single-head attention of one query against nk cached keys (stride d).
  void head_attention(const Real* qh, const Real* keys, const Real* vals, std::int64_t nk,
                      std::int64_t stride, std::int64_t dh, Real scale, Real* scores, Real* attn,
                      Real* out) const {
    for (std::int64_t j = 0; j < nk; ++j) {
      scores[j] = Real(0);
      detail::gemm_nt(qh, keys + j * stride, scores + j, 1, dh, 1);
      scores[j] *= scale;
    }
    detail::softmax_row(scores, attn, nk);
    for (std::int64_t j = 0; j < dh; ++j) out[j] = Real(0);
    for (std::int64_t j = 0; j < nk; ++j) {
      const Real a = attn[j];
      const Real* vr = vals + j * stride;
      for (std::int64_t c = 0; c < dh; ++c) out[c] += a * vr[c];
    }
  }

  void project_residual_norm(const nets_detail::LinearP<Real>& proj, const nets_detail::NormP<Real>& ln,
                             const std::vector<Real>& sub, std::vector<Real>& x, std::int64_t d) const {
    std::vector<Real> projected(static_cast<std::size_t>(d));
    affine(sub.data(), proj, projected.data());
    add_norm(ln, projected, x, d);
  }

  void add_norm(const nets_detail::NormP<Real>& ln, const std::vector<Real>& sub, std::vector<Real>& x,
                std::int64_t d) const {
    Real mean = 0;
    std::vector<Real> y(static_cast<std::size_t>(d));
    for (std::int64_t j = 0; j < d; ++j) y[static_cast<std::size_t>(j)] = x[static_cast<std::size_t>(j)] + sub[static_cast<std::size_t>(j)];
    for (std::int64_t j = 0; j < d; ++j) mean += y[static_cast<std::size_t>(j)];
    mean /= Real(d);
    Real var = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      const Real c = y[static_cast<std::size_t>(j)] - mean;
      var += c * c;
    }
    var /= Real(d);
    const Real istd = Real(1) / std::sqrt(var + Real(1e-5));
    for (std::int64_t j = 0; j < d; ++j) {
      x[static_cast<std::size_t>(j)] =
          (y[static_cast<std::size_t>(j)] - mean) * istd * ln.g->data()[j] + ln.b->data()[j];
    }
  }

  const TransformerModel<Real>* model_;
  std::vector<Real> e_;
  SourceEncoding<Real> src_;
  std::vector<std::vector<Real>> cross_k_;  // per layer, ls * d flat
  std::vector<std::vector<Real>> cross_v_;
};

// Convenience wrapper with the cache/prefix consistency contract: prefix must
// extend the state's consumed prefix by exactly the tokens not yet fed.
template <typename Real>
std::vector<Real> decode_one_step(DecoderSession<Real>& session,
                                  typename DecoderSession<Real>::State& state,
                                  const TokenSeq& prefix) {
  if (!state.started) {
    if (!prefix.empty()) throw ContractError("decode_one_step: fresh cache requires empty prefix");
    return session.step(state, -1);
  }
  if (prefix.size() != state.consumed.size() + 1 ||
      !std::equal(state.consumed.begin(), state.consumed.end(), prefix.begin())) {
    throw ContractError("decode_one_step: prefix inconsistent with cached state");
  }
  return session.step(state, prefix.back());
}

}  // namespace divseq
