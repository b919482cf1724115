#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "xdvae/config.hpp"
#include "xdvae/errors.hpp"
#include "xdvae/losses.hpp"
#include "xdvae/nn.hpp"
#include "xdvae/rng.hpp"

namespace xdvae {

/// Tanh hidden stack followed by parallel identity heads for mu and
/// log-variance. With an auxiliary sub-encoder attached, the heads read the
/// last hidden layer concatenated with the sub-encoder output.
template <typename Scalar>
struct EncoderStack {
  std::vector<DenseLayer<Scalar>> hidden;
  DenseLayer<Scalar> mu_head;
  DenseLayer<Scalar> logvar_head;
  Eigen::Index input = 0;
  Eigen::Index aux_width = 0;

  Eigen::Index input_dim() const { return input; }
  Eigen::Index latent_dim() const { return mu_head.out_dim(); }
  Eigen::Index hidden_out() const { return hidden.empty() ? input : hidden.back().out_dim(); }

  void append_views(const std::string& prefix, std::vector<ParamView<Scalar>>& out) {
    for (std::size_t k = 0; k < hidden.size(); ++k) hidden[k].append_views(prefix + ".h" + std::to_string(k), out);
    mu_head.append_views(prefix + ".mu", out);
    logvar_head.append_views(prefix + ".logvar", out);
  }
};

/// Tanh layers ending in a sigmoid output layer, so reconstructions lie in (0, 1).
template <typename Scalar>
struct DecoderStack {
  std::vector<DenseLayer<Scalar>> layers;

  Eigen::Index input_dim() const { return layers.front().in_dim(); }
  Eigen::Index output_dim() const { return layers.back().out_dim(); }
  const DenseLayer<Scalar>& output_layer() const { return layers.back(); }

  void append_views(const std::string& prefix, std::vector<ParamView<Scalar>>& out) {
    for (std::size_t k = 0; k + 1 < layers.size(); ++k) layers[k].append_views(prefix + ".h" + std::to_string(k), out);
    layers.back().append_views(prefix + ".out", out);
  }
};

template <typename Scalar>
struct SubEncoder {
  std::vector<DenseLayer<Scalar>> layers;

  Eigen::Index input_dim() const { return layers.front().in_dim(); }
  Eigen::Index output_dim() const { return layers.back().out_dim(); }

  void append_views(const std::string& prefix, std::vector<ParamView<Scalar>>& out) {
    for (std::size_t k = 0; k < layers.size(); ++k) layers[k].append_views(prefix + ".h" + std::to_string(k), out);
  }
};

template <typename Scalar>
struct LatentState {
  Vec<Scalar> mu;
  Vec<Scalar> logvar;
  Vec<Scalar> eps;
  Vec<Scalar> z;
};

/// All trainable tensors of one model variant.
///
/// Slot usage by variant:
///   Generic/NoMMD/Aux: enc_source, enc_target, dec_source, dec_target (input 2L)
///   ColdStart:         as Generic plus map_layer; dec_target input is L
///   Single:            enc_target, dec_target (input L)
///   Merged:            enc_target/dec_target hold one joint VAE over n_S + n_T
///   Aux:               aux_encoder feeds the heads of the attached encoders
template <typename Scalar>
struct ModelParams {
  Variant variant = Variant::Generic;
  Eigen::Index n_source = 0;
  Eigen::Index n_target = 0;
  Eigen::Index latent = 0;
  Eigen::Index aux_input = 0;
  AuxAttach aux_attach = AuxAttach::Both;

  std::optional<EncoderStack<Scalar>> enc_source;
  EncoderStack<Scalar> enc_target;
  std::optional<SubEncoder<Scalar>> aux_encoder;
  std::optional<DenseLayer<Scalar>> map_layer;
  std::optional<DecoderStack<Scalar>> dec_source;
  DecoderStack<Scalar> dec_target;

  bool aux_feeds_source() const { return aux_encoder && aux_attach != AuxAttach::Target; }
  bool aux_feeds_target() const { return aux_encoder && aux_attach != AuxAttach::Source; }

  /// Views in the fixed declaration order used by checkpoints.
  std::vector<ParamView<Scalar>> views() const {
    auto& self = const_cast<ModelParams&>(*this);
    std::vector<ParamView<Scalar>> out;
    const bool merged = variant == Variant::Merged;
    if (self.enc_source) self.enc_source->append_views("enc_S", out);
    self.enc_target.append_views(merged ? "enc_ST" : "enc_T", out);
    if (self.aux_encoder) self.aux_encoder->append_views("aux", out);
    if (self.map_layer) self.map_layer->append_views("map", out);
    if (self.dec_source) self.dec_source->append_views("dec_S", out);
    self.dec_target.append_views(merged ? "dec_ST" : "dec_T", out);
    return out;
  }

  void set_zero() {
    for (auto& v : views()) v.map().setZero();
  }

  ModelParams zeros_like() const {
    ModelParams g = *this;
    g.set_zero();
    return g;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& v : views()) n += static_cast<std::size_t>(v.size());
    return n;
  }
};

namespace detail {

template <typename Scalar>
std::vector<DenseLayer<Scalar>> make_chain(Eigen::Index in, const std::vector<std::size_t>& widths, Activation act) {
  std::vector<DenseLayer<Scalar>> out;
  for (auto w : widths) {
    out.emplace_back(in, static_cast<Eigen::Index>(w), act);
    in = static_cast<Eigen::Index>(w);
  }
  return out;
}

template <typename Scalar>
EncoderStack<Scalar> make_encoder(Eigen::Index input, const std::vector<std::size_t>& hidden, Eigen::Index latent,
                                  Eigen::Index aux_width) {
  EncoderStack<Scalar> e;
  e.input = input;
  e.aux_width = aux_width;
  e.hidden = make_chain<Scalar>(input, hidden, Activation::Tanh);
  const Eigen::Index head_in = e.hidden_out() + aux_width;
  e.mu_head = DenseLayer<Scalar>(head_in, latent, Activation::Identity);
  e.logvar_head = DenseLayer<Scalar>(head_in, latent, Activation::Identity);
  return e;
}

template <typename Scalar>
DecoderStack<Scalar> make_decoder(Eigen::Index input, const std::vector<std::size_t>& encoder_hidden,
                                  Eigen::Index output) {
  std::vector<std::size_t> mirrored(encoder_hidden.rbegin(), encoder_hidden.rend());
  DecoderStack<Scalar> d;
  d.layers = make_chain<Scalar>(input, mirrored, Activation::Tanh);
  const Eigen::Index last = d.layers.empty() ? input : d.layers.back().out_dim();
  d.layers.emplace_back(last, output, Activation::Sigmoid);
  return d;
}

template <typename Scalar, typename DA, typename DB>
Mat<Scalar> vstack(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  if (a.cols() != b.cols()) throw ShapeError("vstack: column count mismatch");
  Mat<Scalar> out(a.rows() + b.rows(), a.cols());
  out.topRows(a.rows()) = a;
  out.bottomRows(b.rows()) = b;
  return out;
}

}  // namespace detail

/// Zero-filled parameters with the variant's shapes.
template <typename Scalar>
ModelParams<Scalar> build_model(const ModelConfig& cfg, std::size_t n_source, std::size_t n_target,
                                std::size_t aux_input = 0) {
  cfg.validate();
  ModelParams<Scalar> p;
  p.variant = cfg.variant;
  p.n_source = static_cast<Eigen::Index>(n_source);
  p.n_target = static_cast<Eigen::Index>(n_target);
  p.latent = static_cast<Eigen::Index>(cfg.latent_dim);
  p.aux_attach = cfg.aux_attach;
  const auto L = p.latent;
  if (n_target < 1) throw ShapeError("build_model: n_target must be >= 1");

  switch (cfg.variant) {
    case Variant::Single:
      p.enc_target = detail::make_encoder<Scalar>(p.n_target, cfg.target_dims, L, 0);
      p.dec_target = detail::make_decoder<Scalar>(L, cfg.target_dims, p.n_target);
      return p;
    case Variant::Merged: {
      if (n_source < 1) throw ShapeError("build_model: n_source must be >= 1");
      std::vector<std::size_t> doubled;
      for (auto w : cfg.target_dims) doubled.push_back(2 * w);
      const auto joint = p.n_source + p.n_target;
      p.enc_target = detail::make_encoder<Scalar>(joint, doubled, 2 * L, 0);
      p.dec_target = detail::make_decoder<Scalar>(2 * L, doubled, joint);
      return p;
    }
    default:
      break;
  }

  if (n_source < 1) throw ShapeError("build_model: n_source must be >= 1");
  Eigen::Index aux_width = 0;
  if (cfg.variant == Variant::Aux) {
    if (aux_input < 1) throw ShapeError("build_model: aux variant needs aux_input >= 1");
    p.aux_input = static_cast<Eigen::Index>(aux_input);
    SubEncoder<Scalar> sub;
    sub.layers = detail::make_chain<Scalar>(p.aux_input, cfg.aux_dims, Activation::Tanh);
    aux_width = sub.output_dim();
    p.aux_encoder = std::move(sub);
  }
  p.enc_source = detail::make_encoder<Scalar>(p.n_source, cfg.source_dims, L, p.aux_feeds_source() ? aux_width : 0);
  p.enc_target = detail::make_encoder<Scalar>(p.n_target, cfg.target_dims, L, p.aux_feeds_target() ? aux_width : 0);
  p.dec_source = detail::make_decoder<Scalar>(L, cfg.source_dims, p.n_source);
  if (cfg.variant == Variant::ColdStart) {
    p.map_layer = DenseLayer<Scalar>(L, L, Activation::Tanh);
    p.dec_target = detail::make_decoder<Scalar>(L, cfg.target_dims, p.n_target);
  } else {
    p.dec_target = detail::make_decoder<Scalar>(2 * L, cfg.target_dims, p.n_target);
  }
  return p;
}

/// Glorot-uniform weights and zero biases. Each weight tensor draws from its
/// own stream keyed by tensor name, so variants that share a tensor name and
/// shape also share its initial values.
template <typename Scalar>
void init_params(ModelParams<Scalar>& p, std::uint64_t seed) {
  for (auto& v : p.views()) {
    if (v.name.size() >= 2 && v.name.compare(v.name.size() - 2, 2, ".W") == 0) {
      auto rng = make_rng(seed, "init/" + v.name);
      v.map() = glorot_init<Scalar>(v.cols, v.rows, rng);
    } else {
      v.map().setZero();
    }
  }
}

// ---------------------------------------------------------------------------
// Forward traces

template <typename Scalar>
struct StackTrace {
  std::vector<Mat<Scalar>> acts;  // acts[0] is the input, acts[k] the output of layer k-1
  const Mat<Scalar>& output() const { return acts.back(); }
};

template <typename Scalar>
struct EncoderTrace {
  StackTrace<Scalar> stack;
  Mat<Scalar> head_in;
  Mat<Scalar> mu, logvar, eps, z;
};

template <typename Scalar>
StackTrace<Scalar> run_stack(const std::vector<DenseLayer<Scalar>>& layers, Mat<Scalar> input) {
  StackTrace<Scalar> t;
  t.acts.reserve(layers.size() + 1);
  t.acts.push_back(std::move(input));
  for (const auto& layer : layers) t.acts.push_back(dense_forward(layer, t.acts.back()));
  return t;
}

/// Backward through a layer stack; returns dL/dinput unless `need_input_grad` is false.
template <typename Scalar>
Mat<Scalar> backward_stack(const std::vector<DenseLayer<Scalar>>& layers, const StackTrace<Scalar>& trace,
                           Mat<Scalar> d_out, std::vector<DenseLayer<Scalar>>& grads, bool need_input_grad = true) {
  for (std::size_t k = layers.size(); k-- > 0;) {
    const auto& layer = layers[k];
    Mat<Scalar> dy = std::move(d_out);
    activation_backward_inplace(dy, trace.acts[k + 1], layer.act);
    grads[k].W.noalias() += dy * trace.acts[k].transpose();
    grads[k].b += dy.rowwise().sum();
    if (k > 0 || need_input_grad) {
      d_out = layer.W.transpose() * dy;
    } else {
      d_out = Mat<Scalar>();
    }
  }
  return d_out;
}

template <typename Scalar>
EncoderTrace<Scalar> encoder_forward(const EncoderStack<Scalar>& enc, const Mat<Scalar>& r, const Mat<Scalar>& eps,
                                     const Mat<Scalar>* aux_features = nullptr) {
  if (r.rows() != enc.input_dim()) {
    throw ShapeError("encode: input has " + std::to_string(r.rows()) + " rows, encoder expects " +
                     std::to_string(enc.input_dim()));
  }
  if (eps.rows() != enc.latent_dim() || eps.cols() != r.cols()) throw ShapeError("encode: noise shape mismatch");
  EncoderTrace<Scalar> t;
  t.stack = run_stack(enc.hidden, r);
  if (enc.aux_width > 0) {
    if (!aux_features) throw ShapeError("encode: encoder expects auxiliary features");
    if (aux_features->rows() != enc.aux_width) throw ShapeError("encode: auxiliary feature width mismatch");
    t.head_in = detail::vstack<Scalar>(t.stack.output(), *aux_features);
  } else {
    t.head_in = t.stack.output();
  }
  t.mu = dense_forward(enc.mu_head, t.head_in);
  t.logvar = dense_forward(enc.logvar_head, t.head_in);
  t.eps = eps;
  t.z = t.mu.array() + (Scalar(0.5) * t.logvar.array()).exp() * eps.array();
  return t;
}

/// Backward through the reparametrization and the encoder. `d_z` is dL/dz;
/// `d_mu`, `d_logvar` carry direct terms (KL). Returns dL/d(aux features),
/// empty when the encoder has no auxiliary input.
template <typename Scalar>
Mat<Scalar> encoder_backward(const EncoderStack<Scalar>& enc, const EncoderTrace<Scalar>& t, const Mat<Scalar>& d_z,
                             Mat<Scalar> d_mu, Mat<Scalar> d_logvar, EncoderStack<Scalar>& g) {
  d_mu += d_z;
  d_logvar.array() += d_z.array() * t.eps.array() * Scalar(0.5) * (Scalar(0.5) * t.logvar.array()).exp();
  Mat<Scalar> d_head = dense_backward(enc.mu_head, t.head_in, t.mu, std::move(d_mu), g.mu_head);
  d_head += dense_backward(enc.logvar_head, t.head_in, t.logvar, std::move(d_logvar), g.logvar_head);
  const auto main_rows = enc.hidden_out();
  Mat<Scalar> d_aux;
  if (enc.aux_width > 0) d_aux = d_head.bottomRows(enc.aux_width);
  if (!enc.hidden.empty()) backward_stack(enc.hidden, t.stack, Mat<Scalar>(d_head.topRows(main_rows)), g.hidden, false);
  return d_aux;
}

// ---------------------------------------------------------------------------
// Public per-operation API (one column per user)

template <typename Scalar>
LatentState<Scalar> encode(const EncoderStack<Scalar>& enc, const Vec<Scalar>& r, const Vec<Scalar>& eps) {
  auto t = encoder_forward<Scalar>(enc, Mat<Scalar>(r), Mat<Scalar>(eps));
  return {t.mu.col(0), t.logvar.col(0), t.eps.col(0), t.z.col(0)};
}

template <typename Scalar>
LatentState<Scalar> encode_with_aux(const EncoderStack<Scalar>& enc, const SubEncoder<Scalar>& sub,
                                    const Vec<Scalar>& r, const Vec<Scalar>& aux, const Vec<Scalar>& eps) {
  if (aux.size() != sub.input_dim()) throw ShapeError("encode_with_aux: aux vector dimension mismatch");
  auto feat = run_stack(sub.layers, Mat<Scalar>(aux));
  auto t = encoder_forward<Scalar>(enc, Mat<Scalar>(r), Mat<Scalar>(eps), &feat.output());
  return {t.mu.col(0), t.logvar.col(0), t.eps.col(0), t.z.col(0)};
}

template <typename Scalar>
Mat<Scalar> decode(const DecoderStack<Scalar>& dec, const Mat<Scalar>& z) {
  if (z.rows() != dec.input_dim()) {
    throw ShapeError("decode: latent has " + std::to_string(z.rows()) + " rows, decoder expects " +
                     std::to_string(dec.input_dim()));
  }
  return run_stack(dec.layers, z).output();
}

template <typename Scalar>
Mat<Scalar> decode_source(const ModelParams<Scalar>& p, const Mat<Scalar>& z_s) {
  if (!p.dec_source) throw ShapeError("decode_source: variant has no source decoder");
  if (z_s.rows() != p.latent) throw ShapeError("decode_source: latent must have L rows");
  return decode(*p.dec_source, z_s);
}

/// [z_S ; z_T], source first.
template <typename Scalar>
Mat<Scalar> merge_latents(const Mat<Scalar>& z_s, const Mat<Scalar>& z_t) {
  if (z_s.rows() != z_t.rows()) throw ShapeError("merge_latents: latent dimension mismatch");
  return detail::vstack<Scalar>(z_s, z_t);
}

template <typename Scalar>
Mat<Scalar> decode_target_generic(const ModelParams<Scalar>& p, const Mat<Scalar>& z_merged) {
  if (z_merged.rows() != 2 * p.latent || p.dec_target.input_dim() != 2 * p.latent) {
    throw ShapeError("decode_target_generic: expects a 2L merged latent");
  }
  return decode(p.dec_target, z_merged);
}

template <typename Scalar>
Mat<Scalar> map_latent(const ModelParams<Scalar>& p, const Mat<Scalar>& z_s) {
  if (!p.map_layer) throw ShapeError("map_latent: variant " + variant_name(p.variant) + " has no mapping layer");
  return dense_forward(*p.map_layer, z_s);
}

template <typename Scalar>
Mat<Scalar> decode_target_cold(const ModelParams<Scalar>& p, const Mat<Scalar>& z_prime_t) {
  if (z_prime_t.rows() != p.latent || p.dec_target.input_dim() != p.latent) {
    throw ShapeError("decode_target_cold: expects an L-dimensional mapped latent");
  }
  return decode(p.dec_target, z_prime_t);
}

// ---------------------------------------------------------------------------
// Whole-model forward pass and objective

template <typename Scalar>
struct Batch {
  Mat<Scalar> source;  // n_S x B
  Mat<Scalar> target;  // n_T x B
  Mat<Scalar> aux;     // d_aux x B, empty unless the model has a sub-encoder

  Eigen::Index size() const { return target.cols(); }
};

/// Reparametrization noise. `target` also serves the joint VAE of Merged
/// (2L rows); `source` is unused by Single and Merged.
template <typename Scalar>
struct Noise {
  Mat<Scalar> source;
  Mat<Scalar> target;
};

template <typename Scalar>
Eigen::Index target_latent_rows(const ModelParams<Scalar>& p) {
  return p.enc_target.latent_dim();
}

template <typename Scalar>
Noise<Scalar> zero_noise(const ModelParams<Scalar>& p, Eigen::Index batch) {
  Noise<Scalar> n;
  if (p.enc_source) n.source = Mat<Scalar>::Zero(p.latent, batch);
  n.target = Mat<Scalar>::Zero(target_latent_rows(p), batch);
  return n;
}

template <typename Scalar>
Noise<Scalar> sample_noise(const ModelParams<Scalar>& p, Eigen::Index batch, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](Eigen::Index rows) {
    Mat<Scalar> m(rows, batch);
    for (Eigen::Index c = 0; c < batch; ++c)
      for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = static_cast<Scalar>(normal(rng));
    return m;
  };
  Noise<Scalar> n;
  if (p.enc_source) n.source = fill(p.latent);
  n.target = fill(target_latent_rows(p));
  return n;
}

template <typename Scalar>
struct ForwardPass {
  std::optional<StackTrace<Scalar>> aux;
  std::optional<EncoderTrace<Scalar>> enc_source;
  EncoderTrace<Scalar> enc_target;
  std::optional<StackTrace<Scalar>> dec_source;
  StackTrace<Scalar> dec_target;
  Mat<Scalar> joint_input;   // Merged: [r_S ; r_T]
  Mat<Scalar> mapped;        // ColdStart: z'_T

  /// Source reconstruction (Merged: source slice of the joint output).
  Mat<Scalar> source_reconstruction(const ModelParams<Scalar>& p) const {
    if (p.variant == Variant::Merged) return dec_target.output().topRows(p.n_source);
    if (!dec_source) throw ShapeError("variant has no source reconstruction");
    return dec_source->output();
  }
  Mat<Scalar> target_reconstruction(const ModelParams<Scalar>& p) const {
    if (p.variant == Variant::Merged) return dec_target.output().bottomRows(p.n_target);
    return dec_target.output();
  }
};

template <typename Scalar>
ForwardPass<Scalar> forward_pass(const ModelParams<Scalar>& p, const Batch<Scalar>& batch, const Noise<Scalar>& noise) {
  const auto B = batch.target.cols();
  if (batch.target.rows() != p.n_target) throw ShapeError("forward: target batch has wrong item count");
  ForwardPass<Scalar> f;
  switch (p.variant) {
    case Variant::Single:
      f.enc_target = encoder_forward(p.enc_target, batch.target, noise.target);
      f.dec_target = run_stack(p.dec_target.layers, f.enc_target.z);
      return f;
    case Variant::Merged:
      if (batch.source.rows() != p.n_source || batch.source.cols() != B) {
        throw ShapeError("forward: source batch has wrong shape");
      }
      f.joint_input = detail::vstack<Scalar>(batch.source, batch.target);
      f.enc_target = encoder_forward(p.enc_target, f.joint_input, noise.target);
      f.dec_target = run_stack(p.dec_target.layers, f.enc_target.z);
      return f;
    default:
      break;
  }
  if (batch.source.rows() != p.n_source || batch.source.cols() != B) {
    throw ShapeError("forward: source batch has wrong shape");
  }
  const Mat<Scalar>* aux_features = nullptr;
  if (p.aux_encoder) {
    if (batch.aux.rows() != p.aux_input || batch.aux.cols() != B) {
      throw ShapeError("forward: aux variant needs a d_aux x B auxiliary batch");
    }
    f.aux = run_stack(p.aux_encoder->layers, batch.aux);
    aux_features = &f.aux->output();
  }
  f.enc_source = encoder_forward(*p.enc_source, batch.source, noise.source,
                                 p.aux_feeds_source() ? aux_features : nullptr);
  f.enc_target = encoder_forward(p.enc_target, batch.target, noise.target,
                                 p.aux_feeds_target() ? aux_features : nullptr);
  f.dec_source = run_stack(p.dec_source->layers, f.enc_source->z);
  if (p.variant == Variant::ColdStart) {
    f.mapped = dense_forward(*p.map_layer, f.enc_source->z);
    f.dec_target = run_stack(p.dec_target.layers, f.mapped);
  } else {
    f.dec_target = run_stack(p.dec_target.layers, merge_latents(f.enc_source->z, f.enc_target.z));
  }
  return f;
}

/// Variant objective on one batch. When `grad` is non-null it receives the
/// exact gradient of `total` (overwritten, same layout as `p`).
template <typename Scalar>
LossBreakdown loss_and_grad(const ModelParams<Scalar>& p, const ModelConfig& cfg, const Batch<Scalar>& batch,
                            const Noise<Scalar>& noise, ModelParams<Scalar>* grad = nullptr) {
  const auto f = forward_pass(p, batch, noise);
  const double beta = cfg.beta;
  const auto views = p.views();
  LossComponents c;
  c.reg = l2_reg(views, cfg.lambda_reg);

  if (grad) grad->set_zero();

  if (p.variant == Variant::Single) {
    c.recon_target = masked_recon(batch.target, f.dec_target.output(), beta);
    c.kl_target = kl_divergence(f.enc_target.mu, f.enc_target.logvar);
    if (grad) {
      const auto& t = f.enc_target;
      Mat<Scalar> d_out = masked_recon_grad(batch.target, f.dec_target.output(), beta);
      Mat<Scalar> d_z = backward_stack(p.dec_target.layers, f.dec_target, std::move(d_out), grad->dec_target.layers);
      Mat<Scalar> d_mu = Mat<Scalar>::Zero(t.mu.rows(), t.mu.cols());
      Mat<Scalar> d_lv = d_mu;
      kl_grad(t.mu, t.logvar, d_mu, d_lv);
      encoder_backward(p.enc_target, t, d_z, std::move(d_mu), std::move(d_lv), grad->enc_target);
    }
  } else if (p.variant == Variant::Merged) {
    const auto& out = f.dec_target.output();
    const auto nS = p.n_source;
    const auto nT = p.n_target;
    c.recon_source = masked_recon(batch.source, out.topRows(nS), beta);
    c.recon_target = masked_recon(batch.target, out.bottomRows(nT), beta);
    c.kl_target = kl_divergence(f.enc_target.mu, f.enc_target.logvar);
    if (grad) {
      const auto& t = f.enc_target;
      Mat<Scalar> d_out(nS + nT, out.cols());
      d_out.topRows(nS) = masked_recon_grad(batch.source, Mat<Scalar>(out.topRows(nS)), beta);
      d_out.bottomRows(nT) = masked_recon_grad(batch.target, Mat<Scalar>(out.bottomRows(nT)), beta);
      Mat<Scalar> d_z = backward_stack(p.dec_target.layers, f.dec_target, std::move(d_out), grad->dec_target.layers);
      Mat<Scalar> d_mu = Mat<Scalar>::Zero(t.mu.rows(), t.mu.cols());
      Mat<Scalar> d_lv = d_mu;
      kl_grad(t.mu, t.logvar, d_mu, d_lv);
      encoder_backward(p.enc_target, t, d_z, std::move(d_mu), std::move(d_lv), grad->enc_target);
    }
  } else {
    const auto& ts = *f.enc_source;
    const auto& tt = f.enc_target;
    const bool cold = p.variant == Variant::ColdStart;
    const bool with_mmd = p.variant != Variant::NoMMD;
    c.recon_source = masked_recon(batch.source, f.dec_source->output(), beta);
    c.recon_target = masked_recon(batch.target, f.dec_target.output(), beta);
    c.kl_source = kl_divergence(ts.mu, ts.logvar);
    c.kl_target = kl_divergence(tt.mu, tt.logvar);
    if (with_mmd) c.mmd = mmd_linear(ts.z, tt.z);
    if (cold) c.map_loss = mapping_loss(f.mapped, tt.z);

    if (grad) {
      const auto L = p.latent;
      Mat<Scalar> d_zs = backward_stack(p.dec_source->layers, *f.dec_source,
                                        masked_recon_grad(batch.source, f.dec_source->output(), beta),
                                        grad->dec_source->layers);
      Mat<Scalar> d_in = backward_stack(p.dec_target.layers, f.dec_target,
                                        masked_recon_grad(batch.target, f.dec_target.output(), beta),
                                        grad->dec_target.layers);
      Mat<Scalar> d_zt;
      if (cold) {
        const Mat<Scalar> d_map = mapping_loss_grad(f.mapped, tt.z);
        d_zs += dense_backward(*p.map_layer, ts.z, f.mapped, Mat<Scalar>(d_in + d_map), *grad->map_layer);
        d_zt = cfg.map_stop_gradient ? Mat<Scalar>(Mat<Scalar>::Zero(L, tt.z.cols())) : Mat<Scalar>(-d_map);
      } else {
        d_zs += d_in.topRows(L);
        d_zt = d_in.bottomRows(L);
      }
      if (with_mmd) mmd_grad(ts.z, tt.z, d_zs, d_zt);

      Mat<Scalar> d_mu_s = Mat<Scalar>::Zero(L, ts.mu.cols());
      Mat<Scalar> d_lv_s = d_mu_s;
      Mat<Scalar> d_mu_t = d_mu_s;
      Mat<Scalar> d_lv_t = d_mu_s;
      kl_grad(ts.mu, ts.logvar, d_mu_s, d_lv_s);
      kl_grad(tt.mu, tt.logvar, d_mu_t, d_lv_t);
      Mat<Scalar> d_aux_s =
          encoder_backward(*p.enc_source, ts, d_zs, std::move(d_mu_s), std::move(d_lv_s), *grad->enc_source);
      Mat<Scalar> d_aux_t =
          encoder_backward(p.enc_target, tt, d_zt, std::move(d_mu_t), std::move(d_lv_t), grad->enc_target);
      if (p.aux_encoder) {
        Mat<Scalar> d_feat = Mat<Scalar>::Zero(p.aux_encoder->output_dim(), batch.aux.cols());
        if (d_aux_s.size()) d_feat += d_aux_s;
        if (d_aux_t.size()) d_feat += d_aux_t;
        backward_stack(p.aux_encoder->layers, *f.aux, std::move(d_feat), grad->aux_encoder->layers, false);
      }
    }
  }

  if (grad) l2_reg_grad(views, cfg.lambda_reg, grad->views());
  return compose_total(p.variant, c);
}

// ---------------------------------------------------------------------------
// Scoring

/// Target-domain scores for a batch of users: one forward pass, sigmoid
/// outputs used directly as ranking scores. `target` may be null (treated as
/// an all-zero row); ColdStart never reads it. Mean mode uses z = mu.
template <typename Scalar>
Mat<Scalar> predict_scores(const ModelParams<Scalar>& p, const Mat<Scalar>& source, const Mat<Scalar>* target,
                           const Mat<Scalar>* aux = nullptr, InferenceMode mode = InferenceMode::Mean,
                           Rng* rng = nullptr) {
  const auto B = source.cols();
  Batch<Scalar> batch;
  batch.source = source;
  if (target) {
    if (target->cols() != B || target->rows() != p.n_target) throw ShapeError("predict_scores: target rows mismatch");
  }
  if (p.variant == Variant::ColdStart || !target) {
    batch.target = Mat<Scalar>::Zero(p.n_target, B);
  } else {
    batch.target = *target;
  }
  if (p.aux_encoder) {
    if (!aux) throw ShapeError("predict_scores: aux variant needs auxiliary vectors");
    batch.aux = *aux;
  }
  if (p.variant != Variant::Single && source.rows() != p.n_source) {
    throw ShapeError("predict_scores: source rows mismatch");
  }
  Noise<Scalar> noise;
  if (mode == InferenceMode::Sample) {
    if (!rng) throw std::invalid_argument("predict_scores: sample mode needs an rng");
    noise = sample_noise(p, B, *rng);
  } else {
    noise = zero_noise(p, B);
  }
  if (p.variant == Variant::ColdStart) {
    // Prediction path uses the source encoder, the mapping and the target decoder only.
    const Mat<Scalar>* aux_features = nullptr;
    std::optional<StackTrace<Scalar>> aux_trace;
    if (p.aux_encoder && p.aux_feeds_source()) {
      aux_trace = run_stack(p.aux_encoder->layers, batch.aux);
      aux_features = &aux_trace->output();
    }
    auto ts = encoder_forward(*p.enc_source, batch.source, noise.source, aux_features);
    return decode_target_cold(p, map_latent(p, ts.z));
  }
  return forward_pass(p, batch, noise).target_reconstruction(p);
}

}  // namespace xdvae
