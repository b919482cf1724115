#include <doctest.h>

#include <random>

#include "xdvae/model.hpp"

using namespace xdvae;

namespace {

constexpr Eigen::Index kM = 8, kNS = 6, kNT = 8, kL = 3, kDAux = 4;

ModelConfig toy_config(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.latent_dim = kL;
  c.source_dims = {5};
  c.target_dims = {4};
  c.aux_dims = {3};
  c.beta = 2.0;
  c.lambda_reg = 1e-3;
  c.seed = 3;
  return c;
}

Mat<double> random_binary(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::bernoulli_distribution coin(0.4);
  Mat<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = coin(rng) ? 1.0 : 0.0;
  return m;
}

Mat<double> random_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Mat<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

struct Toy {
  ModelConfig cfg;
  ModelParams<double> p;
  Batch<double> batch;
  Noise<double> noise;
};

Toy make_toy(Variant v, std::uint64_t seed = 5) {
  Toy t;
  t.cfg = toy_config(v);
  t.p = build_model<double>(t.cfg, kNS, kNT, kDAux);
  init_params(t.p, t.cfg.seed);
  auto rng = make_rng(seed, "toy");
  // Move every tensor, biases included, off its initial value so no gradient
  // entry is structurally zero.
  std::normal_distribution<double> jitter(0.0, 0.3);
  for (auto& view : t.p.views())
    for (Eigen::Index i = 0; i < view.size(); ++i) view.data[i] += jitter(rng);
  t.batch.source = random_binary(kNS, kM, rng);
  t.batch.target = random_binary(kNT, kM, rng);
  t.batch.aux = random_normal(kDAux, kM, rng);
  t.noise = sample_noise(t.p, kM, rng);
  return t;
}

double grad_error(Toy& t) {
  auto g = t.p.zeros_like();
  loss_and_grad(t.p, t.cfg, t.batch, t.noise, &g);
  auto loss = [&] { return loss_and_grad(t.p, t.cfg, t.batch, t.noise).total; };
  std::string worst;
  const double err = finite_diff_check<double>(loss, t.p.views(), g.views(), 1e-5, &worst);
  INFO("worst entry " << worst);
  return err;
}

}  // namespace

TEST_CASE("gradient check, every variant") {
  for (auto v : {Variant::Generic, Variant::Single, Variant::Merged, Variant::NoMMD, Variant::ColdStart, Variant::Aux}) {
    CAPTURE(variant_name(v));
    auto t = make_toy(v);
    const double err = grad_error(t);
    MESSAGE(variant_name(v) << " max relative error " << err);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("gradient check, cold-start with stop-gradient on the mapping target") {
  auto t = make_toy(Variant::ColdStart, 9);
  t.cfg.map_stop_gradient = true;
  // The stop-gradient objective has no scalar potential, so compare against
  // the full gradient with the mapping-to-z_T path removed by hand.
  auto g = t.p.zeros_like();
  loss_and_grad(t.p, t.cfg, t.batch, t.noise, &g);
  auto g_full = t.p.zeros_like();
  auto c2 = t.cfg;
  c2.map_stop_gradient = false;
  loss_and_grad(t.p, c2, t.batch, t.noise, &g_full);
  // Only the target encoder is affected.
  const auto a = g.views(), b = g_full.views();
  bool enc_t_differs = false;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const bool same = a[k].map() == b[k].map();
    if (a[k].name.rfind("enc_T", 0) == 0) {
      enc_t_differs |= !same;
    } else {
      CHECK_MESSAGE(same, a[k].name);
    }
  }
  CHECK(enc_t_differs);
}

TEST_CASE("gradient check, aux attached to one side") {
  for (auto side : {AuxAttach::Source, AuxAttach::Target}) {
    auto t = make_toy(Variant::Aux, 13);
    t.cfg.aux_attach = side;
    t.p = build_model<double>(t.cfg, kNS, kNT, kDAux);
    init_params(t.p, 4);
    auto rng = make_rng(4, "jitter");
    std::normal_distribution<double> jitter(0.0, 0.3);
    for (auto& view : t.p.views())
      for (Eigen::Index i = 0; i < view.size(); ++i) view.data[i] += jitter(rng);
    CHECK(grad_error(t) < 1e-4);
  }
}

TEST_CASE("shape contract per variant") {
  auto g = build_model<double>(toy_config(Variant::Generic), kNS, kNT);
  CHECK(g.dec_target.input_dim() == 2 * kL);
  CHECK(g.dec_source->input_dim() == kL);
  CHECK(g.dec_source->output_dim() == kNS);
  CHECK(g.dec_target.output_dim() == kNT);
  CHECK_FALSE(g.map_layer);

  auto c = build_model<double>(toy_config(Variant::ColdStart), kNS, kNT);
  CHECK(c.dec_target.input_dim() == kL);
  REQUIRE(c.map_layer);
  CHECK(c.map_layer->in_dim() == kL);
  CHECK(c.map_layer->act == Activation::Tanh);

  auto s = build_model<double>(toy_config(Variant::Single), kNS, kNT);
  CHECK_FALSE(s.enc_source);
  CHECK(s.dec_target.input_dim() == kL);

  // Merged at MovieLens scale: (n_S + n_T)-512-256 with one 256-wide latent.
  ModelConfig mc = movielens_preset();
  mc.variant = Variant::Merged;
  auto m = build_model<float>(mc, 300, 2262);
  CHECK(m.enc_target.input_dim() == 2562);
  CHECK(m.enc_target.hidden.at(0).out_dim() == 512);
  CHECK(m.enc_target.latent_dim() == 256);
  CHECK(m.dec_target.output_dim() == 2562);
  CHECK(m.views().front().name == "enc_ST.h0.W");

  auto a = build_model<double>(movielens_preset(), 300, 2262);
  CHECK(a.enc_source->hidden.at(0).out_dim() == 256);
  CHECK(a.enc_source->latent_dim() == 128);
}

TEST_CASE("aux sub-encoder defaults to 256 -> 128") {
  ModelConfig c = movielens_preset();
  c.variant = Variant::Aux;
  auto p = build_model<float>(c, 30, 40, 256);
  REQUIRE(p.aux_encoder);
  CHECK(p.aux_encoder->input_dim() == 256);
  CHECK(p.aux_encoder->output_dim() == 128);
  CHECK(p.enc_source->mu_head.in_dim() == 256 + 128);
  CHECK(p.enc_target.mu_head.in_dim() == 256 + 128);
}

TEST_CASE("reparametrization identity holds exactly") {
  auto t = make_toy(Variant::Generic);
  const auto f = forward_pass(t.p, t.batch, t.noise);
  for (const auto* e : {&*f.enc_source, &f.enc_target}) {
    const Mat<double> z = e->mu.array() + (0.5 * e->logvar.array()).exp() * e->eps.array();
    CHECK(z == e->z);
  }
}

TEST_CASE("source reconstruction never depends on the target row") {
  for (auto v : {Variant::Generic, Variant::NoMMD, Variant::ColdStart, Variant::Aux}) {
    CAPTURE(variant_name(v));
    auto t = make_toy(v);
    const auto base = forward_pass(t.p, t.batch, t.noise).source_reconstruction(t.p);
    auto rng = make_rng(77, "perturb");
    for (int trial = 0; trial < 5; ++trial) {
      auto b2 = t.batch;
      b2.target = random_binary(kNT, kM, rng);
      auto n2 = t.noise;
      n2.target = random_normal(kL, kM, rng);
      CHECK(forward_pass(t.p, b2, n2).source_reconstruction(t.p) == base);
    }
  }
}

TEST_CASE("predict_scores") {
  auto t = make_toy(Variant::Generic);
  const auto s1 = predict_scores(t.p, t.batch.source, &t.batch.target);
  const auto s2 = predict_scores(t.p, t.batch.source, &t.batch.target);
  CHECK(s1 == s2);
  CHECK(s1.rows() == kNT);
  CHECK((s1.array() > 0.0).all());
  CHECK((s1.array() < 1.0).all());

  const Mat<double> zero = Mat<double>::Zero(kNT, kM);
  CHECK(predict_scores(t.p, t.batch.source, &zero) != s1);

  auto c = make_toy(Variant::ColdStart);
  const auto c1 = predict_scores(c.p, c.batch.source, &c.batch.target);
  CHECK(predict_scores(c.p, c.batch.source, &zero) == c1);
  CHECK(predict_scores<double>(c.p, c.batch.source, nullptr) == c1);

  // Mean mode equals the sample path with eps frozen at zero.
  CHECK(c1 == decode_target_cold(c.p, map_latent(c.p, forward_pass(c.p, c.batch, zero_noise(c.p, kM)).enc_source->z)));

  Rng rng(1);
  const auto sampled = predict_scores<double>(t.p, t.batch.source, &t.batch.target, nullptr, InferenceMode::Sample, &rng);
  CHECK(sampled != s1);

  const Mat<double> wrong = Mat<double>::Zero(kNS + 1, kM);
  CHECK_THROWS_AS(predict_scores(t.p, wrong, &t.batch.target), ShapeError);
}

TEST_CASE("zero aux vector with zeroed aux head slice matches the plain encoder") {
  ModelConfig c = toy_config(Variant::Aux);
  auto p = build_model<double>(c, kNS, kNT, kDAux);
  init_params(p, 8);
  auto& enc = *p.enc_source;
  const auto main_w = enc.hidden_out();
  enc.mu_head.W.rightCols(enc.aux_width).setZero();
  enc.logvar_head.W.rightCols(enc.aux_width).setZero();

  // The same encoder without the aux slice.
  EncoderStack<double> plain = enc;
  plain.aux_width = 0;
  plain.mu_head.W = enc.mu_head.W.leftCols(main_w);
  plain.logvar_head.W = enc.logvar_head.W.leftCols(main_w);

  auto rng = make_rng(2, "aux");
  const Vec<double> r = random_binary(kNS, 1, rng).col(0);
  const Vec<double> eps = random_normal(kL, 1, rng).col(0);
  const Vec<double> aux = Vec<double>::Zero(kDAux);
  const auto with_aux = encode_with_aux(enc, *p.aux_encoder, r, aux, eps);
  const auto without = encode(plain, r, eps);
  CHECK(with_aux.mu == without.mu);
  CHECK(with_aux.logvar == without.logvar);
  CHECK(with_aux.z == without.z);

  CHECK_THROWS_AS(encode(enc, r, eps), ShapeError);  // aux features required
  CHECK_THROWS_AS(encode_with_aux(enc, *p.aux_encoder, r, Vec<double>(Vec<double>::Zero(kDAux + 1)), eps), ShapeError);
}

TEST_CASE("per-tensor init: matching names and shapes share values across variants") {
  auto g = build_model<double>(toy_config(Variant::Generic), kNS, kNT);
  auto n = build_model<double>(toy_config(Variant::NoMMD), kNS, kNT);
  auto c = build_model<double>(toy_config(Variant::ColdStart), kNS, kNT);
  init_params(g, 21);
  init_params(n, 21);
  init_params(c, 21);
  const auto gv = g.views(), nv = n.views(), cv = c.views();
  REQUIRE(gv.size() == nv.size());
  for (std::size_t k = 0; k < gv.size(); ++k) CHECK(gv[k].map() == nv[k].map());
  // Cold-start shares the encoders and source decoder with generic.
  for (const auto& x : cv)
    for (const auto& y : gv)
      if (x.name == y.name && x.rows == y.rows && x.cols == y.cols) CHECK(x.map() == y.map());

  init_params(n, 22);
  CHECK(gv[0].map() != nv[0].map());
  // Biases start at zero, weights within the Glorot bound.
  for (const auto& v : gv) {
    if (v.name.ends_with(".b")) {
      CHECK(v.map().isZero());
    } else {
      const double bound = std::sqrt(6.0 / static_cast<double>(v.rows + v.cols));
      CHECK(v.map().cwiseAbs().maxCoeff() <= bound);
    }
  }
}

TEST_CASE("total equals the variant's component sum") {
  for (auto v : {Variant::Generic, Variant::Single, Variant::Merged, Variant::NoMMD, Variant::ColdStart, Variant::Aux}) {
    CAPTURE(variant_name(v));
    auto t = make_toy(v);
    const auto l = loss_and_grad(t.p, t.cfg, t.batch, t.noise);
    const double sum =
        l.recon_source + l.recon_target + l.kl_source + l.kl_target + l.reg + l.mmd + l.map_loss;
    CHECK(std::abs(l.total - sum) <= 1e-10 * std::abs(sum));
    if (v == Variant::NoMMD || v == Variant::Single || v == Variant::Merged) CHECK(l.mmd == 0.0);
    if (v != Variant::ColdStart) CHECK(l.map_loss == 0.0);
    if (v == Variant::ColdStart) CHECK(l.map_loss > 0.0);
    if (v == Variant::Single) CHECK(l.recon_source == 0.0);
  }
}

TEST_CASE("shape errors") {
  auto t = make_toy(Variant::Generic);
  auto b = t.batch;
  b.target = Mat<double>::Zero(kNT + 1, kM);
  CHECK_THROWS_AS(forward_pass(t.p, b, t.noise), ShapeError);
  CHECK_THROWS_AS(decode_target_generic(t.p, Mat<double>(Mat<double>::Zero(kL, 1))), ShapeError);
  CHECK_THROWS_AS(map_latent(t.p, Mat<double>(Mat<double>::Zero(kL, 1))), ShapeError);
  auto aux = make_toy(Variant::Aux);
  auto ab = aux.batch;
  ab.aux = Mat<double>();
  CHECK_THROWS_AS(forward_pass(aux.p, ab, aux.noise), ShapeError);
  CHECK_THROWS_AS(build_model<double>(toy_config(Variant::Aux), kNS, kNT, 0), ShapeError);
}
