#include <doctest.h>

#include <cmath>

#include "xdvae/config.hpp"
#include "xdvae/losses.hpp"

using namespace xdvae;

namespace {

// Scalar reference implementations, written independently of losses.hpp.
double ref_clamp(double p) { return std::min(std::max(p, 1e-7), 1.0 - 1e-7); }

double ref_masked(const Mat<double>& r, const Mat<double>& p, double beta) {
  double s = 0;
  for (Eigen::Index c = 0; c < r.cols(); ++c) {
    for (Eigen::Index j = 0; j < r.rows(); ++j) {
      const double q = ref_clamp(p(j, c));
      s += -(r(j, c) * std::log(q) + (1 - r(j, c)) * std::log(1 - q));
      // H(r, p*r): entries with r = 0 give p*r = 0 and contribute 0 * ln(.) + 1 * ln(1 - 0) = 0.
      if (r(j, c) == 1) s += -beta * std::log(q);
    }
  }
  return s / static_cast<double>(r.cols());
}

Mat<double> rand_probs(Eigen::Index r, Eigen::Index c, unsigned seed) {
  std::srand(seed);
  Mat<double> m = Mat<double>::Random(r, c);
  return (m.array() * 0.45 + 0.5).matrix();
}

}  // namespace

TEST_CASE("bce and masked reconstruction against the scalar reference") {
  Mat<double> r(4, 2);
  r << 1, 0, 0, 1, 1, 1, 0, 0;
  const auto p = rand_probs(4, 2, 3);
  CHECK(bce(r, p) == doctest::Approx(ref_masked(r, p, 0.0)).epsilon(1e-14));
  CHECK(masked_recon(r, p, 0.0) == doctest::Approx(bce(r, p)).epsilon(1e-14));
  CHECK(masked_recon(r, p, 15.0) == doctest::Approx(ref_masked(r, p, 15.0)).epsilon(1e-14));
  CHECK_THROWS_AS(masked_recon(r, p, -1.0), std::invalid_argument);
  CHECK_THROWS_AS(bce(r, Mat<double>(Mat<double>::Zero(3, 2))), ShapeError);
}

TEST_CASE("a positive predicted at exactly 0 is clamped, not infinite") {
  Mat<double> r(1, 1), p(1, 1);
  r << 1;
  p << 0.0;
  const double v = masked_recon(r, p, 15.0);
  CHECK(std::isfinite(v));
  CHECK(v == doctest::Approx(-16.0 * std::log(1e-7)));
  p << 1.0;
  r << 0;
  CHECK(bce(r, p) == doctest::Approx(-std::log(1e-7)));
  // Gradient is zero once the clamp is active.
  CHECK(masked_recon_grad(r, p, 1.0)(0, 0) == 0.0);
}

TEST_CASE("masked_recon_grad matches central differences") {
  Mat<double> r(5, 3);
  r << 1, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 1, 1, 0, 0;
  Mat<double> p = rand_probs(5, 3, 9);
  const auto g = masked_recon_grad(r, p, 4.0);
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double keep = p.data()[i];
    p.data()[i] = keep + 1e-7;
    const double up = masked_recon(r, p, 4.0);
    p.data()[i] = keep - 1e-7;
    const double down = masked_recon(r, p, 4.0);
    p.data()[i] = keep;
    CHECK(g.data()[i] == doctest::Approx((up - down) / 2e-7).epsilon(1e-6));
  }
}

TEST_CASE("kl divergence: zero at the prior, closed form elsewhere") {
  Mat<double> mu = Mat<double>::Zero(3, 2), lv = Mat<double>::Zero(3, 2);
  CHECK(kl_divergence(mu, lv) == 0.0);
  mu << 1, 0, -2, 0.5, 0, 0;
  lv << 0.3, -1, 0, 0, 2, 0;
  double ref = 0;
  for (Eigen::Index i = 0; i < mu.size(); ++i)
    ref += 0.5 * (std::exp(lv.data()[i]) + mu.data()[i] * mu.data()[i] - 1 - lv.data()[i]);
  CHECK(kl_divergence(mu, lv) == doctest::Approx(ref / 2).epsilon(1e-14));
  CHECK(kl_divergence(mu, lv) >= 0.0);

  Mat<double> dmu = Mat<double>::Zero(3, 2), dlv = Mat<double>::Zero(3, 2);
  kl_grad(mu, lv, dmu, dlv);
  for (Eigen::Index i = 0; i < mu.size(); ++i) {
    for (auto* m : {&mu, &lv}) {
      const double keep = m->data()[i];
      m->data()[i] = keep + 1e-6;
      const double up = kl_divergence(mu, lv);
      m->data()[i] = keep - 1e-6;
      const double down = kl_divergence(mu, lv);
      m->data()[i] = keep;
      const double a = (m == &mu ? dmu : dlv).data()[i];
      CHECK(a == doctest::Approx((up - down) / 2e-6).epsilon(1e-6));
    }
  }
}

TEST_CASE("l2 regularization") {
  std::vector<double> a{1, 2}, b{-3};
  std::vector<ParamView<double>> v{{"a", a.data(), 2, 1}, {"b", b.data(), 1, 1}};
  CHECK(l2_reg(v, 0.5) == doctest::Approx(7.0));
  CHECK(l2_reg(v, 0.0) == 0.0);
  CHECK_THROWS_AS(l2_reg(v, -1.0), std::invalid_argument);
  std::vector<double> ga{0, 0}, gb{0};
  std::vector<ParamView<double>> g{{"a", ga.data(), 2, 1}, {"b", gb.data(), 1, 1}};
  l2_reg_grad(v, 0.5, g);
  CHECK(ga[1] == 2.0);
  CHECK(gb[0] == -3.0);
}

TEST_CASE("linear mmd") {
  Mat<double> zs(2, 3), zt(2, 3);
  zs << 1, 2, 3, 0, 0, 3;
  zt = zs;
  CHECK(mmd_linear(zs, zt) == 0.0);
  zt << 0, 0, 0, 1, 1, 1;
  // means (2, 1) vs (0, 1) -> squared distance 4
  CHECK(mmd_linear(zs, zt) == doctest::Approx(4.0));
  CHECK_THROWS_AS(mmd_linear(zs, Mat<double>(Mat<double>::Zero(3, 3))), ShapeError);
  CHECK_THROWS_AS(mmd_linear(zs, Mat<double>(Mat<double>::Zero(2, 2))), ShapeError);
  CHECK_THROWS_AS(mmd_linear(Mat<double>(2, 0), Mat<double>(2, 0)), ShapeError);

  Mat<double> ds = Mat<double>::Zero(2, 3), dt = Mat<double>::Zero(2, 3);
  mmd_grad(zs, zt, ds, dt);
  for (Eigen::Index i = 0; i < zs.size(); ++i) {
    const double keep = zs.data()[i];
    zs.data()[i] = keep + 1e-6;
    const double up = mmd_linear(zs, zt);
    zs.data()[i] = keep - 1e-6;
    const double down = mmd_linear(zs, zt);
    zs.data()[i] = keep;
    CHECK(ds.data()[i] == doctest::Approx((up - down) / 2e-6).epsilon(1e-6));
    CHECK(dt.data()[i] == doctest::Approx(-ds.data()[i]));
  }
}

TEST_CASE("mapping loss is a per-dimension mean squared error") {
  Mat<double> a(2, 2), b(2, 2);
  a << 1, 0, 2, 0;
  b << 0, 0, 0, 0;
  // user 1: (1 + 4) / 2; user 2: 0; batch mean 1.25
  CHECK(mapping_loss(a, b) == doctest::Approx(1.25));
  CHECK(mapping_loss(a, a) == 0.0);
  const auto g = mapping_loss_grad(a, b);
  CHECK(g(1, 0) == doctest::Approx(2.0 * 2.0 / 2.0 / 2.0));
}

TEST_CASE("compose_total") {
  LossComponents c;
  c.recon_source = 1.5;
  c.recon_target = 2.25;
  c.kl_source = 0.125;
  c.kl_target = 0.375;
  c.reg = 0.01;
  c.mmd = 0.2;
  c.map_loss = 0.7;
  auto close = [](double a, double b) { return std::abs(a - b) <= 1e-10 * std::abs(b); };
  CHECK(close(compose_total(Variant::Generic, c).total, 1.5 + 2.25 + 0.125 + 0.375 + 0.01 + 0.2));
  CHECK(close(compose_total(Variant::Aux, c).total, 1.5 + 2.25 + 0.125 + 0.375 + 0.01 + 0.2));
  CHECK(close(compose_total(Variant::NoMMD, c).total, 1.5 + 2.25 + 0.125 + 0.375 + 0.01));
  CHECK(close(compose_total(Variant::ColdStart, c).total, 1.5 + 2.25 + 0.125 + 0.375 + 0.01 + 0.2 + 0.7));
  CHECK(close(compose_total(Variant::Single, c).total, 2.25 + 0.375 + 0.01));
  CHECK(close(compose_total(Variant::Merged, c).total, 1.5 + 2.25 + 0.375 + 0.01));
  CHECK(compose_total(Variant::NoMMD, c).mmd == 0.0);

  LossComponents missing = c;
  missing.mmd.reset();
  CHECK_THROWS_AS(compose_total(Variant::Generic, missing), std::invalid_argument);
  CHECK_NOTHROW(compose_total(Variant::NoMMD, missing));
  missing.map_loss.reset();
  CHECK_THROWS_AS(compose_total(Variant::ColdStart, missing), std::invalid_argument);
}

TEST_CASE("variant names round-trip") {
  for (auto v : {Variant::Generic, Variant::Single, Variant::Merged, Variant::NoMMD, Variant::ColdStart, Variant::Aux})
    CHECK(parse_variant(variant_name(v)) == v);
  CHECK(parse_variant("mmd0") == Variant::NoMMD);
  CHECK_THROWS_AS(parse_variant("bogus"), std::invalid_argument);
}

TEST_CASE("config: presets, json merge, validation") {
  const auto ml = movielens_preset();
  CHECK(ml.source_dims == std::vector<std::size_t>{256});
  CHECK(ml.latent_dim == 128);
  CHECK(ml.batch_size == 32);
  CHECK(ml.beta == 15.0);
  CHECK(ml.lr == 1e-3);
  const auto az = amazon_preset();
  CHECK(az.target_dims == std::vector<std::size_t>{512, 256});
  CHECK(az.batch_size == 128);
  CHECK(az.beta == 40.0);

  ModelConfig c;
  c.merge_json({{"variant", "cold-start"}, {"dims", {64, 32}}, {"beta", 3.5}, {"inference_mode", "sample"}});
  CHECK(c.variant == Variant::ColdStart);
  CHECK(c.source_dims == std::vector<std::size_t>{64, 32});
  CHECK(c.target_dims == c.source_dims);
  CHECK(c.beta == 3.5);
  CHECK(c.inference_mode == InferenceMode::Sample);
  CHECK(c.lambda_reg == 1e-4);  // untouched

  ModelConfig back;
  back.merge_json(c.to_json());
  CHECK(back.to_json() == c.to_json());

  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.batch_size = 4;
  c.beta = -1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}
