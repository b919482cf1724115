#include <doctest.h>

#include <cmath>

#include "xdvae/nn.hpp"

using namespace xdvae;

TEST_CASE("glorot init: bound, seeding, shape") {
  Rng a(42), b(42), c(43);
  const auto w1 = glorot_init<double>(4, 3, a);
  const auto w2 = glorot_init<double>(4, 3, b);
  const auto w3 = glorot_init<double>(4, 3, c);
  CHECK(w1.rows() == 3);
  CHECK(w1.cols() == 4);
  CHECK(w1 == w2);
  CHECK(w1 != w3);
  CHECK(w1.cwiseAbs().maxCoeff() <= std::sqrt(6.0 / 7.0));
  CHECK(w1.allFinite());

  // Sample variance of U(-a, a) is a^2 / 3 = 2 / (fan_in + fan_out).
  Rng r(1);
  const auto big = glorot_init<double>(300, 200, r);
  const double var = big.array().square().mean();
  CHECK(var == doctest::Approx(2.0 / 500.0).epsilon(0.03));
  CHECK_THROWS_AS(glorot_init<double>(0, 3, r), ShapeError);
}

TEST_CASE("dense_forward matches a scalar loop") {
  DenseLayer<double> layer(3, 2, Activation::Tanh);
  layer.W << 0.1, -0.2, 0.3, 0.5, 0.4, -0.6;
  layer.b << 0.05, -0.1;
  Mat<double> x(3, 2);
  x << 1, 0, -1, 2, 0.5, 1;
  const auto y = dense_forward(layer, x);
  for (int c = 0; c < 2; ++c) {
    for (int i = 0; i < 2; ++i) {
      double s = layer.b(i);
      for (int j = 0; j < 3; ++j) s += layer.W(i, j) * x(j, c);
      CHECK(y(i, c) == doctest::Approx(std::tanh(s)).epsilon(1e-15));
    }
  }
  layer.act = Activation::Sigmoid;
  const auto s = dense_forward(layer, Mat<double>(Mat<double>::Zero(3, 1)));
  CHECK(s(0, 0) == doctest::Approx(1.0 / (1.0 + std::exp(-0.05))));
  CHECK_THROWS_AS(dense_forward(layer, Mat<double>(Mat<double>::Zero(4, 1))), ShapeError);
}

TEST_CASE("dense_backward agrees with central differences") {
  Rng rng(5);
  for (auto act : {Activation::Tanh, Activation::Sigmoid, Activation::Identity}) {
    DenseLayer<double> layer(4, 3, act);
    layer.W = glorot_init<double>(4, 3, rng);
    layer.b.setRandom();
    Mat<double> x = Mat<double>::Random(4, 5);
    Mat<double> coeff = Mat<double>::Random(3, 5);
    auto loss = [&] { return (dense_forward(layer, x).array() * coeff.array()).sum(); };
    DenseLayer<double> grad(4, 3, act);
    const auto y = dense_forward(layer, x);
    const Mat<double> dx = dense_backward(layer, x, y, coeff, grad);

    std::vector<ParamView<double>> pv, gv;
    layer.append_views("l", pv);
    grad.append_views("l", gv);
    CHECK(finite_diff_check<double>(loss, pv, gv) < 1e-6);

    // Input gradient, one entry at a time.
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double keep = x.data()[i];
      x.data()[i] = keep + 1e-6;
      const double up = loss();
      x.data()[i] = keep - 1e-6;
      const double down = loss();
      x.data()[i] = keep;
      CHECK(dx.data()[i] == doctest::Approx((up - down) / 2e-6).epsilon(1e-6));
    }
  }
}

TEST_CASE("adam: first step and bias correction") {
  std::vector<double> p{1.0, -2.0, 0.5};
  std::vector<double> g{0.3, -4.0, 0.0};
  std::vector<ParamView<double>> pv{{"p", p.data(), 3, 1}};
  std::vector<ParamView<double>> gv{{"g", g.data(), 3, 1}};
  AdamState<double> st;
  st.opt.lr = 0.01;
  adam_step(pv, gv, st);
  // After one step m_hat = g and v_hat = g^2, so each entry moves by lr * g / (|g| + eps).
  CHECK(p[0] == doctest::Approx(1.0 - 0.01 * 0.3 / (0.3 + 1e-8)).epsilon(1e-12));
  CHECK(p[1] == doctest::Approx(-2.0 + 0.01 * 4.0 / (4.0 + 1e-8)).epsilon(1e-12));
  CHECK(p[2] == 0.5);

  // Second step against a hand-rolled reference.
  double m = 0.1 * 0.3, v = 0.001 * 0.09, ref = p[0];
  g[0] = -0.1;
  m = 0.9 * m + 0.1 * g[0];
  v = 0.999 * v + 0.001 * g[0] * g[0];
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  ref -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
  adam_step(pv, gv, st);
  CHECK(p[0] == doctest::Approx(ref).epsilon(1e-12));
  CHECK(st.t == 2);

  std::vector<ParamView<double>> short_g{};
  CHECK_THROWS_AS(adam_step(pv, short_g, st), ShapeError);
}

TEST_CASE("finite_diff_check flags a wrong gradient") {
  std::vector<double> p{0.7, -1.3};
  std::vector<double> good{1.4, -2.6}, bad{1.4, -2.0};
  std::vector<ParamView<double>> pv{{"p", p.data(), 2, 1}};
  auto loss = [&] { return p[0] * p[0] + p[1] * p[1]; };
  CHECK(finite_diff_check<double>(loss, pv, {{"g", good.data(), 2, 1}}) < 1e-8);
  std::string worst;
  CHECK(finite_diff_check<double>(loss, pv, {{"g", bad.data(), 2, 1}}, 1e-5, &worst) > 0.1);
  CHECK(worst == "p[1]");
  CHECK(p[0] == 0.7);  // restored
}

TEST_CASE("all_finite names the offending tensor") {
  std::vector<double> a{1.0, 2.0}, b{0.0, std::nan("")};
  std::vector<ParamView<double>> v{{"a", a.data(), 2, 1}, {"b", b.data(), 1, 2}};
  std::string bad;
  CHECK_FALSE(all_finite(v, &bad));
  CHECK(bad == "b");
  b[1] = 3.0;
  CHECK(all_finite(v));
}
