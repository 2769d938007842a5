#include <Eigen/Dense>
#include <doctest.h>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "pclsr/nn.hpp"

using namespace pclsr;
using oracles::max_abs_diff;
using oracles::random_tensor;

TEST_SUITE_BEGIN("networks");

TEST_CASE("default SR backbone has 149731 parameters") {
  nn::SrConfig cfg;  // 3->3, 32 channels, 4 residual blocks, x4
  nn::SrNet<double> net;
  RandomSource rng(1);
  net.init(cfg, rng);
  CHECK(nn::param_count(net) == 149731u);

  // Shapes reported by the traversal agree with the stored vector sizes.
  std::size_t total = 0;
  nn::for_each_param(net, [&](const std::string&, std::vector<double>& v,
                              const std::vector<std::int64_t>& shape) {
    std::int64_t prod = 1;
    for (auto d : shape) prod *= d;
    CHECK(std::size_t(prod) == v.size());
    total += v.size();
  });
  CHECK(total == 149731u);
}

TEST_CASE("SR parameter traversal order is stable") {
  nn::SrConfig cfg;
  cfg.channels = 8;
  cfg.resblocks = 2;
  cfg.scale = 4;
  nn::SrNet<double> net;
  RandomSource rng(2);
  net.init(cfg, rng);
  std::vector<std::string> names;
  nn::for_each_param(net, [&](const std::string& n, std::vector<double>&,
                              const std::vector<std::int64_t>&) { names.push_back(n); });
  const std::vector<std::string> want = {
      "head.w", "head.b", "body.0.w", "body.0.b", "body.1.w", "body.1.b",
      "body.2.w", "body.2.b", "body.3.w", "body.3.b", "up.0.w", "up.0.b",
      "up.1.w", "up.1.b", "tail.w", "tail.b"};
  CHECK(names == want);

  // param_sequence walks the same storage in the same order.
  auto seq = nn::param_sequence(net);
  REQUIRE(seq.size() == want.size());
  std::size_t idx = 0;
  nn::for_each_param(net, [&](const std::string&, std::vector<double>& v,
                              const std::vector<std::int64_t>&) {
    CHECK(seq[idx] == &v);
    ++idx;
  });
}

TEST_CASE("SR output is scale times the input size for x2 x3 x4") {
  for (int scale : {2, 3, 4}) {
    nn::SrConfig cfg;
    cfg.channels = 8;
    cfg.resblocks = 1;
    cfg.scale = scale;
    nn::SrNet<double> net;
    RandomSource rng(3);
    net.init(cfg, rng);
    const auto x = random_tensor<double>(2, 3, 7, 5, 40 + scale, 0.0, 1.0);
    const auto y = nn::sr_forward<double>(net, x, nullptr, 1);
    CHECK(y.n() == 2);
    CHECK(y.c() == 3);
    CHECK(y.h() == 7 * scale);
    CHECK(y.w() == 5 * scale);
  }
}

TEST_CASE("initialization is deterministic in the seed") {
  nn::SrConfig cfg;
  cfg.channels = 8;
  cfg.resblocks = 2;
  nn::SrNet<double> a, b, c;
  RandomSource r1(77), r2(77), r3(78);
  a.init(cfg, r1);
  b.init(cfg, r2);
  c.init(cfg, r3);
  auto pa = nn::param_sequence(a), pb = nn::param_sequence(b), pc = nn::param_sequence(c);
  bool same_seed_equal = true, diff_seed_equal = true;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    same_seed_equal = same_seed_equal && (*pa[i] == *pb[i]);
    diff_seed_equal = diff_seed_equal && (*pa[i] == *pc[i]);
  }
  CHECK(same_seed_equal);
  CHECK_FALSE(diff_seed_equal);

  // Biases start at zero.
  bool bias_zero = true;
  nn::for_each_param(a, [&](const std::string& n, std::vector<double>& v,
                            const std::vector<std::int64_t>&) {
    if (n.size() >= 2 && n.substr(n.size() - 2) == ".b")
      for (double x : v) bias_zero = bias_zero && x == 0.0;
  });
  CHECK(bias_zero);
}

TEST_CASE("embedding pyramid shapes follow the halving / widening rule") {
  nn::EmbedConfig cfg;
  cfg.in_ch = 9;
  cfg.base = 8;
  cfg.layers = 5;
  cfg.taps = 4;
  nn::EmbedNet<double> net;
  RandomSource rng(5);
  net.init(cfg, rng);
  const auto x = random_tensor<double>(3, 9, 64, 64, 50, -1.0, 1.0);
  const auto out = nn::embed_forward<double>(net, x, true, nullptr, 1);
  REQUIRE(out.pyramid.size() == 4);
  REQUIRE(out.scores.size() == 3);
  int h = 64;
  for (int l = 0; l < 4; ++l) {
    h /= 2;
    const int mult = l < 3 ? (1 << l) : 8;
    CHECK(out.pyramid[l].n() == 3);
    CHECK(out.pyramid[l].c() == 8 * mult);
    CHECK(out.pyramid[l].h() == h);
    CHECK(out.pyramid[l].w() == h);
  }
}

TEST_CASE("embedding score is an affine map of the pooled last stage") {
  nn::EmbedConfig cfg;
  cfg.in_ch = 3;
  cfg.base = 4;
  cfg.layers = 3;
  cfg.taps = 2;
  nn::EmbedNet<double> net;
  RandomSource rng(6);
  net.init(cfg, rng);
  const auto x = random_tensor<double>(2, 3, 16, 16, 60, -1.0, 1.0);
  nn::EmbedTrace<double> trace;
  const auto out = nn::embed_forward<double>(net, x, true, &trace, 1);
  REQUIRE(out.scores.size() == 2);
  const auto& last = trace.act.back();
  REQUIRE(std::size_t(last.c()) == net.score_w.size());
  for (int i = 0; i < 2; ++i) {
    double s = net.score_b[0];
    for (int c = 0; c < last.c(); ++c) {
      double pool = 0.0;
      for (int y = 0; y < last.h(); ++y)
        for (int xx = 0; xx < last.w(); ++xx) pool += last(i, c, y, xx);
      s += net.score_w[std::size_t(c)] * pool / (last.h() * last.w());
    }
    CHECK(out.scores[std::size_t(i)] == doctest::Approx(s).epsilon(1e-12));
  }
}

TEST_CASE("duplicating a sample across the batch does not change its outputs") {
  nn::SrConfig scfg;
  scfg.channels = 8;
  scfg.resblocks = 2;
  scfg.scale = 2;
  nn::SrNet<double> srnet;
  RandomSource rng(7);
  srnet.init(scfg, rng);
  const auto x1 = random_tensor<double>(1, 3, 12, 10, 70, 0.0, 1.0);
  Tensor<double> x3(3, 3, 12, 10);
  for (int i = 0; i < 3; ++i)
    std::copy(x1.data(), x1.data() + x1.size(), x3.sample_ptr(i));
  const auto y1 = nn::sr_forward<double>(srnet, x1, nullptr, 1);
  const auto y3 = nn::sr_forward<double>(srnet, x3, nullptr, 1);
  for (int i = 0; i < 3; ++i) {
    double d = 0.0;
    for (std::size_t j = 0; j < y1.size(); ++j)
      d = std::max(d, std::abs(y1.data()[j] - y3.sample_ptr(i)[j]));
    CHECK(d == 0.0);
  }

  nn::EmbedConfig ecfg;
  ecfg.in_ch = 3;
  ecfg.base = 4;
  ecfg.layers = 3;
  ecfg.taps = 2;
  nn::EmbedNet<double> enet;
  enet.init(ecfg, rng);
  const auto e1 = nn::embed_forward<double>(enet, x1, true, nullptr, 1);
  const auto e3 = nn::embed_forward<double>(enet, x3, true, nullptr, 1);
  for (int i = 0; i < 3; ++i) {
    CHECK(e3.scores[std::size_t(i)] == e1.scores[0]);
    for (std::size_t l = 0; l < e1.pyramid.size(); ++l) {
      double d = 0.0;
      const auto& t1 = e1.pyramid[l];
      const auto& t3 = e3.pyramid[l];
      for (std::size_t j = 0; j < t1.size(); ++j)
        d = std::max(d, std::abs(t1.data()[j] - t3.sample_ptr(i)[j]));
      CHECK(d == 0.0);
    }
  }
}

TEST_CASE("pixel_shuffle places channel c*r*r + dy*r + dx at offset (dy, dx)") {
  Tensor<double> x(1, 8, 2, 3);  // c=2 output channels, r=2
  for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] = double(i);
  const auto y = nn::pixel_shuffle(x, 2);
  REQUIRE(y.n() == 1);
  REQUIRE(y.c() == 2);
  REQUIRE(y.h() == 4);
  REQUIRE(y.w() == 6);
  for (int c = 0; c < 2; ++c)
    for (int yy = 0; yy < 4; ++yy)
      for (int xx = 0; xx < 6; ++xx)
        CHECK(y(0, c, yy, xx) == x(0, c * 4 + (yy % 2) * 2 + (xx % 2), yy / 2, xx / 2));
}

TEST_CASE("pixel_shuffle_vjp is the adjoint of pixel_shuffle") {
  const auto x = random_tensor<double>(2, 8, 3, 4, 80, -1.0, 1.0);
  const auto y = nn::pixel_shuffle(x, 2);
  const auto g = random_tensor<double>(y.n(), y.c(), y.h(), y.w(), 81, -1.0, 1.0);
  const auto gx = nn::pixel_shuffle_vjp(g, 2);
  REQUIRE(gx.same_shape(x));
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) lhs += y.data()[i] * g.data()[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x.data()[i] * gx.data()[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("relu and leaky relu forward/backward basics") {
  Tensor<double> x(1, 1, 1, 4);
  x.data()[0] = -2.0;
  x.data()[1] = -0.5;
  x.data()[2] = 0.0;
  x.data()[3] = 3.0;

  Tensor<double> r = x;
  nn::relu_forward_inplace(r);
  CHECK(r.data()[0] == 0.0);
  CHECK(r.data()[1] == 0.0);
  CHECK(r.data()[2] == 0.0);
  CHECK(r.data()[3] == 3.0);

  Tensor<double> l = x;
  nn::leaky_relu_forward_inplace(l, 0.2);
  CHECK(l.data()[0] == doctest::Approx(-0.4));
  CHECK(l.data()[1] == doctest::Approx(-0.1));
  CHECK(l.data()[2] == 0.0);
  CHECK(l.data()[3] == 3.0);

  Tensor<double> g(1, 1, 1, 4);
  g.fill(1.0);
  const auto gr = nn::relu_backward(g, r);
  CHECK(gr.data()[0] == 0.0);
  CHECK(gr.data()[3] == 1.0);
  const auto gl = nn::leaky_relu_backward(g, l, 0.2);
  CHECK(gl.data()[0] == doctest::Approx(0.2));
  CHECK(gl.data()[3] == 1.0);
}

TEST_CASE("conv_forward matches a naive dense convolution") {
  RandomSource rng(9);
  for (int inst = 0; inst < 4; ++inst) {
    const int in = int(rng.uniform_int(1, 3));
    const int out = int(rng.uniform_int(1, 3));
    const int k = inst % 2 == 0 ? 3 : 4;
    const int stride = int(rng.uniform_int(1, 2));
    const int pad = 1;
    nn::Conv2d<double> conv;
    conv.configure(in, out, k, stride, pad);
    conv.init_kaiming(rng);
    for (auto& b : conv.bias) b = rng.uniform(-0.5, 0.5);
    const auto x = random_tensor<double>(2, in, 9, 7, 90 + inst, -1.0, 1.0);
    const auto y = nn::conv_forward(conv, x, 1);
    REQUIRE(y.h() == conv.out_h(9));
    REQUIRE(y.w() == conv.out_w(7));
    double worst = 0.0;
    for (int n = 0; n < 2; ++n)
      for (int oc = 0; oc < out; ++oc)
        for (int oy = 0; oy < y.h(); ++oy)
          for (int ox = 0; ox < y.w(); ++ox) {
            double acc = conv.bias[std::size_t(oc)];
            for (int ic = 0; ic < in; ++ic)
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                  const int iy = oy * stride - pad + ky;
                  const int ix = ox * stride - pad + kx;
                  if (iy < 0 || iy >= 9 || ix < 0 || ix >= 7) continue;
                  acc += conv.weight[std::size_t(((oc * in + ic) * k + ky) * k + kx)] *
                         x(n, ic, iy, ix);
                }
            worst = std::max(worst, std::abs(acc - y(n, oc, oy, ox)));
          }
    CHECK(worst <= 1e-12);
  }
}

TEST_CASE("spectral norm converges to the largest singular value") {
  nn::Conv2d<double> conv;
  conv.configure(3, 5, 4, 2, 1, /*sn=*/true);
  RandomSource rng(10);
  conv.init_kaiming(rng);
  for (int i = 0; i < 200; ++i) conv.refresh_sn();

  // Independent reference: top singular value of the (out x in*k*k) matrix.
  Eigen::MatrixXd m(5, 3 * 4 * 4);
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 3 * 4 * 4; ++c)
      m(r, c) = conv.weight[std::size_t(r * 3 * 4 * 4 + c)];
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const double top = svd.singularValues()(0);
  CHECK(conv.sn_sigma == doctest::Approx(top).epsilon(1e-10));

  // The effective weight is the raw weight scaled by 1/sigma.
  double worst = 0.0;
  for (std::size_t i = 0; i < conv.weight.size(); ++i)
    worst = std::max(worst, std::abs(conv.sn_w[i] - conv.weight[i] / conv.sn_sigma));
  CHECK(worst <= 1e-15);

  // And its own top singular value is 1.
  Eigen::JacobiSVD<Eigen::MatrixXd> svd2(m / conv.sn_sigma);
  CHECK(svd2.singularValues()(0) == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_SUITE_END();
