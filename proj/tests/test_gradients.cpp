#include <cmath>
#include <doctest.h>
#include <functional>
#include <vector>

#include "oracles.hpp"
#include "pclsr/losses.hpp"
#include "pclsr/nn.hpp"

using namespace pclsr;
using oracles::random_tensor;

TEST_SUITE_BEGIN("gradients");

namespace {

bool rel_ok(double analytic, double fd, double tol = 1e-4) {
  const double scale = std::max({1.0, std::abs(analytic), std::abs(fd)});
  return std::abs(analytic - fd) <= tol * scale;
}

// Central finite difference of f along the i-th coordinate of x.
double fd_coord(const std::function<double(const std::vector<double>&)>& f,
                std::vector<double> x, std::size_t i, double eps) {
  x[i] += eps;
  const double up = f(x);
  x[i] -= 2 * eps;
  const double dn = f(x);
  return (up - dn) / (2 * eps);
}

}  // namespace

TEST_CASE("l1_loss gradient matches central differences on 20 instances") {
  RandomSource rng(700);
  for (int inst = 0; inst < 20; ++inst) {
    const int n = int(rng.uniform_int(1, 3));
    const int c = int(rng.uniform_int(1, 3));
    const int h = int(rng.uniform_int(2, 4));
    Tensor<double> sr(n, c, h, h), hr(n, c, h, h);
    for (std::size_t i = 0; i < sr.size(); ++i) {
      // Keep a comfortable margin from the non-smooth tie point.
      hr.data()[i] = rng.uniform(0.0, 1.0);
      const double gap = rng.uniform(0.05, 0.5) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
      sr.data()[i] = hr.data()[i] + gap;
    }
    Tensor<double> g;
    (void)loss::l1_loss(sr, hr, &g);
    for (int probe = 0; probe < 4; ++probe) {
      const auto i = std::size_t(rng.uniform_int(0, std::int64_t(sr.size()) - 1));
      auto f = [&](const std::vector<double>& flat) {
        Tensor<double> s2 = sr;
        std::copy(flat.begin(), flat.end(), s2.data());
        return loss::l1_loss<double>(s2, hr, nullptr);
      };
      std::vector<double> flat(sr.data(), sr.data() + sr.size());
      CHECK(rel_ok(g.data()[i], fd_coord(f, flat, i, 1e-6)));
    }
  }
}

TEST_CASE("contra_d_loss score gradients match central differences on 20 instances") {
  RandomSource rng(701);
  for (int inst = 0; inst < 20; ++inst) {
    const int m = int(rng.uniform_int(1, 5));
    const int n = int(rng.uniform_int(1, 5));
    std::vector<double> real(m), fake(n);
    for (double& v : real) v = rng.uniform(-2.0, 2.0);
    for (double& v : fake) v = rng.uniform(-2.0, 2.0);
    std::vector<double> gr, gf;
    (void)loss::contra_d_loss<double>(real, fake, &gr, &gf);
    REQUIRE(gr.size() == real.size());
    REQUIRE(gf.size() == fake.size());
    for (int i = 0; i < m; ++i) {
      auto f = [&](const std::vector<double>& r) {
        return loss::contra_d_loss<double>(r, fake, nullptr, nullptr);
      };
      CHECK(rel_ok(gr[i], fd_coord(f, real, std::size_t(i), 1e-6)));
    }
    for (int j = 0; j < n; ++j) {
      auto f = [&](const std::vector<double>& s) {
        return loss::contra_d_loss<double>(real, s, nullptr, nullptr);
      };
      CHECK(rel_ok(gf[j], fd_coord(f, fake, std::size_t(j), 1e-6)));
    }
  }
}

TEST_CASE("pcl_total_loss anchor gradients match central differences on 20 instances") {
  RandomSource rng(702);
  for (int inst = 0; inst < 20; ++inst) {
    const int layers = int(rng.uniform_int(1, 3));
    const int batch = int(rng.uniform_int(1, 2));
    const int kp = int(rng.uniform_int(1, 3));
    const int kn = int(rng.uniform_int(1, 3));
    const double tau = rng.uniform(0.3, 1.2);
    FeaturePyramid<double> anchors;
    std::vector<FeaturePyramid<double>> poss(kp), negs(kn);
    for (int l = 0; l < layers; ++l) {
      const int c = 2 + l, h = 2, w = 3;
      anchors.push_back(random_tensor<double>(batch, c, h, w, 500 + 100 * inst + l, -1.0, 1.0));
      for (int k = 0; k < kp; ++k)
        poss[k].push_back(random_tensor<double>(batch, c, h, w, 600 + 100 * inst + 10 * k + l, -1.0, 1.0));
      for (int k = 0; k < kn; ++k)
        negs[k].push_back(random_tensor<double>(batch, c, h, w, 800 + 100 * inst + 10 * k + l, -1.0, 1.0));
    }
    FeaturePyramid<double> grads;
    (void)loss::pcl_total_loss<double>(anchors, poss, negs, tau, &grads);
    REQUIRE(grads.size() == anchors.size());

    for (int probe = 0; probe < 6; ++probe) {
      const int l = int(rng.uniform_int(0, layers - 1));
      const auto i = std::size_t(rng.uniform_int(0, std::int64_t(anchors[l].size()) - 1));
      auto f = [&](const std::vector<double>& flat) {
        FeaturePyramid<double> a2 = anchors;
        std::copy(flat.begin(), flat.end(), a2[l].data());
        return loss::pcl_total_loss<double>(a2, poss, negs, tau, nullptr);
      };
      std::vector<double> flat(anchors[l].data(), anchors[l].data() + anchors[l].size());
      CHECK(rel_ok(grads[l].data()[i], fd_coord(f, flat, i, 1e-6)));
    }
  }
}

TEST_CASE("pixel_cosine_grad_f matches central differences") {
  RandomSource rng(703);
  for (int inst = 0; inst < 10; ++inst) {
    const int c = int(rng.uniform_int(2, 4));
    const auto fT = random_tensor<double>(1, c, 3, 3, 910 + inst, 0.1, 1.0);
    const auto gT = random_tensor<double>(1, c, 3, 3, 920 + inst, 0.1, 1.0);
    Tensor<double> grad(1, c, 3, 3);
    auto gv = sample_view(grad, 0);
    loss::pixel_cosine_grad_f<double>(sample_view(fT, 0), sample_view(gT, 0), 1.0, gv);
    for (int probe = 0; probe < 5; ++probe) {
      const auto i = std::size_t(rng.uniform_int(0, std::int64_t(fT.size()) - 1));
      auto f = [&](const std::vector<double>& flat) {
        Tensor<double> f2 = fT;
        std::copy(flat.begin(), flat.end(), f2.data());
        return loss::pixel_cosine<double>(sample_view(f2, 0), sample_view(gT, 0));
      };
      std::vector<double> flat(fT.data(), fT.data() + fT.size());
      CHECK(rel_ok(grad.data()[i], fd_coord(f, flat, i, 1e-6)));
    }
  }
}

TEST_CASE("conv_backward matches central differences (weights, bias, input)") {
  RandomSource rng(704);
  for (int inst = 0; inst < 3; ++inst) {
    nn::Conv2d<double> conv;
    const int in = 2, out = 3, k = 3, stride = inst == 2 ? 2 : 1, pad = 1;
    conv.configure(in, out, k, stride, pad);
    conv.init_kaiming(rng);
    const auto x = random_tensor<double>(2, in, 6, 6, 1000 + inst, -1.0, 1.0);
    const auto w = random_tensor<double>(2, out, conv.out_h(6), conv.out_w(6), 1100 + inst, -1.0, 1.0);

    // Scalar head: L = <conv(x), w>.
    auto value = [&](const nn::Conv2d<double>& cc, const Tensor<double>& xx) {
      const auto y = nn::conv_forward(cc, xx, 1);
      double s = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) s += y.data()[i] * w.data()[i];
      return s;
    };

    nn::ConvGrads<double> grads;
    grads.zero_like(conv);
    const auto gx = nn::conv_backward(conv, x, w, &grads, true, 1);

    const double eps = 1e-6;
    for (int probe = 0; probe < 5; ++probe) {
      const auto wi = std::size_t(rng.uniform_int(0, std::int64_t(conv.weight.size()) - 1));
      nn::Conv2d<double> cp = conv, cm = conv;
      cp.weight[wi] += eps;
      cm.weight[wi] -= eps;
      CHECK(rel_ok(grads.w[wi], (value(cp, x) - value(cm, x)) / (2 * eps)));

      const auto bi = std::size_t(rng.uniform_int(0, std::int64_t(conv.bias.size()) - 1));
      cp = conv;
      cm = conv;
      cp.bias[bi] += eps;
      cm.bias[bi] -= eps;
      CHECK(rel_ok(grads.b[bi], (value(cp, x) - value(cm, x)) / (2 * eps)));

      const auto xi = std::size_t(rng.uniform_int(0, std::int64_t(x.size()) - 1));
      Tensor<double> xp = x, xm = x;
      xp.data()[xi] += eps;
      xm.data()[xi] -= eps;
      CHECK(rel_ok(gx.data()[xi], (value(conv, xp) - value(conv, xm)) / (2 * eps)));
    }
  }
}

TEST_CASE("spectral-norm weight gradient matches central differences") {
  RandomSource rng(705);
  nn::Conv2d<double> conv;
  conv.configure(2, 3, 3, 2, 1, /*sn=*/true);
  conv.init_kaiming(rng);
  conv.refresh_sn();  // one power-iteration step to move u/v off the init
  const auto x = random_tensor<double>(1, 2, 6, 6, 1200, -1.0, 1.0);
  const auto w = random_tensor<double>(1, 3, conv.out_h(6), conv.out_w(6), 1201, -1.0, 1.0);

  // With u and v held fixed the normalized weight is w / sigma(w) and the
  // loss is differentiable in the raw weight.
  auto value = [&](nn::Conv2d<double> cc) {
    cc.recompute_sn_fixed_uv();
    const auto y = nn::conv_forward(cc, x, 1);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y.data()[i] * w.data()[i];
    return s;
  };

  nn::ConvGrads<double> grads;
  grads.zero_like(conv);
  (void)nn::conv_backward(conv, x, w, &grads, false, 1);
  nn::sn_grad_transform(conv, grads.w);

  const double eps = 1e-6;
  for (int probe = 0; probe < 10; ++probe) {
    const auto wi = std::size_t(rng.uniform_int(0, std::int64_t(conv.weight.size()) - 1));
    nn::Conv2d<double> cp = conv, cm = conv;
    cp.weight[wi] += eps;
    cm.weight[wi] -= eps;
    CHECK(rel_ok(grads.w[wi], (value(cp) - value(cm)) / (2 * eps)));
  }
}

TEST_CASE("sr_backward matches a directional derivative through the full net") {
  RandomSource rng(706);
  nn::SrConfig cfg;
  cfg.channels = 8;
  cfg.resblocks = 2;
  cfg.scale = 2;
  nn::SrNet<double> net;
  net.init(cfg, rng);
  const auto x = random_tensor<double>(1, 3, 6, 6, 1300, 0.0, 1.0);
  const auto w = random_tensor<double>(1, 3, 12, 12, 1301, -1.0, 1.0);

  nn::SrTrace<double> trace;
  (void)nn::sr_forward(net, x, &trace, 1);
  nn::SrGrads<double> grads;
  grads.zero_like(net);
  nn::sr_backward(net, trace, w, grads, 1);

  auto value = [&](const nn::SrNet<double>& nn2) {
    const auto y = nn::sr_forward<double>(nn2, x, nullptr, 1);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y.data()[i] * w.data()[i];
    return s;
  };

  // Random direction over all parameters; compare <grad, d> with the FD.
  auto params = nn::param_sequence(net);
  auto gseq = nn::grad_sequence(grads);
  REQUIRE(params.size() == gseq.size());
  std::vector<std::vector<double>> dir(params.size());
  double analytic = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    dir[i].resize(params[i]->size());
    for (std::size_t j = 0; j < dir[i].size(); ++j) {
      dir[i][j] = rng.uniform(-1.0, 1.0);
      analytic += dir[i][j] * (*gseq[i])[j];
    }
  }
  const double eps = 1e-6;
  nn::SrNet<double> np = net, nm = net;
  auto pp = nn::param_sequence(np);
  auto pm = nn::param_sequence(nm);
  for (std::size_t i = 0; i < pp.size(); ++i)
    for (std::size_t j = 0; j < pp[i]->size(); ++j) {
      (*pp[i])[j] += eps * dir[i][j];
      (*pm[i])[j] -= eps * dir[i][j];
    }
  const double fd = (value(np) - value(nm)) / (2 * eps);
  CHECK(rel_ok(analytic, fd));
}

TEST_CASE("embed_backward_input matches a directional derivative") {
  RandomSource rng(707);
  nn::EmbedConfig cfg;
  cfg.in_ch = 3;
  cfg.base = 8;
  cfg.layers = 3;
  cfg.taps = 2;
  nn::EmbedNet<double> net;
  net.init(cfg, rng);
  const auto x = random_tensor<double>(1, 3, 16, 16, 1400, -1.0, 1.0);

  nn::EmbedTrace<double> trace;
  const auto out = nn::embed_forward(net, x, false, &trace, 1);
  REQUIRE(out.pyramid.size() == 2);

  // L = sum of fixed random weightings of the tapped feature maps.
  FeaturePyramid<double> gpyr;
  for (std::size_t l = 0; l < out.pyramid.size(); ++l) {
    const auto& t = out.pyramid[l];
    gpyr.push_back(random_tensor<double>(t.n(), t.c(), t.h(), t.w(), 1500 + l, -1.0, 1.0));
  }
  const auto gx = nn::embed_backward_input(net, trace, gpyr, 1);
  REQUIRE(gx.same_shape(x));

  auto value = [&](const Tensor<double>& xx) {
    const auto o = nn::embed_forward<double>(net, xx, false, nullptr, 1);
    double s = 0.0;
    for (std::size_t l = 0; l < o.pyramid.size(); ++l)
      for (std::size_t i = 0; i < o.pyramid[l].size(); ++i)
        s += o.pyramid[l].data()[i] * gpyr[l].data()[i];
    return s;
  };

  Tensor<double> dir = random_tensor<double>(1, 3, 16, 16, 1600, -1.0, 1.0);
  double analytic = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) analytic += gx.data()[i] * dir.data()[i];
  const double eps = 1e-6;
  Tensor<double> xp = x, xm = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xp.data()[i] += eps * dir.data()[i];
    xm.data()[i] -= eps * dir.data()[i];
  }
  CHECK(rel_ok(analytic, (value(xp) - value(xm)) / (2 * eps)));
}

TEST_CASE("embed_backward_params matches a directional derivative on the scores") {
  RandomSource rng(708);
  nn::EmbedConfig cfg;
  cfg.in_ch = 3;
  cfg.base = 8;
  cfg.layers = 3;
  cfg.taps = 2;
  nn::EmbedNet<double> net;
  net.init(cfg, rng);
  const auto x = random_tensor<double>(2, 3, 16, 16, 1700, -1.0, 1.0);

  nn::EmbedTrace<double> trace;
  const auto out = nn::embed_forward(net, x, true, &trace, 1);
  REQUIRE(out.scores.size() == 2);
  const std::vector<double> gs = {0.7, -1.3};

  nn::EmbedGrads<double> grads;
  grads.zero_like(net);
  nn::embed_backward_params<double>(net, trace, gs, grads, 1);
  nn::finalize_embed_grads(net, grads);

  auto value = [&](nn::EmbedNet<double>& n2) {
    const auto o = nn::embed_forward<double>(n2, x, true, nullptr, 1);
    return gs[0] * o.scores[0] + gs[1] * o.scores[1];
  };

  auto params = nn::param_sequence(net);
  auto gseq = nn::grad_sequence(grads);
  REQUIRE(params.size() == gseq.size());
  std::vector<std::vector<double>> dir(params.size());
  double analytic = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    dir[i].resize(params[i]->size());
    for (std::size_t j = 0; j < dir[i].size(); ++j) {
      dir[i][j] = rng.uniform(-1.0, 1.0);
      analytic += dir[i][j] * (*gseq[i])[j];
    }
  }
  const double eps = 1e-6;
  nn::EmbedNet<double> np = net, nm = net;
  auto pp = nn::param_sequence(np);
  auto pm = nn::param_sequence(nm);
  for (std::size_t i = 0; i < pp.size(); ++i)
    for (std::size_t j = 0; j < pp[i]->size(); ++j) {
      (*pp[i])[j] += eps * dir[i][j];
      (*pm[i])[j] -= eps * dir[i][j];
    }
  CHECK(rel_ok(analytic, (value(np) - value(nm)) / (2 * eps)));
}

TEST_SUITE_END();
