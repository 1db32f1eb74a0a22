#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "support.hpp"
#include "svdnas/datasynth.hpp"

using namespace svdnas;
using namespace svdnas::testing;

namespace {

// conv (1x1, weight rows pick input channels) followed by one BN layer.
Network<double> toy(const std::vector<Index>& pick, const std::vector<double>& rm, const std::vector<double>& rv) {
  const Index f = static_cast<Index>(pick.size());
  Network<double> net({2, 3, 3}, 2);
  NdArray<double> w({f, 2, 1, 1});
  for (Index o = 0; o < f; ++o) w.at(o, pick[o], 0, 0) = 1.0;
  net.add("conv1", ConvLayer<double>{ConvShape{f, 2, 1, 1, 1, 1, 0, 0, 1, 3, 3, false}, Tensor<double>(w), std::nullopt});
  net.add("bn1", BatchNormLayer<double>{Tensor<double>(NdArray<double>::constant({f}, 1.0)),
                                        Tensor<double>(NdArray<double>({f})), NdArray<double>(Shape{f}, rm),
                                        NdArray<double>(Shape{f}, rv)});
  return net;
}

// Direct loops over the batch; population moments.
double oracle(const NdArray<double>& x, const std::vector<Index>& pick, const std::vector<double>& rm,
              const std::vector<double>& rv, double alpha, bool scaled) {
  const Index N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  double s = 0, s2 = 0;
  for (Index i = 0; i < x.numel(); ++i) s += x[i];
  const double mu = s / x.numel();
  for (Index i = 0; i < x.numel(); ++i) s2 += (x[i] - mu) * (x[i] - mu);
  double loss = alpha * (mu * mu + std::pow(std::sqrt(s2 / x.numel()) - 1, 2));
  std::vector<double> cm(C, 0), cs(C, 0);
  for (Index c = 0; c < C; ++c) {
    for (Index n = 0; n < N; ++n)
      for (Index p = 0; p < HW; ++p) cm[c] += x[(n * C + c) * HW + p];
    cm[c] /= N * HW;
    for (Index n = 0; n < N; ++n)
      for (Index p = 0; p < HW; ++p) cs[c] += std::pow(x[(n * C + c) * HW + p] - cm[c], 2);
    cs[c] = std::sqrt(cs[c] / (N * HW));
  }
  double layer = 0;
  for (std::size_t o = 0; o < pick.size(); ++o)
    layer += std::pow(cm[pick[o]] - rm[o], 2) + std::pow(cs[pick[o]] - std::sqrt(rv[o]), 2);
  return loss + (scaled ? layer / pick.size() : layer);
}

const Net& desk() {
  static const Net net = [] {
    Net n = make_desk_model(2);
    // non-trivial running buffers
    Rng rng(5);
    for (auto& l : n.mutable_layers())
      if (auto* bn = std::get_if<BatchNormLayer<float>>(&l.op)) {
        bn->running_mean = rng.normal_array<float>(bn->running_mean.shape(), 0.5f);
        bn->running_var = rng.uniform_array<float>(bn->running_var.shape(), 0.5f, 1.5f);
      }
    return n;
  }();
  return net;
}

}  // namespace

TEST_CASE("bn loss matches the closed form on a one-layer fixture") {
  const std::vector<Index> pick{0, 1};
  const std::vector<double> rm{0.3, -0.7}, rv{2.0, 0.25};
  auto net = toy(pick, rm, rv);
  auto targets = extract_bn_targets(net);
  CHECK(targets.std[0][0] == doctest::Approx(std::sqrt(2.0)));
  Rng rng(1);
  for (int t = 0; t < 5; ++t) {
    auto x = rng.normal_array<double>({4, 2, 3, 3}, 1.5);
    for (bool scaled : {true, false})
      for (double alpha : {0.0, 1.0, 2.5})
        CHECK(bn_loss(Tensor<double>(x), net, targets, alpha, scaled).item() ==
              doctest::Approx(oracle(x, pick, rm, rv, alpha, scaled)).epsilon(1e-10));
  }
}

TEST_CASE("bn loss gradient matches finite differences") {
  const std::vector<Index> pick{1, 0};
  auto net = toy(pick, {0.1, 0.2}, {0.5, 1.5});
  auto targets = extract_bn_targets(net);
  Rng rng(2);
  auto x = rng.normal_array<double>({3, 2, 3, 3});
  auto err = max_gradient_error([&](const std::vector<Tensor<double>>& in) { return bn_loss(in[0], net, targets, 1.0, true); },
                                {x}, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("width scaling makes duplicated channels count once") {
  const std::vector<double> rm{0.3, -0.2}, rv{1.2, 0.8};
  auto a = toy({0, 1}, rm, rv);
  auto b = toy({0, 1, 0, 1}, {0.3, -0.2, 0.3, -0.2}, {1.2, 0.8, 1.2, 0.8});
  Rng rng(3);
  Tensor<double> x(rng.normal_array<double>({2, 2, 3, 3}));
  auto ta = extract_bn_targets(a), tb = extract_bn_targets(b);
  CHECK(bn_loss(x, a, ta, 0.0, true).item() == doctest::Approx(bn_loss(x, b, tb, 0.0, true).item()));
  CHECK(bn_loss(x, b, tb, 0.0, false).item() == doctest::Approx(2 * bn_loss(x, a, ta, 0.0, false).item()));
}

TEST_CASE("targets must match the network") {
  auto net = toy({0, 1}, {0, 0}, {1, 1});
  BNTargets<double> none;
  Tensor<double> x(NdArray<double>({1, 2, 3, 3}));
  CHECK_THROWS_AS(bn_loss(x, net, none, 1.0, true), ContractError);
  auto t = extract_bn_targets(net);
  t.ids[0] = "bn9";
  CHECK_THROWS_AS(bn_loss(x, net, t, 1.0, true), ContractError);
}

TEST_CASE("synthesis lowers the loss and leaves the network alone") {
  const Net& net = desk();
  const Net before = net;
  SynthConfig cfg;
  cfg.iterations = 40;
  cfg.batch = 8;
  cfg.seed = 4;
  auto r = generate_synthetic(net, cfg, 10);
  CHECK(r.images.size() == 10);
  CHECK_FALSE(r.images.labelled());
  CHECK(r.images.image_shape() == Shape{3, 16, 16});
  REQUIRE(r.batches.size() == 2);
  for (const auto& b : r.batches) {
    CHECK(b.losses.size() == 40);
    CHECK(b.final < b.initial);
  }
  CHECK(r.images.images.data().allFinite());
  for (std::size_t i = 0; i < net.layers().size(); ++i)
    if (const auto* bn = std::get_if<BatchNormLayer<float>>(&net.layers()[i].op)) {
      const auto& o = std::get<BatchNormLayer<float>>(before.layers()[i].op);
      CHECK(bn->running_mean == o.running_mean);
      CHECK(bn->running_var == o.running_var);
    }
}

TEST_CASE("synthesis edge counts, warnings and determinism") {
  const Net& net = desk();
  SynthConfig cfg;
  cfg.iterations = 3;
  cfg.batch = 4;
  CHECK(generate_synthetic(net, cfg, 0).images.size() == 0);
  CHECK(generate_synthetic(net, cfg, 0).batches.empty());
  auto one = generate_synthetic(net, cfg, 1);
  CHECK(one.images.size() == 1);
  cfg.iterations = 1;
  CHECK_FALSE(generate_synthetic(net, cfg, 2).warnings.empty());
  cfg.iterations = 5;
  auto a = generate_synthetic(net, cfg, 6), b = generate_synthetic(net, cfg, 6);
  CHECK(a.images.images == b.images.images);
  cfg.seed = 1;
  CHECK_FALSE(generate_synthetic(net, cfg, 6).images.images == a.images.images);
  CHECK_THROWS_AS(generate_synthetic(net, cfg, -1), ContractError);
  cfg.iterations = 0;
  CHECK_THROWS_AS(generate_synthetic(net, cfg, 1), ContractError);
}

TEST_CASE("synth config JSON round trip") {
  SynthConfig c;
  c.alpha = 0.5;
  c.scaled = false;
  c.seed = 12;
  CHECK(synth_config_json(synth_config_from_json(synth_config_json(c))) == synth_config_json(c));
  CHECK_THROWS_AS(synth_config_from_json({{"batch", 0}}), ContractError);
}
