#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "support.hpp"
#include "svdnas/search.hpp"

using namespace svdnas;
using namespace svdnas::testing;

namespace {

const ProceduralDataset& data() {
  static const ProceduralDataset d = generate_dataset(21, 1200, 300);
  return d;
}

const Net& trained() {
  static const Net net = [] {
    Net n = make_desk_model(4);
    TrainSchedule s;
    s.epochs = 2;
    s.batch = 50;
    pretrain(n, data().train, data().validation, s);
    return n;
  }();
  return net;
}

LRSpaceTable pruned_table(const Net& net) {
  auto t = build_space_table(net);
  apply_flops_pruning(t, 0.3, 0.9, 0.05);
  return t;
}

SearchConfig quick(double beta, std::uint64_t seed = 0) {
  SearchConfig c;
  c.beta = beta;
  c.seed = seed;
  c.epochs_branch0 = 4;
  c.epochs_branch1 = 2;
  return c;
}

}  // namespace

TEST_CASE("nas_loss closed form and edge cases") {
  auto ce = Tensor<double>::scalar(2.0);
  auto c = Tensor<double>::scalar(100.0);
  CHECK(nas_loss(ce, c, 1000.0, 0.0).item() == 2.0);
  CHECK(nas_loss(ce, c, 1000.0, 2.0).item() == doctest::Approx(2.0 * std::pow(2.0 / 3.0, 2.0)));
  CHECK(nas_loss(ce, Tensor<double>::scalar(1000.0), 1000.0, 48.0).item() == doctest::Approx(2.0));
  CHECK_THROWS_AS(nas_loss(ce, Tensor<double>::scalar(0.5), 1000.0, 1.0), ContractError);
  CHECK_THROWS_AS(nas_loss(ce, c, 1.0, 1.0), ContractError);
}

TEST_CASE("expected supernet cost is the weighted candidate sum plus the constant") {
  std::vector<Tensor<double>> w{Tensor<double>(NdArray<double>(Shape{2}, std::vector<double>{0.25, 0.75})),
                                Tensor<double>(NdArray<double>(Shape{3}, std::vector<double>{0.5, 0.5, 0.0}))};
  auto c = expected_supernet_cost<double>({{100, 20}, {8, 4, 1000}}, w, 7.0);
  CHECK(c.item() == doctest::Approx(7 + 25 + 15 + 4 + 2));
  CHECK_THROWS_AS(expected_supernet_cost<double>({{1, 2}}, {w[1]}), ContractError);
}

TEST_CASE("sample_pair draws distinct indices with first-draw frequencies of p") {
  Rng rng(3);
  VectorX<double> p(4);
  p << 0.1, 0.2, 0.3, 0.4;
  std::vector<double> first(4, 0), any(4, 0);
  const int n = 40000;
  for (int i = 0; i < n; ++i) {
    auto [a, b] = sample_pair(p, rng);
    CHECK_FALSE(a == b);
    first[a] += 1.0 / n;
    any[a] += 1.0 / n;
    any[b] += 1.0 / n;
  }
  for (int i = 0; i < 4; ++i) CHECK(std::abs(first[i] - p[i]) < 0.01);
  // second draw renormalizes over the rest
  for (int i = 0; i < 4; ++i) {
    double second = 0;
    for (int j = 0; j < 4; ++j)
      if (j != i) second += p[j] * p[i] / (1 - p[j]);
    CHECK(std::abs(any[i] - (p[i] + second)) < 0.015);
  }
  VectorX<double> one(1);
  one << 1.0;
  CHECK_THROWS_AS(sample_pair(one, rng), ContractError);
}

TEST_CASE("supernet layout: original first, one block per retained config, zero theta") {
  const Net& net = trained();
  auto t = pruned_table(net);
  Net sn = build_supernet(net, t);
  for (const auto& l : t.layers) {
    const auto& sb = std::get<SuperBlock<float>>(sn.layer(l.id).op);
    CHECK(sb.candidates.size() == l.retained().size() + 1);
    CHECK(std::holds_alternative<ConvLayer<float>>(sb.candidates[0]));
    CHECK(sb.theta.value().data().abs().maxCoeff() == 0.0f);
    for (std::size_t i = 1; i < sb.candidates.size(); ++i)
      CHECK(std::get<BuildingBlock<float>>(sb.candidates[i]).configs() == std::vector<BlockConfig>{l.retained()[i - 1]});
  }
  CHECK(sn.forward(Tensor<float>(data().validation.batch_images(0, 3))).logits.shape() == Shape{3, 10});
}

TEST_CASE("a search epoch trains only theta") {
  const Net& net = trained();
  Net sn = build_supernet(net, pruned_table(net));
  const Net before = sn;
  auto cfg = quick(16.0);
  auto state = init_search_state(sn, cfg);
  Rng rng(1);
  search_epoch(state, sn, data().train.slice(0, 200), cfg, rng, model_metric(net, Objective::kFlops, nullptr));
  CHECK(state.epoch == 1);
  CHECK(state.temperature == doctest::Approx(5.0 * 0.965));
  bool theta_moved = false;
  for (std::size_t i = 0; i < sn.layers().size(); ++i) {
    const auto& a = sn.layers()[i].op;
    const auto& b = before.layers()[i].op;
    if (const auto* sa = std::get_if<SuperBlock<float>>(&a)) {
      const auto& sb = std::get<SuperBlock<float>>(b);
      theta_moved |= !(sa->theta.value() == sb.theta.value());
    } else if (const auto* bn = std::get_if<BatchNormLayer<float>>(&a)) {
      CHECK(bn->running_mean == std::get<BatchNormLayer<float>>(b).running_mean);
      CHECK(bn->gamma.value() == std::get<BatchNormLayer<float>>(b).gamma.value());
    } else if (const auto* c = std::get_if<ConvLayer<float>>(&a)) {
      CHECK(c->weight.value() == std::get<ConvLayer<float>>(b).weight.value());
    }
  }
  CHECK(theta_moved);
}

TEST_CASE("selection takes argmax theta and breaks ties by FLOPs") {
  const Net& net = trained();
  Net sn = build_supernet(net, pruned_table(net));
  auto& sb = std::get<SuperBlock<float>>(sn.layer("conv6").op);
  auto sel = select_final(sn);  // all-zero theta: cheapest candidate wins
  Index cheapest = 0;
  for (Index i = 0; i < static_cast<Index>(sb.candidates.size()); ++i)
    if (candidate_cost(sb.candidates[i]).flops < candidate_cost(sb.candidates[cheapest]).flops) cheapest = i;
  CHECK(sel.winner.at("conv6") == cheapest);
  sb.theta.mutable_value()[0] = 1.0f;
  sel = select_final(sn);
  CHECK(sel.winner.at("conv6") == 0);
  CHECK(sel.configs.at("conv6").empty());
  CHECK(std::holds_alternative<ConvLayer<float>>(sel.net.layer("conv6").op));
  CHECK_NOTHROW(model_cost(sel.net));
}

TEST_CASE("stronger cost pressure never yields a more expensive model") {
  const Net& net = trained();
  auto t = pruned_table(net);
  Dataset d = data().train.slice(0, 300);
  auto lo = select_final(run_search(net, t, net, d, quick(0.0, 2), 6).supernet);
  auto hi = select_final(run_search(net, t, net, d, quick(64.0, 2), 6).supernet);
  CHECK(model_cost(hi.net).flops <= model_cost(lo.net).flops);
  CHECK(model_cost(hi.net).flops < model_cost(net).flops);
}

TEST_CASE("relaxed rank is the smallest drop saving the fraction") {
  ConvShape orig{64, 64, 3, 3, 1, 1, 1, 1, 1, 4, 4, false};
  const double target = 0.2 * conv_cost(orig).flops;
  for (const auto& cfg : enumerate_space(64, 64, 3)) {
    if (cfg.rank % 7) continue;
    Index expect = 1;
    for (Index r = cfg.rank - 1; r >= 1; --r) {
      BlockConfig c = cfg;
      c.rank = r;
      if (block_cost(orig, cfg).flops - block_cost(orig, c).flops >= target) {
        expect = r;
        break;
      }
    }
    CHECK(relaxed_rank(orig, cfg) == expect);
  }
}

TEST_CASE("two-branch search never increases weight error; derive_model reproduces it") {
  const Net& net = trained();
  auto t = pruned_table(net);
  Dataset d = data().train.slice(0, 200);
  IterativeOptions one, two;
  two.branches = 2;
  auto cfg = quick(48.0, 5);
  auto r1 = iterative_search(net, t, d, cfg, one);
  auto r2 = iterative_search(net, t, d, cfg, two);
  CHECK(r2.passes.size() == 2);
  auto e1 = weight_space_error(r1.net, net), e2 = weight_space_error(r2.net, net);
  for (const auto& [id, e] : e1) CHECK(e2.at(id) <= e + 1e-4);
  Net rebuilt = derive_model(net, r2.configs);
  auto x = Tensor<float>(data().validation.batch_images(0, 8));
  CHECK(rel_frobenius(rebuilt.forward(x).logits.value(), r2.net.forward(x).logits.value()) < 1e-4);
  CHECK(configs_from_json(configs_json(r2.configs)) == r2.configs);

  // relaxed: a layer either falls back to its pass-0 block or gets a branch that beats it
  IterativeOptions relaxed = two;
  relaxed.relax = Relaxation{};
  auto r3 = iterative_search(net, t, d, cfg, relaxed);
  auto e3 = weight_space_error(r3.net, net);
  for (const auto& [id, e] : e1) CHECK(e3.at(id) <= e + 1e-6 * std::max(1.0, e));
  CHECK(rel_frobenius(derive_model(net, r3.configs).forward(x).logits.value(), r3.net.forward(x).logits.value()) <
        1e-4);
}

TEST_CASE("latency objective reads the table; missing table is an error") {
  const Net& net = trained();
  auto t = pruned_table(net);
  auto lat = synthetic_latency_table(net, t);
  CHECK(model_metric(net, Objective::kLatency, &lat) > 0);
  CHECK_THROWS_AS(model_metric(net, Objective::kLatency, nullptr), ContractError);
  Net sn = build_supernet(net, t);
  for (const auto& l : sn.layers())
    if (const auto* sb = std::get_if<SuperBlock<float>>(&l.op))
      for (const auto& c : sb->candidates) CHECK(candidate_metric(c, Objective::kLatency, &lat) > 0);
}

TEST_CASE("search config JSON round trip") {
  SearchConfig c;
  c.beta = 3.5;
  c.objective = Objective::kLatency;
  c.seed = 9;
  CHECK(search_config_json(search_config_from_json(search_config_json(c))) == search_config_json(c));
  CHECK_THROWS_AS(search_config_from_json({{"objective", "speed"}}), ContractError);
}

TEST_CASE("search is deterministic for a seed") {
  const Net& net = trained();
  auto t = pruned_table(net);
  Dataset d = data().train.slice(0, 200);
  auto a = run_search(net, t, net, d, quick(16.0, 3), 2);
  auto b = run_search(net, t, net, d, quick(16.0, 3), 2);
  for (const auto& id : a.state.layers)
    CHECK(std::get<SuperBlock<float>>(a.supernet.layer(id).op).theta.value() ==
          std::get<SuperBlock<float>>(b.supernet.layer(id).op).theta.value());
}
