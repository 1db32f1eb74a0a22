#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "support.hpp"
#include "svdnas/distill.hpp"
#include "svdnas/search.hpp"

using namespace svdnas;
using namespace svdnas::testing;

namespace {

const ProceduralDataset& data() {
  static const ProceduralDataset d = generate_dataset(31, 1200, 300);
  return d;
}

const Net& teacher() {
  static const Net net = [] {
    Net n = make_desk_model(6);
    TrainSchedule s;
    s.epochs = 2;
    s.batch = 50;
    pretrain(n, data().train, data().validation, s);
    return n;
  }();
  return net;
}

Net student() {
  const Net& t = teacher();
  std::map<std::string, std::vector<BlockConfig>> cfg{{"conv5", {{{1, 1, 3, 3}, 1, 1, 4}}},
                                                      {"conv6", {{{3, 1, 1, 3}, 1, 1, 6}}}};
  return derive_model(t, cfg);
}

ForwardResult<double> result(const NdArray<double>& logits, std::map<std::string, NdArray<double>> caps) {
  ForwardResult<double> r;
  r.logits = Tensor<double>(logits);
  for (auto& [id, v] : caps) r.captured[id] = Tensor<double>(v);
  return r;
}

double softmax_at(double a, double b, double t, int i) {
  const double ea = std::exp(a / t), eb = std::exp(b / t);
  return (i == 0 ? ea : eb) / (ea + eb);
}

bool same_weights(const Net& a, const Net& b) {
  auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!(pa[i].value() == pb[i].value())) return false;
  return true;
}

}  // namespace

TEST_CASE("layer MSE: identity is zero, constant offsets add their squares") {
  NdArray<double> z({2, 3, 4, 4}), l({2, 10});
  auto t = result(l, {{"a", z}, {"b", z}});
  CHECK(layer_mse_sum(t, t, {"a", "b"}).item() == 0.0);
  const double d1 = 0.3, d2 = -1.7;
  auto s = result(l, {{"a", NdArray<double>::constant(z.shape(), d1)}, {"b", NdArray<double>::constant(z.shape(), d2)}});
  CHECK(layer_mse_sum(s, t, {"a", "b"}).item() == doctest::Approx(d1 * d1 + d2 * d2));
  CHECK_THROWS_AS(layer_mse_sum(s, t, {"a", "c"}), ContractError);
  auto bad = result(l, {{"a", NdArray<double>({2, 3, 2, 2})}, {"b", z}});
  CHECK_THROWS_AS(layer_mse_sum(bad, t, {"a"}), DimensionError);
}

TEST_CASE("kd loss on a two-class hand example") {
  const double T = 2.0;
  auto s = result(NdArray<double>(Shape{1, 2}, std::vector<double>{1.0, 0.0}), {});
  auto t = result(NdArray<double>(Shape{1, 2}, std::vector<double>{0.0, 1.0}), {});
  double kl = 0;
  for (int i = 0; i < 2; ++i) kl += softmax_at(0, 1, T, i) * std::log(softmax_at(0, 1, T, i) / softmax_at(1, 0, T, i));
  const double ce = -std::log(softmax_at(1, 0, 1.0, 1));  // label 1
  CHECK(kd_loss(s, t, {1}, {}, 1.0, T).item() == doctest::Approx(T * T * kl));
  CHECK(kd_loss(s, t, {1}, {}, 0.0, T).item() == doctest::Approx(ce));
  CHECK(kd_loss(s, t, {1}, {}, 0.25, T).item() == doctest::Approx(0.25 * T * T * kl + 0.75 * ce));
  CHECK(kd_loss(t, t, {1}, {}, 1.0, T).item() == doctest::Approx(0.0));
  CHECK_THROWS_AS(kd_loss(s, t, {1}, {}, 1.5, T), ContractError);
  CHECK_THROWS_AS(kd_loss(s, t, {1}, {}, 0.5, 0.0), ContractError);
}

TEST_CASE("kd loss gradient matches finite differences") {
  Rng rng(4);
  auto tl = rng.normal_array<double>({3, 5});
  auto tc = rng.normal_array<double>({3, 2, 2, 2});
  std::vector<int> labels{0, 4, 2};
  auto err = max_gradient_error(
      [&](const std::vector<Tensor<double>>& in) {
        ForwardResult<double> s, t;
        s.logits = in[0];
        s.captured["x"] = in[1];
        t.logits = Tensor<double>(tl);
        t.captured["x"] = Tensor<double>(tc);
        return kd_loss(s, t, labels, {"x"}, 0.7, 3.0);
      },
      {rng.normal_array<double>({3, 5}), rng.normal_array<double>({3, 2, 2, 2})}, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("per-layer loss is zero for the teacher itself") {
  Tensor<float> x(data().validation.batch_images(0, 8));
  CHECK(per_layer_mse_loss(teacher(), teacher(), x).item() == 0.0f);
  CHECK(per_layer_mse_loss(student(), teacher(), x).item() > 0.0f);
}

TEST_CASE("zero epochs return the student untouched") {
  Net s = student();
  DistillConfig cfg;
  cfg.max_epochs = 0;
  auto r = finetune(s, teacher(), data().train.slice(0, 50), nullptr, cfg);
  CHECK(r.best_epoch == -1);
  CHECK(r.log.empty());
  CHECK(same_weights(r.student, s));
}

TEST_CASE("post-training on unlabelled images improves held-out MSE; teacher frozen") {
  const Net before = teacher();
  Net s = student();
  Rng rng(8);
  Dataset synth{rng.normal_array<float>({60, 3, 16, 16}), {}};
  DistillConfig cfg;
  cfg.max_epochs = 3;
  cfg.lr = 1e-2;
  auto r = finetune(s, teacher(), synth, nullptr, cfg);
  CHECK(r.log.size() == 3);
  CHECK(r.best_metric <= r.final_metric);
  CHECK(r.best_epoch >= 0);
  CHECK(same_weights(teacher(), before));
  Tensor<float> x(synth.batch_images(54, 6));
  CHECK(per_layer_mse_loss(r.student, teacher(), x).item() < per_layer_mse_loss(s, teacher(), x).item());
  CHECK_THROWS_AS(finetune(s, teacher(), synth.slice(0, 1), nullptr, cfg), ContractError);
}

TEST_CASE("few-sample fine-tuning keeps the best validation checkpoint") {
  Net s = student();
  const auto& d = data();
  Dataset few = d.train.subset(d.few_sample);
  DistillConfig cfg;
  cfg.regime = Regime::kFewSample;
  cfg.max_epochs = 3;
  auto r = finetune(s, teacher(), few, &d.validation, cfg);
  const double start = evaluate(s, d.validation).top1;
  CHECK(r.best_metric >= start);
  CHECK(r.best_metric >= r.final_metric);
  CHECK(evaluate(r.student, d.validation).top1 == doctest::Approx(r.best_metric));
  CHECK_THROWS_AS(finetune(s, teacher(), few, nullptr, cfg), ContractError);
  Dataset unlabelled{few.images, {}};
  CHECK_THROWS_AS(finetune(s, teacher(), unlabelled, &d.validation, cfg), ContractError);
}

TEST_CASE("regime names and config JSON") {
  for (auto r : {Regime::kPost, Regime::kFewSample, Regime::kFull}) CHECK(regime_from_name(regime_name(r)) == r);
  CHECK_THROWS_AS(regime_from_name("half"), ContractError);
  DistillConfig c;
  c.regime = Regime::kFull;
  c.student_mode = Mode::kEval;
  CHECK(distill_config_json(distill_config_from_json(distill_config_json(c))) == distill_config_json(c));
  CHECK_THROWS_AS(distill_config_from_json({{"alpha_kd", 2.0}}), ContractError);
}
