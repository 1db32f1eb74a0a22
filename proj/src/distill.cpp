#include "svdnas/distill.hpp"

#include <numeric>

#include "svdnas/optim.hpp"

namespace svdnas {

std::string regime_name(Regime r) {
  switch (r) {
    case Regime::kPost: return "post";
    case Regime::kFewSample: return "few";
    case Regime::kFull: return "full";
  }
  return "post";
}

Regime regime_from_name(const std::string& s) {
  if (s == "post") return Regime::kPost;
  if (s == "few") return Regime::kFewSample;
  if (s == "full") return Regime::kFull;
  throw ContractError("unknown regime '" + s + "' (post, few, full)");
}

namespace {

ForwardResult<float> run(const Net& net, const Tensor<float>& x, Mode mode) {
  ForwardOptions<float> fo;
  fo.mode = mode;
  fo.capture = true;
  return net.forward(x, fo);
}

double holdout_mse(const Net& student, const Net& teacher, const Dataset& d, Index batch) {
  double total = 0.0;
  Index n = 0;
  for (Index s = 0; s < d.size(); s += batch) {
    const Index k = std::min(batch, d.size() - s);
    Tensor<float> x(d.batch_images(s, k));
    total += per_layer_mse_loss(student, teacher, x, Mode::kEval).item() * static_cast<double>(k);
    n += k;
  }
  return total / static_cast<double>(n);
}

}  // namespace

Tensor<float> per_layer_mse_loss(const Net& student, const Net& teacher, const Tensor<float>& batch, Mode mode) {
  const auto t = run(teacher, batch.detach(), Mode::kEval);
  const auto s = run(student, batch, mode);
  return layer_mse_sum(s, t, teacher.targets());
}

Json DistillResult::to_json() const {
  Json j{{"best_epoch", best_epoch}, {"best_metric", best_metric}, {"final_metric", final_metric}, {"epochs", Json::array()}};
  for (const auto& e : log) j["epochs"].push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"lr", e.lr}, {"metric", e.metric}});
  return j;
}

DistillResult finetune(const Net& student_in, const Net& teacher, const Dataset& data, const Dataset* validation,
                       const DistillConfig& cfg) {
  if (!(cfg.alpha_kd >= 0.0 && cfg.alpha_kd <= 1.0) || !(cfg.temperature > 0.0))
    throw ContractError("distill: need 0 <= alpha_kd <= 1 and T_kd > 0");
  if (cfg.batch < 1) throw ContractError("distill: batch must be >= 1");
  const bool post = cfg.regime == Regime::kPost;
  if (!post) {
    if (!data.labelled()) throw ContractError("distill: " + regime_name(cfg.regime) + " regime needs labelled data");
    if (!validation || !validation->labelled() || validation->size() == 0)
      throw ContractError("distill: " + regime_name(cfg.regime) + " regime needs a labelled validation set");
  }

  DistillResult out{student_in, {}, -1, 0.0, 0.0};
  if (cfg.lr < cfg.min_lr || cfg.max_epochs < 1) return out;

  Dataset train = data, held;
  if (post) {
    const Index h = std::max<Index>(1, static_cast<Index>(std::floor(data.size() * cfg.holdout_fraction)));
    if (data.size() < h + 1) throw ContractError("distill: synthetic set too small for a held-out slice");
    train = data.slice(0, data.size() - h);
    held = data.slice(data.size() - h, h);
  }
  const auto metric = [&](const Net& s) {
    return post ? holdout_mse(s, teacher, held, 100) : evaluate(s, *validation).top1;
  };

  Net student = student_in;
  student.set_trainable(true);
  Sgd<float> opt(student.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay);
  Plateau plateau(cfg.plateau_factor, cfg.plateau_patience, !post);
  Rng rng(cfg.seed);
  const auto& ids = teacher.targets();

  student.set_trainable(false);
  out.best_metric = metric(student);
  out.final_metric = out.best_metric;
  student.set_trainable(true);

  std::vector<Index> order(train.size());
  std::iota(order.begin(), order.end(), Index{0});
  double lr = cfg.lr;
  for (int epoch = 0; epoch < cfg.max_epochs && lr >= cfg.min_lr; ++epoch) {
    for (Index i = train.size() - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_index(i + 1)]);
    double total = 0.0;
    Index steps = 0;
    for (Index start = 0; start < train.size(); start += cfg.batch) {
      const Index end = std::min(train.size(), start + cfg.batch);
      Dataset b = train.subset({order.begin() + start, order.begin() + end});
      Tensor<float> x(b.images);
      Tensor<float> loss;
      if (post) {
        loss = per_layer_mse_loss(student, teacher, x, cfg.student_mode);
      } else if (cfg.regime == Regime::kFewSample) {
        const auto t = run(teacher, x, Mode::kEval);
        const auto s = run(student, x, cfg.student_mode);
        loss = kd_loss(s, t, b.labels, ids, cfg.alpha_kd, cfg.temperature);
      } else {
        ForwardOptions<float> fo;
        fo.mode = cfg.student_mode;
        loss = cross_entropy(student.forward(x, fo).logits, b.labels);
      }
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        student.set_trainable(false);
        throw TrainingError("distill: non-finite loss", epoch);
      }
      opt.zero_grad();
      backward(loss);
      opt.step();
      total += lv;
      ++steps;
    }
    opt.zero_grad();
    student.set_trainable(false);
    const double m = metric(student);
    out.log.push_back({epoch, total / std::max<Index>(steps, 1), lr, m});
    out.final_metric = m;
    const bool better = post ? m < out.best_metric : m > out.best_metric;
    if (better) {
      out.best_metric = m;
      out.best_epoch = epoch;
      out.student = student;
    }
    student.set_trainable(true);
    if (plateau.observe(m)) {
      lr *= cfg.plateau_factor;
      opt.set_lr(lr);
    }
  }
  student.set_trainable(false);
  out.student.set_trainable(false);
  return out;
}

Json distill_config_json(const DistillConfig& c) {
  return {{"regime", regime_name(c.regime)},
          {"alpha_kd", c.alpha_kd},
          {"temperature", c.temperature},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"lr", c.lr},
          {"plateau_factor", c.plateau_factor},
          {"plateau_patience", c.plateau_patience},
          {"min_lr", c.min_lr},
          {"max_epochs", c.max_epochs},
          {"batch", c.batch},
          {"holdout_fraction", c.holdout_fraction},
          {"student_mode", c.student_mode == Mode::kTrain ? "train" : "eval"},
          {"seed", c.seed}};
}

DistillConfig distill_config_from_json(const Json& j, DistillConfig c) {
  if (j.contains("regime")) c.regime = regime_from_name(j["regime"]);
  if (j.contains("alpha_kd")) c.alpha_kd = j["alpha_kd"];
  if (j.contains("temperature")) c.temperature = j["temperature"];
  if (j.contains("momentum")) c.momentum = j["momentum"];
  if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"];
  if (j.contains("lr")) c.lr = j["lr"];
  if (j.contains("plateau_factor")) c.plateau_factor = j["plateau_factor"];
  if (j.contains("plateau_patience")) c.plateau_patience = j["plateau_patience"];
  if (j.contains("min_lr")) c.min_lr = j["min_lr"];
  if (j.contains("max_epochs")) c.max_epochs = j["max_epochs"];
  if (j.contains("batch")) c.batch = j["batch"];
  if (j.contains("holdout_fraction")) c.holdout_fraction = j["holdout_fraction"];
  if (j.contains("student_mode")) {
    const std::string m = j["student_mode"];
    if (m != "train" && m != "eval") throw ContractError("student_mode must be train or eval");
    c.student_mode = m == "train" ? Mode::kTrain : Mode::kEval;
  }
  if (j.contains("seed")) c.seed = j["seed"];
  if (!(c.alpha_kd >= 0.0 && c.alpha_kd <= 1.0) || !(c.temperature > 0.0))
    throw ContractError("distill config: need 0 <= alpha_kd <= 1 and T_kd > 0");
  return c;
}

}  // namespace svdnas
