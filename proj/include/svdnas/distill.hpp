#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "svdnas/model.hpp"

namespace svdnas {

enum class Regime { kPost, kFewSample, kFull };

std::string regime_name(Regime r);
Regime regime_from_name(const std::string& s);

struct DistillConfig {
  Regime regime = Regime::kPost;
  double alpha_kd = 0.95;
  double temperature = 6.0;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double lr = 1e-3;
  double plateau_factor = 0.1;
  int plateau_patience = 10;
  double min_lr = 1e-4;  // training stops once lr drops below this
  int max_epochs = 200;
  Index batch = 32;
  double holdout_fraction = 0.1;  // synthetic slice used as the post-training plateau signal
  Mode student_mode = Mode::kTrain;  // running buffers are never updated either way
  std::uint64_t seed = 0;
};

// Sum of MSE between matching captured outputs for every id in `ids`.
template <typename T>
Tensor<T> layer_mse_sum(const ForwardResult<T>& student, const ForwardResult<T>& teacher,
                        const std::vector<std::string>& ids) {
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (const auto& id : ids) {
    auto s = student.captured.find(id);
    auto t = teacher.captured.find(id);
    if (s == student.captured.end()) throw ContractError("no student output corresponds to layer " + id);
    if (t == teacher.captured.end()) throw ContractError("no teacher output for layer " + id);
    if (s->second.shape() != t->second.shape())
      throw DimensionError("layer " + id + ": student " + shape_str(s->second.shape()) + " vs teacher " +
                           shape_str(t->second.shape()));
    total = add(total, mse(s->second, t->second.detach()));
  }
  return total;
}

// sum_i MSE + alpha * T^2 * KL(teacher || student) + (1 - alpha) * CE.
template <typename T>
Tensor<T> kd_loss(const ForwardResult<T>& student, const ForwardResult<T>& teacher, const std::vector<int>& labels,
                  const std::vector<std::string>& ids, double alpha, double temperature) {
  if (!(alpha >= 0.0 && alpha <= 1.0) || !(temperature > 0.0))
    throw ContractError("kd_loss: need 0 <= alpha <= 1 and temperature > 0");
  Tensor<T> loss = layer_mse_sum(student, teacher, ids);
  const T t = static_cast<T>(temperature);
  if (alpha > 0.0)
    loss = add(loss, scale(kl_div_softened(teacher.logits.value(), student.logits, t), static_cast<T>(alpha) * t * t));
  if (alpha < 1.0) loss = add(loss, scale(cross_entropy(student.logits, labels), static_cast<T>(1.0 - alpha)));
  return loss;
}

// Teacher runs in eval mode without gradients; ids are the teacher's targets.
Tensor<float> per_layer_mse_loss(const Net& student, const Net& teacher, const Tensor<float>& batch,
                                 Mode student_mode = Mode::kEval);

struct DistillResult {
  Net student;
  std::vector<EpochLog> log;  // metric: held-out MSE (post) or validation top-1
  int best_epoch = -1;        // -1 = the input was returned untouched
  double best_metric = 0.0;
  double final_metric = 0.0;
  Json to_json() const;
};

// `validation` must be labelled for the few-sample and full regimes.
DistillResult finetune(const Net& student, const Net& teacher, const Dataset& data, const Dataset* validation,
                       const DistillConfig& cfg);

Json distill_config_json(const DistillConfig& c);
DistillConfig distill_config_from_json(const Json& j, DistillConfig base = {});

}  // namespace svdnas
