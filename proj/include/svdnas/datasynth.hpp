#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "svdnas/model.hpp"

namespace svdnas {

// Stored running statistics of every BN layer, in network order.
template <typename T>
struct BNTargets {
  std::vector<std::string> ids;
  std::vector<NdArray<T>> mean, std;
};

template <typename T>
BNTargets<T> extract_bn_targets(const Network<T>& net) {
  BNTargets<T> t;
  for (const auto& l : net.layers()) {
    const auto* bn = std::get_if<BatchNormLayer<T>>(&l.op);
    if (!bn) continue;
    t.ids.push_back(l.id);
    t.mean.push_back(bn->running_mean);
    NdArray<T> sd = bn->running_var;
    sd.data() = sd.data().sqrt();
    t.std.push_back(std::move(sd));
  }
  return t;
}

// alpha * [mu_I^2 + (sigma_I - 1)^2]
//   + sum_i w_i sum_f [(mu'_f - mu_f)^2 + (sigma'_f - sigma_f)^2]
// with w_i = 1/f_i when `scaled`. Batch statistics come from a train-mode
// forward that leaves the running buffers untouched.
template <typename T>
Tensor<T> bn_loss(const Tensor<T>& images, const Network<T>& net, const BNTargets<T>& targets, double alpha,
                  bool scaled) {
  if (targets.ids.empty()) throw ContractError("bn_loss: the network has no batch-norm layer");
  ForwardOptions<T> fo;
  fo.mode = Mode::kTrain;
  fo.record_bn_inputs = true;
  auto res = net.forward(images, fo);
  if (res.bn_inputs.size() != targets.ids.size()) throw ContractError("bn_loss: targets do not match the network");

  auto [mu_i, sd_i] = global_moments(images);
  Tensor<T> loss = scale(add(square(mu_i), square(add_scalar(sd_i, T(-1)))), static_cast<T>(alpha));
  for (std::size_t i = 0; i < targets.ids.size(); ++i) {
    const auto& [id, x] = res.bn_inputs[i];
    if (id != targets.ids[i]) throw ContractError("bn_loss: target order differs at " + id);
    NdArray<T> neg_mu = targets.mean[i], neg_sd = targets.std[i];
    neg_mu.data() = -neg_mu.data();
    neg_sd.data() = -neg_sd.data();
    Tensor<T> term = add(sum(square(add_constant(channel_mean(x), neg_mu))),
                         sum(square(add_constant(channel_std(x), neg_sd))));
    if (scaled) term = scale(term, T(1) / static_cast<T>(targets.mean[i].numel()));
    loss = add(loss, term);
  }
  return loss;
}

struct SynthConfig {
  double alpha = 1.0;
  int iterations = 500;
  double lr = 0.25;
  int plateau_patience = 100;
  double plateau_factor = 0.1;
  Index batch = 32;
  bool scaled = true;
  std::uint64_t seed = 0;
};

struct BatchTrace {
  double initial = 0, final = 0;
  std::vector<double> losses;  // every iteration
  bool reached_target = false;  // final <= 10% of initial
};

struct SynthResult {
  Dataset images;
  std::vector<BatchTrace> batches;
  std::vector<std::string> warnings;
};

// ceil(count / batch) independently seeded batches, Gaussian-initialized and
// optimized with Adam under a plateau schedule; the first `count` are kept.
SynthResult generate_synthetic(const Net& net, const SynthConfig& cfg, Index count);

Json synth_config_json(const SynthConfig& c);
SynthConfig synth_config_from_json(const Json& j, SynthConfig base = {});

}  // namespace svdnas
