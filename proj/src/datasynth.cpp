#include "svdnas/datasynth.hpp"

#include "svdnas/optim.hpp"

namespace svdnas {

SynthResult generate_synthetic(const Net& net, const SynthConfig& cfg, Index count) {
  if (cfg.iterations < 1 || cfg.batch < 1) throw ContractError("synth: iterations and batch must be >= 1");
  if (count < 0) throw ContractError("synth: negative count");
  const Shape& in = net.input_shape();
  SynthResult out;
  out.images.images = NdArray<float>({count, in[0], in[1], in[2]});
  if (count == 0) return out;

  Net frozen = net;
  frozen.set_trainable(false);
  const auto targets = extract_bn_targets(frozen);
  const Index batches = (count + cfg.batch - 1) / cfg.batch;
  const Index per = in[0] * in[1] * in[2];
  for (Index b = 0; b < batches; ++b) {
    Rng rng(cfg.seed * 0x100000001b3ULL + static_cast<std::uint64_t>(b) + 1);
    Tensor<float> images(rng.normal_array<float>({cfg.batch, in[0], in[1], in[2]}), true);
    Adam<float> opt({images}, cfg.lr);
    Plateau plateau(cfg.plateau_factor, cfg.plateau_patience, false);
    BatchTrace trace;
    for (int it = 0; it < cfg.iterations; ++it) {
      Tensor<float> loss = bn_loss(images, frozen, targets, cfg.alpha, cfg.scaled);
      const double lv = loss.item();
      if (!std::isfinite(lv)) throw TrainingError("synth: non-finite bn loss in batch " + std::to_string(b), it);
      if (it == 0) trace.initial = lv;
      trace.losses.push_back(lv);
      opt.zero_grad();
      backward(loss);
      opt.step();
      if (plateau.observe(lv)) opt.set_lr(opt.lr() * plateau.factor());
    }
    opt.zero_grad();
    trace.final = bn_loss(images.detach(), frozen, targets, cfg.alpha, cfg.scaled).item();
    trace.reached_target = trace.final <= 0.1 * trace.initial;
    if (!trace.reached_target)
      out.warnings.push_back("batch " + std::to_string(b) + ": bn loss " + std::to_string(trace.final) +
                             " is above 10% of its initial " + std::to_string(trace.initial));
    const Index keep = std::min(cfg.batch, count - b * cfg.batch);
    out.images.images.data().segment(b * cfg.batch * per, keep * per) = images.value().data().head(keep * per);
    out.batches.push_back(std::move(trace));
  }
  return out;
}

Json synth_config_json(const SynthConfig& c) {
  return {{"alpha", c.alpha},
          {"iterations", c.iterations},
          {"lr", c.lr},
          {"plateau_patience", c.plateau_patience},
          {"plateau_factor", c.plateau_factor},
          {"batch", c.batch},
          {"scaled", c.scaled},
          {"seed", c.seed}};
}

SynthConfig synth_config_from_json(const Json& j, SynthConfig c) {
  if (j.contains("alpha")) c.alpha = j["alpha"];
  if (j.contains("iterations")) c.iterations = j["iterations"];
  if (j.contains("lr")) c.lr = j["lr"];
  if (j.contains("plateau_patience")) c.plateau_patience = j["plateau_patience"];
  if (j.contains("plateau_factor")) c.plateau_factor = j["plateau_factor"];
  if (j.contains("batch")) c.batch = j["batch"];
  if (j.contains("scaled")) c.scaled = j["scaled"];
  if (j.contains("seed")) c.seed = j["seed"];
  if (c.iterations < 1 || c.batch < 1) throw ContractError("synth config: iterations and batch must be >= 1");
  return c;
}

}  // namespace svdnas
