#include "svdnas/lrspace.hpp"

#include <cmath>
#include <limits>

namespace svdnas {

std::vector<BlockConfig> LayerSpace::retained() const {
  std::vector<BlockConfig> out;
  for (const auto& r : records)
    if (r.pruned_by.empty()) out.push_back(r.cfg);
  return out;
}

const LayerSpace* LRSpaceTable::find(const std::string& id) const {
  for (const auto& l : layers)
    if (l.id == id) return &l;
  return nullptr;
}

LayerSpace* LRSpaceTable::find(const std::string& id) {
  for (auto& l : layers)
    if (l.id == id) return &l;
  return nullptr;
}

Json LRSpaceTable::to_json() const {
  Json j{{"layers", Json::array()}};
  for (const auto& l : layers) {
    Json lj{{"id", l.id}, {"shape", conv_shape_json(l.shape)}, {"fixed", Json::array()}, {"candidates", Json::array()}};
    for (const auto& f : l.fixed) lj["fixed"].push_back(config_json(f));
    if (!l.fallback.empty()) {
      lj["fallback"] = Json::array();
      for (const auto& f : l.fallback) lj["fallback"].push_back(config_json(f));
    }
    Index kept = 0;
    for (const auto& r : l.records) {
      Json c = config_json(r.cfg);
      c["kernel_split"] = r.cfg.split.str();
      c["flops"] = r.cost.flops;
      c["params"] = r.cost.params;
      c["flops_ratio"] = r.flops_ratio;
      c["pruned_by"] = r.pruned_by.empty() ? Json(nullptr) : Json(r.pruned_by);
      kept += r.pruned_by.empty();
      lj["candidates"].push_back(c);
    }
    lj["enumerated"] = l.records.size();
    lj["retained"] = kept;
    j["layers"].push_back(lj);
  }
  return j;
}

LRSpaceTable LRSpaceTable::from_json(const Json& j) {
  LRSpaceTable t;
  for (const auto& lj : j.at("layers")) {
    LayerSpace l;
    l.id = lj.at("id");
    l.shape = conv_shape_from_json(lj.at("shape"));
    for (const auto& f : lj.at("fixed")) l.fixed.push_back(config_from_json(f));
    if (lj.contains("fallback"))
      for (const auto& f : lj.at("fallback")) l.fallback.push_back(config_from_json(f));
    for (const auto& c : lj.at("candidates")) {
      CandidateRecord r;
      r.cfg = config_from_json(c);
      r.cost = {c.at("flops").get<std::int64_t>(), c.at("params").get<std::int64_t>(), std::nullopt};
      r.flops_ratio = c.at("flops_ratio");
      if (!c.at("pruned_by").is_null()) r.pruned_by = c.at("pruned_by");
      std::string why;
      if (!is_valid_config(r.cfg, l.shape.f, l.shape.c, l.shape.kh, &why))
        throw ContractError("LR-space entry " + r.cfg.str() + " of " + l.id + " is invalid: " + why);
      l.records.push_back(r);
    }
    t.layers.push_back(std::move(l));
  }
  return t;
}

const ConvLayer<float>& target_conv(const Net& net, const std::string& id) {
  const auto* c = std::get_if<ConvLayer<float>>(&net.layer(id).op);
  if (!c) throw ContractError("layer " + id + " is not a plain convolution");
  return *c;
}

LRSpaceTable build_space_table(const Net& net, const std::map<std::string, std::vector<BlockConfig>>& fixed) {
  LRSpaceTable t;
  for (const auto& id : net.targets()) {
    LayerSpace l;
    l.id = id;
    l.shape = net.target_shape(id);
    if (l.shape.kh != l.shape.kw || l.shape.groups != 1)
      throw ContractError("target " + id + " must be a square, ungrouped convolution");
    if (auto it = fixed.find(id); it != fixed.end()) l.fixed = it->second;
    const double orig = static_cast<double>(conv_cost(l.shape).flops);
    for (const auto& cfg : enumerate_space(l.shape.f, l.shape.c, l.shape.kh)) {
      auto branches = l.fixed;
      branches.push_back(cfg);
      CandidateRecord r{cfg, block_cost(l.shape, branches), 0.0, {}};
      r.flops_ratio = static_cast<double>(r.cost.flops) / orig;
      l.records.push_back(r);
    }
    t.layers.push_back(std::move(l));
  }
  return t;
}

std::vector<BlockConfig> prune_by_flops(const std::vector<BlockConfig>& space,
                                        const std::function<double(const BlockConfig&)>& flops_ratio, double lo,
                                        double hi, double step) {
  if (!(lo > 0.0 && lo <= hi && hi < 1.0 && step > 0.0))
    throw ContractError("prune_by_flops: need 0 < lo <= hi < 1 and step > 0");
  std::vector<BlockConfig> out;
  if (space.empty()) return out;
  std::vector<double> ratios;
  for (const auto& c : space) ratios.push_back(flops_ratio(c));
  const int points = static_cast<int>(std::floor((hi - lo) / step + 1e-9)) + 1;
  for (int i = 0; i < points; ++i) {
    const double rho = lo + i * step;
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < space.size(); ++j) {
      const double d = std::abs(ratios[j] - rho);
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    if (std::find(out.begin(), out.end(), space[best]) == out.end()) out.push_back(space[best]);
  }
  return out;
}

std::vector<BlockConfig> prune_by_accuracy(const std::vector<BlockConfig>& space, const Net& net,
                                           const std::string& layer_id, const Dataset& proxy, double tau_pp,
                                           std::vector<double>* degradation_pp) {
  const auto& conv = target_conv(net, layer_id);
  const double base = evaluate(net, proxy).top1;
  std::vector<BlockConfig> out;
  if (degradation_pp) degradation_pp->clear();
  for (const auto& cfg : space) {
    auto fac = derive_weights(conv.weight.value(), cfg);
    Net trial = substitute(net, layer_id, make_block<float>(conv.shape, {fac}, conv.bias));
    const double drop = (base - evaluate(trial, proxy).top1) * 100.0;
    if (degradation_pp) degradation_pp->push_back(drop);
    if (!(drop > tau_pp)) out.push_back(cfg);
  }
  return out;
}

void apply_flops_pruning(LRSpaceTable& table, double lo, double hi, double step) {
  for (auto& l : table.layers) {
    std::vector<BlockConfig> live = l.retained();
    std::map<BlockConfig, double> ratio;
    for (const auto& r : l.records) ratio[r.cfg] = r.flops_ratio;
    const auto keep = prune_by_flops(live, [&](const BlockConfig& c) { return ratio.at(c); }, lo, hi, step);
    for (auto& r : l.records)
      if (r.pruned_by.empty() && std::find(keep.begin(), keep.end(), r.cfg) == keep.end()) r.pruned_by = kPrunedByFlops;
  }
}

void apply_accuracy_pruning(LRSpaceTable& table, const Net& net, const Dataset& proxy, double tau_pp) {
  for (auto& l : table.layers) {
    if (!l.fixed.empty()) throw ContractError("accuracy pruning applies to first-branch spaces only");
    const auto keep = prune_by_accuracy(l.retained(), net, l.id, proxy, tau_pp);
    for (auto& r : l.records)
      if (r.pruned_by.empty() && std::find(keep.begin(), keep.end(), r.cfg) == keep.end())
        r.pruned_by = kPrunedByAccuracy;
  }
}

}  // namespace svdnas
