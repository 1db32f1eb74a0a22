#pragma once

#include <functional>
#include <string>
#include <vector>

#include "svdnas/model.hpp"

namespace svdnas {

inline const std::string kPrunedByFlops = "flops-grid";
inline const std::string kPrunedByAccuracy = "accuracy-proxy";
inline const std::string kPrunedByRelaxFloor = "relaxation-floor";

struct CandidateRecord {
  BlockConfig cfg;
  CostReport cost;         // whole block, including any fixed branches
  double flops_ratio = 0;  // cost.flops / original layer flops
  std::string pruned_by;   // empty when retained
};

// Candidate space of one target layer. `fixed` holds already chosen branches
// (branch 0 when searching the residual branch).
struct LayerSpace {
  std::string id;
  ConvShape shape;
  std::vector<BlockConfig> fixed;
  // When set, the "no new branch" candidate is this block derived from W
  // rather than the layer's current form. Used to undo a rank relaxation.
  std::vector<BlockConfig> fallback;
  std::vector<CandidateRecord> records;

  std::vector<BlockConfig> retained() const;
};

struct LRSpaceTable {
  std::vector<LayerSpace> layers;

  const LayerSpace* find(const std::string& id) const;
  LayerSpace* find(const std::string& id);
  Json to_json() const;
  static LRSpaceTable from_json(const Json& j);
};

// Enumerates every target of `net`. With `fixed` non-empty, the entry for a
// layer id lists the branches its new candidates are appended to.
LRSpaceTable build_space_table(const Net& net, const std::map<std::string, std::vector<BlockConfig>>& fixed = {});

// For every grid point rho in {lo, lo + step, ..., hi}, keeps the candidate
// whose FLOPs ratio is nearest rho (earliest on ties); duplicates removed.
std::vector<BlockConfig> prune_by_flops(const std::vector<BlockConfig>& space,
                                        const std::function<double(const BlockConfig&)>& flops_ratio, double lo,
                                        double hi, double step = 0.05);

// Substitutes `layer_id` alone by each candidate's one-branch block and drops
// candidates whose proxy top-1 falls more than tau_pp percentage points below
// the unmodified network. `degradation_pp` receives the measured drops.
std::vector<BlockConfig> prune_by_accuracy(const std::vector<BlockConfig>& space, const Net& net,
                                           const std::string& layer_id, const Dataset& proxy, double tau_pp,
                                           std::vector<double>* degradation_pp = nullptr);

void apply_flops_pruning(LRSpaceTable& table, double lo, double hi, double step = 0.05);
void apply_accuracy_pruning(LRSpaceTable& table, const Net& net, const Dataset& proxy, double tau_pp);

// Weight of a plain-convolution target.
const ConvLayer<float>& target_conv(const Net& net, const std::string& id);

}  // namespace svdnas
