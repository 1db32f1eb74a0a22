#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "svdnas/lrspace.hpp"
#include "svdnas/optim.hpp"

namespace svdnas {

enum class Objective { kFlops, kLatency };

struct SearchConfig {
  double beta = 16.0;
  Objective objective = Objective::kFlops;
  int epochs_branch0 = 100;
  int epochs_branch1 = 50;
  double lr = 0.01;
  double adam_beta1 = 0.9, adam_beta2 = 0.999;
  double weight_decay = 5e-4;
  double temperature = 5.0;
  double temperature_decay = 0.965;
  Index batch = 100;
  std::uint64_t seed = 0;
};

struct SearchState {
  std::vector<std::string> layers;
  double temperature = 5.0;
  int epoch = 0;
  std::vector<double> loss_history;
  std::shared_ptr<Adam<float>> optimizer;  // over the supernet's theta tensors
};

// l_ce * (log(cost_hat) / log(cost_orig))^beta.
template <typename T>
Tensor<T> nas_loss(const Tensor<T>& l_ce, const Tensor<T>& cost_hat, double cost_orig, double beta) {
  if (!(cost_orig > 1.0) || !(cost_hat.item() > T(1)))
    throw ContractError("nas_loss: costs must exceed 1 so their logarithms are positive");
  if (beta == 0.0) return l_ce;
  Tensor<T> ratio = scale(log(cost_hat), static_cast<T>(1.0 / std::log(cost_orig)));
  return mul(l_ce, pow(ratio, static_cast<T>(beta)));
}

// constant + sum_b sum_j weights[b][j] * costs[b][j].
template <typename T>
Tensor<T> expected_supernet_cost(const std::vector<std::vector<double>>& costs, const std::vector<Tensor<T>>& weights,
                                 double constant = 0.0) {
  if (costs.size() != weights.size()) throw ContractError("expected_supernet_cost: one weight vector per block");
  Tensor<T> total = Tensor<T>::scalar(static_cast<T>(constant));
  for (std::size_t b = 0; b < costs.size(); ++b) {
    if (static_cast<Index>(costs[b].size()) != weights[b].numel())
      throw ContractError("expected_supernet_cost: weights and costs differ in length");
    VectorX<T> c(costs[b].size());
    for (std::size_t j = 0; j < costs[b].size(); ++j) c[j] = static_cast<T>(costs[b][j]);
    total = add(total, dot_constant(weights[b], c));
  }
  return total;
}

// Two distinct indices drawn without replacement with probability p.
std::pair<Index, Index> sample_pair(const VectorX<double>& p, Rng& rng);

// Replaces every target listed in `table` with a super block: candidate 0 is
// the current layer, the rest are blocks derived from the retained configs.
// Residual spaces (non-empty `fixed`) derive the new branch from
// W - F(existing branches), with W taken from `original`.
Net build_supernet(const Net& net, const LRSpaceTable& table, const Net& original, const SearchConfig& cfg = {});
inline Net build_supernet(const Net& net, const LRSpaceTable& table, const SearchConfig& cfg = {}) {
  return build_supernet(net, table, net, cfg);
}

// Objective cost of a candidate or of every non-superblock layer.
double candidate_metric(const Candidate<float>& c, Objective obj, const LatencyTable* table);
double fixed_metric(const Net& net, Objective obj, const LatencyTable* table);
double model_metric(const Net& net, Objective obj, const LatencyTable* table);

SearchState init_search_state(const Net& supernet, const SearchConfig& cfg);

// One pass over `data` in batches; only theta is trained.
void search_epoch(SearchState& state, Net& supernet, const Dataset& data, const SearchConfig& cfg, Rng& rng,
                  double cost_orig, const LatencyTable* table = nullptr);

struct Selection {
  Net net;
  std::map<std::string, Index> winner;                      // candidate index
  std::map<std::string, std::vector<BlockConfig>> configs;  // empty = original layer kept
};

// Argmax theta per super block; ties go to the cheapest candidate by FLOPs.
Selection select_final(const Net& supernet);

struct SearchRun {
  SearchState state;
  Net supernet;
};

SearchRun run_search(const Net& net, const LRSpaceTable& table, const Net& original, const Dataset& data,
                     const SearchConfig& cfg, int epochs, const LatencyTable* table_ms = nullptr);

// Smallest rank drop whose FLOPs saving reaches `fraction` of the original
// layer's FLOPs; the result is clamped to >= 1.
Index relaxed_rank(const ConvShape& original, const BlockConfig& cfg, double fraction = 0.20);

struct Relaxation {
  double fraction = 0.20;
};

struct IterativeOptions {
  int branches = 1;
  std::optional<Relaxation> relax;
  double gamma_lo = 0.3, gamma_hi = 0.9, step = 0.05;  // residual-space FLOPs grid
};

struct IterativeResult {
  Net net;
  std::map<std::string, std::vector<BlockConfig>> configs;
  std::vector<SearchState> passes;
  std::vector<Json> checkpoints;
};

IterativeResult iterative_search(const Net& net, const LRSpaceTable& table, const Dataset& data,
                                 const SearchConfig& cfg, const IterativeOptions& opt,
                                 const LatencyTable* table_ms = nullptr);

// Data-free construction of a compressed model from explicit per-layer
// configs; each later branch is derived from the residual of the earlier ones.
Net derive_model(const Net& net, const std::map<std::string, std::vector<BlockConfig>>& configs);

Json configs_json(const std::map<std::string, std::vector<BlockConfig>>& configs);
std::map<std::string, std::vector<BlockConfig>> configs_from_json(const Json& j);

// ||W - sum_b F_b||_F per target, W from `original`.
std::map<std::string, double> weight_space_error(const Net& compressed, const Net& original);

// Table covering every layer of `net` and every enumerated candidate of
// `space`: a fixed per-layer overhead plus a MAC term that is slower for
// grouped layers, so latency and FLOPs rank candidates differently.
LatencyTable synthetic_latency_table(const Net& net, const LRSpaceTable& space, double overhead_ms = 0.02,
                                     double ms_per_mmac = 1.0, double group_penalty = 0.25);

Json search_config_json(const SearchConfig& c);
SearchConfig search_config_from_json(const Json& j, SearchConfig base = {});
Json checkpoint_json(const SearchState& state, const Net& supernet, const SearchConfig& cfg);

}  // namespace svdnas
