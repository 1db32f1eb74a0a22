#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "svdnas/dataset.hpp"
#include "svdnas/io.hpp"
#include "svdnas/netgraph.hpp"

namespace svdnas {

using Net = Network<float>;

// 6-conv residual network for 3x16x16 inputs and 10 classes; conv2..conv6
// are the compression targets.
Net make_desk_model(std::uint64_t seed);

// Top-1 / top-5 of an eval-mode forward. Throws ContractError on an empty set.
Accuracy evaluate(const Net& net, const Dataset& data, Index batch = 250);

// Model FLOPs/params: conv and fc layers plus block adds; latency when a
// table is given.
CostReport model_cost(const Net& net);
double model_latency(const Net& net, const LatencyTable& table);

struct TrainSchedule {
  int epochs = 6;
  Index batch = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
};

struct EpochLog {
  int epoch = 0;
  double loss = 0, lr = 0, metric = 0;
};

// Cross-entropy SGD training with step decay at 50% and 75% of the epochs.
// BN running statistics are updated in train mode.
std::vector<EpochLog> pretrain(Net& net, const Dataset& train, const Dataset& validation, const TrainSchedule& s);

// Manifest JSON at `path`, float blob at path + ".bin".
void save_model(const Net& net, const std::string& path);
Net load_model(const std::string& path);

Json config_json(const BlockConfig& cfg);
BlockConfig config_from_json(const Json& j);
Json conv_shape_json(const ConvShape& s);
ConvShape conv_shape_from_json(const Json& j);

}  // namespace svdnas
