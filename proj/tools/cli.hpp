#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "svdnas/datasynth.hpp"
#include "svdnas/distill.hpp"
#include "svdnas/search.hpp"

namespace svdnas::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitNumeric = 3;

// Every knob of a pipeline run. The global seed overrides the per-stage seeds.
struct RunConfig {
  std::uint64_t seed = 0;
  TrainSchedule pretrain;
  SearchConfig search;
  int branches = 1;
  bool relax = false;
  Index search_size = 500;  // train images used to learn theta
  double gamma_lo = 0.3, gamma_hi = 0.9, step = 0.05;
  std::optional<double> tau_proxy;
  SynthConfig synth;
  Index synth_count = 640;
  DistillConfig distill;

  Json to_json() const;
  static RunConfig from_json(const Json& j);
  void apply_seed();
};

// Runs one command; returns the process exit code. Errors go to stderr.
int run(const std::vector<std::string>& args);

}  // namespace svdnas::cli
