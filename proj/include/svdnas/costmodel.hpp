#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "svdnas/block_config.hpp"

namespace svdnas {

// FLOPs count 2 per multiply-accumulate.
struct CostReport {
  std::int64_t flops = 0;
  std::int64_t params = 0;
  std::optional<double> latency_ms;

  CostReport& operator+=(const CostReport& o) {
    flops += o.flops;
    params += o.params;
    if (o.latency_ms) latency_ms = latency_ms.value_or(0.0) + *o.latency_ms;
    return *this;
  }
  bool operator==(const CostReport&) const = default;
};

inline CostReport operator+(CostReport a, const CostReport& b) { return a += b; }

CostReport conv_cost(Index f, Index c, Index kh, Index kw, Index groups, Index out_h, Index out_w, bool bias = false);
CostReport conv_cost(const ConvShape& s);
CostReport linear_cost(Index out, Index in, bool bias);

// Cost of a 1- or 2-branch block replacing `original`. The original bias rides
// on branch 0; a second branch adds one FLOP per output element for the sum.
CostReport block_cost(const ConvShape& original, const std::vector<BlockConfig>& branches);
inline CostReport block_cost(const ConvShape& original, const BlockConfig& cfg) {
  return block_cost(original, std::vector<BlockConfig>{cfg});
}

// Lookup-table keys, e.g. "conv,64,64,3,3,1,1,8,8" or "fc,10,64,1,1,1,1,1,1".
// An asymmetric stride is written "2x1".
std::string latency_signature(const ConvShape& s);
std::string latency_signature_fc(Index out, Index in);

class LatencyTable {
 public:
  LatencyTable() = default;
  explicit LatencyTable(std::map<std::string, double> entries);

  static LatencyTable load(const std::string& path);
  void save(const std::string& path) const;

  // Throws LookupError naming the signature when absent.
  double lookup(const std::string& sig) const;
  bool contains(const std::string& sig) const { return entries_.count(sig) > 0; }
  void set(const std::string& sig, double ms);
  const std::map<std::string, double>& entries() const { return entries_; }

 private:
  std::map<std::string, double> entries_;
};

double block_latency(const ConvShape& original, const std::vector<BlockConfig>& branches, const LatencyTable& table);

// Minimal r in [1, R-1] with lambda*(C(r+1) - C(r)) - mu/2 * s_{r+1}^2 >= 0, per
// layer; full rank R = spectrum length when none qualifies.
std::vector<Index> lrs2_select_ranks(const std::vector<std::vector<double>>& spectra,
                                     const std::vector<std::function<double(Index)>>& cost, double lambda, double mu);

}  // namespace svdnas
