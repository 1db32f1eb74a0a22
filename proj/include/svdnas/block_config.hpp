#pragma once

#include <compare>
#include <string>
#include <utility>
#include <vector>

#include "svdnas/ops.hpp"

namespace svdnas {

// Static geometry of one convolution: weight (f, c/groups, kh, kw) applied to
// an (in_h, in_w) feature map.
struct ConvShape {
  Index f = 1, c = 1, kh = 1, kw = 1;
  Index stride_h = 1, stride_w = 1, pad_h = 0, pad_w = 0;
  Index groups = 1;
  Index in_h = 1, in_w = 1;
  bool bias = false;

  Index out_h() const { return conv_out_extent(in_h, kh, stride_h, pad_h); }
  Index out_w() const { return conv_out_extent(in_w, kw, stride_w, pad_w); }
  Conv2dOptions options() const { return {stride_h, stride_w, pad_h, pad_w, groups}; }
  Shape weight_shape() const { return {f, c / groups, kh, kw}; }

  bool operator==(const ConvShape&) const = default;
};

// Kernel extents of the two low-rank layers: (first_h x first_w) then
// (second_h x second_w). Per spatial dimension their product is the original k.
struct KernelSplit {
  Index first_h = 1, first_w = 1, second_h = 1, second_w = 1;

  auto operator<=>(const KernelSplit&) const = default;
  std::string str() const;
};

// One point of the low-rank design space for a single branch.
struct BlockConfig {
  KernelSplit split;
  Index g0 = 1;    // groups of the first low-rank layer (slices channels)
  Index g1 = 1;    // groups of the second low-rank layer (slices filters)
  Index rank = 1;  // singular values kept per slice

  Index max_groups() const { return std::max(g0, g1); }
  // Output channels of the first layer: per-slice factors stacked group-major.
  Index intermediate_channels() const { return rank * max_groups(); }

  auto operator<=>(const BlockConfig&) const = default;
  std::string str() const;
};

// The four splits of a k x k kernel; a single (1,1)+(1,1) split when k == 1.
std::vector<KernelSplit> kernel_splits(Index k);

// Largest rank the sliced matrix of (f, c, k) admits under cfg's split and groups.
Index rank_bound(const BlockConfig& cfg, Index f, Index c);

// Checks every design-space constraint; `why` receives the first violated one.
bool is_valid_config(const BlockConfig& cfg, Index f, Index c, Index k, std::string* why = nullptr);

// Every legal BlockConfig of an (f, c, k, k) layer, ordered by split, g0, g1, rank.
std::vector<BlockConfig> enumerate_space(Index f, Index c, Index k);

// Shapes of the two low-rank convolutions replacing `original`. The layer whose
// kernel exceeds 1 in a spatial dimension carries that dimension's stride and
// padding; when neither does, the first layer carries it.
std::pair<ConvShape, ConvShape> lowrank_shapes(const ConvShape& original, const BlockConfig& cfg);

}  // namespace svdnas
