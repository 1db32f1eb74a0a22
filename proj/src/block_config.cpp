#include "svdnas/block_config.hpp"

#include <algorithm>
#include <sstream>

namespace svdnas {

std::string KernelSplit::str() const {
  std::ostringstream os;
  os << '(' << first_h << ',' << first_w << ")+(" << second_h << ',' << second_w << ')';
  return os.str();
}

std::string BlockConfig::str() const {
  std::ostringstream os;
  os << split.str() << " g0=" << g0 << " g1=" << g1 << " r=" << rank;
  return os.str();
}

std::vector<KernelSplit> kernel_splits(Index k) {
  if (k == 1) return {{1, 1, 1, 1}};
  return {{1, 1, k, k}, {k, k, 1, 1}, {k, 1, 1, k}, {1, k, k, 1}};
}

Index rank_bound(const BlockConfig& cfg, Index f, Index c) {
  const Index rows = (f / cfg.g1) * cfg.split.second_h * cfg.split.second_w;
  const Index cols = (c / cfg.g0) * cfg.split.first_h * cfg.split.first_w;
  return std::min(rows, cols);
}

bool is_valid_config(const BlockConfig& cfg, Index f, Index c, Index k, std::string* why) {
  auto fail = [&](const char* msg) {
    if (why) *why = msg;
    return false;
  };
  const KernelSplit& s = cfg.split;
  if (cfg.g0 < 1 || cfg.g1 < 1 || cfg.rank < 1 || s.first_h < 1 || s.first_w < 1 || s.second_h < 1 || s.second_w < 1)
    return fail("all design parameters must be positive");
  if (s.first_h * s.second_h != k || s.first_w * s.second_w != k) return fail("kernel split does not multiply to k");
  if (std::min(cfg.g0, cfg.g1) != 1) return fail("min(g0, g1) must be 1");
  if (c % cfg.g0 != 0) return fail("g0 must divide c");
  if (f % cfg.g1 != 0) return fail("g1 must divide f");
  const Index weights = cfg.rank * cfg.max_groups() *
                        ((c / cfg.g0) * s.first_h * s.first_w + (f / cfg.g1) * s.second_h * s.second_w);
  if (!(weights < c * f * k * k)) return fail("low-rank weights must be fewer than the original");
  if (cfg.rank > rank_bound(cfg, f, c)) return fail("rank exceeds the sliced matrix rank");
  return true;
}

std::vector<BlockConfig> enumerate_space(Index f, Index c, Index k) {
  std::vector<Index> gc, gf;
  for (Index d = 1; d <= c; ++d)
    if (c % d == 0) gc.push_back(d);
  for (Index d = 1; d <= f; ++d)
    if (f % d == 0) gf.push_back(d);

  std::vector<BlockConfig> out;
  for (const KernelSplit& split : kernel_splits(k)) {
    for (Index g0 : gc) {
      for (Index g1 : gf) {
        if (std::min(g0, g1) != 1) continue;
        BlockConfig cfg{split, g0, g1, 1};
        const Index bound = rank_bound(cfg, f, c);
        for (Index r = 1; r <= bound; ++r) {
          cfg.rank = r;
          // Weight count grows with r, so the first failure ends the scan.
          if (!is_valid_config(cfg, f, c, k)) break;
          out.push_back(cfg);
        }
      }
    }
  }
  return out;
}

std::pair<ConvShape, ConvShape> lowrank_shapes(const ConvShape& original, const BlockConfig& cfg) {
  const KernelSplit& s = cfg.split;
  const Index mid = cfg.intermediate_channels();
  ConvShape first{mid, original.c, s.first_h, s.first_w, 1, 1, 0, 0, cfg.g0, original.in_h, original.in_w, false};
  ConvShape second{original.f, mid, s.second_h, s.second_w, 1, 1, 0, 0, cfg.g1, 0, 0, original.bias};

  const bool vertical_on_second = s.first_h == 1 && s.second_h > 1;
  const bool horizontal_on_second = s.first_w == 1 && s.second_w > 1;
  (vertical_on_second ? second.stride_h : first.stride_h) = original.stride_h;
  (vertical_on_second ? second.pad_h : first.pad_h) = original.pad_h;
  (horizontal_on_second ? second.stride_w : first.stride_w) = original.stride_w;
  (horizontal_on_second ? second.pad_w : first.pad_w) = original.pad_w;
  second.in_h = first.out_h();
  second.in_w = first.out_w();
  return {first, second};
}

}  // namespace svdnas
