#include "svdnas/costmodel.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace svdnas {

CostReport conv_cost(Index f, Index c, Index kh, Index kw, Index groups, Index out_h, Index out_w, bool bias) {
  if (groups < 1 || f % groups != 0 || c % groups != 0)
    throw ContractError("conv_cost: groups " + std::to_string(groups) + " must divide f=" + std::to_string(f) +
                        " and c=" + std::to_string(c));
  CostReport r;
  const std::int64_t weights = f * (c / groups) * kh * kw;
  r.flops = 2 * weights * out_h * out_w;
  r.params = weights + (bias ? f : 0);
  return r;
}

CostReport conv_cost(const ConvShape& s) {
  return conv_cost(s.f, s.c, s.kh, s.kw, s.groups, s.out_h(), s.out_w(), s.bias);
}

CostReport linear_cost(Index out, Index in, bool bias) {
  return {2 * out * in, out * in + (bias ? out : 0), std::nullopt};
}

CostReport block_cost(const ConvShape& original, const std::vector<BlockConfig>& branches) {
  if (branches.empty() || branches.size() > 2) throw ContractError("block_cost: a block has 1 or 2 branches");
  CostReport total;
  for (std::size_t b = 0; b < branches.size(); ++b) {
    ConvShape orig = original;
    orig.bias = b == 0 && original.bias;
    auto [first, second] = lowrank_shapes(orig, branches[b]);
    total += conv_cost(first);
    total += conv_cost(second);
  }
  if (branches.size() == 2) total.flops += original.f * original.out_h() * original.out_w();
  return total;
}

std::string latency_signature(const ConvShape& s) {
  std::ostringstream os;
  os << "conv," << s.f << ',' << s.c << ',' << s.kh << ',' << s.kw << ',';
  if (s.stride_h == s.stride_w)
    os << s.stride_h;
  else
    os << s.stride_h << 'x' << s.stride_w;
  os << ',' << s.groups << ',' << s.out_h() << ',' << s.out_w();
  return os.str();
}

std::string latency_signature_fc(Index out, Index in) {
  return "fc," + std::to_string(out) + "," + std::to_string(in) + ",1,1,1,1,1,1";
}

LatencyTable::LatencyTable(std::map<std::string, double> entries) {
  for (auto& [k, v] : entries) set(k, v);
}

void LatencyTable::set(const std::string& sig, double ms) {
  if (!(ms > 0.0)) throw ContractError("latency table entry " + sig + " must be positive");
  entries_[sig] = ms;
}

double LatencyTable::lookup(const std::string& sig) const {
  auto it = entries_.find(sig);
  if (it == entries_.end()) throw LookupError("latency table has no entry for signature " + sig);
  return it->second;
}

LatencyTable LatencyTable::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open latency table", path);
  nlohmann::json j;
  try {
    in >> j;
    LatencyTable t;
    for (const auto& e : j.at("entries")) t.set(e.at("sig").get<std::string>(), e.at("ms").get<double>());
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed latency table: ") + e.what(), path);
  } catch (const ContractError& e) {
    throw IoError(e.what(), path);
  }
}

void LatencyTable::save(const std::string& path) const {
  nlohmann::json j;
  j["entries"] = nlohmann::json::array();
  for (const auto& [sig, ms] : entries_) j["entries"].push_back({{"sig", sig}, {"ms", ms}});
  std::ofstream out(path);
  if (!out) throw IoError("cannot write latency table", path);
  out << j.dump(2) << '\n';
}

double block_latency(const ConvShape& original, const std::vector<BlockConfig>& branches, const LatencyTable& table) {
  double ms = 0.0;
  for (const auto& cfg : branches) {
    auto [first, second] = lowrank_shapes(original, cfg);
    ms += table.lookup(latency_signature(first)) + table.lookup(latency_signature(second));
  }
  return ms;
}

std::vector<Index> lrs2_select_ranks(const std::vector<std::vector<double>>& spectra,
                                     const std::vector<std::function<double(Index)>>& cost, double lambda, double mu) {
  if (spectra.size() != cost.size()) throw ContractError("lrs2_select_ranks: one cost function per layer");
  std::vector<Index> ranks;
  for (std::size_t k = 0; k < spectra.size(); ++k) {
    const auto& s = spectra[k];
    const Index full = static_cast<Index>(s.size());
    Index chosen = full;
    for (Index r = 1; r < full; ++r) {
      const double lhs = lambda * (cost[k](r + 1) - cost[k](r)) - 0.5 * mu * s[r] * s[r];
      if (lhs >= 0.0) {
        chosen = r;
        break;
      }
    }
    ranks.push_back(chosen);
  }
  return ranks;
}

}  // namespace svdnas
