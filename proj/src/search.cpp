#include "svdnas/search.hpp"

#include <algorithm>
#include <limits>
#include <numeric>


namespace svdnas {

namespace {

// Latencies enter the loss in microseconds so typical tables stay above 1.
constexpr double kLatencyScale = 1000.0;

double l2(const NdArray<float>& a) { return a.data().cast<double>().matrix().norm(); }

double layer_latency(const LayerOp<float>& op, const LatencyTable& t) {
  if (const auto* c = std::get_if<ConvLayer<float>>(&op)) return t.lookup(latency_signature(c->shape));
  if (const auto* b = std::get_if<BuildingBlock<float>>(&op)) return block_latency(b->original, b->configs(), t);
  if (const auto* fc = std::get_if<LinearLayer<float>>(&op))
    return t.lookup(latency_signature_fc(fc->weight.dim(0), fc->weight.dim(1)));
  return 0.0;
}

double layer_flops(const LayerOp<float>& op) {
  if (const auto* c = std::get_if<ConvLayer<float>>(&op)) return static_cast<double>(conv_cost(c->shape).flops);
  if (const auto* b = std::get_if<BuildingBlock<float>>(&op))
    return static_cast<double>(block_cost(b->original, b->configs()).flops);
  if (const auto* fc = std::get_if<LinearLayer<float>>(&op))
    return static_cast<double>(linear_cost(fc->weight.dim(0), fc->weight.dim(1), fc->bias.has_value()).flops);
  return 0.0;
}

const LatencyTable& need_table(const LatencyTable* t) {
  if (!t) throw ContractError("latency objective needs a latency table");
  return *t;
}

}  // namespace

double candidate_metric(const Candidate<float>& c, Objective obj, const LatencyTable* table) {
  LayerOp<float> op = std::visit([](const auto& o) -> LayerOp<float> { return o; }, c);
  return obj == Objective::kFlops ? layer_flops(op) : kLatencyScale * layer_latency(op, need_table(table));
}

double fixed_metric(const Net& net, Objective obj, const LatencyTable* table) {
  double total = 0.0;
  for (const auto& l : net.layers()) {
    if (std::holds_alternative<SuperBlock<float>>(l.op)) continue;
    total += obj == Objective::kFlops ? layer_flops(l.op) : kLatencyScale * layer_latency(l.op, need_table(table));
  }
  return total;
}

double model_metric(const Net& net, Objective obj, const LatencyTable* table) {
  for (const auto& l : net.layers())
    if (std::holds_alternative<SuperBlock<float>>(l.op)) throw ContractError("model_metric: network holds super blocks");
  return fixed_metric(net, obj, table);
}

std::pair<Index, Index> sample_pair(const VectorX<double>& p, Rng& rng) {
  const Index n = p.size();
  if (n < 2) throw ContractError("sample_pair: need at least two candidates");
  auto draw = [&](Index skip) {
    const double total = p.sum() - (skip >= 0 ? p[skip] : 0.0);
    double u = rng.uniform() * total;
    Index last = -1;
    for (Index i = 0; i < n; ++i) {
      if (i == skip) continue;
      last = i;
      if (u < p[i]) return i;
      u -= p[i];
    }
    return last;
  };
  const Index a = draw(-1);
  return {a, draw(a)};
}

namespace {

BuildingBlock<float> fallback_block(const LayerSpace& space, const ConvLayer<float>& orig) {
  NdArray<float> e = orig.weight.value();
  std::vector<LowRankFactors<float>> facs;
  for (const auto& fc : space.fallback) {
    facs.push_back(derive_weights(e, fc));
    e = residual_error(e, facs.back());
  }
  return make_block<float>(space.shape, facs, orig.bias);
}

}  // namespace

Net build_supernet(const Net& net, const LRSpaceTable& table, const Net& original, const SearchConfig& cfg) {
  Net out = net;
  for (const auto& space : table.layers) {
    const auto configs = space.retained();
    const auto& orig_conv = target_conv(original, space.id);
    if (configs.empty()) {  // the layer keeps only its current form
      if (!space.fallback.empty()) out = substitute(out, space.id, fallback_block(space, orig_conv));
      continue;
    }
    const auto& current = net.layer(space.id).op;

    SuperBlock<float> sb;
    sb.original = space.shape;
    sb.temperature = static_cast<float>(cfg.temperature);
    if (const auto* c = std::get_if<ConvLayer<float>>(&current)) {
      if (!space.fixed.empty()) throw ContractError("residual space for " + space.id + " but the layer has no block");
      sb.candidates.push_back(ConvLayer<float>{c->shape, clone_param(c->weight), detail::clone_opt(c->bias)});
      for (const auto& bc : configs)
        sb.candidates.push_back(make_block<float>(space.shape, {derive_weights(orig_conv.weight.value(), bc)}, orig_conv.bias));
    } else if (const auto* b = std::get_if<BuildingBlock<float>>(&current)) {
      if (b->configs() != space.fixed)
        throw ContractError("residual space for " + space.id + " does not match the layer's existing branches");
      NdArray<float> residual = orig_conv.weight.value();
      for (const auto& br : b->branches)
        residual = residual_error(residual, LowRankFactors<float>{br.cfg, br.w0.value(), br.w1.value()});
      if (space.fallback.empty()) {
        sb.candidates.push_back(std::get<BuildingBlock<float>>(detail::clone_op<float>(LayerOp<float>(*b))));
      } else {
        sb.candidates.push_back(fallback_block(space, orig_conv));
      }
      for (const auto& bc : configs) {
        auto blk = std::get<BuildingBlock<float>>(detail::clone_op<float>(LayerOp<float>(*b)));
        blk.branches.push_back(make_branch(space.shape, derive_weights(residual, bc), OptTensor<float>{}));
        sb.candidates.push_back(std::move(blk));
      }
    } else {
      throw ContractError("build_supernet: layer " + space.id + " is already a super block");
    }
    for (auto& cand : sb.candidates)
      std::visit(
          [](auto& o) {
            using O = std::decay_t<decltype(o)>;
            if constexpr (std::is_same_v<O, ConvLayer<float>>) {
              o.weight.set_requires_grad(false);
              if (o.bias) o.bias->set_requires_grad(false);
            } else {
              for (auto& br : o.branches) {
                br.w0.set_requires_grad(false);
                br.w1.set_requires_grad(false);
                if (br.bias) br.bias->set_requires_grad(false);
              }
            }
          },
          cand);
    sb.theta = Tensor<float>(NdArray<float>({static_cast<Index>(sb.candidates.size())}), true);
    out = substitute(out, space.id, std::move(sb));
  }
  return out;
}

SearchState init_search_state(const Net& supernet, const SearchConfig& cfg) {
  SearchState s;
  s.temperature = cfg.temperature;
  for (const auto& l : supernet.layers())
    if (std::holds_alternative<SuperBlock<float>>(l.op)) s.layers.push_back(l.id);
  return s;
}

void search_epoch(SearchState& state, Net& supernet, const Dataset& data, const SearchConfig& cfg, Rng& rng,
                  double cost_orig, const LatencyTable* table) {
  if (!data.labelled() || data.size() == 0) throw ContractError("search_epoch: labelled data required");
  std::vector<Tensor<float>> thetas;
  std::vector<std::vector<double>> cand_costs;
  std::vector<SuperBlock<float>*> blocks;
  for (const auto& id : state.layers) {
    auto& sb = std::get<SuperBlock<float>>(supernet.layer(id).op);
    sb.theta.set_requires_grad(true);
    sb.temperature = static_cast<float>(state.temperature);
    thetas.push_back(sb.theta);
    blocks.push_back(&sb);
    std::vector<double> c;
    for (const auto& cand : sb.candidates) c.push_back(candidate_metric(cand, cfg.objective, table));
    cand_costs.push_back(std::move(c));
  }
  const double constant = fixed_metric(supernet, cfg.objective, table);

  if (!state.optimizer)
    state.optimizer = std::make_shared<Adam<float>>(thetas, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.weight_decay);
  auto& opt = state.optimizer;

  double total = 0.0;
  Index steps = 0;
  for (Index start = 0; start < data.size(); start += cfg.batch) {
    const Index n = std::min(cfg.batch, data.size() - start);
    std::map<std::string, Mixture<float>> mixtures;
    std::vector<std::vector<double>> pair_costs;
    std::vector<Tensor<float>> pair_weights;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const auto& sb = *blocks[b];
      const Index nc = static_cast<Index>(sb.candidates.size());
      Mixture<float> mix;
      if (nc == 1) {
        mix = {{0}, Tensor<float>(NdArray<float>::constant({1}, 1.f))};
      } else {
        VectorX<double> logits = sb.theta.value().data().cast<double>();
        VectorX<double> p = (logits - logits.maxCoeff()).exp();
        p /= p.sum();
        auto [i, j] = sample_pair(p, rng);
        Tensor<float> g = gumbel_softmax(sb.theta, static_cast<float>(state.temperature), rng);
        Tensor<float> pair = gather(g, {i, j});
        mix = {{i, j}, div(pair, sum(pair))};
      }
      std::vector<double> pc;
      for (Index c : mix.candidates) pc.push_back(cand_costs[b][c]);
      pair_costs.push_back(std::move(pc));
      pair_weights.push_back(mix.weights);
      mixtures.emplace(state.layers[b], std::move(mix));
    }
    ForwardOptions<float> fo;
    fo.mode = Mode::kEval;
    fo.mixtures = &mixtures;
    auto res = supernet.forward(Tensor<float>(data.batch_images(start, n)), fo);
    Tensor<float> l_ce = cross_entropy(res.logits, data.batch_labels(start, n));
    Tensor<float> cost_hat = expected_supernet_cost(pair_costs, pair_weights, constant);
    Tensor<float> loss = nas_loss(l_ce, cost_hat, cost_orig, cfg.beta);
    const double lv = loss.item();
    if (!std::isfinite(lv)) throw TrainingError("search: non-finite loss", state.epoch);
    opt->zero_grad();
    backward(loss);
    opt->step();
    opt->zero_grad();
    total += lv;
    ++steps;
  }
  state.loss_history.push_back(total / static_cast<double>(std::max<Index>(steps, 1)));
  ++state.epoch;
  state.temperature *= cfg.temperature_decay;
  for (auto* sb : blocks) sb->temperature = static_cast<float>(state.temperature);
}

Selection select_final(const Net& supernet) {
  Selection sel{supernet, {}, {}};
  for (const auto& l : supernet.layers()) {
    const auto* sb = std::get_if<SuperBlock<float>>(&l.op);
    if (!sb) continue;
    const auto& th = sb->theta.value();
    Index best = 0;
    std::int64_t best_flops = candidate_cost(sb->candidates[0]).flops;
    for (Index i = 1; i < th.numel(); ++i) {
      const std::int64_t fl = candidate_cost(sb->candidates[i]).flops;
      if (th[i] > th[best] || (th[i] == th[best] && fl < best_flops)) {
        best = i;
        best_flops = fl;
      }
    }
    sel.winner[l.id] = best;
    const auto& win = sb->candidates[best];
    LayerOp<float> op = std::visit([](const auto& o) -> LayerOp<float> { return o; }, win);
    op = detail::clone_op<float>(op);
    if (const auto* b = std::get_if<BuildingBlock<float>>(&op))
      sel.configs[l.id] = b->configs();
    else
      sel.configs[l.id] = {};
    sel.net.layer(l.id).op = std::move(op);
  }
  sel.net.set_trainable(false);
  return sel;
}

SearchRun run_search(const Net& net, const LRSpaceTable& table, const Net& original, const Dataset& data,
                     const SearchConfig& cfg, int epochs, const LatencyTable* table_ms) {
  SearchRun run{SearchState{}, build_supernet(net, table, original, cfg)};
  run.state = init_search_state(run.supernet, cfg);
  const double orig = model_metric(original, cfg.objective, table_ms);
  Rng rng(cfg.seed);
  for (int e = 0; e < epochs && !run.state.layers.empty(); ++e)
    search_epoch(run.state, run.supernet, data, cfg, rng, orig, table_ms);
  return run;
}

Index relaxed_rank(const ConvShape& original, const BlockConfig& cfg, double fraction) {
  const double target = fraction * static_cast<double>(conv_cost(original).flops);
  const std::int64_t at_r = block_cost(original, cfg).flops;
  for (Index r = cfg.rank - 1; r >= 1; --r) {
    BlockConfig c = cfg;
    c.rank = r;
    if (static_cast<double>(at_r - block_cost(original, c).flops) >= target) return r;
  }
  return 1;
}

IterativeResult iterative_search(const Net& net, const LRSpaceTable& table, const Dataset& data,
                                 const SearchConfig& cfg, const IterativeOptions& opt, const LatencyTable* table_ms) {
  if (opt.branches < 1 || opt.branches > 2) throw ContractError("iterative_search: 1 or 2 branches");
  IterativeResult res;
  SearchRun pass0 = run_search(net, table, net, data, cfg, cfg.epochs_branch0, table_ms);
  res.checkpoints.push_back(checkpoint_json(pass0.state, pass0.supernet, cfg));
  Selection sel = select_final(pass0.supernet);
  res.passes.push_back(pass0.state);
  res.net = std::move(sel.net);
  res.configs = sel.configs;

  // layer -> (unrelaxed configs, their weight-space error)
  std::map<std::string, std::pair<std::vector<BlockConfig>, double>> unrelaxed;
  if (opt.relax) {
    for (auto& [id, cfgs] : res.configs) {
      if (cfgs.empty()) continue;
      auto& blk = std::get<BuildingBlock<float>>(res.net.layer(id).op);
      auto& br = blk.branches[0];
      const Index r = relaxed_rank(blk.original, br.cfg, opt.relax->fraction);
      if (r == br.cfg.rank) continue;
      const LowRankFactors<float> full{br.cfg, br.w0.value(), br.w1.value()};
      unrelaxed[id] = {cfgs, l2(residual_error(target_conv(net, id).weight.value(), full))};
      auto fac = truncate_rank(full, r);
      br = make_branch(blk.original, fac, br.bias);
      cfgs[0] = br.cfg;
    }
  }

  if (opt.branches == 2) {
    std::map<std::string, std::vector<BlockConfig>> fixed;
    for (const auto& [id, cfgs] : res.configs)
      if (!cfgs.empty()) fixed[id] = cfgs;
    LRSpaceTable t1 = build_space_table(net, fixed);
    std::erase_if(t1.layers, [&](const LayerSpace& l) { return !fixed.count(l.id); });
    apply_flops_pruning(t1, opt.gamma_lo, opt.gamma_hi, opt.step);
    // A relaxed layer may fall back to its unrelaxed block, and a new branch
    // has to beat that block in weight space to stay in the race.
    for (auto& l : t1.layers) {
      auto it = unrelaxed.find(l.id);
      if (it == unrelaxed.end()) continue;
      const auto& [cfgs, err] = it->second;
      l.fallback = cfgs;
      NdArray<float> e = target_conv(net, l.id).weight.value();
      for (const auto& fc : l.fixed) e = residual_error(e, derive_weights(e, fc));
      for (auto& rec : l.records) {
        if (!rec.pruned_by.empty()) continue;
        if (l2(residual_error(e, derive_weights(e, rec.cfg))) >= err - 1e-6 * std::max(1.0, err))
          rec.pruned_by = kPrunedByRelaxFloor;
      }
    }
    SearchConfig c1 = cfg;
    c1.seed = cfg.seed + 1;
    SearchRun pass1 = run_search(res.net, t1, net, data, c1, cfg.epochs_branch1, table_ms);
    res.checkpoints.push_back(checkpoint_json(pass1.state, pass1.supernet, c1));
    Selection s1 = select_final(pass1.supernet);
    res.passes.push_back(pass1.state);
    res.net = std::move(s1.net);
    for (const auto& [id, cfgs] : s1.configs) res.configs[id] = cfgs;
    for (const auto& [id, u] : unrelaxed)  // covers layers whose residual space pruned to nothing
      res.configs[id] = std::get<BuildingBlock<float>>(res.net.layer(id).op).configs();
  }
  res.net.set_trainable(false);
  return res;
}

Net derive_model(const Net& net, const std::map<std::string, std::vector<BlockConfig>>& configs) {
  Net out = net;
  for (const auto& [id, cfgs] : configs) {
    if (cfgs.empty()) continue;
    const auto& conv = target_conv(net, id);
    NdArray<float> residual = conv.weight.value();
    std::vector<LowRankFactors<float>> facs;
    for (const auto& c : cfgs) {
      facs.push_back(derive_weights(residual, c));
      residual = residual_error(residual, facs.back());
    }
    out = substitute(out, id, make_block<float>(conv.shape, facs, conv.bias));
  }
  return out;
}

Json configs_json(const std::map<std::string, std::vector<BlockConfig>>& configs) {
  Json j = Json::object();
  for (const auto& [id, cfgs] : configs) {
    j[id] = Json::array();
    for (const auto& c : cfgs) j[id].push_back(config_json(c));
  }
  return j;
}

std::map<std::string, std::vector<BlockConfig>> configs_from_json(const Json& j) {
  std::map<std::string, std::vector<BlockConfig>> out;
  for (const auto& [id, arr] : j.items()) {
    auto& v = out[id];
    for (const auto& c : arr) v.push_back(config_from_json(c));
  }
  return out;
}

std::map<std::string, double> weight_space_error(const Net& compressed, const Net& original) {
  std::map<std::string, double> out;
  for (const auto& id : original.targets()) {
    const auto& w = target_conv(original, id).weight.value();
    const auto& op = compressed.layer(id).op;
    if (const auto* c = std::get_if<ConvLayer<float>>(&op)) {
      out[id] = (c->weight.value().data() - w.data()).cast<double>().matrix().norm();
      continue;
    }
    const auto* b = std::get_if<BuildingBlock<float>>(&op);
    if (!b) throw ContractError("weight_space_error: " + id + " is neither a convolution nor a block");
    Eigen::ArrayXd err = w.data().cast<double>();
    for (const auto& br : b->branches)
      err -= reconstruct(LowRankFactors<float>{br.cfg, br.w0.value(), br.w1.value()}).data().cast<double>();
    out[id] = err.matrix().norm();
  }
  return out;
}

LatencyTable synthetic_latency_table(const Net& net, const LRSpaceTable& space, double overhead_ms,
                                     double ms_per_mmac, double group_penalty) {
  LatencyTable t;
  auto put = [&](const ConvShape& s) {
    const double macs = static_cast<double>(conv_cost(s).flops) / 2.0;
    t.set(latency_signature(s),
          overhead_ms + ms_per_mmac * 1e-6 * macs * (1.0 + group_penalty * static_cast<double>(s.groups - 1)));
  };
  for (const auto& l : net.layers()) {
    if (const auto* c = std::get_if<ConvLayer<float>>(&l.op)) {
      put(c->shape);
    } else if (const auto* fc = std::get_if<LinearLayer<float>>(&l.op)) {
      const double macs = static_cast<double>(fc->weight.numel());
      t.set(latency_signature_fc(fc->weight.dim(0), fc->weight.dim(1)), overhead_ms + ms_per_mmac * 1e-6 * macs);
    } else if (const auto* b = std::get_if<BuildingBlock<float>>(&l.op)) {
      put(b->original);
      for (const auto& br : b->branches) {
        put(br.first);
        put(br.second);
      }
    }
  }
  for (const auto& l : space.layers) {
    put(l.shape);
    auto add = [&](const BlockConfig& c) {
      auto [a, b] = lowrank_shapes(l.shape, c);
      put(a);
      put(b);
    };
    for (const auto& c : l.fixed) add(c);
    for (const auto& r : l.records) add(r.cfg);
  }
  return t;
}

Json search_config_json(const SearchConfig& c) {
  return {{"beta", c.beta},
          {"objective", c.objective == Objective::kFlops ? "flops" : "latency"},
          {"epochs_branch0", c.epochs_branch0},
          {"epochs_branch1", c.epochs_branch1},
          {"lr", c.lr},
          {"adam_betas", {c.adam_beta1, c.adam_beta2}},
          {"weight_decay", c.weight_decay},
          {"temperature", c.temperature},
          {"temperature_decay", c.temperature_decay},
          {"batch", c.batch},
          {"seed", c.seed}};
}

SearchConfig search_config_from_json(const Json& j, SearchConfig c) {
  if (j.contains("beta")) c.beta = j["beta"];
  if (j.contains("objective")) {
    const std::string o = j["objective"];
    if (o != "flops" && o != "latency") throw ContractError("objective must be flops or latency");
    c.objective = o == "flops" ? Objective::kFlops : Objective::kLatency;
  }
  if (j.contains("epochs_branch0")) c.epochs_branch0 = j["epochs_branch0"];
  if (j.contains("epochs_branch1")) c.epochs_branch1 = j["epochs_branch1"];
  if (j.contains("lr")) c.lr = j["lr"];
  if (j.contains("adam_betas")) {
    c.adam_beta1 = j["adam_betas"].at(0);
    c.adam_beta2 = j["adam_betas"].at(1);
  }
  if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"];
  if (j.contains("temperature")) c.temperature = j["temperature"];
  if (j.contains("temperature_decay")) c.temperature_decay = j["temperature_decay"];
  if (j.contains("batch")) c.batch = j["batch"];
  if (j.contains("seed")) c.seed = j["seed"];
  if (c.epochs_branch0 < 1 || c.epochs_branch1 < 1 || !(c.temperature > 0) || c.batch < 1)
    throw ContractError("search config: epochs >= 1, temperature > 0 and batch >= 1 required");
  return c;
}

Json checkpoint_json(const SearchState& state, const Net& supernet, const SearchConfig& cfg) {
  Json layers = Json::array();
  for (const auto& id : state.layers) {
    const auto& sb = std::get<SuperBlock<float>>(supernet.layer(id).op);
    Json cands = Json::array();
    for (Index i = 0; i < static_cast<Index>(sb.candidates.size()); ++i) {
      const auto& c = sb.candidates[i];
      Json cj{{"theta", sb.theta.value()[i]}, {"flops", candidate_cost(c).flops}, {"params", candidate_cost(c).params}};
      if (const auto* b = std::get_if<BuildingBlock<float>>(&c)) {
        cj["kind"] = "block";
        cj["branches"] = Json::array();
        for (const auto& bc : b->configs()) cj["branches"].push_back(config_json(bc));
      } else {
        cj["kind"] = "original";
      }
      cands.push_back(cj);
    }
    layers.push_back({{"id", id}, {"candidates", cands}});
  }
  return {{"config", search_config_json(cfg)},
          {"epoch", state.epoch},
          {"temperature", state.temperature},
          {"loss_history", state.loss_history},
          {"layers", layers}};
}

}  // namespace svdnas
