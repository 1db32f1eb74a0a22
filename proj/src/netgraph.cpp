#include <cmath>
#include <numeric>

#include "svdnas/model.hpp"
#include "svdnas/optim.hpp"

namespace svdnas {

namespace {

Tensor<float> kaiming(Rng& rng, const Shape& shape) {
  const Index fan_in = shape_numel(shape) / shape[0];
  return Tensor<float>(rng.normal_array<float>(shape, std::sqrt(2.0f / static_cast<float>(fan_in))));
}

ConvLayer<float> make_conv(Rng& rng, Index f, Index c, Index k, Index stride, Index in_hw) {
  ConvShape s{f, c, k, k, stride, stride, k / 2, k / 2, 1, in_hw, in_hw, false};
  return {s, kaiming(rng, s.weight_shape()), std::nullopt};
}

BatchNormLayer<float> make_bn(Index c) {
  return {Tensor<float>(NdArray<float>::constant({c}, 1.f)), Tensor<float>(NdArray<float>({c})),
          NdArray<float>({c}), NdArray<float>::constant({c}, 1.f), 0.1f};
}

}  // namespace

Net make_desk_model(std::uint64_t seed) {
  Rng rng(seed);
  Net net({3, kImageSize, kImageSize}, kDatasetClasses);
  net.add("conv1", make_conv(rng, 16, 3, 3, 1, 16));
  net.add("bn1", make_bn(16));
  net.add("relu1", ReluLayer{});
  net.add("conv2", make_conv(rng, 16, 16, 3, 1, 16));
  net.add("bn2", make_bn(16));
  net.add("relu2", ReluLayer{});
  net.add("conv3", make_conv(rng, 16, 16, 3, 1, 16));
  net.add("bn3", make_bn(16));
  net.add("add3", AddLayer{}, {"bn3", "relu1"});
  net.add("relu3", ReluLayer{});
  net.add("conv4", make_conv(rng, 32, 16, 3, 2, 16));
  net.add("bn4", make_bn(32));
  net.add("relu4", ReluLayer{});
  net.add("conv5", make_conv(rng, 64, 32, 3, 2, 8));
  net.add("bn5", make_bn(64));
  net.add("relu5", ReluLayer{});
  net.add("conv6", make_conv(rng, 64, 64, 3, 1, 4));
  net.add("bn6", make_bn(64));
  net.add("add6", AddLayer{}, {"bn6", "relu5"});
  net.add("relu6", ReluLayer{});
  net.add("pool", PoolLayer{PoolKind::kAvg, 4, 4});
  net.add("flatten", FlattenLayer{});
  const float bound = 1.f / std::sqrt(64.f);
  net.add("fc", LinearLayer<float>{Tensor<float>(rng.uniform_array<float>({kDatasetClasses, 64}, -bound, bound)),
                                   Tensor<float>(rng.uniform_array<float>({kDatasetClasses}, -bound, bound))});
  net.set_targets({"conv2", "conv3", "conv4", "conv5", "conv6"});
  return net;
}

Accuracy evaluate(const Net& net, const Dataset& data, Index batch) {
  if (data.size() == 0) throw ContractError("evaluate: empty dataset");
  if (!data.labelled()) throw ContractError("evaluate: dataset has no labels");
  Index h1 = 0, h5 = 0;
  for (Index start = 0; start < data.size(); start += batch) {
    const Index n = std::min(batch, data.size() - start);
    auto res = net.forward(Tensor<float>(data.batch_images(start, n)));
    auto [a, b] = topk_hits(res.logits.value(), data.labels, start);
    h1 += a;
    h5 += b;
  }
  const double n = static_cast<double>(data.size());
  return {h1 / n, h5 / n, data.size()};
}

CostReport model_cost(const Net& net) {
  CostReport total;
  for (const auto& l : net.layers()) {
    if (const auto* c = std::get_if<ConvLayer<float>>(&l.op)) {
      total += conv_cost(c->shape);
    } else if (const auto* b = std::get_if<BuildingBlock<float>>(&l.op)) {
      total += block_cost(b->original, b->configs());
    } else if (const auto* fc = std::get_if<LinearLayer<float>>(&l.op)) {
      total += linear_cost(fc->weight.dim(0), fc->weight.dim(1), fc->bias.has_value());
    } else if (std::holds_alternative<SuperBlock<float>>(l.op)) {
      throw ContractError("model_cost: layer " + l.id + " is still a super block");
    }
  }
  return total;
}

double model_latency(const Net& net, const LatencyTable& table) {
  double ms = 0.0;
  for (const auto& l : net.layers()) {
    if (const auto* c = std::get_if<ConvLayer<float>>(&l.op)) {
      ms += table.lookup(latency_signature(c->shape));
    } else if (const auto* b = std::get_if<BuildingBlock<float>>(&l.op)) {
      ms += block_latency(b->original, b->configs(), table);
    } else if (const auto* fc = std::get_if<LinearLayer<float>>(&l.op)) {
      ms += table.lookup(latency_signature_fc(fc->weight.dim(0), fc->weight.dim(1)));
    } else if (std::holds_alternative<SuperBlock<float>>(l.op)) {
      throw ContractError("model_latency: layer " + l.id + " is still a super block");
    }
  }
  return ms;
}

std::vector<EpochLog> pretrain(Net& net, const Dataset& train, const Dataset& validation, const TrainSchedule& s) {
  if (train.size() == 0 || !train.labelled()) throw ContractError("pretrain: labelled training data required");
  Rng rng(s.seed);
  net.set_trainable(true);
  Sgd<float> opt(net.parameters(), s.lr, s.momentum, s.weight_decay);
  std::vector<Index> order(train.size());
  std::iota(order.begin(), order.end(), Index{0});
  std::vector<EpochLog> log;
  for (int epoch = 0; epoch < s.epochs; ++epoch) {
    double lr = s.lr;
    if (epoch >= s.epochs / 2) lr *= 0.1;
    if (epoch >= (3 * s.epochs) / 4) lr *= 0.1;
    opt.set_lr(lr);
    for (Index i = train.size() - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_index(i + 1)]);
    double total = 0.0;
    Index batches = 0;
    for (Index start = 0; start + s.batch <= train.size(); start += s.batch) {
      Dataset b = train.subset({order.begin() + start, order.begin() + start + s.batch});
      ForwardOptions<float> fo;
      fo.mode = Mode::kTrain;
      auto res = net.forward(Tensor<float>(b.images), fo);
      auto loss = cross_entropy(res.logits, b.labels);
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        net.set_trainable(false);
        throw TrainingError("pretrain: non-finite loss", epoch);
      }
      opt.zero_grad();
      backward(loss);
      opt.step();
      update_running_stats(net, res.bn_stats);
      total += lv;
      ++batches;
    }
    net.set_trainable(false);
    const double acc = validation.size() ? evaluate(net, validation).top1 : 0.0;
    net.set_trainable(true);
    log.push_back({epoch, total / std::max<Index>(batches, 1), lr, acc});
  }
  opt.zero_grad();
  net.set_trainable(false);
  return log;
}

// ---------------------------------------------------------------------------
// Model files.

Json config_json(const BlockConfig& c) {
  return {{"split", {c.split.first_h, c.split.first_w, c.split.second_h, c.split.second_w}},
          {"g0", c.g0},
          {"g1", c.g1},
          {"rank", c.rank}};
}

BlockConfig config_from_json(const Json& j) {
  const auto s = j.at("split").get<std::vector<Index>>();
  if (s.size() != 4) throw ContractError("kernel split needs 4 extents");
  return {{s[0], s[1], s[2], s[3]}, j.at("g0").get<Index>(), j.at("g1").get<Index>(), j.at("rank").get<Index>()};
}

Json conv_shape_json(const ConvShape& s) {
  return {{"f", s.f},           {"c", s.c},           {"kh", s.kh},         {"kw", s.kw},
          {"stride", {s.stride_h, s.stride_w}},     {"pad", {s.pad_h, s.pad_w}}, {"groups", s.groups},
          {"in", {s.in_h, s.in_w}}, {"bias", s.bias}};
}

ConvShape conv_shape_from_json(const Json& j) {
  ConvShape s;
  s.f = j.at("f");
  s.c = j.at("c");
  s.kh = j.at("kh");
  s.kw = j.at("kw");
  s.stride_h = j.at("stride").at(0);
  s.stride_w = j.at("stride").at(1);
  s.pad_h = j.at("pad").at(0);
  s.pad_w = j.at("pad").at(1);
  s.groups = j.at("groups");
  s.in_h = j.at("in").at(0);
  s.in_w = j.at("in").at(1);
  s.bias = j.at("bias");
  return s;
}

namespace {

struct Writer {
  Json table = Json::array();
  std::vector<float> blob;

  void put(const std::string& name, const NdArray<float>& a) {
    table.push_back({{"name", name}, {"offset", blob.size()}, {"shape", a.shape()}});
    blob.insert(blob.end(), a.ptr(), a.ptr() + a.numel());
  }
};

struct Reader {
  std::map<std::string, std::pair<std::size_t, Shape>> index;
  std::vector<float> blob;
  std::string path;

  NdArray<float> get(const std::string& name, const Shape& expect) const {
    auto it = index.find(name);
    if (it == index.end()) throw IoError("model file lacks tensor " + name, path);
    const auto& [off, shape] = it->second;
    if (shape != expect)
      throw IoError("tensor " + name + " has shape " + shape_str(shape) + ", expected " + shape_str(expect), path);
    const Index n = shape_numel(shape);
    if (off + n > blob.size()) throw IoError("tensor " + name + " runs past the blob end", path);
    return NdArray<float>(shape, std::vector<float>(blob.begin() + off, blob.begin() + off + n));
  }
};

Json block_json(const BuildingBlock<float>& b, const std::string& prefix, Writer& w) {
  Json j{{"original", conv_shape_json(b.original)}, {"branches", Json::array()}};
  for (std::size_t i = 0; i < b.branches.size(); ++i) {
    const auto& br = b.branches[i];
    const std::string p = prefix + ".b" + std::to_string(i);
    w.put(p + ".w0", br.w0.value());
    w.put(p + ".w1", br.w1.value());
    if (br.bias) w.put(p + ".bias", br.bias->value());
    j["branches"].push_back({{"config", config_json(br.cfg)}, {"bias", br.bias.has_value()}});
  }
  return j;
}

BuildingBlock<float> block_from_json(const Json& j, const std::string& prefix, const Reader& r) {
  BuildingBlock<float> b{conv_shape_from_json(j.at("original")), {}};
  for (std::size_t i = 0; i < j.at("branches").size(); ++i) {
    const Json& bj = j["branches"][i];
    const std::string p = prefix + ".b" + std::to_string(i);
    const BlockConfig cfg = config_from_json(bj.at("config"));
    ConvShape orig = b.original;
    orig.bias = bj.at("bias").get<bool>();
    auto [first, second] = lowrank_shapes(orig, cfg);
    LowRankBranch<float> br{cfg, first, second, Tensor<float>(r.get(p + ".w0", first.weight_shape())),
                            Tensor<float>(r.get(p + ".w1", second.weight_shape())), std::nullopt};
    if (orig.bias) br.bias = Tensor<float>(r.get(p + ".bias", {orig.f}));
    b.branches.push_back(std::move(br));
  }
  return b;
}

Json conv_json(const ConvLayer<float>& c, const std::string& prefix, Writer& w) {
  w.put(prefix + ".weight", c.weight.value());
  if (c.bias) w.put(prefix + ".bias", c.bias->value());
  return conv_shape_json(c.shape);
}

ConvLayer<float> conv_from_json(const Json& j, const std::string& prefix, const Reader& r) {
  ConvShape s = conv_shape_from_json(j);
  ConvLayer<float> c{s, Tensor<float>(r.get(prefix + ".weight", s.weight_shape())), std::nullopt};
  if (s.bias) c.bias = Tensor<float>(r.get(prefix + ".bias", {s.f}));
  return c;
}

const char* pool_name(PoolKind k) { return k == PoolKind::kMax ? "max" : "avg"; }

}  // namespace

void save_model(const Net& net, const std::string& path) {
  Writer w;
  Json layers = Json::array();
  for (const auto& l : net.layers()) {
    Json j{{"id", l.id}, {"inputs", l.inputs}};
    std::visit(
        [&](const auto& o) {
          using O = std::decay_t<decltype(o)>;
          if constexpr (std::is_same_v<O, ConvLayer<float>>) {
            j["kind"] = "conv";
            j["conv"] = conv_json(o, l.id, w);
          } else if constexpr (std::is_same_v<O, BatchNormLayer<float>>) {
            j["kind"] = "batchnorm";
            j["channels"] = o.gamma.numel();
            j["momentum"] = o.momentum;
            w.put(l.id + ".gamma", o.gamma.value());
            w.put(l.id + ".beta", o.beta.value());
            w.put(l.id + ".running_mean", o.running_mean);
            w.put(l.id + ".running_var", o.running_var);
          } else if constexpr (std::is_same_v<O, ReluLayer>) {
            j["kind"] = "relu";
          } else if constexpr (std::is_same_v<O, PoolLayer>) {
            j["kind"] = "pool";
            j["pool"] = pool_name(o.kind);
            j["kernel"] = o.kernel;
            j["stride"] = o.stride;
          } else if constexpr (std::is_same_v<O, LinearLayer<float>>) {
            j["kind"] = "fc";
            j["out"] = o.weight.dim(0);
            j["in"] = o.weight.dim(1);
            j["bias"] = o.bias.has_value();
            w.put(l.id + ".weight", o.weight.value());
            if (o.bias) w.put(l.id + ".bias", o.bias->value());
          } else if constexpr (std::is_same_v<O, AddLayer>) {
            j["kind"] = "add";
          } else if constexpr (std::is_same_v<O, FlattenLayer>) {
            j["kind"] = "flatten";
          } else if constexpr (std::is_same_v<O, BuildingBlock<float>>) {
            j["kind"] = "block";
            j["block"] = block_json(o, l.id, w);
          } else {
            j["kind"] = "superblock";
            j["original"] = conv_shape_json(o.original);
            j["temperature"] = o.temperature;
            w.put(l.id + ".theta", o.theta.value());
            Json cands = Json::array();
            for (std::size_t i = 0; i < o.candidates.size(); ++i) {
              const std::string p = l.id + ".cand" + std::to_string(i);
              if (const auto* c = std::get_if<ConvLayer<float>>(&o.candidates[i]))
                cands.push_back({{"kind", "conv"}, {"conv", conv_json(*c, p, w)}});
              else
                cands.push_back({{"kind", "block"}, {"block", block_json(std::get<BuildingBlock<float>>(o.candidates[i]), p, w)}});
            }
            j["candidates"] = cands;
          }
        },
        l.op);
    layers.push_back(j);
  }
  Json costs = Json::object();
  for (const auto& [id, c] : net.original_costs()) costs[id] = {{"flops", c.flops}, {"params", c.params}};
  Json m{{"format", "svdnas-model-1"},
         {"input_shape", net.input_shape()},
         {"classes", net.classes()},
         {"targets", net.targets()},
         {"original_costs", costs},
         {"layers", layers},
         {"tensors", w.table},
         {"blob", "float32-le"},
         {"blob_floats", w.blob.size()}};
  write_json(path, m);
  write_f32(path + ".bin", w.blob);
}

Net load_model(const std::string& path) {
  const Json m = read_json(path);
  try {
    if (m.at("format") != "svdnas-model-1") throw IoError("unknown model format", path);
    Reader r;
    r.path = path;
    r.blob = read_f32(path + ".bin", m.at("blob_floats").get<std::size_t>());
    for (const auto& t : m.at("tensors"))
      r.index[t.at("name").get<std::string>()] = {t.at("offset").get<std::size_t>(), t.at("shape").get<Shape>()};

    Net net(m.at("input_shape").get<Shape>(), m.at("classes").get<Index>());
    for (const auto& l : m.at("layers")) {
      const std::string id = l.at("id"), kind = l.at("kind");
      const auto inputs = l.at("inputs").get<std::vector<std::string>>();
      LayerOp<float> op;
      if (kind == "conv") {
        op = conv_from_json(l.at("conv"), id, r);
      } else if (kind == "batchnorm") {
        const Index c = l.at("channels");
        op = BatchNormLayer<float>{Tensor<float>(r.get(id + ".gamma", {c})), Tensor<float>(r.get(id + ".beta", {c})),
                                   r.get(id + ".running_mean", {c}), r.get(id + ".running_var", {c}),
                                   l.at("momentum").get<float>()};
      } else if (kind == "relu") {
        op = ReluLayer{};
      } else if (kind == "pool") {
        op = PoolLayer{l.at("pool") == "max" ? PoolKind::kMax : PoolKind::kAvg, l.at("kernel"), l.at("stride")};
      } else if (kind == "fc") {
        const Index out = l.at("out"), in = l.at("in");
        LinearLayer<float> fc{Tensor<float>(r.get(id + ".weight", {out, in})), std::nullopt};
        if (l.at("bias").get<bool>()) fc.bias = Tensor<float>(r.get(id + ".bias", {out}));
        op = fc;
      } else if (kind == "add") {
        op = AddLayer{};
      } else if (kind == "flatten") {
        op = FlattenLayer{};
      } else if (kind == "block") {
        op = block_from_json(l.at("block"), id, r);
      } else if (kind == "superblock") {
        SuperBlock<float> sb{conv_shape_from_json(l.at("original")), {}, Tensor<float>(), l.at("temperature")};
        const auto& cands = l.at("candidates");
        for (std::size_t i = 0; i < cands.size(); ++i) {
          const std::string p = id + ".cand" + std::to_string(i);
          if (cands[i].at("kind") == "conv")
            sb.candidates.push_back(conv_from_json(cands[i].at("conv"), p, r));
          else
            sb.candidates.push_back(block_from_json(cands[i].at("block"), p, r));
        }
        sb.theta = Tensor<float>(r.get(id + ".theta", {static_cast<Index>(cands.size())}));
        op = std::move(sb);
      } else {
        throw IoError("unknown layer kind " + kind, path);
      }
      net.add(id, std::move(op), inputs);
    }
    std::map<std::string, CostReport> costs;
    for (const auto& [id, c] : m.at("original_costs").items())
      costs[id] = {c.at("flops").get<std::int64_t>(), c.at("params").get<std::int64_t>(), std::nullopt};
    net.restore_targets(m.at("targets").get<std::vector<std::string>>(), costs);
    return net;
  } catch (const Json::exception& e) {
    throw IoError(std::string("malformed model manifest (") + e.what() + ")", path);
  } catch (const DimensionError& e) {
    throw IoError(std::string("inconsistent model (") + e.what() + ")", path);
  } catch (const ContractError& e) {
    throw IoError(std::string("inconsistent model (") + e.what() + ")", path);
  }
}

}  // namespace svdnas
