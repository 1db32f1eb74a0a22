#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "svdnas/costmodel.hpp"
#include "svdnas/lowrank.hpp"
#include "svdnas/random.hpp"

namespace svdnas {

enum class Mode { kTrain, kEval };

template <typename T>
using OptTensor = std::optional<Tensor<T>>;

template <typename T>
struct ConvLayer {
  ConvShape shape;
  Tensor<T> weight;
  OptTensor<T> bias;
};

template <typename T>
struct BatchNormLayer {
  Tensor<T> gamma, beta;
  NdArray<T> running_mean, running_var;
  T momentum = T(0.1);
};

struct ReluLayer {};
struct AddLayer {};
struct FlattenLayer {};

struct PoolLayer {
  PoolKind kind = PoolKind::kAvg;
  Index kernel = 2, stride = 2;
};

template <typename T>
struct LinearLayer {
  Tensor<T> weight;  // (out, in)
  OptTensor<T> bias;
};

template <typename T>
struct LowRankBranch {
  BlockConfig cfg;
  ConvShape first, second;
  Tensor<T> w0, w1;
  OptTensor<T> bias;  // on the second layer; branch 0 only
};

// One or two low-rank branches summed, standing in for `original`.
template <typename T>
struct BuildingBlock {
  ConvShape original;
  std::vector<LowRankBranch<T>> branches;

  std::vector<BlockConfig> configs() const {
    std::vector<BlockConfig> out;
    for (const auto& b : branches) out.push_back(b.cfg);
    return out;
  }
};

template <typename T>
using Candidate = std::variant<ConvLayer<T>, BuildingBlock<T>>;

// Search-time container: candidate 0 is the layer being replaced (the
// original convolution on a first search).
template <typename T>
struct SuperBlock {
  ConvShape original;
  std::vector<Candidate<T>> candidates;
  Tensor<T> theta;
  T temperature = T(5);
};

template <typename T>
using LayerOp = std::variant<ConvLayer<T>, BatchNormLayer<T>, ReluLayer, PoolLayer, LinearLayer<T>, AddLayer,
                             FlattenLayer, BuildingBlock<T>, SuperBlock<T>>;

inline const std::string kInputId = "input";

template <typename T>
struct Layer {
  std::string id;
  std::vector<std::string> inputs;
  LayerOp<T> op;
};

// Per-superblock mixing: only `candidates` are evaluated, weighted by `weights`.
template <typename T>
struct Mixture {
  std::vector<Index> candidates;
  Tensor<T> weights;
};

template <typename T>
struct ForwardOptions {
  Mode mode = Mode::kEval;
  bool capture = false;
  bool record_bn_inputs = false;
  const std::map<std::string, Mixture<T>>* mixtures = nullptr;
};

template <typename T>
struct BatchStats {
  std::string id;
  NdArray<T> mean, var;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;
  std::map<std::string, Tensor<T>> captured;  // conv-like layer outputs
  std::vector<std::pair<std::string, Tensor<T>>> bn_inputs;
  std::vector<BatchStats<T>> bn_stats;        // train mode only
};

template <typename T>
Tensor<T> clone_param(const Tensor<T>& t) {
  return Tensor<T>(t.value(), t.requires_grad());
}

namespace detail {

template <typename T>
OptTensor<T> clone_opt(const OptTensor<T>& t) {
  return t ? OptTensor<T>(clone_param(*t)) : std::nullopt;
}

template <typename T>
Candidate<T> clone_candidate(const Candidate<T>& c);

template <typename T>
LayerOp<T> clone_op(const LayerOp<T>& op) {
  return std::visit(
      [](const auto& o) -> LayerOp<T> {
        using O = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<O, ConvLayer<T>>) {
          return ConvLayer<T>{o.shape, clone_param(o.weight), clone_opt(o.bias)};
        } else if constexpr (std::is_same_v<O, BatchNormLayer<T>>) {
          return BatchNormLayer<T>{clone_param(o.gamma), clone_param(o.beta), o.running_mean, o.running_var, o.momentum};
        } else if constexpr (std::is_same_v<O, LinearLayer<T>>) {
          return LinearLayer<T>{clone_param(o.weight), clone_opt(o.bias)};
        } else if constexpr (std::is_same_v<O, BuildingBlock<T>>) {
          BuildingBlock<T> b{o.original, {}};
          for (const auto& br : o.branches)
            b.branches.push_back({br.cfg, br.first, br.second, clone_param(br.w0), clone_param(br.w1), clone_opt(br.bias)});
          return b;
        } else if constexpr (std::is_same_v<O, SuperBlock<T>>) {
          SuperBlock<T> s{o.original, {}, clone_param(o.theta), o.temperature};
          for (const auto& c : o.candidates) s.candidates.push_back(clone_candidate<T>(c));
          return s;
        } else {
          return o;
        }
      },
      op);
}

template <typename T>
Candidate<T> clone_candidate(const Candidate<T>& c) {
  return std::visit([](const auto& o) -> Candidate<T> { return std::get<std::decay_t<decltype(o)>>(clone_op<T>(LayerOp<T>(o))); }, c);
}

template <typename T>
Tensor<T> run_conv(const ConvLayer<T>& c, const Tensor<T>& x) {
  return conv2d(x, c.weight, c.bias, c.shape.options());
}

template <typename T>
Tensor<T> run_block(const BuildingBlock<T>& b, const Tensor<T>& x) {
  Tensor<T> out;
  for (std::size_t i = 0; i < b.branches.size(); ++i) {
    const auto& br = b.branches[i];
    Tensor<T> mid = conv2d(x, br.w0, std::nullopt, br.first.options());
    Tensor<T> y = conv2d(mid, br.w1, br.bias, br.second.options());
    out = i == 0 ? y : add(out, y);
  }
  return out;
}

template <typename T>
Tensor<T> run_candidate(const Candidate<T>& c, const Tensor<T>& x) {
  if (const auto* conv = std::get_if<ConvLayer<T>>(&c)) return run_conv(*conv, x);
  return run_block(std::get<BuildingBlock<T>>(c), x);
}

}  // namespace detail

template <typename T>
const ConvShape& candidate_shape(const Candidate<T>& c) {
  if (const auto* conv = std::get_if<ConvLayer<T>>(&c)) return conv->shape;
  return std::get<BuildingBlock<T>>(c).original;
}

template <typename T>
CostReport candidate_cost(const Candidate<T>& c) {
  if (const auto* conv = std::get_if<ConvLayer<T>>(&c)) return conv_cost(conv->shape);
  const auto& b = std::get<BuildingBlock<T>>(c);
  return block_cost(b.original, b.configs());
}

// Builds the two-stage block of a single factorization. The original bias,
// when given, lands on the second layer.
template <typename T>
LowRankBranch<T> make_branch(const ConvShape& original, const LowRankFactors<T>& fac, const OptTensor<T>& bias) {
  ConvShape orig = original;
  orig.bias = bias.has_value();
  auto [first, second] = lowrank_shapes(orig, fac.cfg);
  return {fac.cfg, first, second, Tensor<T>(fac.first), Tensor<T>(fac.second), detail::clone_opt(bias)};
}

template <typename T>
class Network {
 public:
  Network() = default;
  Network(Shape input_shape, Index classes) : input_shape_(std::move(input_shape)), classes_(classes) {}

  Network(const Network& o)
      : input_shape_(o.input_shape_), classes_(o.classes_), targets_(o.targets_), original_costs_(o.original_costs_) {
    for (const auto& l : o.layers_) layers_.push_back({l.id, l.inputs, detail::clone_op<T>(l.op)});
  }
  Network& operator=(const Network& o) {
    if (this != &o) *this = Network(o);
    return *this;
  }
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  const Shape& input_shape() const { return input_shape_; }
  Index classes() const { return classes_; }
  const std::vector<Layer<T>>& layers() const { return layers_; }
  std::vector<Layer<T>>& mutable_layers() { return layers_; }

  // Appends a layer; inputs default to the previous layer (or the network input).
  Layer<T>& add(std::string id, LayerOp<T> op, std::vector<std::string> inputs = {}) {
    if (id == kInputId || index_of(id) >= 0) throw ContractError("duplicate layer id " + id);
    if (inputs.empty()) inputs.push_back(layers_.empty() ? kInputId : layers_.back().id);
    for (const auto& in : inputs)
      if (in != kInputId && index_of(in) < 0) throw ContractError("layer " + id + " reads unknown layer " + in);
    layers_.push_back({std::move(id), std::move(inputs), std::move(op)});
    return layers_.back();
  }

  std::ptrdiff_t index_of(const std::string& id) const {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (layers_[i].id == id) return static_cast<std::ptrdiff_t>(i);
    return -1;
  }
  const Layer<T>& layer(const std::string& id) const {
    const auto i = index_of(id);
    if (i < 0) throw LookupError("no layer " + id);
    return layers_[i];
  }
  Layer<T>& layer(const std::string& id) {
    const auto i = index_of(id);
    if (i < 0) throw LookupError("no layer " + id);
    return layers_[i];
  }

  // Marks conv layers as compression targets and records their original cost.
  void set_targets(std::vector<std::string> ids) {
    targets_.clear();
    original_costs_.clear();
    for (const auto& id : ids) {
      const auto* conv = std::get_if<ConvLayer<T>>(&layer(id).op);
      if (!conv) throw ContractError("target " + id + " is not a plain convolution");
      original_costs_[id] = conv_cost(conv->shape);
    }
    targets_ = std::move(ids);
  }
  void restore_targets(std::vector<std::string> ids, std::map<std::string, CostReport> costs) {
    targets_ = std::move(ids);
    original_costs_ = std::move(costs);
  }
  const std::vector<std::string>& targets() const { return targets_; }
  const std::map<std::string, CostReport>& original_costs() const { return original_costs_; }

  // Geometry of a target as it was before any substitution.
  const ConvShape& target_shape(const std::string& id) const {
    const auto& op = layer(id).op;
    if (const auto* c = std::get_if<ConvLayer<T>>(&op)) return c->shape;
    if (const auto* b = std::get_if<BuildingBlock<T>>(&op)) return b->original;
    if (const auto* s = std::get_if<SuperBlock<T>>(&op)) return s->original;
    throw ContractError("layer " + id + " is not convolution-like");
  }

  // Trainable tensors: weights, biases, BN affine terms, block factors.
  // Superblock candidates and theta are excluded.
  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    auto push = [&](const Tensor<T>& t) { out.push_back(t); };
    auto push_opt = [&](const OptTensor<T>& t) {
      if (t) out.push_back(*t);
    };
    for (const auto& l : layers_) {
      std::visit(
          [&](const auto& o) {
            using O = std::decay_t<decltype(o)>;
            if constexpr (std::is_same_v<O, ConvLayer<T>>) {
              push(o.weight);
              push_opt(o.bias);
            } else if constexpr (std::is_same_v<O, BatchNormLayer<T>>) {
              push(o.gamma);
              push(o.beta);
            } else if constexpr (std::is_same_v<O, LinearLayer<T>>) {
              push(o.weight);
              push_opt(o.bias);
            } else if constexpr (std::is_same_v<O, BuildingBlock<T>>) {
              for (const auto& br : o.branches) {
                push(br.w0);
                push(br.w1);
                push_opt(br.bias);
              }
            }
          },
          l.op);
    }
    return out;
  }

  void set_trainable(bool on) {
    for (auto& p : parameters()) p.set_requires_grad(on);
  }

  ForwardResult<T> forward(const Tensor<T>& batch, const ForwardOptions<T>& opt = {}) const;

 private:
  Shape input_shape_;
  Index classes_ = 0;
  std::vector<Layer<T>> layers_;
  std::vector<std::string> targets_;
  std::map<std::string, CostReport> original_costs_;
};

template <typename T>
ForwardResult<T> Network<T>::forward(const Tensor<T>& batch, const ForwardOptions<T>& opt) const {
  const Shape& xs = batch.shape();
  if (xs.size() != input_shape_.size() + 1 || !std::equal(input_shape_.begin(), input_shape_.end(), xs.begin() + 1))
    throw DimensionError("edge input -> " + (layers_.empty() ? std::string("output") : layers_.front().id) +
                         ": batch shape " + shape_str(xs) + " does not match input " + shape_str(input_shape_));
  ForwardResult<T> res;
  std::map<std::string, Tensor<T>> values;
  values[kInputId] = batch;
  // Values are dropped once no later layer reads them.
  std::map<std::string, std::size_t> last_use;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    for (const auto& in : layers_[i].inputs) last_use[in] = i;

  Tensor<T> current = batch;
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const Layer<T>& l = layers_[li];
    std::vector<Tensor<T>> in;
    for (const auto& name : l.inputs) in.push_back(values.at(name));
    try {
      current = std::visit(
          [&](const auto& o) -> Tensor<T> {
            using O = std::decay_t<decltype(o)>;
            if constexpr (std::is_same_v<O, ConvLayer<T>>) {
              return detail::run_conv(o, in[0]);
            } else if constexpr (std::is_same_v<O, BatchNormLayer<T>>) {
              if (opt.record_bn_inputs) res.bn_inputs.emplace_back(l.id, in[0]);
              if (opt.mode == Mode::kEval) return batch_norm_eval(in[0], o.gamma, o.beta, o.running_mean, o.running_var);
              auto r = batch_norm_train(in[0], o.gamma, o.beta);
              res.bn_stats.push_back({l.id, std::move(r.batch_mean), std::move(r.batch_var)});
              return r.output;
            } else if constexpr (std::is_same_v<O, ReluLayer>) {
              return relu(in[0]);
            } else if constexpr (std::is_same_v<O, PoolLayer>) {
              return pool2d(in[0], o.kind, o.kernel, o.stride);
            } else if constexpr (std::is_same_v<O, LinearLayer<T>>) {
              return linear(in[0], o.weight, o.bias);
            } else if constexpr (std::is_same_v<O, AddLayer>) {
              if (in.size() != 2) throw DimensionError("add needs two inputs");
              if (in[0].shape() != in[1].shape())
                throw DimensionError("add operands " + shape_str(in[0].shape()) + " and " + shape_str(in[1].shape()));
              return svdnas::add(in[0], in[1]);
            } else if constexpr (std::is_same_v<O, FlattenLayer>) {
              return reshape(in[0], Shape{in[0].dim(0), in[0].numel() / in[0].dim(0)});
            } else if constexpr (std::is_same_v<O, BuildingBlock<T>>) {
              return detail::run_block(o, in[0]);
            } else {
              const SuperBlock<T>& sb = o;
              std::vector<Index> idx;
              Tensor<T> w;
              const Mixture<T>* mix = nullptr;
              if (opt.mixtures) {
                auto it = opt.mixtures->find(l.id);
                if (it != opt.mixtures->end()) mix = &it->second;
              }
              if (mix) {
                idx = mix->candidates;
                w = mix->weights;
              } else {
                for (Index c = 0; c < static_cast<Index>(sb.candidates.size()); ++c) idx.push_back(c);
                w = softmax(sb.theta);
              }
              if (static_cast<Index>(idx.size()) != w.numel())
                throw ContractError("superblock " + l.id + ": mixture weights do not match candidates");
              if (idx.size() == 1) return detail::run_candidate(sb.candidates.at(idx[0]), in[0]);
              Tensor<T> acc;
              for (std::size_t j = 0; j < idx.size(); ++j) {
                Tensor<T> y = detail::run_candidate(sb.candidates.at(idx[j]), in[0]);
                Tensor<T> wj = gather(w, {static_cast<Index>(j)});
                Tensor<T> term = mul(y, wj);
                acc = j == 0 ? term : svdnas::add(acc, term);
              }
              return acc;
            }
          },
          l.op);
    } catch (const DimensionError& e) {
      std::string from;
      for (std::size_t i = 0; i < l.inputs.size(); ++i) from += (i ? "," : "") + l.inputs[i];
      throw DimensionError("edge " + from + " -> " + l.id + ": " + e.what());
    }
    if (opt.capture && (std::holds_alternative<ConvLayer<T>>(l.op) || std::holds_alternative<BuildingBlock<T>>(l.op) ||
                        std::holds_alternative<SuperBlock<T>>(l.op)))
      res.captured[l.id] = current;
    for (const auto& name : l.inputs)
      if (last_use[name] == li && name != kInputId) values.erase(name);
    values[l.id] = current;
  }
  res.logits = current;
  return res;
}

// Folds train-mode batch statistics into the running buffers:
// running = (1 - momentum) * running + momentum * batch.
template <typename T>
void update_running_stats(Network<T>& net, const std::vector<BatchStats<T>>& stats) {
  for (const auto& s : stats) {
    auto& bn = std::get<BatchNormLayer<T>>(net.layer(s.id).op);
    const T m = bn.momentum;
    bn.running_mean.data() = (T(1) - m) * bn.running_mean.data() + m * s.mean.data();
    bn.running_var.data() = (T(1) - m) * bn.running_var.data() + m * s.var.data();
  }
}

// Returns a copy with `id` replaced. The replacement must keep the layer's
// input/output geometry.
template <typename T>
Network<T> substitute(const Network<T>& net, const std::string& id, std::type_identity_t<LayerOp<T>> replacement) {
  const auto pos = net.index_of(id);
  if (pos < 0) throw ContractError("substitute: no layer " + id);
  const auto& targets = net.targets();
  if (std::find(targets.begin(), targets.end(), id) == targets.end())
    throw ContractError("substitute: " + id + " is not a compression target");
  const ConvShape& orig = net.target_shape(id);
  auto check = [&](const ConvShape& s, const char* what) {
    if (s.f != orig.f || s.c != orig.c || s.out_h() != orig.out_h() || s.out_w() != orig.out_w() || s.in_h != orig.in_h ||
        s.in_w != orig.in_w)
      throw ContractError(std::string("substitute: ") + what + " does not match the io-contract of " + id);
  };
  auto check_block = [&](const BuildingBlock<T>& b) {
    check(b.original, "building block");
    if (b.branches.empty() || b.branches.size() > 2) throw ContractError("substitute: a block has 1 or 2 branches");
    for (const auto& br : b.branches) {
      if (br.first.c != orig.c || br.second.f != orig.f || br.first.f != br.second.c)
        throw ContractError("substitute: branch " + br.cfg.str() + " breaks the channel contract of " + id);
      if (br.second.in_h != br.first.out_h() || br.second.in_w != br.first.out_w() || br.second.out_h() != orig.out_h() ||
          br.second.out_w() != orig.out_w())
        throw ContractError("substitute: branch " + br.cfg.str() + " breaks the spatial contract of " + id);
      if (br.w0.shape() != br.first.weight_shape() || br.w1.shape() != br.second.weight_shape())
        throw ContractError("substitute: branch " + br.cfg.str() + " weights disagree with its shapes");
    }
  };
  std::visit(
      [&](const auto& o) {
        using O = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<O, ConvLayer<T>>) {
          check(o.shape, "convolution");
          if (o.weight.shape() != o.shape.weight_shape()) throw ContractError("substitute: weight shape mismatch");
        } else if constexpr (std::is_same_v<O, BuildingBlock<T>>) {
          check_block(o);
        } else if constexpr (std::is_same_v<O, SuperBlock<T>>) {
          check(o.original, "super block");
          if (o.candidates.empty()) throw ContractError("substitute: super block without candidates");
          if (o.theta.numel() != static_cast<Index>(o.candidates.size()))
            throw ContractError("substitute: theta length differs from candidate count");
          for (const auto& c : o.candidates) {
            if (const auto* b = std::get_if<BuildingBlock<T>>(&c))
              check_block(*b);
            else
              check(std::get<ConvLayer<T>>(c).shape, "candidate");
          }
        } else {
          throw ContractError("substitute: replacement must be a convolution, building block or super block");
        }
      },
      replacement);
  Network<T> out = net;
  out.mutable_layers()[pos].op = std::move(replacement);
  return out;
}

// Block from per-branch factors; the layer's bias (if any) goes to branch 0.
template <typename T>
BuildingBlock<T> make_block(const ConvShape& original, const std::vector<LowRankFactors<T>>& factors,
                            const OptTensor<T>& bias) {
  BuildingBlock<T> b{original, {}};
  for (std::size_t i = 0; i < factors.size(); ++i)
    b.branches.push_back(make_branch(original, factors[i], i == 0 ? bias : OptTensor<T>{}));
  return b;
}

struct Accuracy {
  double top1 = 0, top5 = 0;
  Index count = 0;
};

// Top-k hits of one logits matrix; ties rank the lower class index first.
template <typename T>
std::pair<Index, Index> topk_hits(const NdArray<T>& logits, const std::vector<int>& labels, Index offset = 0) {
  const Index n = logits.dim(0), k = logits.dim(1);
  Index h1 = 0, h5 = 0;
  for (Index i = 0; i < n; ++i) {
    const int y = labels.at(offset + i);
    if (y < 0 || y >= k) throw ContractError("label " + std::to_string(y) + " out of range");
    const T ly = logits.at(i, y);
    Index rank = 0;
    for (Index j = 0; j < k; ++j) {
      const T lj = logits.at(i, j);
      if (lj > ly || (lj == ly && j < y)) ++rank;
    }
    h1 += rank < 1;
    h5 += rank < 5;
  }
  return {h1, h5};
}

}  // namespace svdnas
