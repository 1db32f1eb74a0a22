// Desk-scale acceptance run. One PASS/FAIL line per check; tolerances are
// fixed below. Exits non-zero when a check fails that is not a documented
// deviation (see docs/enumeration.md).

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "support.hpp"
#include "svdnas/datasynth.hpp"
#include "svdnas/distill.hpp"
#include "svdnas/search.hpp"

using namespace svdnas;
using namespace svdnas::testing;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSeed = 7;
constexpr double kBetaHigh = 48.0;

int unexpected = 0;
auto t_start = std::chrono::steady_clock::now();

double elapsed() { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count(); }

void report(const std::string& id, const std::string& what, bool ok, const std::string& detail,
            bool documented = false) {
  std::printf("[%s] %-3s %s :: %s%s\n", ok ? "PASS" : "FAIL", id.c_str(), what.c_str(), detail.c_str(),
              !ok && documented ? " (documented deviation)" : "");
  std::fflush(stdout);
  if (!ok && !documented) ++unexpected;
}

void progress(const std::string& s) {
  std::fprintf(stderr, "  [%7.1fs] %s\n", elapsed(), s.c_str());
  std::fflush(stderr);
}

template <typename... A>
std::string fmt(const char* f, A... a) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

// ---------------------------------------------------------------------------

void eckart_young() {
  Rng rng(101);
  const std::vector<Index> dims{4, 8, 16};
  double worst = 0;
  int beaten = 0, trials = 0, pairs = 0;
  std::set<std::string> splits_seen;
  std::set<Index> groups_seen;
  while (pairs < 200) {
    const Index g = std::vector<Index>{1, 2, 4}[pairs % 3];
    const Index f = dims[rng.uniform_index(3)], c = dims[rng.uniform_index(3)];
    const auto split = kernel_splits(3)[(pairs / 3) % 4];
    BlockConfig cfg{split, 1, 1, 1};
    (pairs % 2 ? cfg.g0 : cfg.g1) = g;
    if (!is_valid_config(cfg, f, c, 3)) continue;
    cfg.rank = 1 + rng.uniform_index(rank_bound(cfg, f, c));
    if (!is_valid_config(cfg, f, c, 3)) continue;
    ++pairs;
    auto w = rng.normal_array<float>({f, c, 3, 3});
    w.data() /= static_cast<float>(w.data().matrix().norm());
    auto fac = derive_weights(w, cfg);
    const double err = frob(reconstruct(fac), w);
    worst = std::max(worst, std::abs(err - truncated_energy(w, cfg)));
    splits_seen.insert(split.str());
    groups_seen.insert(g);
    const float s0 = static_cast<float>(fac.first.data().matrix().norm() / std::sqrt(double(fac.first.numel())));
    const float s1 = static_cast<float>(fac.second.data().matrix().norm() / std::sqrt(double(fac.second.numel())));
    for (int j = 0; j < 100; ++j) {
      LowRankFactors<float> rnd{cfg, fac.first, fac.second};
      if (j < 50) {
        // unrelated factors of matching scale
        rnd.first = rng.normal_array<float>(fac.first.shape(), s0);
        rnd.second = rng.normal_array<float>(fac.second.shape(), s1);
      } else {
        // small perturbations of the optimum
        rnd.first.data() += rng.normal_array<float>(fac.first.shape(), 0.02f * s0).data();
        rnd.second.data() += rng.normal_array<float>(fac.second.shape(), 0.02f * s1).data();
      }
      ++trials;
      beaten += frob(reconstruct(rnd), w) >= err - 1e-6;
    }
  }
  report("1", "Eckart-Young optimality",
         worst < 1e-5 && beaten == trials && groups_seen.size() == 3 && splits_seen.size() == 4,
         fmt("200 pairs, 4 splits, groups {1,2,4}; max |err - sqrt(truncated energy)| = %.2e (tol 1e-5); optimum "
             "no worse than %d/%d random factorizations",
             worst, beaten, trials));
}

void functional_full_rank() {
  Rng rng(102);
  double worst = 0;
  int cases = 0, stride2 = 0, separable = 0;
  while (cases < 50) {
    const Index f = std::vector<Index>{4, 8}[rng.uniform_index(2)], c = std::vector<Index>{4, 8}[rng.uniform_index(2)];
    const auto split = kernel_splits(3)[cases % 4];
    const Index stride = 1 + (cases / 4) % 2;
    BlockConfig cfg{split, 1, 1, 1};
    if (cases % 3 == 1) cfg.g0 = 2;
    if (cases % 3 == 2) cfg.g1 = 2;
    cfg.rank = rank_bound(cfg, f, c);
    ConvShape orig{f, c, 3, 3, stride, stride, 1, 1, 1, 5 + rng.uniform_index(5), 5 + rng.uniform_index(5), true};
    auto w = rng.normal_array<float>(orig.weight_shape());
    auto bias = rng.normal_array<float>({f});
    auto block = make_block<float>(orig, {derive_weights(w, cfg)}, Tensor<float>(bias));
    auto x = rng.normal_array<float>({2, c, orig.in_h, orig.in_w});
    auto ref = naive_conv2d(x, w, orig.options());
    for (Index i = 0; i < ref.numel(); ++i) ref[i] += bias[(i / (ref.dim(2) * ref.dim(3))) % f];
    auto y = detail::run_candidate<float>(block, Tensor<float>(x)).value();
    worst = std::max(worst, rel_frobenius(y, ref));
    stride2 += stride == 2;
    separable += split.first_h == 3 && split.first_w == 1;
    ++cases;
  }
  report("2", "full-rank blocks reproduce the layer", worst <= 1e-4 && stride2 > 0 && separable > 0,
         fmt("50 cases (%d stride-2, %d (3,1)+(1,3)); max relative error %.2e (tol 1e-4)", stride2, separable, worst));
}

void enumeration() {
  int mismatched = 0, total = 0;
  for (Index f : {2, 4, 8})
    for (Index c : {2, 4, 8})
      for (Index k : {1, 3}) {
        const auto got = enumerate_space(f, c, k);
        const std::set<BlockConfig> as_set(got.begin(), got.end());
        mismatched += !(as_set.size() == got.size() && as_set == brute_force_space(f, c, k));
        ++total;
      }
  report("3", "enumeration equals brute force", mismatched == 0,
         fmt("%d/%d layer shapes f,c in {2,4,8}, k in {1,3} give identical sets", total - mismatched, total));
  const auto n = enumerate_space(64, 64, 3).size();
  report("3", "calibration (64,64,3,3) -> 74902 candidates", n == 74902,
         fmt("%zu candidates under the documented convention; gap explained in docs/enumeration.md", n), true);
}

void cost_model() {
  Rng rng(104);
  int exact = 0;
  for (int t = 0; t < 50; ++t) {
    const Index g = std::vector<Index>{1, 2, 4}[rng.uniform_index(3)];
    const Index f = g * (1 + rng.uniform_index(8)), c = g * (1 + rng.uniform_index(8));
    const Index k = rng.uniform_index(2) ? 3 : 1, stride = 1 + rng.uniform_index(2), pad = k / 2;
    const Index h = 4 + rng.uniform_index(28), w = 4 + rng.uniform_index(28);
    ConvShape s{f, c, k, k, stride, stride, pad, pad, g, h, w, false};
    exact += conv_cost(s).flops == 2 * naive_macs(f, c, k, k, stride, pad, g, h, w);
  }
  const auto fixture = conv_cost(64, 64, 3, 3, 1, 56, 56).flops;
  int agree = 0;
  for (int t = 0; t < 200; ++t) {
    const Index R = 2 + rng.uniform_index(40);
    std::vector<double> s(R);
    for (auto& v : s) v = rng.uniform(0.0, 10.0);
    std::sort(s.rbegin(), s.rend());
    const double slope = rng.uniform(0.1, 5.0), offset = rng.uniform(0.0, 100.0);
    const double lambda = rng.uniform(0.0, 2.0), mu = rng.uniform(0.0, 2.0);
    std::vector<std::function<double(Index)>> cost{[=](Index r) { return offset + slope * r; }};
    agree += lrs2_select_ranks({s}, cost, lambda, mu)[0] == brute_lrs2(s, lambda, mu, slope, offset);
  }
  report("4", "cost model and LR-S2 selector", exact == 50 && fixture == 231211008 && agree == 200,
         fmt("%d/50 geometries match the MAC oracle; (64,64,3,3)@56x56 = %lld FLOPs (want 231211008); LR-S2 %d/200 "
             "equal the brute-force argmin",
             exact, static_cast<long long>(fixture), agree));
}

Network<double> bn_fixture() {
  Rng rng(105);
  Network<double> net({2, 5, 5}, 3);
  net.add("conv1", ConvLayer<double>{ConvShape{3, 2, 3, 3, 1, 1, 1, 1, 1, 5, 5, false},
                                     Tensor<double>(rng.normal_array<double>({3, 2, 3, 3})), std::nullopt});
  net.add("bn1", BatchNormLayer<double>{Tensor<double>(rng.uniform_array<double>({3}, 0.5, 1.5)),
                                        Tensor<double>(rng.normal_array<double>({3})), rng.normal_array<double>({3}),
                                        rng.uniform_array<double>({3}, 0.5, 2.0)});
  net.add("relu1", ReluLayer{});
  net.add("conv2", ConvLayer<double>{ConvShape{4, 3, 3, 3, 2, 2, 1, 1, 1, 5, 5, false},
                                     Tensor<double>(rng.normal_array<double>({4, 3, 3, 3})), std::nullopt});
  net.add("bn2", BatchNormLayer<double>{Tensor<double>(rng.uniform_array<double>({4}, 0.5, 1.5)),
                                        Tensor<double>(rng.normal_array<double>({4})), rng.normal_array<double>({4}),
                                        rng.uniform_array<double>({4}, 0.5, 2.0)});
  return net;
}

void gradients() {
  Rng rng(106);
  auto r = [&](Shape s) { return rng.normal_array<double>(std::move(s)); };
  std::vector<std::pair<std::string, double>> errs;

  Conv2dOptions o{2, 1, 1, 0, 2};
  errs.push_back({"conv", max_gradient_error(
                              [&](const std::vector<Tensor<double>>& a) {
                                return sum(square(conv2d(a[0], a[1], a[2], o)));
                              },
                              {r({2, 4, 5, 5}), r({6, 2, 3, 3}), r({6})})});
  auto wts = r({3, 3, 2, 2});
  errs.push_back({"batch norm (train)", max_gradient_error(
                                            [&](const std::vector<Tensor<double>>& a) {
                                              return sum(mul(square(batch_norm_train(a[0], a[1], a[2]).output),
                                                             Tensor<double>(wts)));
                                            },
                                            {r({3, 3, 2, 2}), r({3}), r({3})})});
  NdArray<double> rm = r({3}), rv = rng.uniform_array<double>({3}, 0.5, 2.0);
  errs.push_back({"batch norm (eval)", max_gradient_error(
                                           [&](const std::vector<Tensor<double>>& a) {
                                             return sum(mul(square(batch_norm_eval(a[0], a[1], a[2], rm, rv)),
                                                            Tensor<double>(wts)));
                                           },
                                           {r({3, 3, 2, 2}), r({3}), r({3})})});
  VectorX<double> cw = VectorX<double>::LinSpaced(6, -2, 3);
  errs.push_back({"gumbel-softmax", max_gradient_error(
                                        [&](const std::vector<Tensor<double>>& a) {
                                          Rng fixed(9);
                                          return dot_constant(gumbel_softmax(a[0], 0.7, fixed), cw);
                                        },
                                        {r({6})})});
  auto net = bn_fixture();
  auto targets = extract_bn_targets(net);
  errs.push_back({"bn_loss", max_gradient_error(
                                 [&](const std::vector<Tensor<double>>& a) {
                                   return bn_loss(a[0], net, targets, 1.0, true);
                                 },
                                 {r({3, 2, 5, 5})})});
  VectorX<double> costs(4);
  costs << 5e3, 2e4, 7e4, 1.2e5;
  errs.push_back({"nas_loss", max_gradient_error(
                                  [&](const std::vector<Tensor<double>>& a) {
                                    auto w = softmax(a[1]);
                                    auto cost = add_scalar(dot_constant(w, costs), 1e5);
                                    return nas_loss(cross_entropy(a[0], {1, 0}), cost, 3e5, 16.0);
                                  },
                                  {r({2, 3}), r({4})})});
  NdArray<double> tl = r({3, 5}), tc = r({3, 2, 2, 2});
  errs.push_back({"kd_loss", max_gradient_error(
                                 [&](const std::vector<Tensor<double>>& a) {
                                   ForwardResult<double> s, t;
                                   s.logits = a[0];
                                   s.captured["x"] = a[1];
                                   t.logits = Tensor<double>(tl);
                                   t.captured["x"] = Tensor<double>(tc);
                                   return kd_loss(s, t, {0, 4, 2}, {"x"}, 0.95, 6.0);
                                 },
                                 {r({3, 5}), r({3, 2, 2, 2})})});
  double worst = 0;
  std::string detail;
  for (const auto& [name, e] : errs) {
    worst = std::max(worst, e);
    detail += (detail.empty() ? "" : ", ") + name + fmt(" %.1e", e);
  }
  report("5", "finite-difference gradients", worst < 1e-3, detail + " (tol 1e-3)");
}

void gumbel_max() {
  Rng rng(107);
  double worst = 0;
  for (Index n : {3, 5, 10}) {
    Tensor<double> theta(rng.normal_array<double>({n}));
    const auto p = softmax(theta).value();
    std::vector<double> freq(n, 0.0);
    const int samples = 100000;
    for (int s = 0; s < samples; ++s) {
      const auto y = gumbel_softmax(theta, 1.0, rng).value();
      Index k;
      y.data().maxCoeff(&k);
      freq[k] += 1.0 / samples;
    }
    for (Index i = 0; i < n; ++i) worst = std::max(worst, std::abs(freq[i] - p[i]));
  }
  report("6", "Gumbel-max frequencies", worst <= 0.01,
         fmt("3/5/10 candidates, 100k samples each; max |freq - softmax| = %.4f (tol 0.01)", worst));
}

// ---------------------------------------------------------------------------
// Pipeline criteria share one pretrained model and the seed-7 searches.

struct Pipeline {
  ProceduralDataset data;
  Net net;
  LRSpaceTable table;
  double base_top1 = 0;
  std::int64_t base_flops = 0;
  std::map<std::uint64_t, IterativeResult> one_branch;  // beta = 48 by seed
  std::map<double, std::int64_t> flops_by_beta;
};

Dataset search_subset(const Pipeline& p, std::uint64_t seed) {
  return p.data.train.subset(sample_indices(p.data.train.size(), 500, seed));
}

IterativeResult search(const Pipeline& p, double beta, std::uint64_t seed, int branches, bool relax,
                       Objective obj = Objective::kFlops, const LatencyTable* lat = nullptr) {
  SearchConfig cfg;
  cfg.beta = beta;
  cfg.seed = seed;
  cfg.objective = obj;
  IterativeOptions io;
  io.branches = branches;
  if (relax) io.relax = Relaxation{};
  auto r = iterative_search(p.net, p.table, search_subset(p, seed), cfg, io, lat);
  progress(fmt("search beta=%g seed=%llu branches=%d%s%s done", beta, static_cast<unsigned long long>(seed), branches,
               relax ? " relaxed" : "", obj == Objective::kLatency ? " latency" : ""));
  return r;
}

double pct(std::int64_t v, std::int64_t base) { return 100.0 * (double(v) - double(base)) / double(base); }

void beta_sweep(Pipeline& p) {
  const double t0 = elapsed();
  std::string detail;
  for (double beta : {2.0, 16.0, kBetaHigh}) {
    auto r = search(p, beta, kSeed, 1, false);
    p.flops_by_beta[beta] = model_cost(r.net).flops;
    detail += fmt("beta=%g %.2f%% FLOPs, ", beta, pct(p.flops_by_beta[beta], p.base_flops));
    if (beta == kBetaHigh) p.one_branch.emplace(kSeed, std::move(r));
  }
  const bool monotone = p.flops_by_beta[2.0] >= p.flops_by_beta[16.0] && p.flops_by_beta[16.0] >= p.flops_by_beta[kBetaHigh];
  const double reduction = -pct(p.flops_by_beta[kBetaHigh], p.base_flops);

  const Dataset few = p.data.train.subset(p.data.few_sample);
  DistillConfig dc;
  dc.regime = Regime::kFewSample;
  dc.seed = kSeed;
  const auto& compressed = p.one_branch.at(kSeed).net;
  const double untuned = evaluate(compressed, p.data.validation).top1;
  auto tuned = finetune(compressed, p.net, few, &p.data.validation, dc);
  const double top1 = evaluate(tuned.student, p.data.validation).top1;
  const double drop = 100.0 * (p.base_top1 - top1);
  progress("few-sample fine-tune done");
  report("7", "beta sweep and few-sample fine-tune",
         monotone && reduction >= 30.0 && drop <= 5.0,
         detail + fmt("FLOPs non-increasing in beta: %s; beta=48 reduction %.2f%% (min 30%%); top-1 %.2f%% -> %.2f%% "
                      "untuned, %.2f%% tuned, drop %.2fpp (max 5pp); %.0fs",
                      monotone ? "yes" : "no", reduction, 100 * p.base_top1, 100 * untuned, 100 * top1, drop,
                      elapsed() - t0));
}

void residual_benefit(Pipeline& p) {
  bool ok = true;
  std::string detail;
  for (std::uint64_t seed : {kSeed, kSeed + 1, kSeed + 2}) {
    if (!p.one_branch.count(seed)) p.one_branch.emplace(seed, search(p, kBetaHigh, seed, 1, false));
    const auto& one = p.one_branch.at(seed);
    const auto e1 = weight_space_error(one.net, p.net);
    const double t1 = evaluate(one.net, p.data.validation).top1;
    detail += fmt("seed %llu: B1 %.2f%%", static_cast<unsigned long long>(seed), 100 * t1);
    for (bool relax : {false, true}) {
      auto two = search(p, kBetaHigh, seed, 2, relax);
      const auto e2 = weight_space_error(two.net, p.net);
      int layers_ok = 0;
      double worst_gap = -INFINITY;
      for (const auto& [id, e] : e1) {
        const double gap = e2.at(id) - e;
        worst_gap = std::max(worst_gap, gap);
        layers_ok += gap <= 1e-6 * std::max(1.0, e);
      }
      const double t2 = evaluate(two.net, p.data.validation).top1;
      const bool case_ok = layers_ok == static_cast<int>(e1.size()) && 100 * t2 >= 100 * t1 - 0.5;
      ok &= case_ok;
      detail += fmt(", B2%s %.2f%% (%d/%zu layers err <= B1, max gap %.2e)", relax ? "+relax" : "", 100 * t2,
                    layers_ok, e1.size(), worst_gap);
    }
    detail += "; ";
  }
  report("8", "two-branch residual search vs one branch", ok, detail + "top-1 tol 0.5pp");
}

void synthetic_recovery(Pipeline& p) {
  bool ok = true;
  std::string detail;
  for (std::uint64_t seed : {kSeed, kSeed + 1, kSeed + 2}) {
    SynthConfig sc;
    sc.seed = seed;
    auto synth = generate_synthetic(p.net, sc, 640);
    int reached = 0;
    double worst_ratio = 0;
    for (const auto& b : synth.batches) {
      reached += b.reached_target;
      worst_ratio = std::max(worst_ratio, b.final / b.initial);
    }
    progress(fmt("synthesis seed %llu done", static_cast<unsigned long long>(seed)));
    DistillConfig dc;
    dc.regime = Regime::kPost;
    dc.seed = seed;
    const auto& compressed = p.one_branch.at(seed).net;
    auto tuned = finetune(compressed, p.net, synth.images, nullptr, dc);
    progress(fmt("post-training seed %llu done (%zu epochs)", static_cast<unsigned long long>(seed), tuned.log.size()));
    const double before = evaluate(compressed, p.data.validation).top1;
    const double after = evaluate(tuned.student, p.data.validation).top1;
    const bool case_ok = after > before && reached == static_cast<int>(synth.batches.size()) && synth.batches.size() == 20;
    ok &= case_ok;
    detail += fmt("seed %llu: %d/%zu batches <= 10%% (worst %.3f), top-1 %.2f%% -> %.2f%% (%+.2fpp); ",
                  static_cast<unsigned long long>(seed), reached, synth.batches.size(), worst_ratio, 100 * before,
                  100 * after, 100 * (after - before));
  }
  report("9", "synthetic-data post-training recovers accuracy", ok, detail + "gain must be > 0");
}

void latency_objective(Pipeline& p) {
  const auto lat = synthetic_latency_table(p.net, build_space_table(p.net));
  auto by_latency = search(p, kBetaHigh, kSeed, 1, false, Objective::kLatency, &lat);
  const double l_lat = model_latency(by_latency.net, lat);
  const double l_flops = model_latency(p.one_branch.at(kSeed).net, lat);
  const double l_base = model_latency(p.net, lat);
  report("10", "latency objective vs FLOPs objective", l_lat <= l_flops,
         fmt("beta=48 table latency: latency-objective %.4f ms, FLOPs-objective %.4f ms, original %.4f ms", l_lat,
             l_flops, l_base));
}

void reproducibility() {
  const fs::path dir = fs::temp_directory_path() / "svdnas_acceptance_repro";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto path = [&](const std::string& n, int i) { return (dir / (n + std::to_string(i) + ".json")).string(); };
  std::vector<std::string> same, differ;
  auto check = [&](const std::string& stage, const std::string& a, const std::string& b) {
    (slurp(a) == slurp(b) && slurp(a + ".bin") == slurp(b + ".bin") ? same : differ).push_back(stage);
  };
  for (int i = 0; i < 2; ++i) {
    auto d = generate_dataset(kSeed, 1000, 200);
    save_dataset(d.train, path("data", i));
    Net net = make_desk_model(kSeed);
    TrainSchedule ts;
    ts.epochs = 1;
    ts.seed = kSeed;
    pretrain(net, d.train, d.validation, ts);
    save_model(net, path("model", i));
    auto table = build_space_table(net);
    apply_flops_pruning(table, 0.3, 0.9, 0.05);
    write_json(path("table", i), table.to_json());
    write_text(path("table", i) + ".bin", "");
    SearchConfig sc;
    sc.seed = kSeed;
    sc.beta = kBetaHigh;
    sc.epochs_branch0 = 2;
    sc.epochs_branch1 = 1;
    IterativeOptions io;
    io.branches = 2;
    auto res = iterative_search(net, table, d.train.slice(0, 200), sc, io);
    save_model(res.net, path("search", i));
    SynthConfig syc;
    syc.seed = kSeed;
    syc.iterations = 20;
    auto synth = generate_synthetic(net, syc, 40);
    save_dataset(synth.images, path("synth", i));
    DistillConfig dc;
    dc.seed = kSeed;
    dc.max_epochs = 2;
    save_model(finetune(res.net, net, synth.images, nullptr, dc).student, path("finetune", i));
  }
  for (const char* s : {"data", "model", "table", "search", "synth", "finetune"}) check(s, path(s, 0), path(s, 1));
  std::string detail = "byte-identical reruns: ";
  for (const auto& s : same) detail += s + " ";
  if (!differ.empty()) {
    detail += "; differing: ";
    for (const auto& s : differ) detail += s + " ";
  }
  report("11", "reproducibility", differ.empty(), detail);
  fs::remove_all(dir);
}

}  // namespace

int main() {
  std::printf("acceptance run, seed %llu\n", static_cast<unsigned long long>(kSeed));
  eckart_young();
  functional_full_rank();
  enumeration();
  cost_model();
  gradients();
  gumbel_max();
  reproducibility();

  Pipeline p;
  p.data = generate_dataset(kSeed);
  p.net = make_desk_model(kSeed);
  TrainSchedule ts;
  ts.seed = kSeed;
  pretrain(p.net, p.data.train, p.data.validation, ts);
  p.base_top1 = evaluate(p.net, p.data.validation).top1;
  p.base_flops = model_cost(p.net).flops;
  progress(fmt("pretrained: top-1 %.2f%%", 100 * p.base_top1));
  p.table = build_space_table(p.net);
  apply_flops_pruning(p.table, 0.3, 0.9, 0.05);

  beta_sweep(p);
  latency_objective(p);
  residual_benefit(p);
  synthetic_recovery(p);

  std::printf("%s (%d unexpected failure%s, %.0fs)\n", unexpected ? "ACCEPTANCE FAILED" : "ACCEPTANCE OK", unexpected,
              unexpected == 1 ? "" : "s", elapsed());
  return unexpected ? 1 : 0;
}
