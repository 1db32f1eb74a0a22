#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace svdnas::cli {

namespace fs = std::filesystem;

Json RunConfig::to_json() const {
  Json prune{{"gamma", {gamma_lo, gamma_hi}}, {"step", step}, {"tau_proxy", nullptr}};
  if (tau_proxy) prune["tau_proxy"] = *tau_proxy;
  return {{"seed", seed},
          {"pretrain",
           {{"epochs", pretrain.epochs},
            {"batch", pretrain.batch},
            {"lr", pretrain.lr},
            {"momentum", pretrain.momentum},
            {"weight_decay", pretrain.weight_decay}}},
          {"search", search_config_json(search)},
          {"branches", branches},
          {"relax", relax},
          {"search_size", search_size},
          {"prune", prune},
          {"synth", synth_config_json(synth)},
          {"synth_count", synth_count},
          {"distill", distill_config_json(distill)}};
}

RunConfig RunConfig::from_json(const Json& j) {
  RunConfig c;
  if (!j.is_object()) throw ContractError("config must be a JSON object");
  if (j.contains("seed")) c.seed = j["seed"];
  if (j.contains("pretrain")) {
    const auto& p = j["pretrain"];
    if (p.contains("epochs")) c.pretrain.epochs = p["epochs"];
    if (p.contains("batch")) c.pretrain.batch = p["batch"];
    if (p.contains("lr")) c.pretrain.lr = p["lr"];
    if (p.contains("momentum")) c.pretrain.momentum = p["momentum"];
    if (p.contains("weight_decay")) c.pretrain.weight_decay = p["weight_decay"];
  }
  if (j.contains("search")) c.search = search_config_from_json(j["search"]);
  if (j.contains("branches")) c.branches = j["branches"];
  if (j.contains("relax")) c.relax = j["relax"];
  if (j.contains("search_size")) c.search_size = j["search_size"];
  if (j.contains("prune")) {
    const auto& p = j["prune"];
    if (p.contains("gamma")) {
      c.gamma_lo = p["gamma"].at(0);
      c.gamma_hi = p["gamma"].at(1);
    }
    if (p.contains("step")) c.step = p["step"];
    if (p.contains("tau_proxy") && !p["tau_proxy"].is_null()) c.tau_proxy = p["tau_proxy"].get<double>();
  }
  if (j.contains("synth")) c.synth = synth_config_from_json(j["synth"]);
  if (j.contains("synth_count")) c.synth_count = j["synth_count"];
  if (j.contains("distill")) c.distill = distill_config_from_json(j["distill"]);
  if (c.branches < 1 || c.branches > 2) throw ContractError("branches must be 1 or 2");
  return c;
}

void RunConfig::apply_seed() {
  pretrain.seed = search.seed = synth.seed = distill.seed = seed;
}

namespace {

using Clock = std::chrono::steady_clock;

struct Common {
  std::string config_path, out, model;
  std::uint64_t seed = 0;
};

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw ContractError(std::string("missing required flag ") + flag);
}

void require_file(const std::string& path) {
  if (!fs::exists(path)) throw IoError("no such file", path);
}

std::pair<double, double> parse_pair(const std::string& s, const char* what) {
  const auto comma = s.find(',');
  if (comma == std::string::npos) throw ContractError(std::string(what) + " expects LO,HI");
  try {
    return {std::stod(s.substr(0, comma)), std::stod(s.substr(comma + 1))};
  } catch (const std::exception&) {
    throw ContractError(std::string(what) + ": cannot parse '" + s + "'");
  }
}

void write_summary(const std::string& out, const std::string& command, const Json& inputs, const RunConfig& cfg,
                   const Json& metrics, Clock::time_point start) {
  Json j{{"command", command},
         {"inputs", inputs},
         {"seed", cfg.seed},
         {"config", cfg.to_json()},
         {"metrics", metrics},
         {"wall_time_s", std::chrono::duration<double>(Clock::now() - start).count()}};
  write_json(out + ".summary.json", j);
}

Json accuracy_json(const Accuracy& a) { return {{"top1", a.top1}, {"top5", a.top5}, {"count", a.count}}; }

std::string data_file(const std::string& dir, const char* split) { return (fs::path(dir) / (std::string(split) + ".json")).string(); }

Dataset load_split(const std::string& dir, const char* split) {
  const std::string p = data_file(dir, split);
  require_file(p);
  return load_dataset(p);
}

Net load_checked(const std::string& path) {
  require_file(path);
  return load_model(path);
}

std::string fixed2(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << v;
  return s.str();
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Low-rank compression search for small convolutional networks"};
  app.require_subcommand(1);
  Common com;
  std::string data, table_path, gamma, objective, latency_path, regime, teacher, synth_path, configs_path, runs, label,
      shape, emit_latency, baseline;
  double beta = 0, step = 0, tau = 0, lr = 0;
  int branches = 1, epochs = 0, max_epochs = 0, iterations = 0;
  Index synth_count = 0, search_size = 0;
  bool relax = false;

  auto common = [&](CLI::App* s) {
    s->add_option("--config", com.config_path, "JSON run config; flags override it");
    s->add_option("--out", com.out, "output artifact path");
  };
  std::map<std::string, CLI::Option*> opts;
  auto seed_flag = [&](CLI::App* s) { opts[s->get_name() + ".seed"] = s->add_option("--seed", com.seed, "global seed"); };

  auto* gen = app.add_subcommand("gen-data", "render the procedural dataset into a directory");
  common(gen);
  seed_flag(gen);

  auto* pre = app.add_subcommand("pretrain", "train the reference model");
  common(pre);
  seed_flag(pre);
  pre->add_option("--data", data, "dataset directory");
  opts["pretrain.epochs"] = pre->add_option("--epochs", epochs);

  auto* en = app.add_subcommand("enumerate", "enumerate the per-layer design space");
  common(en);
  en->add_option("--model", com.model);
  en->add_option("--shape", shape, "F,C,K: count a single layer instead");
  en->add_option("--emit-latency", emit_latency, "also write a synthetic latency table here");

  auto* pr = app.add_subcommand("prune", "FLOPs-grid and accuracy-proxy pruning");
  common(pr);
  pr->add_option("--model", com.model);
  pr->add_option("--table", table_path, "table from enumerate");
  pr->add_option("--data", data, "dataset directory (proxy set for --tau-proxy)");
  opts["prune.gamma"] = pr->add_option("--gamma", gamma, "LO,HI");
  opts["prune.step"] = pr->add_option("--step", step);
  opts["prune.tau"] = pr->add_option("--tau-proxy", tau);

  auto* se = app.add_subcommand("search", "gradient-based search over the pruned space");
  common(se);
  seed_flag(se);
  se->add_option("--model", com.model);
  se->add_option("--table", table_path);
  se->add_option("--data", data);
  opts["search.beta"] = se->add_option("--beta", beta);
  opts["search.objective"] = se->add_option("--objective", objective)->check(CLI::IsMember({"flops", "latency"}));
  se->add_option("--latency-table", latency_path);
  opts["search.branches"] = se->add_option("--branches", branches)->check(CLI::Range(1, 2));
  opts["search.relax"] = se->add_flag("--relax", relax, "relax branch-0 ranks before the residual pass");
  opts["search.epochs"] = se->add_option("--epochs", epochs, "branch-0 epochs");
  opts["search.size"] = se->add_option("--search-size", search_size);
  opts["search.gamma"] = se->add_option("--gamma", gamma, "residual-space FLOPs grid");
  opts["search.step"] = se->add_option("--step", step);

  auto* de = app.add_subcommand("derive", "build a compressed model from explicit configs");
  common(de);
  de->add_option("--model", com.model);
  de->add_option("--configs", configs_path, "JSON {layer: [config, ...]}");

  auto* sy = app.add_subcommand("synth", "generate synthetic images from BN statistics");
  common(sy);
  seed_flag(sy);
  sy->add_option("--model", com.model);
  opts["synth.count"] = sy->add_option("--synth-count", synth_count);
  opts["synth.iterations"] = sy->add_option("--iterations", iterations);

  auto* ft = app.add_subcommand("finetune", "distill the teacher into a compressed model");
  common(ft);
  seed_flag(ft);
  ft->add_option("--model", com.model, "compressed student");
  ft->add_option("--teacher", teacher);
  ft->add_option("--data", data);
  ft->add_option("--synth", synth_path, "synthetic dataset (post regime)");
  opts["finetune.regime"] = ft->add_option("--regime", regime)->check(CLI::IsMember({"post", "few", "full"}));
  opts["finetune.max_epochs"] = ft->add_option("--max-epochs", max_epochs);
  opts["finetune.lr"] = ft->add_option("--lr", lr);

  auto* ev = app.add_subcommand("evaluate", "accuracy and cost against a baseline");
  common(ev);
  ev->add_option("--model", com.model);
  ev->add_option("--baseline", baseline, "defaults to the model itself");
  ev->add_option("--data", data);
  ev->add_option("--latency-table", latency_path);
  ev->add_option("--label", label);

  auto* rp = app.add_subcommand("report", "aggregate evaluations into a Pareto CSV");
  common(rp);
  rp->add_option("--runs", runs, "comma-separated evaluate outputs");

  std::vector<const char*> argv{"svdnas"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitValidation;
  }
  auto given = [&](const std::string& k) { return opts.count(k) && opts[k]->count() > 0; };

  const auto start = Clock::now();
  try {
    RunConfig cfg;
    if (!com.config_path.empty()) {
      require_file(com.config_path);
      Json j = read_json(com.config_path);
      cfg = RunConfig::from_json(j.contains("config") && j["config"].is_object() ? j["config"] : j);
    }
    for (const auto& name : {"gen-data", "pretrain", "search", "synth", "finetune"})
      if (given(std::string(name) + ".seed")) cfg.seed = com.seed;
    cfg.apply_seed();
    require(com.out, "--out");
    const std::string out = com.out;
    if (auto parent = fs::path(out).parent_path(); !parent.empty()) fs::create_directories(parent);

    if (gen->parsed()) {
      auto p = generate_dataset(cfg.seed);
      fs::create_directories(out);
      Json meta{{"seed", cfg.seed}, {"channel_mean", p.channel_mean}, {"channel_std", p.channel_std}};
      save_dataset(p.train, data_file(out, "train"), meta.dump());
      save_dataset(p.validation, data_file(out, "validation"), meta.dump());
      Json few_meta = meta;
      few_meta["indices"] = p.few_sample;
      save_dataset(p.train.subset(p.few_sample), data_file(out, "few"), few_meta.dump());
      std::vector<Index> hist(kDatasetClasses, 0);
      for (int l : p.train.labels) ++hist[l];
      write_summary(out, "gen-data", {}, cfg,
                    {{"train", p.train.size()}, {"validation", p.validation.size()}, {"few", p.few_sample.size()},
                     {"train_class_histogram", hist}},
                    start);
    } else if (pre->parsed()) {
      require(data, "--data");
      if (given("pretrain.epochs")) cfg.pretrain.epochs = epochs;
      const Dataset train = load_split(data, "train"), val = load_split(data, "validation");
      Net net = make_desk_model(cfg.seed);
      const auto log = pretrain(net, train, val, cfg.pretrain);
      save_model(net, out);
      Json epochs_j = Json::array();
      for (const auto& e : log) epochs_j.push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"lr", e.lr}, {"top1", e.metric}});
      const auto cost = model_cost(net);
      write_summary(out, "pretrain", {{"data", data}}, cfg,
                    {{"validation", accuracy_json(evaluate(net, val))}, {"epochs", epochs_j}, {"flops", cost.flops},
                     {"params", cost.params}},
                    start);
    } else if (en->parsed()) {
      if (!shape.empty()) {
        std::vector<Index> v;
        std::stringstream ss(shape);
        for (std::string tok; std::getline(ss, tok, ',');) v.push_back(std::stoll(tok));
        if (v.size() != 3) throw ContractError("--shape expects F,C,K");
        const auto space = enumerate_space(v[0], v[1], v[2]);
        std::cout << "(" << v[0] << "," << v[1] << "," << v[2] << "," << v[2] << "): " << space.size()
                  << " candidates\n";
        write_json(out, {{"shape", v}, {"candidates", space.size()}});
        write_summary(out, "enumerate", {{"shape", shape}}, cfg, {{"candidates", space.size()}}, start);
      } else {
        require(com.model, "--model");
        const Net net = load_checked(com.model);
        const auto table = build_space_table(net);
        write_json(out, table.to_json());
        Json counts = Json::object();
        for (const auto& l : table.layers) {
          counts[l.id] = l.records.size();
          std::cout << l.id << " (" << l.shape.f << "," << l.shape.c << "," << l.shape.kh << "," << l.shape.kw
                    << "): " << l.records.size() << " candidates\n";
        }
        if (!emit_latency.empty()) synthetic_latency_table(net, table).save(emit_latency);
        write_summary(out, "enumerate", {{"model", com.model}}, cfg, {{"candidates", counts}}, start);
      }
    } else if (pr->parsed()) {
      require(com.model, "--model");
      require(table_path, "--table");
      if (given("prune.gamma")) std::tie(cfg.gamma_lo, cfg.gamma_hi) = parse_pair(gamma, "--gamma");
      if (given("prune.step")) cfg.step = step;
      if (given("prune.tau")) cfg.tau_proxy = tau;
      const Net net = load_checked(com.model);
      require_file(table_path);
      auto table = LRSpaceTable::from_json(read_json(table_path));
      apply_flops_pruning(table, cfg.gamma_lo, cfg.gamma_hi, cfg.step);
      if (cfg.tau_proxy) {
        require(data, "--data");
        apply_accuracy_pruning(table, net, load_split(data, "few"), *cfg.tau_proxy);
      }
      write_json(out, table.to_json());
      Json kept = Json::object();
      for (const auto& l : table.layers) kept[l.id] = l.retained().size();
      write_summary(out, "prune", {{"model", com.model}, {"table", table_path}}, cfg, {{"retained", kept}}, start);
    } else if (se->parsed()) {
      require(com.model, "--model");
      require(table_path, "--table");
      require(data, "--data");
      if (given("search.beta")) cfg.search.beta = beta;
      if (given("search.objective")) cfg.search.objective = objective == "latency" ? Objective::kLatency : Objective::kFlops;
      if (given("search.branches")) cfg.branches = branches;
      if (given("search.relax")) cfg.relax = relax;
      if (given("search.epochs")) cfg.search.epochs_branch0 = epochs;
      if (given("search.size")) cfg.search_size = search_size;
      if (given("search.gamma")) std::tie(cfg.gamma_lo, cfg.gamma_hi) = parse_pair(gamma, "--gamma");
      if (given("search.step")) cfg.step = step;
      const Net net = load_checked(com.model);
      require_file(table_path);
      const auto table = LRSpaceTable::from_json(read_json(table_path));
      std::optional<LatencyTable> lat;
      if (!latency_path.empty()) {
        require_file(latency_path);
        lat = LatencyTable::load(latency_path);
      }
      if (cfg.search.objective == Objective::kLatency && !lat)
        throw ContractError("--objective latency needs --latency-table");
      const Dataset train = load_split(data, "train");
      const Dataset subset =
          train.subset(sample_indices(train.size(), std::min(cfg.search_size, train.size()), cfg.seed));
      IterativeOptions io;
      io.branches = cfg.branches;
      if (cfg.relax) io.relax = Relaxation{};
      io.gamma_lo = cfg.gamma_lo;
      io.gamma_hi = cfg.gamma_hi;
      io.step = cfg.step;
      auto res = iterative_search(net, table, subset, cfg.search, io, lat ? &*lat : nullptr);
      save_model(res.net, out);
      write_json(out + ".search.json", {{"configs", configs_json(res.configs)}, {"checkpoints", res.checkpoints}});
      const auto c0 = model_cost(net), c1 = model_cost(res.net);
      Json m{{"configs", configs_json(res.configs)},
             {"flops", c1.flops},
             {"params", c1.params},
             {"delta_flops_pct", 100.0 * (double(c1.flops) - double(c0.flops)) / double(c0.flops)},
             {"weight_space_error", weight_space_error(res.net, net)}};
      if (lat) m["latency_ms"] = model_latency(res.net, *lat);
      write_summary(out, "search", {{"model", com.model}, {"table", table_path}, {"data", data}}, cfg, m, start);
    } else if (de->parsed()) {
      require(com.model, "--model");
      require(configs_path, "--configs");
      const Net net = load_checked(com.model);
      require_file(configs_path);
      Json j = read_json(configs_path);
      const auto configs = configs_from_json(j.contains("configs") ? j["configs"] : j);
      const Net out_net = derive_model(net, configs);
      save_model(out_net, out);
      write_summary(out, "derive", {{"model", com.model}, {"configs", configs_path}}, cfg,
                    {{"flops", model_cost(out_net).flops}, {"weight_space_error", weight_space_error(out_net, net)}},
                    start);
    } else if (sy->parsed()) {
      require(com.model, "--model");
      if (given("synth.count")) cfg.synth_count = synth_count;
      if (given("synth.iterations")) cfg.synth.iterations = iterations;
      const Net net = load_checked(com.model);
      const auto res = generate_synthetic(net, cfg.synth, cfg.synth_count);
      Json meta{{"seed", cfg.seed}, {"config", synth_config_json(cfg.synth)}};
      save_dataset(res.images, out, meta.dump());
      Json traces = Json::array();
      for (const auto& b : res.batches)
        traces.push_back({{"initial", b.initial}, {"final", b.final}, {"reached_target", b.reached_target}});
      for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
      write_summary(out, "synth", {{"model", com.model}}, cfg,
                    {{"count", res.images.size()}, {"batches", traces}, {"warnings", res.warnings}}, start);
    } else if (ft->parsed()) {
      require(com.model, "--model");
      require(teacher, "--teacher");
      require(data, "--data");
      if (given("finetune.regime")) cfg.distill.regime = regime_from_name(regime);
      if (given("finetune.max_epochs")) cfg.distill.max_epochs = max_epochs;
      if (given("finetune.lr")) cfg.distill.lr = lr;
      const Net student = load_checked(com.model), teach = load_checked(teacher);
      const Dataset val = load_split(data, "validation");
      Dataset train;
      switch (cfg.distill.regime) {
        case Regime::kPost:
          require(synth_path, "--synth");
          require_file(synth_path);
          train = load_dataset(synth_path);
          break;
        case Regime::kFewSample: train = load_split(data, "few"); break;
        case Regime::kFull: train = load_split(data, "train"); break;
      }
      const auto res = finetune(student, teach, train, &val, cfg.distill);
      save_model(res.student, out);
      write_json(out + ".log.json", res.to_json());
      write_summary(out, "finetune", {{"model", com.model}, {"teacher", teacher}, {"data", data}, {"synth", synth_path}},
                    cfg,
                    {{"before", accuracy_json(evaluate(student, val))},
                     {"after", accuracy_json(evaluate(res.student, val))},
                     {"log", res.to_json()}},
                    start);
    } else if (ev->parsed()) {
      require(com.model, "--model");
      require(data, "--data");
      const Net net = load_checked(com.model);
      const Net base = baseline.empty() ? net : load_checked(baseline);
      const Dataset val = load_split(data, "validation");
      const auto a = evaluate(net, val), b = evaluate(base, val);
      const auto c = model_cost(net), cb = model_cost(base);
      Json j{{"label", label.empty() ? fs::path(com.model).stem().string() : label},
             {"model", com.model},
             {"baseline", baseline.empty() ? com.model : baseline},
             {"top1", a.top1},
             {"top5", a.top5},
             {"flops", c.flops},
             {"params", c.params},
             {"delta_flops_pct", 100.0 * (double(c.flops) - double(cb.flops)) / double(cb.flops)},
             {"delta_params_pct", 100.0 * (double(c.params) - double(cb.params)) / double(cb.params)},
             {"delta_top1_pp", 100.0 * (a.top1 - b.top1)},
             {"delta_top5_pp", 100.0 * (a.top5 - b.top5)}};
      if (!latency_path.empty()) {
        require_file(latency_path);
        const auto lat = LatencyTable::load(latency_path);
        j["latency_ms"] = model_latency(net, lat);
        j["baseline_latency_ms"] = model_latency(base, lat);
      }
      write_json(out, j);
      std::cout << "top1 " << fixed2(100.0 * a.top1) << "%  dTop1 " << fixed2(j["delta_top1_pp"].get<double>())
                << "pp  dFLOPs " << fixed2(j["delta_flops_pct"].get<double>()) << "%\n";
      write_summary(out, "evaluate", {{"model", com.model}, {"baseline", baseline}, {"data", data}}, cfg, j, start);
    } else if (rp->parsed()) {
      require(runs, "--runs");
      std::vector<Json> rows;
      std::stringstream ss(runs);
      for (std::string p; std::getline(ss, p, ',');) {
        require_file(p);
        Json j = read_json(p);
        for (const char* k : {"delta_flops_pct", "delta_params_pct", "delta_top1_pp", "delta_top5_pp"})
          if (!j.contains(k)) throw IoError(std::string("not an evaluate output (no ") + k + ")", p);
        rows.push_back(j);
      }
      // least compressed first
      std::stable_sort(rows.begin(), rows.end(), [](const Json& a, const Json& b) {
        return a["delta_flops_pct"].get<double>() > b["delta_flops_pct"].get<double>();
      });
      std::ostringstream csv;
      csv << "label,delta_flops_pct,delta_params_pct,delta_top1_pp,delta_top5_pp,pareto\n";
      for (const auto& r : rows) {
        bool dominated = false;
        for (const auto& o : rows)
          dominated |= o["delta_flops_pct"].get<double>() <= r["delta_flops_pct"].get<double>() &&
                       o["delta_top1_pp"].get<double>() >= r["delta_top1_pp"].get<double>() &&
                       (o["delta_flops_pct"] != r["delta_flops_pct"] || o["delta_top1_pp"] != r["delta_top1_pp"]);
        csv << r["label"].get<std::string>() << "," << fixed2(r["delta_flops_pct"]) << ","
            << fixed2(r["delta_params_pct"]) << "," << fixed2(r["delta_top1_pp"]) << "," << fixed2(r["delta_top5_pp"])
            << "," << (dominated ? 0 : 1) << "\n";
      }
      write_text(out, csv.str());
      std::cout << csv.str();
      write_summary(out, "report", {{"runs", runs}}, cfg, {{"rows", rows.size()}}, start);
    }
    return kExitOk;
  } catch (const TrainingError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const Json::exception& e) {
    std::cerr << "error: malformed JSON: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
}

}  // namespace svdnas::cli
