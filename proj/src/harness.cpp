#include "flipguard/harness.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "flipguard/rng.hpp"
#include "json.hpp"

namespace flipguard {

using nlohmann::ordered_json;

// ---------------------------------------------------------------------
//  Configuration
// ---------------------------------------------------------------------

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig cfg;
  cfg.dataset = DatasetConfig{};
  // Two widths of standard training plus a ladder of adversarially-
  // trained models whose training budget (the perturbation radius seen
  // during training) grows, which orders their robust errors cleanly.
  // Chains over the robust members then have four genuinely improving
  // steps.
  cfg.zoo = {
      {"s8", {8}, UpdateMethod::Standard, 1, 400, 0.5},
      {"s24", {24}, UpdateMethod::Standard, 2, 400, 0.5},
      {"r1", {16}, UpdateMethod::At, 3, 400, 0.0, 0.012},
      {"r2", {24}, UpdateMethod::At, 4, 450, 0.0, 0.022},
      {"r3", {32}, UpdateMethod::At, 5, 500, 0.0, 0.034},
      {"r4", {40}, UpdateMethod::At, 6, 600, 0.0, 0.048},
      {"r5", {48}, UpdateMethod::At, 7, 700, 0.0, 0.064},
  };
  for (double beta : {1.0, 2.0, 5.0, 10.0}) {
    cfg.pct_grid.push_back(UpdateHyperparams::pct(1.0, 1.0, beta));
    cfg.pcat_grid.push_back(UpdateHyperparams::pcat(1.0, 1.0, beta));
  }
  for (auto [a, b] : std::initializer_list<std::pair<double, double>>{
           {0.75, 0.2}, {0.7, 0.2}, {0.5, 0.4}, {0.3, 0.6}})
    cfg.rcat_grid.push_back(UpdateHyperparams::rcat(a, b));
  cfg.seq_pct = UpdateHyperparams::pct(1.0, 1.0, 2.0);
  cfg.seq_pcat = UpdateHyperparams::pcat(1.0, 1.0, 2.0);
  cfg.seq_rcat = UpdateHyperparams::rcat(0.5, 0.4);
  return cfg;
}

const std::vector<UpdateHyperparams>& ExperimentConfig::grid_for(
    UpdateMethod m) const {
  switch (m) {
    case UpdateMethod::Pct: return pct_grid;
    case UpdateMethod::Pcat: return pcat_grid;
    case UpdateMethod::Rcat: return rcat_grid;
    default:
      throw ConfigError("no hyperparameter grid for method " +
                        std::string(update_method_name(m)));
  }
}

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  const auto b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

std::vector<std::size_t> parse_size_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::istringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ':'))
    out.push_back(static_cast<std::size_t>(std::stoull(trim(tok))));
  return out;
}

ZooEntryConfig parse_zoo_entry(const std::string& value, int lineno) {
  ZooEntryConfig e;
  std::istringstream ss(value);
  std::string tok;
  bool have_name = false, have_hidden = false;
  while (ss >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": zoo.entry expects k=v tokens");
    const std::string k = tok.substr(0, eq), v = tok.substr(eq + 1);
    if (k == "name") {
      e.name = v;
      have_name = true;
    } else if (k == "hidden") {
      e.hidden = parse_size_list(v);
      have_hidden = true;
    } else if (k == "train") {
      e.train_method = update_method_from_name(v);
      if (e.train_method != UpdateMethod::Standard &&
          e.train_method != UpdateMethod::At)
        throw ConfigError("config line " + std::to_string(lineno) +
                          ": zoo entries train with standard or at");
    } else if (k == "seed") {
      e.seed = std::stoull(v);
    } else if (k == "epochs") {
      e.epochs = std::stoi(v);
    } else if (k == "lr") {
      e.lr = std::stod(v);
    } else if (k == "train_eps") {
      e.train_eps = std::stod(v);
    } else {
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": unknown zoo.entry field '" + k + "'");
    }
  }
  if (!have_name || !have_hidden)
    throw ConfigError("config line " + std::to_string(lineno) +
                      ": zoo.entry needs name= and hidden=");
  return e;
}

}  // namespace

ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  ExperimentConfig cfg = ExperimentConfig::defaults();
  bool zoo_cleared = false;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    try {
      if (key == "dataset.kind") cfg.dataset.kind = val;
      else if (key == "dataset.n") cfg.dataset.n = std::stoull(val);
      else if (key == "dataset.dim") cfg.dataset.dim = std::stoull(val);
      else if (key == "dataset.classes") cfg.dataset.classes = std::stoull(val);
      else if (key == "dataset.margin") cfg.dataset.margin = std::stod(val);
      else if (key == "dataset.noise") cfg.dataset.noise = std::stod(val);
      else if (key == "dataset.path") cfg.dataset.path = val;
      else if (key == "eps") cfg.eps = std::stod(val);
      else if (key == "eval.iterations") cfg.eval_iters = std::stoi(val);
      else if (key == "eval.restarts") cfg.eval_restarts = std::stoi(val);
      else if (key == "zoo.epochs") cfg.zoo_epochs = std::stoi(val);
      else if (key == "zoo.lr") cfg.zoo_lr = std::stod(val);
      else if (key == "zoo.batch") cfg.zoo_batch = std::stoi(val);
      else if (key == "update.epochs") cfg.update_epochs = std::stoi(val);
      else if (key == "update.batch") cfg.update_batch = std::stoi(val);
      else if (key == "update.lr") cfg.update_lr = std::stod(val);
      else if (key == "out") cfg.out_dir = val;
      else if (key == "seed") cfg.master_seed = std::stoull(val);
      else if (key == "zoo.entry") {
        if (!zoo_cleared) {
          cfg.zoo.clear();
          zoo_cleared = true;
        }
        cfg.zoo.push_back(parse_zoo_entry(val, lineno));
      } else {
        throw ConfigError("config line " + std::to_string(lineno) +
                          ": unknown key '" + key + "'");
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": bad value for '" + key + "': " + e.what());
    }
  }
  return cfg;
}

std::string config_echo(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << "dataset.kind = " << cfg.dataset.kind << "\n";
  os << "dataset.n = " << cfg.dataset.n << "\n";
  os << "dataset.dim = " << cfg.dataset.dim << "\n";
  os << "dataset.classes = " << cfg.dataset.classes << "\n";
  os << "dataset.margin = " << cfg.dataset.margin << "\n";
  os << "dataset.noise = " << cfg.dataset.noise << "\n";
  if (!cfg.dataset.path.empty())
    os << "dataset.path = " << cfg.dataset.path << "\n";
  os << "eps = " << cfg.eps << "\n";
  os << "eval.iterations = " << cfg.eval_iters << "\n";
  os << "eval.restarts = " << cfg.eval_restarts << "\n";
  os << "zoo.epochs = " << cfg.zoo_epochs << "\n";
  os << "zoo.lr = " << cfg.zoo_lr << "\n";
  os << "zoo.batch = " << cfg.zoo_batch << "\n";
  os << "update.epochs = " << cfg.update_epochs << "\n";
  os << "update.batch = " << cfg.update_batch << "\n";
  os << "update.lr = " << cfg.update_lr << "\n";
  os << "seed = " << cfg.master_seed << "\n";
  for (const ZooEntryConfig& e : cfg.zoo) {
    os << "zoo.entry = name=" << e.name << " hidden=";
    for (std::size_t i = 0; i < e.hidden.size(); ++i)
      os << (i ? ":" : "") << e.hidden[i];
    os << " train=" << update_method_name(e.train_method)
       << " seed=" << e.seed;
    if (e.epochs > 0) os << " epochs=" << e.epochs;
    if (e.lr > 0) os << " lr=" << e.lr;
    if (e.train_eps > 0) os << " train_eps=" << e.train_eps;
    os << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------
//  Datasets and zoo
// ---------------------------------------------------------------------

DatasetSplit make_dataset(const ExperimentConfig& cfg) {
  const DatasetConfig& d = cfg.dataset;
  if (d.kind == "benchmark") return make_benchmark(d.n, cfg.master_seed);
  if (d.kind == "csv") return load_dataset(d.path, DataFormat::Csv);
  if (d.kind == "idx") return load_dataset(d.path, DataFormat::Idx);
  return make_synthetic(synthetic_kind_from_name(d.kind), d.n, d.dim,
                        d.classes, d.margin, d.noise, cfg.master_seed);
}

std::size_t Zoo::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].model.meta.name == name) return i;
  throw ConfigError("zoo: no model named '" + name + "'");
}

namespace {

AttackConfig eval_attack(const ExperimentConfig& cfg,
                         std::size_t num_classes) {
  AttackConfig a = AttackConfig::evaluation(
      num_classes, mix_seed({cfg.master_seed, 0xE7A1ULL}), cfg.eval_iters);
  a.restarts = cfg.eval_restarts;
  return a;
}

}  // namespace

Zoo build_model_zoo(const ExperimentConfig& cfg, const DatasetSplit& split) {
  if (cfg.zoo.size() < 2)
    throw ConfigError("zoo: need at least 2 entries");
  const std::size_t classes =
      static_cast<std::size_t>(split.train.num_classes());
  Zoo zoo;
  for (const ZooEntryConfig& e : cfg.zoo) {
    ModelSpec spec;
    spec.input_dim = split.train.dim();
    spec.hidden = e.hidden;
    spec.num_classes = classes;
    UpdateSpec us;
    us.method = e.train_method;
    us.fresh_spec = spec;
    us.epochs = e.epochs > 0 ? e.epochs : cfg.zoo_epochs;
    us.batch_size = cfg.zoo_batch;
    us.learning_rate = e.lr > 0 ? e.lr : cfg.zoo_lr;
    us.train_domain = cfg.domain();
    if (e.train_eps > 0) us.train_domain.epsilon = e.train_eps;
    us.seed = mix_seed({cfg.master_seed, 0x200ULL, e.seed});
    TrainTrace tr = train(split.train, us);
    tr.final_model.meta.name = e.name;
    zoo.entries.push_back({std::move(tr.final_model), 0.0, 0.0});
  }

  PairEvaluator evaluator(split.test, cfg.domain(),
                          eval_attack(cfg, classes));
  for (ZooModel& zm : zoo.entries) {
    const auto& ev = evaluator.eval_model(zm.model);
    zm.test_error = ev.test_error;
    zm.robust_error = ev.robust_error;
  }
  std::stable_sort(zoo.entries.begin(), zoo.entries.end(),
                   [](const ZooModel& a, const ZooModel& b) {
                     if (a.robust_error != b.robust_error)
                       return a.robust_error > b.robust_error;
                     if (a.test_error != b.test_error)
                       return a.test_error > b.test_error;
                     return a.model.meta.name < b.model.meta.name;
                   });
  std::filesystem::create_directories(cfg.out_dir + "/zoo");
  for (const ZooModel& zm : zoo.entries)
    save_checkpoint(zm.model,
                    cfg.out_dir + "/zoo/" + zm.model.meta.name + ".ckpt");
  return zoo;
}

MatrixResult run_update_matrix(const Zoo& zoo, const ExperimentConfig& cfg,
                               const DatasetSplit& split) {
  if (zoo.entries.size() < 2)
    throw ConfigError("matrix: need at least 2 zoo models");
  const std::size_t k = zoo.entries.size();
  MatrixResult m;
  m.k = k;
  m.nf.assign(k * k, 0.0);
  m.rnf.assign(k * k, 0.0);
  PairEvaluator evaluator(
      split.test, cfg.domain(),
      eval_attack(cfg, zoo.entries[0].model.spec.num_classes));
  for (const ZooModel& zm : zoo.entries) {
    m.names.push_back(zm.model.meta.name);
    const auto& ev = evaluator.eval_model(zm.model);
    m.test_error.push_back(ev.test_error);
    m.robust_error.push_back(ev.robust_error);
  }
  for (std::size_t o = 0; o < k; ++o)
    for (std::size_t n2 = 0; n2 < k; ++n2) {
      const auto records =
          evaluator.records(zoo.entries[o].model, zoo.entries[n2].model);
      m.nf[o * k + n2] = nf_rate(records);
      m.rnf[o * k + n2] = rnf_rate(records);
    }
  return m;
}

// ---------------------------------------------------------------------
//  Updates
// ---------------------------------------------------------------------

namespace {

UpdateSpec base_update_spec(const Zoo& zoo, std::size_t old_index,
                            std::size_t new_index, UpdateMethod method,
                            const ExperimentConfig& cfg) {
  UpdateSpec us;
  us.method = method;
  us.old_model = zoo.entries[old_index].model;
  us.old_model->role = Role::Old;
  us.src_model = zoo.entries[new_index].model;
  us.src_model->role = Role::Src;
  us.epochs = cfg.update_epochs;
  us.batch_size = cfg.update_batch;
  us.learning_rate = cfg.update_lr;
  us.train_domain = cfg.domain();
  us.seed = mix_seed({cfg.master_seed, 0x0DULL, old_index, new_index,
                      static_cast<std::uint64_t>(method)});
  return us;
}

std::string pair_lineage(const Zoo& zoo, std::size_t o, std::size_t n2) {
  return "old=" + zoo.entries[o].model.meta.name +
         ",new=" + zoo.entries[n2].model.meta.name;
}

}  // namespace

UpdateOutcome run_single_update(const Zoo& zoo, std::size_t old_index,
                                std::size_t new_index, UpdateMethod method,
                                const ExperimentConfig& cfg,
                                const DatasetSplit& split) {
  if (old_index >= zoo.entries.size() || new_index >= zoo.entries.size())
    throw ConfigError("update: zoo index out of range");
  const Model& old_m = zoo.entries[old_index].model;
  const Model& src_m = zoo.entries[new_index].model;

  PairEvaluator evaluator(split.test, cfg.domain(),
                          eval_attack(cfg, old_m.spec.num_classes));
  UpdateOutcome out;
  out.naive_report = make_flip_report(
      evaluator.records(old_m, src_m), "naive", evaluator.test_set_hash(),
      model_hash(old_m), model_hash(src_m),
      mix_seed({cfg.master_seed, 0xB001ULL, old_index, new_index}));
  out.naive_report.lineage = pair_lineage(zoo, old_index, new_index);

  if (method == UpdateMethod::Naive) {
    out.method_report = out.naive_report;
    apply_deltas(out.method_report, out.naive_report);
    out.new_model = src_m;
    return out;
  }
  if (method != UpdateMethod::Pct && method != UpdateMethod::Pcat &&
      method != UpdateMethod::Rcat)
    throw ConfigError("update: method must be naive, pct, pcat or rcat");

  UpdateSpec base = base_update_spec(zoo, old_index, new_index, method, cfg);
  const auto& grid = cfg.grid_for(method);
  out.grid = grid_search(split.train, split.validation, base, grid,
                         eval_attack(cfg, old_m.spec.num_classes),
                         cfg.domain());

  base.hyperparams = out.grid->best;
  base.validate();
  TrainTrace tr = train(split.train, base);
  out.new_model = std::move(tr.final_model);
  out.new_model.role = Role::New;
  out.new_model.meta.name =
      src_m.meta.name + "+" + update_method_name(method);

  out.method_report = make_flip_report(
      evaluator.records(old_m, out.new_model),
      update_method_name(method), evaluator.test_set_hash(),
      model_hash(old_m), model_hash(out.new_model),
      mix_seed({cfg.master_seed, 0xB002ULL, old_index, new_index,
                static_cast<std::uint64_t>(method)}));
  out.method_report.lineage = pair_lineage(zoo, old_index, new_index);
  apply_deltas(out.method_report, out.naive_report);
  return out;
}

std::pair<std::size_t, std::size_t> select_default_update(
    const Zoo& zoo, const ExperimentConfig& cfg, const DatasetSplit& split) {
  PairEvaluator evaluator(
      split.validation, cfg.domain(),
      eval_attack(cfg, zoo.entries[0].model.spec.num_classes));
  // Candidate pool: replacements among the adversarially-trained zoo
  // members where the new model has strictly lower robust error; the
  // update experiments target robust-model replacements. If the zoo
  // has no such pair, fall back to any robustness-improving pair.
  const auto is_robust_member = [&](std::size_t i) {
    return zoo.entries[i].model.meta.method == "at";
  };
  for (const bool robust_only : {true, false}) {
    bool any = false;
    std::pair<std::size_t, std::size_t> best{0, 0};
    double best_rnf = -1.0;
    for (std::size_t o = 0; o < zoo.entries.size(); ++o)
      for (std::size_t n2 = 0; n2 < zoo.entries.size(); ++n2) {
        if (o == n2) continue;
        if (zoo.entries[n2].robust_error >= zoo.entries[o].robust_error)
          continue;  // not an improving update
        if (robust_only && (!is_robust_member(o) || !is_robust_member(n2)))
          continue;
        const double r = rnf_rate(
            evaluator.records(zoo.entries[o].model, zoo.entries[n2].model));
        if (!any || r > best_rnf) {
          any = true;
          best_rnf = r;
          best = {o, n2};
        }
      }
    if (any) return best;
  }
  throw ConfigError("update: zoo has no improving pair to update");
}

std::vector<std::size_t> default_chain(const Zoo& zoo) {
  std::vector<std::size_t> chain;
  for (std::size_t i = 0; i < zoo.entries.size(); ++i)
    if (zoo.entries[i].model.meta.method == "at") chain.push_back(i);
  if (chain.size() < 2) {
    chain.resize(zoo.entries.size());
    for (std::size_t i = 0; i < chain.size(); ++i) chain[i] = i;
  }
  return chain;
}

std::vector<FlipReport> run_sequential(const Zoo& zoo,
                                       std::span<const std::size_t> chain,
                                       UpdateMethod method,
                                       const ExperimentConfig& cfg,
                                       const DatasetSplit& split) {
  if (chain.size() < 2)
    throw ConfigError("sequential: chain needs at least 2 models");
  for (std::size_t i : chain)
    if (i >= zoo.entries.size())
      throw ConfigError("sequential: zoo index out of range");

  PairEvaluator evaluator(
      split.test, cfg.domain(),
      eval_attack(cfg, zoo.entries[chain[0]].model.spec.num_classes));

  std::vector<FlipReport> reports;
  Model prev = zoo.entries[chain[0]].model;
  std::string lineage = prev.meta.name;
  for (std::size_t k = 1; k < chain.size(); ++k) {
    const Model& target = zoo.entries[chain[k]].model;
    Model next;
    if (method == UpdateMethod::Naive) {
      next = target;
    } else {
      UpdateSpec us;
      us.method = method;
      us.old_model = prev;
      us.old_model->role = Role::Old;
      us.src_model = target;
      us.src_model->role = Role::Src;
      us.epochs = cfg.update_epochs;
      us.batch_size = cfg.update_batch;
      us.learning_rate = cfg.update_lr;
      us.train_domain = cfg.domain();
      us.seed = mix_seed({cfg.master_seed, 0x5E9ULL, k,
                          static_cast<std::uint64_t>(method)});
      switch (method) {
        case UpdateMethod::Pct: us.hyperparams = cfg.seq_pct; break;
        case UpdateMethod::Pcat: us.hyperparams = cfg.seq_pcat; break;
        case UpdateMethod::Rcat: us.hyperparams = cfg.seq_rcat; break;
        default:
          throw ConfigError("sequential: method must be naive, pct, pcat "
                            "or rcat");
      }
      TrainTrace tr = train(split.train, us);
      next = std::move(tr.final_model);
      next.meta.name = target.meta.name + "+" + update_method_name(method);
    }
    lineage += "->" + next.meta.name;
    FlipReport rep = make_flip_report(
        evaluator.records(prev, next), update_method_name(method),
        evaluator.test_set_hash(), model_hash(prev), model_hash(next),
        mix_seed({cfg.master_seed, 0xB005ULL, k,
                  static_cast<std::uint64_t>(method)}));
    rep.step_index = static_cast<int>(k);
    rep.lineage = lineage;
    reports.push_back(std::move(rep));
    prev = std::move(next);
  }
  return reports;
}

ConsistencyOutcome run_consistency(std::span<const std::size_t> n_list,
                                   int trials, std::uint64_t seed) {
  ConsistencyOutcome out;
  out.zero_one_free = measure_rate(ConsistencyProblem::zero_one(false),
                                   n_list, trials, mix_seed({seed, 1}));
  out.zero_one_constrained = measure_rate(
      ConsistencyProblem::zero_one(true), n_list, trials, mix_seed({seed, 2}));
  out.robust_free = measure_rate(ConsistencyProblem::robust_zero_one(false),
                                 n_list, trials, mix_seed({seed, 3}));
  out.robust_constrained =
      measure_rate(ConsistencyProblem::robust_zero_one(true), n_list, trials,
                   mix_seed({seed, 4}));
  return out;
}

// ---------------------------------------------------------------------
//  Reports
// ---------------------------------------------------------------------

namespace {

std::string pct2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string signed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+.2f", v);
  return buf;
}

std::string hex_id(std::uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

ordered_json report_to_json(const FlipReport& r) {
  ordered_json j;
  j["method"] = r.method;
  j["test_error_old"] = r.test_error_old;
  j["test_error_new"] = r.test_error_new;
  j["nf"] = r.nf;
  j["pf"] = r.pf;
  j["robust_error_old"] = r.robust_error_old;
  j["robust_error_new"] = r.robust_error_new;
  j["rnf"] = r.rnf;
  j["rpf"] = r.rpf;
  j["joint_nf_rnf"] = r.joint_nf_rnf;
  if (r.has_deltas) {
    j["delta_test_error"] = r.delta_test_error;
    j["delta_nfs"] = r.delta_nfs;
    j["delta_robust_error"] = r.delta_robust_error;
    j["delta_rnfs"] = r.delta_rnfs;
  }
  j["bootstrap_std"] = {{"test_error", r.bootstrap.test_error},
                        {"nf", r.bootstrap.nf},
                        {"robust_error", r.bootstrap.robust_error},
                        {"rnf", r.bootstrap.rnf}};
  j["test_set_hash"] = hex_id(r.test_set_hash);
  j["old_model_hash"] = hex_id(r.old_model_hash);
  j["new_model_hash"] = hex_id(r.new_model_hash);
  j["step_index"] = r.step_index;
  j["lineage"] = r.lineage;
  return j;
}

FlipReport report_from_json(const ordered_json& j) {
  FlipReport r;
  r.method = j.at("method").get<std::string>();
  r.test_error_old = j.at("test_error_old").get<double>();
  r.test_error_new = j.at("test_error_new").get<double>();
  r.nf = j.at("nf").get<double>();
  r.pf = j.at("pf").get<double>();
  r.robust_error_old = j.at("robust_error_old").get<double>();
  r.robust_error_new = j.at("robust_error_new").get<double>();
  r.rnf = j.at("rnf").get<double>();
  r.rpf = j.at("rpf").get<double>();
  r.joint_nf_rnf = j.at("joint_nf_rnf").get<double>();
  if (j.contains("delta_test_error")) {
    r.has_deltas = true;
    r.delta_test_error = j.at("delta_test_error").get<double>();
    r.delta_nfs = j.at("delta_nfs").get<double>();
    r.delta_robust_error = j.at("delta_robust_error").get<double>();
    r.delta_rnfs = j.at("delta_rnfs").get<double>();
  }
  const auto& b = j.at("bootstrap_std");
  r.bootstrap.test_error = b.at("test_error").get<double>();
  r.bootstrap.nf = b.at("nf").get<double>();
  r.bootstrap.robust_error = b.at("robust_error").get<double>();
  r.bootstrap.rnf = b.at("rnf").get<double>();
  r.test_set_hash = std::stoull(j.at("test_set_hash").get<std::string>(),
                                nullptr, 16);
  r.old_model_hash = std::stoull(j.at("old_model_hash").get<std::string>(),
                                 nullptr, 16);
  r.new_model_hash = std::stoull(j.at("new_model_hash").get<std::string>(),
                                 nullptr, 16);
  r.step_index = j.at("step_index").get<int>();
  r.lineage = j.at("lineage").get<std::string>();
  return r;
}

ordered_json ratefit_to_json(const RateFit& f) {
  ordered_json j;
  j["n"] = f.n_list;
  j["mean_excess"] = f.mean_excess;
  j["std_excess"] = f.std_excess;
  j["mean_emp_constraint"] = f.mean_emp_constraint;
  j["std_pop_constraint"] = f.std_pop_constraint;
  j["slope"] = f.slope;
  j["intercept"] = f.intercept;
  j["saturated"] = f.saturated;
  return j;
}

}  // namespace

std::string flip_reports_json(const std::string& experiment_id,
                              const std::string& cfg_echo,
                              std::uint64_t master_seed,
                              std::span<const FlipReport> reports) {
  ordered_json j;
  j["schema"] = "report_v1";
  j["experiment"] = experiment_id;
  j["seed"] = master_seed;
  j["config"] = cfg_echo;
  ordered_json arr = ordered_json::array();
  for (const FlipReport& r : reports) arr.push_back(report_to_json(r));
  j["records"] = arr;
  return j.dump(2) + "\n";
}

std::vector<FlipReport> parse_flip_reports(const std::string& json_text) {
  ordered_json j;
  try {
    j = ordered_json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("report: " + std::string(e.what()), e.byte);
  }
  if (j.value("schema", "") != "report_v1")
    throw IntegrityError("report: unknown schema");
  std::vector<FlipReport> out;
  for (const auto& rj : j.at("records")) out.push_back(report_from_json(rj));
  return out;
}

std::string render_table(std::span<const FlipReport> reports) {
  std::ostringstream os;
  os << "step  method    Test Error       NFs  Robust Error      RNFs  "
        "Joint   dTest    dNFs    dRob   dRNFs\n";
  for (const FlipReport& r : reports) {
    char line[256];
    std::snprintf(line, sizeof line, "%4d  %-8s  %10s  %8s  %12s  %8s  %5s",
                  r.step_index, r.method.c_str(),
                  pct2(r.test_error_new).c_str(), pct2(r.nf).c_str(),
                  pct2(r.robust_error_new).c_str(), pct2(r.rnf).c_str(),
                  pct2(r.joint_nf_rnf).c_str());
    os << line;
    if (r.has_deltas) {
      std::snprintf(line, sizeof line, "  %6s  %6s  %6s  %6s",
                    signed2(r.delta_test_error).c_str(),
                    signed2(r.delta_nfs).c_str(),
                    signed2(r.delta_robust_error).c_str(),
                    signed2(r.delta_rnfs).c_str());
      os << line;
    }
    os << "  (" << r.lineage << ")\n";
  }
  return os.str();
}

std::string matrix_json(const std::string& experiment_id,
                        const std::string& cfg_echo,
                        std::uint64_t master_seed, const MatrixResult& m) {
  ordered_json j;
  j["schema"] = "report_v1";
  j["experiment"] = experiment_id;
  j["seed"] = master_seed;
  j["config"] = cfg_echo;
  j["models"] = m.names;
  j["test_error"] = m.test_error;
  j["robust_error"] = m.robust_error;
  ordered_json nf = ordered_json::array(), rnf = ordered_json::array();
  for (std::size_t o = 0; o < m.k; ++o) {
    ordered_json nrow = ordered_json::array(), rrow = ordered_json::array();
    for (std::size_t c = 0; c < m.k; ++c) {
      nrow.push_back(m.nf_at(o, c));
      rrow.push_back(m.rnf_at(o, c));
    }
    nf.push_back(nrow);
    rnf.push_back(rrow);
  }
  j["nf_matrix"] = nf;
  j["rnf_matrix"] = rnf;
  return j.dump(2) + "\n";
}

std::string render_matrix(const MatrixResult& m) {
  std::ostringstream os;
  os << "model errors (sorted by robust error, descending):\n";
  for (std::size_t i = 0; i < m.k; ++i)
    os << "  " << m.names[i] << ": test " << pct2(m.test_error[i])
       << "%, robust " << pct2(m.robust_error[i]) << "%\n";
  const auto grid = [&](const char* title,
                        const std::vector<double>& cells) {
    os << title << " (rows: old, columns: new)\n      ";
    for (const std::string& n : m.names) os << " " << n << std::string(7 - std::min<std::size_t>(7, n.size()), ' ');
    os << "\n";
    for (std::size_t o = 0; o < m.k; ++o) {
      os << "  " << m.names[o] << std::string(4 - std::min<std::size_t>(4, m.names[o].size()), ' ');
      for (std::size_t c = 0; c < m.k; ++c) {
        char buf[16];
        std::snprintf(buf, sizeof buf, " %7.2f", cells[o * m.k + c]);
        os << buf;
      }
      os << "\n";
    }
  };
  grid("NF matrix (%)", m.nf);
  grid("RNF matrix (%)", m.rnf);
  return os.str();
}

std::string consistency_json(const std::string& experiment_id,
                             std::uint64_t seed,
                             const ConsistencyOutcome& c) {
  ordered_json j;
  j["schema"] = "report_v1";
  j["experiment"] = experiment_id;
  j["seed"] = seed;
  j["zero_one_free"] = ratefit_to_json(c.zero_one_free);
  j["zero_one_constrained"] = ratefit_to_json(c.zero_one_constrained);
  j["robust_free"] = ratefit_to_json(c.robust_free);
  j["robust_constrained"] = ratefit_to_json(c.robust_constrained);
  return j.dump(2) + "\n";
}

std::string render_consistency(const ConsistencyOutcome& c) {
  std::ostringstream os;
  const auto line = [&](const char* name, const RateFit& f) {
    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "%-22s slope %+.3f  intercept %+.3f  excess[%zu..%zu] "
                  "%.5f -> %.5f%s\n",
                  name, f.slope, f.intercept, f.n_list.front(),
                  f.n_list.back(), f.mean_excess.front(),
                  f.mean_excess.back(), f.saturated ? "  (saturated)" : "");
    os << buf;
  };
  line("zero-one", c.zero_one_free);
  line("zero-one constrained", c.zero_one_constrained);
  line("robust", c.robust_free);
  line("robust constrained", c.robust_constrained);
  return os.str();
}

void emit_file(const std::string& dir, const std::string& name,
               const std::string& text) {
  std::filesystem::create_directories(dir);
  const std::string path = dir + "/" + name;
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open report file: " + path);
  f << text;
  if (!f) throw IoError("report write failed: " + path);
}

}  // namespace flipguard
