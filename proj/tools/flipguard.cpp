// flipguard command-line driver: builds model zoos, measures update
// regression (NF/RNF matrices, single and sequential updates) and runs
// the estimator-consistency experiment. Exit codes: 0 ok, 2 bad
// configuration, 3 numerical abort.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>

#include "CLI11.hpp"
#include "flipguard/harness.hpp"

namespace fg = flipguard;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  std::string method = "rcat";
  std::uint64_t seed = 0;
  bool seed_set = false;
  double eps = -1.0;
  int eval_iters = -1;
};

fg::ExperimentConfig resolve_config(const CommonOpts& o) {
  fg::ExperimentConfig cfg = o.config_path.empty()
                                 ? fg::ExperimentConfig::defaults()
                                 : fg::load_config(o.config_path);
  if (o.seed_set) cfg.master_seed = o.seed;
  if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
  if (o.eps > 0) cfg.eps = o.eps;
  if (o.eval_iters > 0) cfg.eval_iters = o.eval_iters;
  return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "experiment config file");
  cmd->add_option("--seed", o.seed, "master seed")
      ->each([&](const std::string&) { o.seed_set = true; });
  cmd->add_option("--out", o.out_dir, "output directory");
  cmd->add_option("--eval-iters", o.eval_iters,
                  "evaluation attack iterations (default 50)");
  cmd->add_option("--eps", o.eps, "perturbation budget");
}

int run_zoo(const CommonOpts& o) {
  const fg::ExperimentConfig cfg = resolve_config(o);
  const fg::DatasetSplit split = fg::make_dataset(cfg);
  const fg::Zoo zoo = fg::build_model_zoo(cfg, split);
  std::ostringstream os;
  for (const fg::ZooModel& zm : zoo.entries) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-8s test %6.2f%%  robust %6.2f%%\n",
                  zm.model.meta.name.c_str(), zm.test_error,
                  zm.robust_error);
    os << buf;
  }
  fg::emit_file(cfg.out_dir, "zoo.txt", os.str());
  std::cout << os.str();
  std::cout << "checkpoints written to " << cfg.out_dir << "/zoo\n";
  return 0;
}

int run_matrix(const CommonOpts& o) {
  const fg::ExperimentConfig cfg = resolve_config(o);
  const fg::DatasetSplit split = fg::make_dataset(cfg);
  const fg::Zoo zoo = fg::build_model_zoo(cfg, split);
  const fg::MatrixResult m = fg::run_update_matrix(zoo, cfg, split);
  fg::emit_file(cfg.out_dir, "matrix.report.json",
                fg::matrix_json("matrix", fg::config_echo(cfg),
                                cfg.master_seed, m));
  const std::string table = fg::render_matrix(m);
  fg::emit_file(cfg.out_dir, "matrix.txt", table);
  std::cout << table;
  return 0;
}

int run_update(const CommonOpts& o, const std::string& old_name,
               const std::string& new_name) {
  const fg::ExperimentConfig cfg = resolve_config(o);
  const fg::DatasetSplit split = fg::make_dataset(cfg);
  const fg::Zoo zoo = fg::build_model_zoo(cfg, split);
  std::size_t oi, ni;
  if (old_name.empty() != new_name.empty())
    throw fg::ConfigError("update: give both --old and --new, or neither");
  if (old_name.empty()) {
    std::tie(oi, ni) = fg::select_default_update(zoo, cfg, split);
  } else {
    oi = zoo.index_of(old_name);
    ni = zoo.index_of(new_name);
  }
  const fg::UpdateMethod method = fg::update_method_from_name(o.method);
  const fg::UpdateOutcome out =
      fg::run_single_update(zoo, oi, ni, method, cfg, split);
  std::vector<fg::FlipReport> rows{out.naive_report, out.method_report};
  const std::string id = "update_" + o.method;
  fg::emit_file(cfg.out_dir, id + ".report.json",
                fg::flip_reports_json(id, fg::config_echo(cfg),
                                      cfg.master_seed, rows));
  const std::string table = fg::render_table(rows);
  fg::emit_file(cfg.out_dir, id + ".txt", table);
  std::cout << table;
  return 0;
}

int run_sequential_cmd(const CommonOpts& o) {
  const fg::ExperimentConfig cfg = resolve_config(o);
  const fg::DatasetSplit split = fg::make_dataset(cfg);
  const fg::Zoo zoo = fg::build_model_zoo(cfg, split);
  std::vector<std::size_t> chain(zoo.entries.size());
  std::iota(chain.begin(), chain.end(), 0);  // worst to best robust error
  const fg::UpdateMethod method = fg::update_method_from_name(o.method);
  const auto reports = fg::run_sequential(zoo, chain, method, cfg, split);
  const std::string id = "sequential_" + o.method;
  fg::emit_file(cfg.out_dir, id + ".report.json",
                fg::flip_reports_json(id, fg::config_echo(cfg),
                                      cfg.master_seed, reports));
  const std::string table = fg::render_table(reports);
  fg::emit_file(cfg.out_dir, id + ".txt", table);
  std::cout << table;
  return 0;
}

int run_consistency_cmd(const CommonOpts& o, int trials) {
  const fg::ExperimentConfig cfg = resolve_config(o);
  const std::vector<std::size_t> n_list{128, 256, 512, 1024,
                                        2048, 4096, 8192};
  const fg::ConsistencyOutcome out =
      fg::run_consistency(n_list, trials, cfg.master_seed);
  fg::emit_file(cfg.out_dir, "consistency.report.json",
                fg::consistency_json("consistency", cfg.master_seed, out));
  const std::string table = fg::render_consistency(out);
  fg::emit_file(cfg.out_dir, "consistency.txt", table);
  std::cout << table;
  return 0;
}

int run_report(const std::string& in_path) {
  std::ifstream f(in_path, std::ios::binary);
  if (!f) throw fg::IoError("cannot open report: " + in_path);
  std::ostringstream ss;
  ss << f.rdbuf();
  const auto reports = fg::parse_flip_reports(ss.str());
  std::cout << fg::render_table(reports);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"regression-aware model update toolkit"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string old_name, new_name, report_in;
  int trials = 20;

  CLI::App* zoo = app.add_subcommand("zoo", "model zoo operations");
  zoo->require_subcommand(1);
  CLI::App* zoo_build =
      zoo->add_subcommand("build", "train and measure the zoo");
  add_common(zoo_build, opts);

  CLI::App* matrix =
      app.add_subcommand("matrix", "NF/RNF matrix over all zoo pairs");
  add_common(matrix, opts);

  CLI::App* update = app.add_subcommand("update", "single model update");
  add_common(update, opts);
  update->add_option("--method", opts.method, "naive|pct|pcat|rcat");
  update->add_option("--old", old_name, "old model name");
  update->add_option("--new", new_name, "replacement model name");

  CLI::App* sequential =
      app.add_subcommand("sequential", "chained updates across the zoo");
  add_common(sequential, opts);
  sequential->add_option("--method", opts.method, "naive|pct|pcat|rcat");

  CLI::App* consistency =
      app.add_subcommand("consistency", "estimator consistency experiment");
  add_common(consistency, opts);
  consistency->add_option("--trials", trials, "trials per sample size");

  CLI::App* report = app.add_subcommand("report", "render a report file");
  report->add_option("--in", report_in, "report json")->required();

  try {
    app.parse(argc, argv);
    if (zoo_build->parsed()) return run_zoo(opts);
    if (matrix->parsed()) return run_matrix(opts);
    if (update->parsed()) return run_update(opts, old_name, new_name);
    if (sequential->parsed()) return run_sequential_cmd(opts);
    if (consistency->parsed()) return run_consistency_cmd(opts, trials);
    if (report->parsed()) return run_report(report_in);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  } catch (const fg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const fg::NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
