#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mixnoise/mixnoise.hpp"

namespace {

using namespace mixnoise;

enum ExitCode { kOk = 0, kConfig = 2, kDependency = 3, kTrialFailure = 4 };

struct StageOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::string dir;
  std::optional<std::uint64_t> seed;
  std::optional<double> tau;
  std::optional<double> rho;
  std::optional<std::size_t> k;
  std::string method = "reweighted";
};

void add_stage_options(CLI::App* sub, StageOptions& o, bool needs_k, bool needs_method) {
  sub->add_option("-c,--config", o.config, "experiment TOML file")->required();
  sub->add_option("--set", o.overrides, "override a config key: section.key=value");
  sub->add_option("-d,--dir", o.dir, "trial directory (default: experiment.output_dir)");
  sub->add_option("--seed", o.seed, "trial seed (default: first configured seed)");
  sub->add_option("--tau", o.tau, "overall noise rate (default: first grid value)");
  sub->add_option("--rho", o.rho, "open-set share of the noise (default: first grid value)");
  if (needs_k) sub->add_option("-k,--k", o.k, "coarse cluster count (default: first of k_list)");
  if (needs_method) sub->add_option("-m,--method", o.method, "ce, forward or reweighted");
}

struct Resolved {
  ExperimentConfig cfg;
  StageContext ctx;
  std::size_t k = 1;
};

/// Loads the config and fills stage defaults from it.
Resolved resolve(const StageOptions& o) {
  Resolved r{load_config(o.config, o.overrides), {}, 1};
  r.ctx.seed = o.seed.value_or(r.cfg.seeds.front());
  r.ctx.tau = o.tau.value_or(r.cfg.taus.front());
  r.ctx.rho = o.rho.value_or(r.cfg.rhos.front());
  r.ctx.dir = o.dir.empty() ? r.cfg.output_dir : fs::path(o.dir);
  r.k = o.k.value_or(r.cfg.k_list.front());
  if (r.k < 1) throw ConfigError("--k must be >= 1");
  NoiseSpec::mixed(r.ctx.tau, r.ctx.rho).validate(r.cfg.mixture.c);
  return r;
}

std::vector<double> parse_sample(const std::string& text, const char* name) {
  std::vector<double> out;
  std::istringstream is(text);
  std::string cell;
  while (std::getline(is, cell, ',')) out.push_back(io::parse_double(cell, name));
  return out;
}

int run_ttest(const std::string& a, const std::string& b, bool welch, const std::string& dir) {
  if (!a.empty() || !b.empty()) {
    if (a.empty() || b.empty()) throw ConfigError("ttest needs both --a and --b");
    const auto r = ttest_independent(parse_sample(a, "--a"), parse_sample(b, "--b"), welch);
    std::printf("t=%.6f df=%.6g p=%.6f (%s)%s\n", r.t, r.df, r.p, format_pvalue(r.p).c_str(),
                r.degenerate ? " degenerate" : "");
    return kOk;
  }
  if (dir.empty()) throw ConfigError("ttest needs --a/--b samples or --dir with trials.csv");
  const auto trials = read_trials_csv(fs::path(dir) / "trials.csv");
  io::write_text(fs::path(dir) / "ttest.csv", ttest_csv(summarize_cells(trials)));
  std::cout << io::read_text(fs::path(dir) / "ttest.csv");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mixnoise: learning with mixed closed-set and open-set label noise"};
  app.require_subcommand(1);

  StageOptions synth_o, corrupt_o, warmup_o, estimate_o, train_o, eval_o;
  auto* synth = app.add_subcommand("synth", "draw the clean mixture and the open-set reservoir");
  add_stage_options(synth, synth_o, false, false);
  auto* corrupt = app.add_subcommand("corrupt", "inject mixed noise and write the true transition matrix");
  add_stage_options(corrupt, corrupt_o, false, false);
  auto* warmup = app.add_subcommand("warmup", "train the c-output warmup model on noisy labels");
  add_stage_options(warmup, warmup_o, false, false);
  auto* estimate = app.add_subcommand("estimate", "estimate the extended transition matrices");
  add_stage_options(estimate, estimate_o, true, false);
  auto* train = app.add_subcommand("train", "train a (c+1)-output classifier with one method");
  add_stage_options(train, train_o, true, true);
  auto* eval = app.add_subcommand("eval", "score a trained method on the clean test split");
  add_stage_options(eval, eval_o, true, true);

  std::string ta, tb, tdir;
  bool welch = false;
  auto* ttest = app.add_subcommand("ttest", "two independent samples t-test");
  ttest->add_option("--a", ta, "comma-separated first sample");
  ttest->add_option("--b", tb, "comma-separated second sample");
  ttest->add_flag("--welch", welch, "unequal-variance variant");
  ttest->add_option("-d,--dir", tdir, "experiment directory: rebuild ttest.csv from trials.csv");

  std::string exp_config;
  std::vector<std::string> exp_overrides;
  auto* experiment = app.add_subcommand("experiment", "run the full grid and write summary tables");
  experiment->add_option("-c,--config", exp_config, "experiment TOML file")->required();
  experiment->add_option("--set", exp_overrides, "override a config key: section.key=value");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfig;
  }

  try {
    if (*synth) {
      auto r = resolve(synth_o);
      r.ctx.cfg = &r.cfg;
      stage_synth(r.ctx);
    } else if (*corrupt) {
      auto r = resolve(corrupt_o);
      r.ctx.cfg = &r.cfg;
      stage_corrupt(r.ctx);
    } else if (*warmup) {
      auto r = resolve(warmup_o);
      r.ctx.cfg = &r.cfg;
      stage_warmup(r.ctx);
    } else if (*estimate) {
      auto r = resolve(estimate_o);
      r.ctx.cfg = &r.cfg;
      stage_estimate(r.ctx, r.k);
    } else if (*train) {
      auto r = resolve(train_o);
      r.ctx.cfg = &r.cfg;
      stage_train(r.ctx, method_from_string(train_o.method), r.k);
    } else if (*eval) {
      auto r = resolve(eval_o);
      r.ctx.cfg = &r.cfg;
      const auto rep = stage_eval(r.ctx, method_from_string(eval_o.method), r.k);
      std::printf("%s accuracy=%s err_Tstar=%.6f\n", rep.method.c_str(), format_percent(rep.test_accuracy).c_str(),
                  rep.l1_error_global);
    } else if (*ttest) {
      return run_ttest(ta, tb, welch, tdir);
    } else if (*experiment) {
      const auto cfg = load_config(exp_config, exp_overrides);
      const auto result = run_experiment(cfg);
      std::cout << io::read_text(cfg.output_dir / "summary.csv");
      if (!result.complete()) {
        std::cerr << "error: " << result.incomplete_cells << " cell(s) incomplete; see "
                  << (cfg.output_dir / "trials.csv").string() << "\n";
        return kTrialFailure;
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DependencyError& e) {
    std::cerr << "dependency error: missing " << e.missing() << ": " << e.what() << "\n";
    return kDependency;
  } catch (const Error& e) {
    std::cerr << e.kind() << " error: " << e.what() << "\n";
    return kTrialFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kTrialFailure;
  }
  return kOk;
}
