// fedvi: command-line front end for the federated simulator.
//
// Exit status: 0 success, 1 unexpected failure, 2 configuration error,
// 3 I/O error, 4 numeric failure.

#include <cmath>
#include <cstdio>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "fedvi/config.hpp"
#include "fedvi/datagen.hpp"
#include "fedvi/experiment.hpp"
#include "fedvi/nn/tensor.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

struct Options {
  std::string config;
  std::string out;
  std::string seed;
  std::string algorithm;
  std::string tau;
  std::string params;
  std::string trials;
};

fedvi::config::ExperimentConfig resolve(const Options& o) {
  using fedvi::config::Source;
  auto cfg = o.config.empty() ? fedvi::config::ExperimentConfig{} : fedvi::config::parse_config(o.config);
  auto set = [&](const char* key, const std::string& v) {
    if (!v.empty()) fedvi::config::set_value(cfg, key, v, Source::CommandLine);
  };
  set("run.out", o.out);
  set("run.seed", o.seed);
  set("train.algorithm", o.algorithm);
  set("train.tau", o.tau);
  set("run.params", o.params);
  set("bound.trials", o.trials);
  cfg.validate();
  return cfg;
}

std::string pct(double v) {
  if (!std::isfinite(v)) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
  return buf;
}

std::string params_path(const fedvi::config::ExperimentConfig& cfg) {
  if (cfg.params.empty())
    throw fedvi::config::ConfigError("a parameter file is required (--params or run.params)", "run.params");
  return cfg.params;
}

int run(const std::string& command, const Options& o) {
  const auto cfg = resolve(o);
  namespace exp = fedvi::exp;
  if (command == "generate") {
    std::cout << "dataset written to " << exp::cmd_generate(cfg).string() << "\n";
  } else if (command == "train") {
    const auto out = exp::cmd_train(cfg);
    const auto& s = out.result.summary;
    std::cout << "rounds " << out.result.reports.size() << ", summary over " << s.window << " evaluated rounds\n"
              << "participating accuracy     " << pct(s.part_acc) << "\n"
              << "non-participating accuracy " << pct(s.nonpart_acc) << "\n"
              << "metrics " << out.metrics.string() << "\nparams  " << out.params.string() << "\nsummary "
              << out.summary.string() << "\n";
  } else if (command == "ablate") {
    const auto rows = exp::run_ablation(cfg, cfg.taus);
    std::cout << "tau            part_acc  nonpart_acc  gap\n";
    int failures = 0;
    for (const auto& r : rows) {
      char line[160];
      std::snprintf(line, sizeof line, "%-14g %-9s %-12s %+.4f", r.tau, pct(r.part_acc).c_str(),
                    pct(r.nonpart_acc).c_str(), r.gap);
      std::cout << line << (r.error.empty() ? "" : "  error: " + r.error) << "\n";
      failures += !r.error.empty();
    }
    std::cout << "table written to " << (std::filesystem::path(cfg.out_dir) / "ablation.csv").string() << "\n";
    if (failures > 0) return 1;
  } else if (command == "bound") {
    std::cout << exp::bound_report_text(exp::cmd_bound(cfg, params_path(cfg)));
  } else if (command == "eval") {
    const auto e = exp::cmd_eval(cfg, params_path(cfg));
    std::cout << "participating accuracy     " << pct(e.part_acc) << "\n"
              << "non-participating accuracy " << pct(e.nonpart_acc) << "\n";
    if (e.excluded > 0) std::cout << "excluded clients           " << e.excluded << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated variational inference simulator"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Experiment configuration file");
    sub->add_option("--out", o.out, "Output directory");
    sub->add_option("--seed", o.seed, "Run seed (overrides the config)");
    sub->add_option("--algorithm", o.algorithm, "fedvi or fedavg");
    sub->add_option("--tau", o.tau, "KL weight tau");
  };
  add_common(app.add_subcommand("generate", "Generate a synthetic federated dataset"));
  add_common(app.add_subcommand("train", "Train and write metrics, parameters and a summary"));
  add_common(app.add_subcommand("ablate", "Sweep tau and tabulate participation gaps"));
  auto* bound = app.add_subcommand("bound", "PAC-Bayes bound report for saved parameters");
  add_common(bound);
  bound->add_option("--params", o.params, "Parameter file");
  bound->add_option("--trials", o.trials, "Fresh datasets for the holding-fraction check");
  auto* eval = app.add_subcommand("eval", "Evaluate saved parameters on a dataset");
  add_common(eval);
  eval->add_option("--params", o.params, "Parameter file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, o);
  } catch (const fedvi::config::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fedvi::config::ConfigIoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fedvi::data::DatasetIoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fedvi::data::MalformedDatasetError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fedvi::data::VersionMismatchError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fedvi::exp::ParamsIoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fedvi::exp::MalformedParamsError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fedvi::exp::OutputError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fedvi::nn::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
