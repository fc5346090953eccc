#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "doctest.h"
#include "fedvi/config.hpp"
#include "fedvi/experiment.hpp"
#include "test_util.hpp"

using namespace fedvi::config;
using namespace fedvi::exp;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("fedvi_harness_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

// A configuration small enough to train in well under a second.
const char* kSmall = R"(seed = 4
[data]
clients = 6
holdout = 2
n_min = 30
n_max = 40
input_dim = 4
num_classes = 3
[arch]
embed_widths = 6, 5
local_dim = 2
posterior_widths = 6
[train]
rounds = 3
cohort_size = 2
batch_size = 8
client_lr = 0.05
tau = 0.1
[bound]
prior_samples = 20
data_draws = 10
posterior_samples = 4
true_risk_points = 300
trials = 3
)";

ExperimentConfig small_config(const fs::path& out) {
  auto c = parse_config_text(kSmall);
  set_value(c, "run.out", out.string(), Source::CommandLine);
  return c;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FEDVI_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("a file with only a seed takes every documented default") {
  const auto c = parse_config_text("seed = 17\n");
  const ExperimentConfig d;
  CHECK(c.seed == 17);
  CHECK(c.effective_data_seed() == 17);
  CHECK(c.source_of("run.seed") == Source::File);
  CHECK(c.gen.clients == d.gen.clients);
  CHECK(c.gen.holdout == d.gen.holdout);
  CHECK(c.gen.sigma_beta == d.gen.sigma_beta);
  CHECK(c.arch.embed_widths == d.arch.embed_widths);
  CHECK(c.arch.local_dim == d.arch.local_dim);
  CHECK(c.train.rounds == d.train.rounds);
  CHECK(c.train.client_lr == d.train.client_lr);
  CHECK(c.train.tau == d.train.tau);
  CHECK(c.bound.eta == d.bound.eta);
  CHECK(c.taus == d.taus);
  std::size_t defaults = 0;
  for (const auto& e : c.entries()) {
    if (e.key != "run.seed") CHECK(e.source == Source::Default);
    defaults += e.source == Source::Default;
  }
  CHECK(defaults + 1 == c.entries().size());
  // Every default is echoed in the provenance lines.
  std::size_t echoed = 0;
  for (const auto& l : provenance_lines(c)) echoed += l.find("(default)") != std::string::npos;
  CHECK(echoed == defaults);
}

TEST_CASE("cohort larger than the participating clients names both values") {
  try {
    parse_config_text("[data]\nclients = 10\nholdout = 2\n[train]\ncohort_size = 12\n");
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("12") != std::string::npos);
    CHECK(msg.find('8') != std::string::npos);
    CHECK(e.key() == "train.cohort_size");
    CHECK(e.line() == 5);
  }
}

TEST_CASE("unknown keys and bad values report the key and line") {
  try {
    parse_config_text("seed = 1\n\n[train]\nrounds = 3\nlearning_rate = 0.1\n");
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(e.key() == "train.learning_rate");
    CHECK(e.line() == 5);
    CHECK(std::string(e.what()).find("line 5") != std::string::npos);
  }
  try {
    parse_config_text("[train]\nrounds = many\n");
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(e.key() == "train.rounds");
    CHECK(e.line() == 2);
  }
  CHECK_THROWS_AS(parse_config_text("[nowhere]\nx = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("[train]\nrounds = 3\nrounds = 4\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("[train]\nalgorithm = sgd\n"), ConfigError);
  CHECK_THROWS_AS(parse_config(fs::path("/nonexistent/fedvi.cfg")), ConfigIoError);
}

TEST_CASE("published optimiser settings round-trip unchanged") {
  const auto c = parse_config_text(
      "[train]\ntau = 1e-9\nclient_lr = 0.02\nserver_lr = 3.0\nserver_momentum = 0.9\nrounds = 1500\n"
      "batch_size = 256\n");
  CHECK(c.train.tau == 1e-9);
  CHECK(c.train.client_lr == 0.02);
  CHECK(c.train.server_lr == 3.0);
  CHECK(c.train.server_momentum == 0.9);
  CHECK(c.train.rounds == 1500);
  CHECK(c.train.batch_size == 256);
  const auto back = parse_config_text(to_config_text(c));
  CHECK(to_config_text(back) == to_config_text(c));
  CHECK(back.train.tau == 1e-9);
  CHECK(back.train.client_lr == 0.02);
  CHECK(back.train.server_lr == 3.0);
  CHECK(back.train.server_momentum == 0.9);
  CHECK(back.train.rounds == 1500);
  CHECK(back.train.batch_size == 256);
}

TEST_CASE("to_config_text round-trips a fully specified config") {
  const auto c = parse_config_text(kSmall);
  const auto back = parse_config_text(to_config_text(c));
  const auto a = c.entries(), b = back.entries();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].key == b[i].key);
    CHECK(a[i].value == b[i].value);
  }
}

TEST_CASE("metrics CSV round-trips and rejects other schemas") {
  const std::vector<MetricsRow> rows{{1, 0.5, 0.25, 0.125, 3.5, 40}, {2, 1.0 / 3.0, 0.7, 0.6, 0.1, 80}};
  const std::string text = metrics_csv(rows, {"seed 3"});
  CHECK(text.rfind("# seed 3\nround,loss,part_acc,nonpart_acc,kl_mean,timestamp\n", 0) == 0);
  const auto back = parse_metrics_csv(text);
  REQUIRE(back.size() == 2);
  CHECK(back[1].loss == rows[1].loss);
  CHECK(back[1].timestamp == 80);
  CHECK_THROWS_AS(parse_metrics_csv("round,loss,acc\n1,2,3\n"), MetricsSchemaError);
  CHECK_THROWS_AS(parse_metrics_csv("round,loss,part_acc,nonpart_acc,kl_mean,timestamp,extra\n"), MetricsSchemaError);
  CHECK_THROWS_AS(parse_metrics_csv("round,loss,part_acc,nonpart_acc,kl_mean,timestamp\n1,2,3\n"), MetricsSchemaError);
  CHECK_THROWS_AS(parse_metrics_csv("# only a comment\n"), MetricsSchemaError);
}

TEST_CASE("cmd_train with zero rounds writes a header and a no-data summary") {
  TempDir dir("zero");
  auto c = small_config(dir.path);
  set_value(c, "train.rounds", "0", Source::CommandLine);
  const auto o = cmd_train(c);
  CHECK(read_metrics(o.metrics).empty());
  const auto summary = slurp(o.summary);
  CHECK(summary.find("\"status\": \"no-data\"") != std::string::npos);
  CHECK(summary.find("\"part_acc\": null") != std::string::npos);
}

TEST_CASE("cmd_train output files") {
  TempDir dir("train");
  const auto c = small_config(dir.path);
  const auto o = cmd_train(c);
  const auto rows = read_metrics(o.metrics);
  REQUIRE(rows.size() == 3);
  CHECK(rows[2].round == 3);
  CHECK(rows[0].timestamp < rows[2].timestamp);
  const std::string metrics = slurp(o.metrics);
  CHECK(metrics.find("# fedvi run") == 0);
  CHECK(metrics.find("run.seed = 4  (file)") != std::string::npos);
  CHECK(metrics.find("run.out = ") != std::string::npos);
  const auto summary = slurp(o.summary);
  CHECK(summary.find("\"participation_gap\"") != std::string::npos);
  CHECK(summary.find("\"run.seed\": \"4\"") != std::string::npos);
  const auto p = load_params(o.params);
  CHECK(p.blocks == o.result.state.params.blocks);
  CHECK(arch_json(p.arch) == arch_json(c.arch));
}

TEST_CASE("identical configurations give byte-identical outputs") {
  TempDir dir("same");
  const auto c = small_config(dir.path);
  const auto first = cmd_train(c);
  const std::string metrics = slurp(first.metrics), params = slurp(first.params);
  const auto second = cmd_train(c);
  CHECK(slurp(second.metrics) == metrics);
  CHECK(slurp(second.params) == params);
}

TEST_CASE("parameter files round-trip and fail loudly") {
  TempDir dir("params");
  auto p = fedvi::fed::initial_params(testutil::tiny_arch(), 3);
  const auto path = dir.path / "p.fvip";
  save_params(p, path, R"({"note":"x"})");
  const auto back = load_params(path);
  CHECK(back.blocks == p.blocks);
  CHECK(arch_json(back.arch) == arch_json(p.arch));

  CHECK_THROWS_AS(load_params(dir.path / "missing.fvip"), ParamsIoError);
  std::string bytes = slurp(path);
  spit(dir.path / "short.fvip", bytes.substr(0, bytes.size() - 5));
  CHECK_THROWS_AS(load_params(dir.path / "short.fvip"), MalformedParamsError);
  spit(dir.path / "junk.fvip", "not a parameter file at all");
  CHECK_THROWS_AS(load_params(dir.path / "junk.fvip"), MalformedParamsError);
  std::string versioned = bytes;
  versioned[4] = 9;
  spit(dir.path / "v.fvip", versioned);
  CHECK_THROWS_AS(load_params(dir.path / "v.fvip"), MalformedParamsError);
}

TEST_CASE("ablation with a single tau of zero gives one row") {
  TempDir dir("ablate");
  const auto c = small_config(dir.path);
  const auto rows = run_ablation(c, {0.0});
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].tau == 0.0);
  CHECK(rows[0].error.empty());
  CHECK(rows[0].gap == doctest::Approx(rows[0].part_acc - rows[0].nonpart_acc));
  CHECK(fs::exists(dir.path / "ablation.csv"));
}

TEST_CASE("ablation adds tau = 0, sorts, and uses distinct training seeds") {
  TempDir dir("ablate2");
  const auto c = small_config(dir.path);
  const auto rows = run_ablation(c, {1.0, 1e-3});
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].tau == 0.0);
  CHECK(rows[1].tau == 1e-3);
  CHECK(rows[2].tau == 1.0);
  CHECK(rows[0].train_seed != rows[1].train_seed);
  CHECK(rows[1].train_seed != rows[2].train_seed);
  const std::string csv = slurp(dir.path / "ablation.csv");
  CHECK(csv.find("tau,part_acc,nonpart_acc,gap,train_seed,status\n") != std::string::npos);
  CHECK_THROWS_AS(run_ablation(c, {}), ConfigError);
}

TEST_CASE("bound report arithmetic") {
  TempDir dir("bound");
  auto c = small_config(dir.path);
  set_value(c, "bound.eta", "2.5", Source::CommandLine);
  const auto params = fedvi::fed::initial_params(c.arch, 7);
  const auto r = compute_bound(c, params);
  const double rhs = r.eval.empirical_risk + (r.eval.kl + std::log(1.0 / r.delta) + r.slack.log_moment) / r.eta;
  CHECK(std::abs(r.eval.rhs - rhs) < 1e-10);
  CHECK(r.eval.theta_kl == 0.0);
  REQUIRE(r.holding_fraction.has_value());
  CHECK(*r.holding_fraction >= 0.0);
  CHECK(bound_report_text(r).find("kl_theta") != std::string::npos);
  CHECK(bound_report_csv(r).find("empirical_risk,kl,kl_theta") == 0);
}

TEST_CASE("bound report collapses to the empirical risk with delta = 1 and zero KL") {
  TempDir dir("bound1");
  auto c = small_config(dir.path);
  set_value(c, "bound.delta", "1", Source::CommandLine);
  set_value(c, "arch.scale_floor", "0", Source::CommandLine);
  auto params = fedvi::fed::initial_params(c.arch, 7);
  // A zero posterior network returns the prior itself.
  for (auto& b : params.blocks)
    if (b.name.rfind("post.", 0) == 0) b.value.fill(0.0);
  auto r = compute_bound(c, params);
  CHECK(r.eval.kl == 0.0);
  CHECK(std::abs(r.eval.rhs - (r.eval.empirical_risk + r.slack.log_moment / r.eta)) < 1e-12);
  r.slack.log_moment = 0.0;
  CHECK(fedvi::bounds::pacbayes_rhs(r.eval.empirical_risk, r.eval.kl, r.eta, r.delta, 0.0) ==
        r.eval.empirical_risk);
}

TEST_CASE("cmd_bound refuses a loaded dataset") {
  TempDir dir("bound2");
  auto c = small_config(dir.path);
  c.dataset = (dir.path / "x.fvds").string();
  CHECK_THROWS_AS(compute_bound(c, fedvi::fed::initial_params(c.arch, 1)), ConfigError);
}

TEST_CASE("generate then eval on the saved dataset") {
  TempDir dir("gen");
  auto c = small_config(dir.path);
  const auto data_path = cmd_generate(c);
  CHECK(fs::exists(data_path));
  const auto o = cmd_train(c);
  auto from_file = c;
  set_value(from_file, "run.dataset", data_path.string(), Source::CommandLine);
  const auto e = cmd_eval(from_file, o.params);
  CHECK(e.part_acc == o.result.reports.back().part_acc);
  CHECK(e.nonpart_acc == o.result.reports.back().nonpart_acc);
}

TEST_CASE("command-line exit codes") {
  TempDir dir("cli");
  const auto cfg = dir.path / "small.cfg";
  spit(cfg, kSmall);
  const std::string out = " --out " + (dir.path / "out").string();
  CHECK(run_cli("train --config " + cfg.string() + out) == 0);
  CHECK(fs::exists(dir.path / "out" / "metrics.csv"));
  CHECK(run_cli("train --config " + cfg.string() + out + " --seed 9 --algorithm fedavg --tau 0") == 0);
  CHECK(run_cli("eval --config " + cfg.string() + out + " --params " + (dir.path / "out" / "params.fvip").string()) ==
        0);

  spit(dir.path / "bad.cfg", "[train]\nwhatever = 1\n");
  CHECK(run_cli("train --config " + (dir.path / "bad.cfg").string() + out) == 2);
  CHECK(run_cli("train --config " + cfg.string() + out + " --algorithm sgd") == 2);
  CHECK(run_cli("bogus") == 2);
  CHECK(run_cli("train --config " + (dir.path / "missing.cfg").string() + out) == 3);
  CHECK(run_cli("eval --config " + cfg.string() + out + " --params " + (dir.path / "none.fvip").string()) == 3);

  std::string diverge = kSmall;
  diverge.replace(diverge.find("client_lr = 0.05"), 16, "client_lr = 1e250");
  spit(dir.path / "diverge.cfg", diverge);
  CHECK(run_cli("train --config " + (dir.path / "diverge.cfg").string() + out) == 4);
}
