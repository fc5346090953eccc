#include "fedvi/experiment.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>

#include "binio.hpp"
#include "json.hpp"

namespace fedvi::exp {

using nlohmann::json;

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw OutputError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw OutputError("write failure on " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw OutputError("cannot open " + path.string() + " for reading");
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw OutputError("cannot create directory " + dir.string() + ": " + ec.message());
}

model::ArchConfig arch_from_json(const json& j) {
  model::ArchConfig a;
  a.input_dim = j.at("input_dim").get<std::size_t>();
  a.embed_widths = j.at("embed_widths").get<std::vector<std::size_t>>();
  a.local_dim = j.at("local_dim").get<std::size_t>();
  a.num_classes = j.at("num_classes").get<std::size_t>();
  a.posterior_widths = j.at("posterior_widths").get<std::vector<std::size_t>>();
  a.support_fraction = j.at("support_fraction").get<double>();
  a.mean_damp = j.at("mean_damp").get<double>();
  a.logscale_damp = j.at("logscale_damp").get<double>();
  a.scale_floor = j.at("scale_floor").get<double>();
  a.dropout = j.at("dropout").get<double>();
  a.post_out_init_scale = j.at("post_out_init_scale").get<double>();
  return a;
}

json arch_to_json(const model::ArchConfig& a) {
  return json{{"input_dim", a.input_dim},
              {"embed_widths", a.embed_widths},
              {"local_dim", a.local_dim},
              {"num_classes", a.num_classes},
              {"posterior_widths", a.posterior_widths},
              {"support_fraction", a.support_fraction},
              {"mean_damp", a.mean_damp},
              {"logscale_damp", a.logscale_damp},
              {"scale_floor", a.scale_floor},
              {"dropout", a.dropout},
              {"post_out_init_scale", a.post_out_init_scale}};
}

const char* source_name(config::Source s) {
  switch (s) {
    case config::Source::File: return "file";
    case config::Source::CommandLine: return "command line";
    default: return "default";
  }
}

void check_compatible(const model::ArchConfig& arch, const data::FederatedDataset& ds) {
  if (arch.input_dim != ds.input_dim() || arch.num_classes != ds.num_classes)
    throw config::ConfigError("model expects input_dim " + std::to_string(arch.input_dim) + " and " +
                              std::to_string(arch.num_classes) + " classes; dataset has " +
                              std::to_string(ds.input_dim()) + " and " + std::to_string(ds.num_classes));
}

}  // namespace

std::string arch_json(const model::ArchConfig& arch) { return arch_to_json(arch).dump(); }

void save_params(const model::FedVIParams& params, const std::filesystem::path& path, const std::string& provenance) {
  binio::Writer w;
  w.raw("FVIP", 4);
  w.u32(kParamsFormatVersion);
  json header{{"arch", arch_to_json(params.arch)}};
  try {
    header["provenance"] = json::parse(provenance);
  } catch (const json::exception&) {
    header["provenance"] = provenance;
  }
  w.bytes(header.dump());
  w.u64(params.blocks.size());
  for (const auto& b : params.blocks) {
    w.bytes(b.name);
    w.u64(b.value.rank());
    for (auto d : b.value.shape()) w.u64(d);
    for (double v : b.value.data()) w.f64(v);
  }
  binio::write_file<ParamsIoError>(path, w.buffer());
}

model::FedVIParams load_params(const std::filesystem::path& path) {
  binio::Reader<MalformedParamsError> r(binio::read_file<ParamsIoError>(path));
  if (r.raw(4) != "FVIP") throw MalformedParamsError(path.string() + " is not a parameter file");
  const auto version = r.u32();
  if (version != kParamsFormatVersion)
    throw MalformedParamsError("unsupported parameter file version " + std::to_string(version));
  model::FedVIParams p;
  try {
    p.arch = arch_from_json(json::parse(r.bytes()).at("arch"));
  } catch (const json::exception& e) {
    throw MalformedParamsError(std::string("bad parameter file header: ") + e.what());
  }
  const auto count = r.u64();
  if (count > 4096) throw MalformedParamsError("implausible block count");
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.bytes(4096);
    const auto rank = r.u64();
    if (rank == 0 || rank > 4) throw MalformedParamsError("bad rank for block " + name);
    nn::Shape shape;
    std::uint64_t total = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      shape.push_back(r.u64());
      if (shape.back() == 0 || shape.back() > (1u << 24)) throw MalformedParamsError("bad shape for block " + name);
      total *= shape.back();
    }
    r.need(total * 8);
    std::vector<double> values(total);
    for (auto& v : values) v = r.f64();
    try {
      p.blocks.add(std::move(name), nn::Tensor(std::move(shape), std::move(values)));
    } catch (const std::invalid_argument& e) {
      throw MalformedParamsError(e.what());
    }
  }
  if (r.remaining() != 0) throw MalformedParamsError("trailing bytes after parameter blocks");
  try {
    model::check_layout(p);
  } catch (const std::invalid_argument& e) {
    throw MalformedParamsError(e.what());
  }
  return p;
}

std::vector<MetricsRow> metrics_rows(std::span<const fed::RoundReport> reports) {
  std::vector<MetricsRow> rows;
  for (const auto& r : reports)
    if (r.evaluated) rows.push_back({r.round, r.mean_loss, r.part_acc, r.nonpart_acc, r.mean_kl, r.client_steps});
  return rows;
}

std::string metrics_csv(std::span<const MetricsRow> rows, const std::vector<std::string>& preamble) {
  std::string out;
  for (const auto& p : preamble) out += "# " + p + "\n";
  out += std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows)
    out += std::to_string(r.round) + "," + num(r.loss) + "," + num(r.part_acc) + "," + num(r.nonpart_acc) + "," +
           num(r.kl_mean) + "," + std::to_string(r.timestamp) + "\n";
  return out;
}

std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  bool header = false;
  std::vector<MetricsRow> rows;
  auto real = [](const std::string& s) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size()) throw MetricsSchemaError("bad numeric field '" + s + "'");
    return v;
  };
  auto integer = [](const std::string& s) {
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || p != s.data() + s.size())
      throw MetricsSchemaError("bad integer field '" + s + "'");
    return v;
  };
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != kMetricsHeader) throw MetricsSchemaError("unknown metrics schema: '" + line + "'");
      header = true;
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw MetricsSchemaError("expected 6 fields, got " + std::to_string(f.size()));
    rows.push_back({integer(f[0]), real(f[1]), real(f[2]), real(f[3]), real(f[4]), integer(f[5])});
  }
  if (!header) throw MetricsSchemaError("metrics header row missing");
  return rows;
}

std::vector<MetricsRow> read_metrics(const std::filesystem::path& path) { return parse_metrics_csv(read_text(path)); }

std::vector<std::string> provenance_lines(const config::ExperimentConfig& cfg) {
  std::vector<std::string> out{"fedvi run '" + cfg.label + "' seed " + std::to_string(cfg.seed)};
  for (const auto& e : cfg.entries()) out.push_back(e.key + " = " + e.value + "  (" + source_name(e.source) + ")");
  return out;
}

std::string config_json(const config::ExperimentConfig& cfg) {
  json values = json::object(), defaults = json::array();
  for (const auto& e : cfg.entries()) {
    values[e.key] = e.value;
    if (e.source == config::Source::Default) defaults.push_back(e.key);
  }
  return json{{"config", values}, {"defaults", defaults}}.dump();
}

data::FederatedDataset obtain_dataset(const config::ExperimentConfig& cfg) {
  if (!cfg.dataset.empty()) return data::load_dataset(cfg.dataset);
  Rng rng = make_stream(cfg.effective_data_seed(), {stream::kData});
  return data::generate_hierarchical(cfg.generator(), rng).dataset;
}

std::filesystem::path cmd_generate(const config::ExperimentConfig& cfg) {
  ensure_dir(cfg.out_dir);
  const auto path = std::filesystem::path(cfg.out_dir) / "dataset.fvds";
  const auto gen = cfg.generator();
  Rng rng = make_stream(gen.seed, {stream::kData});
  data::save_dataset(data::generate_hierarchical(gen, rng).dataset, path, &gen);
  return path;
}

TrainOutcome train_and_write(const config::ExperimentConfig& cfg, const data::FederatedDataset& ds,
                             const std::filesystem::path& out_dir) {
  check_compatible(cfg.arch, ds);
  ensure_dir(out_dir);
  fed::TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  const auto t0 = std::chrono::steady_clock::now();
  TrainOutcome o{fed::run_training(tc, cfg.arch, ds), out_dir / "metrics.csv", out_dir / "params.fvip",
                 out_dir / "summary.json"};
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const auto preamble = provenance_lines(cfg);
  const auto rows = metrics_rows(o.result.reports);
  write_text(o.metrics, metrics_csv(rows, preamble));
  save_params(o.result.state.params, o.params, config_json(cfg));

  const auto& s = o.result.summary;
  auto maybe = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  json summary = json::parse(config_json(cfg));
  summary["label"] = cfg.label;
  summary["seed"] = cfg.seed;
  summary["algorithm"] = fed::to_string(tc.algorithm);
  summary["rounds"] = tc.rounds;
  summary["status"] = s.window == 0 ? "no-data" : "ok";
  summary["window"] = s.window;
  summary["part_acc"] = maybe(s.part_acc);
  summary["nonpart_acc"] = maybe(s.nonpart_acc);
  summary["participation_gap"] = maybe(s.gap);
  summary["wall_seconds"] = wall;
  write_text(o.summary, summary.dump(2) + "\n");
  return o;
}

TrainOutcome cmd_train(const config::ExperimentConfig& cfg) {
  return train_and_write(cfg, obtain_dataset(cfg), cfg.out_dir);
}

std::uint64_t ablation_seed(std::uint64_t seed, double tau) {
  return splitmix64(seed ^ splitmix64(std::bit_cast<std::uint64_t>(tau)));
}

std::vector<AblationRow> run_ablation(const config::ExperimentConfig& cfg, std::vector<double> taus) {
  if (taus.empty()) throw config::ConfigError("tau list must not be empty", "ablate.taus");
  taus.push_back(0.0);
  std::sort(taus.begin(), taus.end());
  taus.erase(std::unique(taus.begin(), taus.end()), taus.end());
  const auto ds = obtain_dataset(cfg);
  ensure_dir(cfg.out_dir);
  std::vector<AblationRow> rows;
  for (double tau : taus) {
    AblationRow row{tau, 0.0, 0.0, 0.0, ablation_seed(cfg.seed, tau), {}};
    try {
      config::ExperimentConfig c = cfg;
      c.train.tau = tau;
      c.seed = row.train_seed;
      const auto o = train_and_write(c, ds, std::filesystem::path(cfg.out_dir) / ("tau_" + num(tau)));
      row.part_acc = o.result.summary.part_acc;
      row.nonpart_acc = o.result.summary.nonpart_acc;
      row.gap = o.result.summary.gap;
    } catch (const std::exception& e) {
      row.error = e.what();
      row.part_acc = row.nonpart_acc = row.gap = std::numeric_limits<double>::quiet_NaN();
    }
    rows.push_back(row);
  }
  write_text(std::filesystem::path(cfg.out_dir) / "ablation.csv", ablation_csv(rows, provenance_lines(cfg)));
  return rows;
}

std::string ablation_csv(std::span<const AblationRow> rows, const std::vector<std::string>& preamble) {
  std::string out;
  for (const auto& p : preamble) out += "# " + p + "\n";
  out += "tau,part_acc,nonpart_acc,gap,train_seed,status\n";
  for (const auto& r : rows) {
    std::string status = r.error.empty() ? "ok" : "error: " + r.error;
    std::replace(status.begin(), status.end(), ',', ';');
    std::replace(status.begin(), status.end(), '\n', ' ');
    out += num(r.tau) + "," + num(r.part_acc) + "," + num(r.nonpart_acc) + "," + num(r.gap) + "," +
           std::to_string(r.train_seed) + "," + status + "\n";
  }
  return out;
}

BoundReport compute_bound(const config::ExperimentConfig& cfg, const model::FedVIParams& params) {
  if (!cfg.dataset.empty())
    throw config::ConfigError("the bound needs the synthetic generator; unset run.dataset", "run.dataset");
  const auto gen = cfg.generator();
  Rng data_rng = make_stream(gen.seed, {stream::kData});
  const auto synth = data::generate_hierarchical(gen, data_rng);
  check_compatible(params.arch, synth.dataset);
  const auto m = bounds::anchor_model(params, synth.dataset);

  Rng rng = make_stream(cfg.seed, {stream::kBound});
  BoundReport r;
  r.eta = cfg.bound.eta;
  r.delta = cfg.bound.delta;
  bounds::SlackOptions opt;
  opt.eta = cfg.bound.eta;
  opt.delta = cfg.bound.delta;
  opt.prior_samples = cfg.bound.prior_samples;
  opt.data_draws = cfg.bound.data_draws;
  opt.true_risk_points = cfg.bound.true_risk_points;
  r.slack = bounds::estimate_slack(synth.truth, m, params.arch.prior(), opt, rng);
  const auto sample = bounds::draw_dataset(synth.truth, rng);
  r.eval = bounds::evaluate_bound(synth.truth, m, sample, cfg.bound, r.slack.log_moment, rng);
  r.trials = cfg.bound_trials;
  if (cfg.bound_trials > 0)
    r.holding_fraction =
        bounds::bound_holds_check(synth.truth, m, cfg.bound, r.slack.log_moment, cfg.bound_trials, rng)
            .holding_fraction;
  return r;
}

BoundReport cmd_bound(const config::ExperimentConfig& cfg, const std::filesystem::path& params_path) {
  const auto report = compute_bound(cfg, load_params(params_path));
  ensure_dir(cfg.out_dir);
  const std::filesystem::path out(cfg.out_dir);
  std::string text;
  for (const auto& p : provenance_lines(cfg)) text += "# " + p + "\n";
  write_text(out / "bound_report.txt", text + bound_report_text(report));
  write_text(out / "bound_report.csv", text + bound_report_csv(report));
  return report;
}

std::string bound_report_text(const BoundReport& r) {
  std::ostringstream o;
  o << "empirical_risk   " << num(r.eval.empirical_risk) << "\n"
    << "kl_local         " << num(r.eval.kl) << "\n"
    << "kl_theta         " << num(r.eval.theta_kl) << "  (point estimate: no prior over theta)\n"
    << "log_inv_delta    " << num(std::log(1.0 / r.delta)) << "\n"
    << "slack            " << num(r.slack.log_moment) << "\n"
    << "eta              " << num(r.eta) << "\n"
    << "delta            " << num(r.delta) << "\n"
    << "rhs              " << num(r.eval.rhs) << "\n"
    << "true_risk        " << num(r.eval.true_risk) << "\n";
  if (r.holding_fraction) o << "holding_fraction " << num(*r.holding_fraction) << " over " << r.trials << " trials\n";
  if (!r.slack.diagnostic.empty()) o << "warning          " << r.slack.diagnostic << "\n";
  return o.str();
}

std::string bound_report_csv(const BoundReport& r) {
  std::string out =
      "empirical_risk,kl,kl_theta,log_inv_delta,slack,eta,delta,rhs,true_risk,holding_fraction,trials,slack_finite,"
      "heavy_tail\n";
  out += num(r.eval.empirical_risk) + "," + num(r.eval.kl) + "," + num(r.eval.theta_kl) + "," +
         num(std::log(1.0 / r.delta)) + "," + num(r.slack.log_moment) + "," + num(r.eta) + "," + num(r.delta) + "," +
         num(r.eval.rhs) + "," + num(r.eval.true_risk) + "," +
         (r.holding_fraction ? num(*r.holding_fraction) : std::string("nan")) + "," + std::to_string(r.trials) + "," +
         (r.slack.finite ? "1" : "0") + "," + (r.slack.heavy_tail ? "1" : "0") + "\n";
  return out;
}

EvalOutcome cmd_eval(const config::ExperimentConfig& cfg, const std::filesystem::path& params_path) {
  const auto params = load_params(params_path);
  const auto ds = obtain_dataset(cfg);
  check_compatible(params.arch, ds);
  const auto part = fed::evaluate(params, ds, fed::participating_ids(ds), cfg.train.algorithm, cfg.train.batch_size);
  const auto hold = fed::evaluate(params, ds, fed::holdout_ids(ds), cfg.train.algorithm, cfg.train.batch_size);
  EvalOutcome o{part.accuracy, hold.accuracy, part.excluded + hold.excluded};
  ensure_dir(cfg.out_dir);
  auto maybe = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  json j = json::parse(config_json(cfg));
  j["part_acc"] = maybe(o.part_acc);
  j["nonpart_acc"] = maybe(o.nonpart_acc);
  j["excluded_clients"] = o.excluded;
  j["algorithm"] = fed::to_string(cfg.train.algorithm);
  write_text(std::filesystem::path(cfg.out_dir) / "eval.json", j.dump(2) + "\n");
  return o;
}

}  // namespace fedvi::exp
