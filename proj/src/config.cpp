#include "fedvi/config.hpp"

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace fedvi::config {

namespace {

std::string describe(const std::string& msg, const std::string& key, std::size_t line) {
  std::string out;
  if (line > 0) out += "line " + std::to_string(line) + ": ";
  if (!key.empty()) out += key + ": ";
  return out + msg;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t to_u64(const std::string& s) {
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size())
    throw std::invalid_argument("expected a non-negative integer, got '" + s + "'");
  return v;
}

std::size_t to_size(const std::string& s) { return static_cast<std::size_t>(to_u64(s)); }

double to_double(const std::string& s) {
  if (s.empty()) throw std::invalid_argument("expected a number, got an empty value");
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || errno == ERANGE || !std::isfinite(v))
    throw std::invalid_argument("expected a finite number, got '" + s + "'");
  return v;
}

template <class T, class F>
std::vector<T> to_list(const std::string& s, F parse) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse(trim(item)));
  if (out.empty()) throw std::invalid_argument("expected a comma-separated list");
  return out;
}

std::string fmt(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}
std::string fmt(std::uint64_t v) { return std::to_string(v); }

template <class T>
std::string fmt_list(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(static_cast<std::conditional_t<std::is_integral_v<T>, std::uint64_t, double>>(v[i]));
  return out;
}

struct KeyDef {
  std::string name;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

#define FEDVI_SIZE(key, field) \
  KeyDef { key, [](const ExperimentConfig& c) { return fmt(std::uint64_t{c.field}); }, [](ExperimentConfig& c, const std::string& v) { c.field = to_size(v); } }
#define FEDVI_REAL(key, field) \
  KeyDef { key, [](const ExperimentConfig& c) { return fmt(c.field); }, [](ExperimentConfig& c, const std::string& v) { c.field = to_double(v); } }
#define FEDVI_TEXT(key, field) \
  KeyDef { key, [](const ExperimentConfig& c) { return c.field; }, [](ExperimentConfig& c, const std::string& v) { c.field = v; } }

const std::vector<KeyDef>& key_defs() {
  static const std::vector<KeyDef> defs = {
      FEDVI_TEXT("run.label", label),
      KeyDef{"run.seed", [](const ExperimentConfig& c) { return fmt(c.seed); },
             [](ExperimentConfig& c, const std::string& v) { c.seed = to_u64(v); }},
      FEDVI_TEXT("run.dataset", dataset),
      FEDVI_TEXT("run.out", out_dir),
      FEDVI_TEXT("run.params", params),
      FEDVI_SIZE("run.threads", train.threads),
      KeyDef{"data.seed", [](const ExperimentConfig& c) { return fmt(c.effective_data_seed()); },
             [](ExperimentConfig& c, const std::string& v) { c.data_seed = to_u64(v); }},
      FEDVI_SIZE("data.clients", gen.clients),
      FEDVI_SIZE("data.holdout", gen.holdout),
      FEDVI_SIZE("data.n_min", gen.n_min),
      FEDVI_SIZE("data.n_max", gen.n_max),
      KeyDef{"data.input_dim", [](const ExperimentConfig& c) { return fmt(std::uint64_t{c.gen.input_dim}); },
             [](ExperimentConfig& c, const std::string& v) { c.gen.input_dim = c.arch.input_dim = to_size(v); }},
      KeyDef{"data.num_classes", [](const ExperimentConfig& c) { return fmt(std::uint64_t{c.gen.num_classes}); },
             [](ExperimentConfig& c, const std::string& v) { c.gen.num_classes = c.arch.num_classes = to_size(v); }},
      FEDVI_REAL("data.sigma_beta", gen.sigma_beta),
      FEDVI_REAL("data.input_shift_scale", gen.input_shift_scale),
      FEDVI_REAL("data.shift_coupling", gen.shift_coupling),
      FEDVI_REAL("data.train_fraction", gen.train_fraction),
      KeyDef{"arch.embed_widths", [](const ExperimentConfig& c) { return fmt_list(c.arch.embed_widths); },
             [](ExperimentConfig& c, const std::string& v) { c.arch.embed_widths = to_list<std::size_t>(v, to_size); }},
      FEDVI_SIZE("arch.local_dim", arch.local_dim),
      KeyDef{"arch.posterior_widths", [](const ExperimentConfig& c) { return fmt_list(c.arch.posterior_widths); },
             [](ExperimentConfig& c, const std::string& v) {
               c.arch.posterior_widths = trim(v).empty() ? std::vector<std::size_t>{}
                                                         : to_list<std::size_t>(v, to_size);
             }},
      FEDVI_REAL("arch.support_fraction", arch.support_fraction),
      FEDVI_REAL("arch.mean_damp", arch.mean_damp),
      FEDVI_REAL("arch.logscale_damp", arch.logscale_damp),
      FEDVI_REAL("arch.scale_floor", arch.scale_floor),
      FEDVI_REAL("arch.dropout", arch.dropout),
      FEDVI_REAL("arch.post_out_init_scale", arch.post_out_init_scale),
      FEDVI_SIZE("train.rounds", train.rounds),
      FEDVI_SIZE("train.cohort_size", train.cohort_size),
      FEDVI_REAL("train.client_lr", train.client_lr),
      FEDVI_REAL("train.server_lr", train.server_lr),
      FEDVI_REAL("train.server_momentum", train.server_momentum),
      FEDVI_SIZE("train.local_epochs", train.local_epochs),
      FEDVI_SIZE("train.batch_size", train.batch_size),
      FEDVI_REAL("train.tau", train.tau),
      FEDVI_REAL("train.gamma", train.gamma),
      KeyDef{"train.algorithm", [](const ExperimentConfig& c) { return fed::to_string(c.train.algorithm); },
             [](ExperimentConfig& c, const std::string& v) { c.train.algorithm = fed::parse_algorithm(v); }},
      FEDVI_SIZE("train.eval_every", train.eval_every),
      FEDVI_SIZE("train.summary_window", train.summary_window),
      FEDVI_REAL("bound.eta", bound.eta),
      FEDVI_REAL("bound.delta", bound.delta),
      FEDVI_SIZE("bound.prior_samples", bound.prior_samples),
      FEDVI_SIZE("bound.data_draws", bound.data_draws),
      FEDVI_SIZE("bound.posterior_samples", bound.posterior_samples),
      FEDVI_SIZE("bound.true_risk_points", bound.true_risk_points),
      FEDVI_SIZE("bound.trials", bound_trials),
      KeyDef{"ablate.taus", [](const ExperimentConfig& c) { return fmt_list(c.taus); },
             [](ExperimentConfig& c, const std::string& v) { c.taus = to_list<double>(v, to_double); }},
  };
  return defs;
}

#undef FEDVI_SIZE
#undef FEDVI_REAL
#undef FEDVI_TEXT

const KeyDef* find_key(const std::string& key) {
  for (const auto& d : key_defs())
    if (d.name == key) return &d;
  return nullptr;
}

const std::vector<std::string> kSections{"run", "data", "arch", "train", "bound", "ablate"};

}  // namespace

ConfigError::ConfigError(const std::string& msg, std::string key, std::size_t line)
    : std::runtime_error(describe(msg, key, line)), key_(std::move(key)), line_(line) {}

data::GenConfig ExperimentConfig::generator() const {
  data::GenConfig g = gen;
  g.seed = effective_data_seed();
  return g;
}

std::vector<Entry> ExperimentConfig::entries() const {
  std::vector<Entry> out;
  for (const auto& d : key_defs()) {
    Entry e{d.name, d.get(*this), Source::Default, 0};
    for (const auto& o : origin_)
      if (o.key == d.name) {
        e.source = o.source;
        e.line = o.line;
      }
    out.push_back(std::move(e));
  }
  return out;
}

Source ExperimentConfig::source_of(const std::string& key) const {
  for (const auto& o : origin_)
    if (o.key == key) return o.source;
  return Source::Default;
}

void ExperimentConfig::mark(const std::string& key, Source s, std::size_t line) {
  for (auto& o : origin_)
    if (o.key == key) {
      o.source = s;
      o.line = line;
      return;
    }
  origin_.push_back(Entry{key, {}, s, line});
}

void set_value(ExperimentConfig& cfg, const std::string& raw_key, const std::string& value, Source source,
               std::size_t line) {
  const std::string key = raw_key.find('.') == std::string::npos ? "run." + raw_key : raw_key;
  const KeyDef* def = find_key(key);
  if (!def) throw ConfigError("unknown key", key, line);
  try {
    def->set(cfg, trim(value));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what(), key, line);
  }
  cfg.mark(key, source, line);
}

void ExperimentConfig::validate() const {
  auto line_of = [&](const std::string& key) {
    for (const auto& o : origin_)
      if (o.key == key) return o.line;
    return std::size_t{0};
  };
  auto fail = [&](const std::string& key, const std::string& msg) { throw ConfigError(msg, key, line_of(key)); };

  if (dataset.empty()) {
    try {
      generator().validate();
    } catch (const std::invalid_argument& e) {
      fail("data", e.what());
    }
    const std::size_t participating = gen.clients - gen.holdout;
    if (train.cohort_size > participating)
      fail("train.cohort_size", "cohort_size = " + std::to_string(train.cohort_size) + " exceeds the " +
                                    std::to_string(participating) + " participating clients (data.clients = " +
                                    std::to_string(gen.clients) + ", data.holdout = " +
                                    std::to_string(gen.holdout) + ")");
  }
  try {
    arch.validate();
  } catch (const std::invalid_argument& e) {
    fail("arch", e.what());
  }
  try {
    train.validate(std::max<std::size_t>(train.cohort_size, 1));
  } catch (const std::invalid_argument& e) {
    fail("train", e.what());
  }
  if (!(bound.eta > 0.0)) fail("bound.eta", "eta must be positive");
  if (!(bound.delta > 0.0 && bound.delta <= 1.0)) fail("bound.delta", "delta must lie in (0,1]");
  if (bound.prior_samples == 0) fail("bound.prior_samples", "must be positive");
  if (bound.data_draws == 0) fail("bound.data_draws", "must be positive");
  if (bound.posterior_samples == 0) fail("bound.posterior_samples", "must be positive");
  if (bound.true_risk_points == 0) fail("bound.true_risk_points", "must be positive");
  if (taus.empty()) fail("ablate.taus", "tau list must not be empty");
  for (double t : taus)
    if (t < 0.0) fail("ablate.taus", "tau values must be non-negative");
  if (out_dir.empty()) fail("run.out", "output directory must not be empty");
}

ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string raw;
  std::string section = "run";
  std::vector<std::string> seen;
  for (std::size_t line = 1; std::getline(in, raw); ++line) {
    const auto hash = raw.find('#');
    const std::string s = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (s.empty() || s[0] == ';') continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError("malformed section header '" + s + "'", {}, line);
      section = trim(s.substr(1, s.size() - 2));
      if (std::find(kSections.begin(), kSections.end(), section) == kSections.end())
        throw ConfigError("unknown section [" + section + "]", section, line);
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("expected 'key = value', got '" + s + "'", {}, line);
    const std::string name = trim(s.substr(0, eq));
    if (name.empty()) throw ConfigError("missing key before '='", {}, line);
    const std::string key = section + "." + name;
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) throw ConfigError("duplicate key", key, line);
    seen.push_back(key);
    set_value(cfg, key, s.substr(eq + 1), Source::File, line);
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigIoError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

std::string to_config_text(const ExperimentConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& e : cfg.entries()) {
    const auto dot = e.key.find('.');
    const std::string sec = e.key.substr(0, dot);
    if (e.key == "data.seed" && !cfg.data_seed) continue;
    if (sec != section) {
      out += (section.empty() ? "" : "\n") + std::string("[") + sec + "]\n";
      section = sec;
    }
    out += e.key.substr(dot + 1) + " = " + e.value + "\n";
  }
  return out;
}

}  // namespace fedvi::config
