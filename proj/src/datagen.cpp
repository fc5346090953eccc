#include "fedvi/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include <json.hpp>

#include "binio.hpp"

namespace fedvi::data {

Batch ClientDataset::rows(std::span<const std::size_t> idx) const {
  const std::size_t d = dim();
  Batch b{nn::Tensor({idx.size(), d}), std::vector<int>(idx.size())};
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= size()) throw std::out_of_range("ClientDataset::rows: index out of range");
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d,
                b.x.data().begin() + static_cast<std::ptrdiff_t>(i * d));
    b.y[i] = y[idx[i]];
  }
  return b;
}

Batch ClientDataset::test_rows(std::size_t begin, std::size_t end) const {
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), n_train + begin);
  return rows(idx);
}

void FederatedDataset::validate() const {
  if (clients.empty()) throw std::invalid_argument("dataset has no clients");
  if (holdout_count >= clients.size())
    throw std::invalid_argument("holdout_count (" + std::to_string(holdout_count) + ") must be below client count (" +
                                std::to_string(clients.size()) + ")");
  if (num_classes == 0) throw std::invalid_argument("num_classes must be positive");
  std::set<std::string> ids;
  const std::size_t d = input_dim();
  for (const auto& c : clients) {
    if (!ids.insert(c.client_id).second) throw std::invalid_argument("duplicate client id " + c.client_id);
    if (c.x.rank() != 2 || c.x.rows() != c.y.size())
      throw std::invalid_argument("client " + c.client_id + ": row count does not match label count");
    if (c.x.cols() != d) throw std::invalid_argument("client " + c.client_id + ": inconsistent input dimension");
    if (c.n_train > c.size()) throw std::invalid_argument("client " + c.client_id + ": split index out of range");
    for (int label : c.y)
      if (label < 0 || static_cast<std::size_t>(label) >= num_classes)
        throw std::invalid_argument("client " + c.client_id + ": label out of range");
  }
}

void GenConfig::validate() const {
  if (clients < 2) throw std::invalid_argument("clients must be at least 2");
  if (holdout >= clients) throw std::invalid_argument("holdout must be below clients");
  if (n_min < 1 || n_min > n_max) throw std::invalid_argument("n_min/n_max range is invalid");
  if (input_dim < 1 || num_classes < 2) throw std::invalid_argument("input_dim >= 1 and num_classes >= 2 required");
  if (!(sigma_beta >= 0.0) || !(input_shift_scale >= 0.0))
    throw std::invalid_argument("sigma_beta and input_shift_scale must be non-negative");
  if (!(shift_coupling >= 0.0 && shift_coupling <= 1.0))
    throw std::invalid_argument("shift_coupling must lie in [0,1]");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw std::invalid_argument("train_fraction must lie in (0,1)");
}

std::vector<double> GroundTruth::class_probabilities(std::size_t k, std::span<const double> x) const {
  const std::size_t d = input_dim(), K = num_classes();
  std::vector<double> logits(K, 0.0);
  const nn::Tensor& beta = betas[k];
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t y = 0; y < K; ++y) logits[y] += (theta.at(i, y) + beta.at(i, y)) * x[i];
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (auto& l : logits) s += (l = std::exp(l - mx));
  for (auto& l : logits) l /= s;
  return logits;
}

Batch GroundTruth::sample_client(std::size_t k, std::size_t n, Rng& rng) const {
  const std::size_t d = input_dim();
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Batch b{nn::Tensor({n, d}), std::vector<int>(n)};
  const auto& m = input_means[k];
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) b.x.at(i, j) = m[j] + nd(rng);
    const auto p = class_probabilities(k, std::span<const double>(b.x.data().data() + i * d, d));
    const double u = unif(rng);
    double acc = 0.0;
    int label = static_cast<int>(p.size()) - 1;
    for (std::size_t y = 0; y < p.size(); ++y) {
      acc += p[y];
      if (u < acc) {
        label = static_cast<int>(y);
        break;
      }
    }
    b.y[i] = label;
  }
  return b;
}

namespace {

std::string client_name(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "client-%05zu", k);
  return buf;
}

ClientDataset shuffled_client(std::string id, Batch b, double train_fraction, Rng& rng) {
  const std::size_t n = b.y.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  ClientDataset c;
  c.client_id = std::move(id);
  const std::size_t d = b.x.cols();
  c.x = nn::Tensor({n, d});
  c.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) c.x.at(i, j) = b.x.at(perm[i], j);
    c.y[i] = b.y[perm[i]];
  }
  c.n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n)));
  return c;
}

}  // namespace

SyntheticData generate_hierarchical(const GenConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.input_dim, K = cfg.num_classes;
  std::normal_distribution<double> nd(0.0, 1.0);
  SyntheticData out;
  GroundTruth& gt = out.truth;
  gt.theta = nn::Tensor({d, K});
  for (auto& v : gt.theta.data()) v = nd(rng);

  const double rho = cfg.sigma_beta > 0.0 ? cfg.shift_coupling : 0.0;
  const double indep = std::sqrt(1.0 - rho * rho);
  std::uniform_int_distribution<std::size_t> size_dist(cfg.n_min, cfg.n_max);
  for (std::size_t k = 0; k < cfg.clients; ++k) {
    nn::Tensor beta({d, K});
    for (auto& v : beta.data()) v = cfg.sigma_beta * nd(rng);
    std::vector<double> m(d);
    for (std::size_t j = 0; j < d; ++j) {
      const double z = nd(rng);
      const double tied = rho > 0.0 ? beta[j] / cfg.sigma_beta : 0.0;
      m[j] = cfg.input_shift_scale * (rho * tied + indep * z);
    }
    gt.betas.push_back(std::move(beta));
    gt.input_means.push_back(std::move(m));
    gt.sizes.push_back(size_dist(rng));
  }

  out.dataset.num_classes = K;
  out.dataset.holdout_count = cfg.holdout;
  for (std::size_t k = 0; k < cfg.clients; ++k) {
    Batch b = gt.sample_client(k, gt.sizes[k], rng);
    out.dataset.clients.push_back(shuffled_client(client_name(k), std::move(b), cfg.train_fraction, rng));
  }
  return out;
}

FederatedDataset partition_dirichlet(const nn::Tensor& x, std::span<const int> y, std::size_t clients, double alpha,
                                     Rng& rng, double train_fraction) {
  nn::require_matrix(x, "partition_dirichlet");
  const std::size_t N = y.size();
  if (x.rows() != N) throw std::invalid_argument("partition_dirichlet: x rows do not match label count");
  if (!(alpha > 0.0)) throw std::invalid_argument("partition_dirichlet: alpha must be positive");
  if (clients == 0 || N < clients)
    throw PartitionError("partition_dirichlet: cannot give each of " + std::to_string(clients) +
                         " clients a sample from " + std::to_string(N) + " examples");
  int max_label = 0;
  for (int label : y) {
    if (label < 0) throw std::invalid_argument("partition_dirichlet: negative label");
    max_label = std::max(max_label, label);
  }
  const std::size_t K = static_cast<std::size_t>(max_label) + 1;

  std::vector<std::vector<std::size_t>> pools(K);
  for (std::size_t i = 0; i < N; ++i) pools[static_cast<std::size_t>(y[i])].push_back(i);
  for (auto& p : pools) std::shuffle(p.begin(), p.end(), rng);

  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<std::vector<double>> props(clients, std::vector<double>(K));
  for (auto& p : props) {
    double s = 0.0;
    for (auto& v : p) s += (v = gamma(rng));
    if (s > 0.0) {
      for (auto& v : p) v /= s;
    } else {
      // Every gamma draw underflowed (tiny alpha): the Dirichlet limit is a vertex.
      std::uniform_int_distribution<std::size_t> pick(0, K - 1);
      std::fill(p.begin(), p.end(), 0.0);
      p[pick(rng)] = 1.0;
    }
  }

  // Each example of class c goes to client k with probability proportional to
  // props[k][c]; a class nobody weights is spread uniformly.
  std::vector<std::vector<std::size_t>> assigned(clients);
  std::vector<double> w(clients);
  for (std::size_t c = 0; c < K; ++c) {
    double mass = 0.0;
    for (std::size_t k = 0; k < clients; ++k) mass += (w[k] = props[k][c]);
    if (!(mass > 0.0)) std::fill(w.begin(), w.end(), 1.0);
    std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
    for (std::size_t i : pools[c]) assigned[pick(rng)].push_back(i);
  }
  // Every client needs at least one example: an empty client takes one of its
  // preferred class from the largest holder, otherwise any example from the
  // largest client.
  for (std::size_t k = 0; k < clients; ++k) {
    if (!assigned[k].empty()) continue;
    const std::size_t want =
        static_cast<std::size_t>(std::max_element(props[k].begin(), props[k].end()) - props[k].begin());
    std::size_t donor = clients, donor_pos = 0;
    for (std::size_t j = 0; j < clients; ++j) {
      if (assigned[j].size() < 2) continue;
      for (std::size_t pos = 0; pos < assigned[j].size(); ++pos)
        if (static_cast<std::size_t>(y[assigned[j][pos]]) == want &&
            (donor == clients || assigned[j].size() > assigned[donor].size())) {
          donor = j;
          donor_pos = pos;
          break;
        }
    }
    if (donor == clients) {
      donor = 0;
      for (std::size_t j = 1; j < clients; ++j)
        if (assigned[j].size() > assigned[donor].size()) donor = j;
      donor_pos = assigned[donor].size() - 1;
    }
    assigned[k].push_back(assigned[donor][donor_pos]);
    assigned[donor].erase(assigned[donor].begin() + static_cast<std::ptrdiff_t>(donor_pos));
  }
  for (auto& a : assigned) std::sort(a.begin(), a.end());

  FederatedDataset ds;
  ds.num_classes = K;
  ds.holdout_count = 0;
  ClientDataset source{"", x, std::vector<int>(y.begin(), y.end()), 0};
  for (std::size_t k = 0; k < clients; ++k)
    ds.clients.push_back(shuffled_client(client_name(k), source.rows(assigned[k]), train_fraction, rng));
  return ds;
}

// Binary layout (little-endian):
//   "FVDS" u32 version u64 num_classes u64 holdout u64 num_clients
//   per client: str id, u64 n, u64 d, u64 n_train, f64[n*d], i32[n]
// where str is u64 length followed by raw bytes.

std::string gen_config_json(const GenConfig& cfg) {
  nlohmann::ordered_json j;
  j["clients"] = cfg.clients;
  j["holdout"] = cfg.holdout;
  j["n_min"] = cfg.n_min;
  j["n_max"] = cfg.n_max;
  j["input_dim"] = cfg.input_dim;
  j["num_classes"] = cfg.num_classes;
  j["sigma_beta"] = cfg.sigma_beta;
  j["input_shift_scale"] = cfg.input_shift_scale;
  j["shift_coupling"] = cfg.shift_coupling;
  j["train_fraction"] = cfg.train_fraction;
  j["seed"] = cfg.seed;
  j["format_version"] = kDatasetFormatVersion;
  return j.dump(2);
}

void save_dataset(const FederatedDataset& ds, const std::filesystem::path& path, const GenConfig* provenance) {
  ds.validate();
  binio::Writer w;
  w.raw("FVDS", 4);
  w.u32(kDatasetFormatVersion);
  w.u64(ds.num_classes);
  w.u64(ds.holdout_count);
  w.u64(ds.clients.size());
  for (const auto& c : ds.clients) {
    w.bytes(c.client_id);
    w.u64(c.size());
    w.u64(c.dim());
    w.u64(c.n_train);
    for (double v : c.x.data()) w.f64(v);
    for (int label : c.y) w.i32(label);
  }
  binio::write_file<DatasetIoError>(path, w.buffer());
  if (provenance) {
    const std::string js = gen_config_json(*provenance);
    binio::write_file<DatasetIoError>(path.string() + ".json", std::vector<char>(js.begin(), js.end()));
  }
}

FederatedDataset load_dataset(const std::filesystem::path& path) {
  binio::Reader<MalformedDatasetError> r(binio::read_file<DatasetIoError>(path));
  if (r.remaining() < 8 || r.raw(4) != "FVDS") throw MalformedDatasetError(path.string() + ": not a dataset file");
  const auto version = r.u32();
  if (version != kDatasetFormatVersion)
    throw VersionMismatchError(path.string() + ": dataset format version " + std::to_string(version) +
                               ", expected " + std::to_string(kDatasetFormatVersion));
  FederatedDataset ds;
  ds.num_classes = r.u64();
  ds.holdout_count = r.u64();
  const auto n_clients = r.u64();
  if (n_clients > r.remaining()) throw MalformedDatasetError(path.string() + ": client count exceeds file size");
  for (std::uint64_t k = 0; k < n_clients; ++k) {
    ClientDataset c;
    c.client_id = r.bytes();
    const auto n = r.u64(), d = r.u64();
    c.n_train = r.u64();
    if (n == 0 || d == 0 || d > r.remaining() / 8 || n > r.remaining() / (8 * d + 4))
      throw MalformedDatasetError(path.string() + ": client block sizes are inconsistent with file length");
    c.x = nn::Tensor({n, d});
    for (auto& v : c.x.data()) v = r.f64();
    c.y.resize(n);
    for (auto& label : c.y) label = r.i32();
    ds.clients.push_back(std::move(c));
  }
  if (r.remaining() != 0) throw MalformedDatasetError(path.string() + ": trailing bytes after last client");
  try {
    ds.validate();
  } catch (const std::invalid_argument& e) {
    throw MalformedDatasetError(path.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace fedvi::data
