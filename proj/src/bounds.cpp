#include "fedvi/bounds.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace fedvi::bounds {

ElboReport elbo_components(const model::FedVIParams& params, const data::FederatedDataset& ds,
                           std::span<const BatchPlan> plans, double tau, double gamma) {
  ElboReport r;
  r.tau = tau;
  r.gamma = gamma;
  for (const auto& plan : plans) {
    const data::Batch batch = ds.clients.at(plan.client).rows(plan.rows);
    const auto parts = model::minibatch_loss(params, batch, tau, plan.noise);
    auto it = std::find(r.clients.begin(), r.clients.end(), plan.client);
    if (it == r.clients.end()) {
      r.clients.push_back(plan.client);
      r.local_regs.push_back(0.0);
      it = r.clients.end() - 1;
    }
    r.expected_loss += parts.nll;
    r.local_regs[static_cast<std::size_t>(it - r.clients.begin())] +=
        parts.kl / static_cast<double>(plan.rows.size());
  }
  double local = 0.0;
  for (double v : r.local_regs) local += v;
  r.total = r.expected_loss + gamma * r.global_reg + tau * local;
  return r;
}

double pacbayes_rhs(double empirical_risk, double kl, double eta, double delta, double slack) {
  if (!(eta > 0.0)) throw std::invalid_argument("pacbayes_rhs: eta must be positive");
  if (!(delta > 0.0 && delta <= 1.0)) throw std::invalid_argument("pacbayes_rhs: delta must lie in (0,1]");
  return empirical_risk + (kl + std::log(1.0 / delta) + slack) / eta;
}

namespace {

nn::Tensor global_columns(const nn::Tensor& rep, std::size_t g) { return model::split_features(rep, g).first; }

std::size_t total_size(const data::GroundTruth& truth) {
  std::size_t n = 0;
  for (auto s : truth.sizes) n += s;
  return n;
}

double log_sum_exp(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

void require_anchors(const BoundModel& m, const data::GroundTruth& truth) {
  if (!m.params) throw std::invalid_argument("bound model has no parameters");
  if (m.b_beta.size() != truth.num_clients())
    throw std::invalid_argument("bound model anchors " + std::to_string(m.b_beta.size()) + " clients, generator has " +
                                std::to_string(truth.num_clients()));
  if (m.params->arch.num_classes != truth.num_classes() || m.params->arch.input_dim != truth.input_dim())
    throw std::invalid_argument("bound model shape does not match the generator");
}

}  // namespace

BoundModel anchor_model(const model::FedVIParams& params, const data::FederatedDataset& reference) {
  BoundModel m{&params, {}};
  for (const auto& c : reference.clients) {
    const nn::Tensor rep = model::embed(params, c.x);
    m.b_beta.push_back(model::construct_posterior(params, global_columns(rep, params.arch.global_dim())).b_beta);
  }
  return m;
}

ClientFeatures client_features(const BoundModel& m, std::size_t client, const data::Batch& batch) {
  const auto& p = *m.params;
  const std::size_t K = p.arch.num_classes;
  const auto [global, local] = model::split_features(model::embed(p, batch.x), p.arch.global_dim());
  ClientFeatures f{nn::dense_forward(global, p.blocks.get("cls.w").value, p.blocks.get("cls.b").value), local,
                   batch.y};
  const auto& bb = m.b_beta.at(client);
  for (std::size_t i = 0; i < f.base.rows(); ++i)
    for (std::size_t y = 0; y < K; ++y) f.base.at(i, y) += bb[y];
  return f;
}

namespace {

// log p(y_i | x_i, beta) for every point.
void log_likelihoods(const ClientFeatures& f, std::span<const double> beta, std::size_t K, std::vector<double>& out) {
  const std::size_t n = f.base.rows(), L = f.local.cols();
  out.resize(n);
  std::vector<double> logits(K);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t y = 0; y < K; ++y) {
      double v = f.base.at(i, y);
      for (std::size_t l = 0; l < L; ++l) v += beta[y * L + l] * f.local.at(i, l);
      logits[y] = v;
      mx = std::max(mx, v);
    }
    double s = 0.0;
    for (double v : logits) s += std::exp(v - mx);
    out[i] = logits[static_cast<std::size_t>(f.y[i])] - mx - std::log(s);
  }
}

}  // namespace

double gibbs_nll_sum(const ClientFeatures& f, std::span<const double> beta, std::size_t num_classes) {
  std::vector<double> ll;
  log_likelihoods(f, beta, num_classes, ll);
  double s = 0.0;
  for (double v : ll) s -= v;
  return s;
}

dist::DiagGaussian client_posterior(const model::FedVIParams& params, const nn::Tensor& x) {
  const nn::Tensor rep = model::embed(params, x);
  return model::construct_posterior(params, global_columns(rep, params.arch.global_dim())).q;
}

std::vector<data::Batch> draw_dataset(const data::GroundTruth& truth, Rng& rng) {
  std::vector<data::Batch> out;
  for (std::size_t k = 0; k < truth.num_clients(); ++k) out.push_back(truth.sample_client(k, truth.sizes[k], rng));
  return out;
}

namespace {

// Fresh points per client, proportional to the client's share of the data.
std::vector<ClientFeatures> fresh_features(const data::GroundTruth& truth, const BoundModel& m, std::size_t points,
                                           Rng& rng) {
  const double N = static_cast<double>(total_size(truth));
  std::vector<ClientFeatures> out;
  for (std::size_t k = 0; k < truth.num_clients(); ++k) {
    const auto n = static_cast<std::size_t>(std::ceil(static_cast<double>(points) * truth.sizes[k] / N));
    out.push_back(client_features(m, k, truth.sample_client(k, std::max<std::size_t>(n, 1), rng)));
  }
  return out;
}

}  // namespace

SlackEstimate estimate_slack(const data::GroundTruth& truth, const BoundModel& m, const dist::DiagGaussian& prior,
                             const SlackOptions& opt, Rng& rng) {
  require_anchors(m, truth);
  if (!(opt.eta > 0.0)) throw std::invalid_argument("estimate_slack: eta must be positive");
  if (!(opt.delta > 0.0 && opt.delta <= 1.0)) throw std::invalid_argument("estimate_slack: delta must lie in (0,1]");
  if (opt.prior_samples == 0 || opt.data_draws == 0)
    throw std::invalid_argument("estimate_slack: sample counts must be positive");
  const std::size_t K = truth.num_classes(), c = truth.num_clients();
  const double N = static_cast<double>(total_size(truth));

  std::vector<std::vector<std::vector<double>>> hyps(opt.prior_samples);
  for (auto& h : hyps)
    for (std::size_t k = 0; k < c; ++k) h.push_back(dist::sample_reparam(prior, standard_normal(prior.dim(), rng)));

  std::vector<double> true_risk(opt.prior_samples, 0.0);
  if (!opt.reuse_sample_for_true_risk) {
    const auto fresh = fresh_features(truth, m, opt.true_risk_points, rng);
    for (std::size_t j = 0; j < hyps.size(); ++j)
      for (std::size_t k = 0; k < c; ++k)
        true_risk[j] += (truth.sizes[k] / N) * gibbs_nll_sum(fresh[k], hyps[j][k], K) /
                        static_cast<double>(fresh[k].y.size());
  }

  std::vector<double> terms;
  terms.reserve(opt.prior_samples * opt.data_draws);
  for (std::size_t d = 0; d < opt.data_draws; ++d) {
    const auto ds = draw_dataset(truth, rng);
    std::vector<ClientFeatures> feats;
    for (std::size_t k = 0; k < c; ++k) feats.push_back(client_features(m, k, ds[k]));
    for (std::size_t j = 0; j < hyps.size(); ++j) {
      double emp = 0.0;
      for (std::size_t k = 0; k < c; ++k) emp += gibbs_nll_sum(feats[k], hyps[j][k], K);
      emp /= N;
      const double tr = opt.reuse_sample_for_true_risk ? emp : true_risk[j];
      terms.push_back(opt.eta * (tr - emp));
    }
  }

  SlackEstimate s;
  const double log_inv_delta = std::log(1.0 / opt.delta);
  const bool bad = std::any_of(terms.begin(), terms.end(), [](double t) { return !std::isfinite(t); });
  if (bad) {
    s.value = s.log_moment = std::numeric_limits<double>::infinity();
    s.finite = false;
    s.heavy_tail = true;
    s.diagnostic = "exponent overflow: a risk gap is not finite";
    return s;
  }
  const double lse = log_sum_exp(terms);
  const double log_mean = lse - std::log(static_cast<double>(terms.size()));
  s.log_moment = log_mean;
  s.value = log_inv_delta + log_mean;
  const double mx = *std::max_element(terms.begin(), terms.end());
  s.max_term_share = std::exp(mx - lse);
  // The moment itself must be representable, even though it is averaged in log space.
  if (!std::isfinite(s.value) || log_mean > std::log(std::numeric_limits<double>::max())) {
    s.value = s.log_moment = std::numeric_limits<double>::infinity();
    s.finite = false;
    s.heavy_tail = true;
    s.diagnostic = "exponent overflow: the moment exceeds the double range";
  } else if (terms.size() >= 10 && s.max_term_share > 0.5) {
    s.heavy_tail = true;
    s.diagnostic = "heavy tail: a single draw carries " + std::to_string(s.max_term_share) + " of the moment";
  }
  return s;
}

BoundEvaluation evaluate_bound(const data::GroundTruth& truth, const BoundModel& m,
                               std::span<const data::Batch> dataset, const PacBayesConfig& cfg, double slack,
                               Rng& rng) {
  require_anchors(m, truth);
  if (dataset.size() != truth.num_clients()) throw std::invalid_argument("evaluate_bound: one batch per client required");
  if (cfg.posterior_samples == 0) throw std::invalid_argument("evaluate_bound: posterior_samples must be positive");
  const auto& params = *m.params;
  const std::size_t K = truth.num_classes(), c = truth.num_clients(), S = cfg.posterior_samples;
  const auto prior = params.arch.prior();

  BoundEvaluation e;
  std::vector<dist::DiagGaussian> posts;
  std::size_t N = 0;
  for (std::size_t k = 0; k < c; ++k) {
    posts.push_back(client_posterior(params, dataset[k].x));
    e.kl += dist::kl_diag(posts.back(), prior);
    N += dataset[k].y.size();
  }
  for (std::size_t k = 0; k < c; ++k) {
    const auto f = client_features(m, k, dataset[k]);
    for (std::size_t s = 0; s < S; ++s)
      e.empirical_risk += gibbs_nll_sum(f, dist::sample_reparam(posts[k], standard_normal(prior.dim(), rng)), K);
  }
  e.empirical_risk /= static_cast<double>(S) * static_cast<double>(N);
  e.rhs = pacbayes_rhs(e.empirical_risk, e.kl, cfg.eta, cfg.delta, slack);

  // The true risk weights clients by their share of this dataset.
  const auto fresh = fresh_features(truth, m, cfg.true_risk_points, rng);
  std::vector<double> mix;
  for (std::size_t k = 0; k < c; ++k) {
    const std::size_t n = fresh[k].y.size();
    std::vector<std::vector<double>> per_sample(S);
    for (std::size_t s = 0; s < S; ++s)
      log_likelihoods(fresh[k], dist::sample_reparam(posts[k], standard_normal(prior.dim(), rng)), K, per_sample[s]);
    double risk = 0.0;
    mix.resize(S);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t s = 0; s < S; ++s) mix[s] = per_sample[s][i];
      risk -= log_sum_exp(mix) - std::log(static_cast<double>(S));
    }
    e.true_risk += (static_cast<double>(dataset[k].y.size()) / static_cast<double>(N)) * risk / static_cast<double>(n);
  }
  return e;
}

BoundCheck bound_holds_check(const data::GroundTruth& truth, const BoundModel& m, const PacBayesConfig& cfg,
                             double slack, std::size_t trials, Rng& rng) {
  BoundCheck out;
  if (trials == 0) return out;
  std::size_t held = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto ds = draw_dataset(truth, rng);
    out.trials.push_back(evaluate_bound(truth, m, ds, cfg, slack, rng));
    held += out.trials.back().true_risk <= out.trials.back().rhs;
  }
  out.holding_fraction = static_cast<double>(held) / static_cast<double>(trials);
  return out;
}

}  // namespace fedvi::bounds
