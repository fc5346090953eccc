#include "fedvi/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace fedvi::fed {

std::string to_string(Algorithm a) { return a == Algorithm::FedVI ? "fedvi" : "fedavg"; }

Algorithm parse_algorithm(const std::string& s) {
  if (s == "fedvi") return Algorithm::FedVI;
  if (s == "fedavg") return Algorithm::FedAvg;
  throw std::invalid_argument("unknown algorithm '" + s + "' (expected fedvi or fedavg)");
}

void TrainConfig::validate(std::size_t participating_clients) const {
  if (cohort_size < 1) throw std::invalid_argument("cohort_size must be positive");
  if (cohort_size > participating_clients)
    throw std::invalid_argument("cohort_size (" + std::to_string(cohort_size) + ") exceeds participating clients (" +
                                std::to_string(participating_clients) + ")");
  if (!(client_lr >= 0.0) || !(server_lr > 0.0)) throw std::invalid_argument("learning rates must be positive");
  if (!(server_momentum >= 0.0 && server_momentum < 1.0))
    throw std::invalid_argument("server_momentum must lie in [0,1)");
  if (local_epochs < 1) throw std::invalid_argument("local_epochs must be positive");
  if (batch_size < 2) throw std::invalid_argument("batch_size must be at least 2");
  if (!(tau >= 0.0) || !(gamma >= 0.0)) throw std::invalid_argument("tau and gamma must be non-negative");
  if (eval_every < 1) throw std::invalid_argument("eval_every must be positive");
  if (threads < 1) throw std::invalid_argument("threads must be positive");
  if (summary_window < 1) throw std::invalid_argument("summary_window must be positive");
}

ServerState ServerState::start(model::FedVIParams params) {
  ServerState s{std::move(params), {}, 0};
  s.momentum = s.params.blocks.zeros_like();
  return s;
}

std::vector<std::size_t> sample_cohort(std::span<const std::size_t> ids, std::size_t m, Rng& rng) {
  if (m > ids.size())
    throw std::invalid_argument("cohort of " + std::to_string(m) + " requested from " + std::to_string(ids.size()) +
                                " clients");
  std::vector<std::size_t> pool(ids.begin(), ids.end());
  for (std::size_t i = 0; i < m; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(m);
  return pool;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    if (end - start < 2) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

ClientUpdate client_update(const model::FedVIParams& global, const data::ClientDataset& client,
                           const TrainConfig& cfg, Rng& rng, std::size_t round, std::size_t client_index,
                           const RunHooks* hooks) {
  ClientUpdate out;
  out.weight = static_cast<double>(client.n_train);
  if (client.n_train < 2) {
    out.skipped = true;
    out.delta = global.blocks.zeros_like();
    return out;
  }
  model::FedVIParams local = global;
  const std::size_t noise_dim = global.arch.beta_dim();
  Rng* dropout_rng = global.arch.dropout > 0.0 ? &rng : nullptr;
  double loss_sum = 0.0, kl_sum = 0.0;
  for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    for (const auto& rows : epoch_batches(client.n_train, cfg.batch_size, rng)) {
      const data::Batch batch = client.rows(rows);
      std::vector<double> noise;
      double loss = 0.0, kl = 0.0;
      if (cfg.algorithm == Algorithm::FedVI) {
        noise = standard_normal(noise_dim, rng);
        const auto parts = model::minibatch_loss(local, batch, cfg.tau, noise, dropout_rng, true);
        loss = parts.loss;
        kl = parts.kl;
      } else {
        loss = model::global_only_loss(local, batch, dropout_rng, true);
      }
      if (hooks && hooks->on_step) hooks->on_step(StepRecord{round, client_index, &local, rows, noise, loss, kl});
      for (auto& block : local.blocks) {
        auto v = block.value.data();
        const auto g = block.grad.data();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= cfg.client_lr * g[i];
      }
      loss_sum += loss;
      kl_sum += kl;
      ++out.steps;
    }
  }
  out.delta = global.blocks;
  out.delta.axpy(-1.0, local.blocks);
  if (out.steps > 0) {
    out.mean_loss = loss_sum / static_cast<double>(out.steps);
    out.mean_kl = kl_sum / static_cast<double>(out.steps);
  }
  return out;
}

void server_apply(ServerState& state, std::span<const nn::ParamSet> deltas, std::span<const double> weights,
                  const TrainConfig& cfg) {
  if (deltas.empty()) throw std::invalid_argument("server_apply: no client deltas");
  if (deltas.size() != weights.size()) throw std::invalid_argument("server_apply: deltas and weights differ in count");
  double total = 0.0;
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    if (!(weights[i] > 0.0)) throw std::invalid_argument("server_apply: weights must be positive");
    if (!deltas[i].same_layout(state.params.blocks))
      throw std::invalid_argument("server_apply: delta layout differs from the global parameters");
    total += weights[i];
  }
  nn::ParamSet g = state.params.blocks.zeros_like();
  for (std::size_t i = 0; i < deltas.size(); ++i) g.axpy(weights[i], deltas[i]);
  g.scale(1.0 / total);
  state.momentum.scale(cfg.server_momentum);
  state.momentum.axpy(1.0, g);
  state.params.blocks.axpy(-cfg.server_lr, state.momentum);
  ++state.round;
}

double client_accuracy(const model::FedVIParams& params, const data::ClientDataset& client, Algorithm algorithm,
                       std::size_t batch_size) {
  const std::size_t n = client.n_test();
  if (n < 2) throw std::invalid_argument("client " + client.client_id + " has fewer than two test examples");
  std::size_t correct = 0, total = 0;
  if (algorithm == Algorithm::FedAvg) {
    const data::Batch b = client.test_rows(0, n);
    const auto pred = model::predict_global(params, b.x);
    for (std::size_t i = 0; i < n; ++i) correct += pred[i] == b.y[i];
    total = n;
  } else {
    const std::size_t k = std::min((n + batch_size - 1) / batch_size, n / 2);
    const std::size_t base = n / k, extra = n % k;
    std::size_t begin = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const std::size_t end = begin + base + (c < extra ? 1 : 0);
      const data::Batch b = client.test_rows(begin, end);
      const auto pred = model::predict_query(params, b.x);
      for (std::size_t i = 0; i < pred.query.size(); ++i) correct += pred.predicted[i] == b.y[pred.query[i]];
      total += pred.query.size();
      begin = end;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

EvalResult evaluate(const model::FedVIParams& params, const data::FederatedDataset& ds,
                    std::span<const std::size_t> clients, Algorithm algorithm, std::size_t batch_size) {
  EvalResult r;
  double acc_sum = 0.0;
  for (std::size_t idx : clients) {
    const auto& c = ds.clients.at(idx);
    if (c.n_test() < 2) {
      ++r.excluded;
      continue;
    }
    const double w = static_cast<double>(c.n_test());
    acc_sum += w * client_accuracy(params, c, algorithm, batch_size);
    r.weight += w;
  }
  r.accuracy = r.weight > 0.0 ? acc_sum / r.weight : std::numeric_limits<double>::quiet_NaN();
  return r;
}

std::vector<std::size_t> participating_ids(const data::FederatedDataset& ds) {
  std::vector<std::size_t> ids(ds.participating_count());
  std::iota(ids.begin(), ids.end(), ds.holdout_count);
  return ids;
}

std::vector<std::size_t> holdout_ids(const data::FederatedDataset& ds) {
  std::vector<std::size_t> ids(ds.holdout_count);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  return ids;
}

TrainingSummary summarize(std::span<const RoundReport> reports, std::size_t window) {
  std::vector<const RoundReport*> evaluated;
  for (const auto& r : reports)
    if (r.evaluated) evaluated.push_back(&r);
  TrainingSummary s;
  s.window = std::min(window, evaluated.size());
  if (s.window == 0) {
    s.part_acc = s.nonpart_acc = s.gap = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  for (std::size_t i = evaluated.size() - s.window; i < evaluated.size(); ++i) {
    s.part_acc += evaluated[i]->part_acc;
    s.nonpart_acc += evaluated[i]->nonpart_acc;
  }
  s.part_acc /= static_cast<double>(s.window);
  s.nonpart_acc /= static_cast<double>(s.window);
  s.gap = s.part_acc - s.nonpart_acc;
  return s;
}

model::FedVIParams initial_params(const model::ArchConfig& arch, std::uint64_t seed) {
  Rng rng = make_stream(seed, {stream::kInit});
  return model::init_params(arch, rng);
}

TrainingResult run_training(const TrainConfig& cfg, const model::ArchConfig& arch, const data::FederatedDataset& ds,
                            const RunHooks& hooks) {
  return run_training(cfg, ServerState::start(initial_params(arch, cfg.seed)), ds, hooks);
}

TrainingResult run_training(const TrainConfig& cfg, ServerState start, const data::FederatedDataset& ds,
                            const RunHooks& hooks) {
  ds.validate();
  model::check_layout(start.params);
  if (start.params.arch.input_dim != ds.input_dim())
    throw std::invalid_argument("model input_dim (" + std::to_string(start.params.arch.input_dim) +
                                ") does not match dataset (" + std::to_string(ds.input_dim()) + ")");
  if (start.params.arch.num_classes != ds.num_classes)
    throw std::invalid_argument("model num_classes (" + std::to_string(start.params.arch.num_classes) +
                                ") does not match dataset (" + std::to_string(ds.num_classes) + ")");
  const auto part = participating_ids(ds);
  const auto hold = holdout_ids(ds);
  cfg.validate(part.size());

  TrainingResult result{{}, std::move(start), {}};
  ServerState& state = result.state;

  std::mutex hook_mutex;
  RunHooks serial;
  if (hooks.on_client_update)
    serial.on_client_update = [&](std::size_t c) {
      std::lock_guard lock(hook_mutex);
      hooks.on_client_update(c);
    };
  if (hooks.on_step)
    serial.on_step = [&](const StepRecord& s) {
      std::lock_guard lock(hook_mutex);
      hooks.on_step(s);
    };

  std::uint64_t steps = 0;
  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng cohort_rng = make_stream(cfg.seed, {stream::kCohort, r});
    const auto cohort = sample_cohort(part, cfg.cohort_size, cohort_rng);

    std::vector<ClientUpdate> updates(cohort.size());
    auto work = [&](std::size_t i) {
      const std::size_t idx = cohort[i];
      if (serial.on_client_update) serial.on_client_update(idx);
      Rng rng = make_stream(cfg.seed, {stream::kClient, r, idx});
      updates[i] = client_update(state.params, ds.clients[idx], cfg, rng, r + 1, idx, &serial);
    };
    const std::size_t workers = std::min(cfg.threads, cohort.size());
    if (workers <= 1) {
      for (std::size_t i = 0; i < cohort.size(); ++i) work(i);
    } else {
      std::vector<std::thread> pool;
      std::vector<std::exception_ptr> errors(workers);
      for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
          try {
            for (std::size_t i = w; i < cohort.size(); i += workers) work(i);
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      for (auto& t : pool) t.join();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    }

    std::vector<std::size_t> order(cohort.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return cohort[a] < cohort[b]; });
    std::vector<nn::ParamSet> deltas;
    std::vector<double> weights;
    RoundReport rep;
    rep.round = r + 1;
    std::size_t contributed = 0;
    for (std::size_t i : order) {
      rep.cohort.push_back(ds.clients[cohort[i]].client_id);
      auto& u = updates[i];
      steps += u.steps;
      if (u.skipped) continue;
      rep.mean_loss += u.mean_loss;
      rep.mean_kl += u.mean_kl;
      ++contributed;
      deltas.push_back(std::move(u.delta));
      weights.push_back(u.weight);
    }
    if (contributed > 0) {
      rep.mean_loss /= static_cast<double>(contributed);
      rep.mean_kl /= static_cast<double>(contributed);
      server_apply(state, deltas, weights, cfg);
    } else {
      ++state.round;
    }

    if ((r + 1) % cfg.eval_every == 0 || r + 1 == cfg.rounds) {
      rep.evaluated = true;
      const auto pe = evaluate(state.params, ds, part, cfg.algorithm, cfg.batch_size);
      const auto he = evaluate(state.params, ds, hold, cfg.algorithm, cfg.batch_size);
      rep.part_acc = pe.accuracy;
      rep.nonpart_acc = he.accuracy;
      rep.excluded = pe.excluded + he.excluded;
    }
    rep.client_steps = steps;
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.reports.push_back(std::move(rep));
  }
  result.summary = summarize(result.reports, cfg.summary_window);
  return result;
}

}  // namespace fedvi::fed
