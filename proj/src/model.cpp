#include "fedvi/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace fedvi::model {

void ArchConfig::validate() const {
  if (input_dim == 0) throw std::invalid_argument("arch: input_dim must be positive");
  if (embed_widths.empty()) throw std::invalid_argument("arch: embed_widths must not be empty");
  for (auto w : embed_widths)
    if (w == 0) throw std::invalid_argument("arch: embed widths must be positive");
  for (auto w : posterior_widths)
    if (w == 0) throw std::invalid_argument("arch: posterior widths must be positive");
  if (local_dim < 1 || local_dim >= rep_dim())
    throw std::invalid_argument("arch: local_dim (" + std::to_string(local_dim) +
                                ") must leave at least one global feature of representation size " +
                                std::to_string(rep_dim()));
  if (num_classes < 2) throw std::invalid_argument("arch: num_classes must be at least 2");
  if (!(support_fraction > 0.0 && support_fraction < 1.0))
    throw std::invalid_argument("arch: support_fraction must lie in (0,1)");
  if (!(scale_floor >= 0.0)) throw std::invalid_argument("arch: scale_floor must be non-negative");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("arch: dropout must lie in [0,1)");
  if (!(post_out_init_scale >= 0.0)) throw std::invalid_argument("arch: post_out_init_scale must be non-negative");
}

namespace {

std::string layer_name(const char* prefix, std::size_t i, const char* kind) {
  return std::string(prefix) + "." + std::to_string(i) + "." + kind;
}

nn::Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, double gain, Rng& rng) {
  const double a = gain * std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  nn::Tensor w({fan_in, fan_out});
  for (auto& v : w.data()) v = u(rng);
  return w;
}

std::vector<std::size_t> posterior_layer_widths(const ArchConfig& arch) {
  std::vector<std::size_t> widths = arch.posterior_widths;
  widths.push_back(arch.posterior_out_width());
  return widths;
}

void expect_shape(const nn::ParamSet& blocks, const std::string& name, const nn::Shape& shape) {
  if (!blocks.contains(name)) throw std::invalid_argument("parameter block " + name + " missing");
  if (blocks.get(name).value.shape() != shape)
    throw std::invalid_argument("parameter block " + name + " has shape " +
                                nn::shape_str(blocks.get(name).value.shape()) + ", expected " + nn::shape_str(shape));
}

}  // namespace

FedVIParams init_params(const ArchConfig& arch, Rng& rng) {
  arch.validate();
  FedVIParams p{arch, {}};
  std::size_t in = arch.input_dim;
  for (std::size_t i = 0; i < arch.embed_widths.size(); ++i) {
    const std::size_t out = arch.embed_widths[i];
    p.blocks.add(layer_name("embed", i, "w"), glorot_uniform(in, out, 1.0, rng));
    p.blocks.add(layer_name("embed", i, "b"), nn::Tensor({out}, 0.0));
    in = out;
  }
  const auto widths = posterior_layer_widths(arch);
  in = arch.global_dim();
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const double gain = i + 1 == widths.size() ? arch.post_out_init_scale : 1.0;
    p.blocks.add(layer_name("post", i, "w"), glorot_uniform(in, widths[i], gain, rng));
    p.blocks.add(layer_name("post", i, "b"), nn::Tensor({widths[i]}, 0.0));
    in = widths[i];
  }
  p.blocks.add("cls.w", glorot_uniform(arch.global_dim(), arch.num_classes, 1.0, rng));
  p.blocks.add("cls.b", nn::Tensor({arch.num_classes}, 0.0));
  return p;
}

void check_layout(const FedVIParams& params) {
  const ArchConfig& arch = params.arch;
  arch.validate();
  std::size_t expected = 0;
  std::size_t in = arch.input_dim;
  for (std::size_t i = 0; i < arch.embed_widths.size(); ++i) {
    expect_shape(params.blocks, layer_name("embed", i, "w"), {in, arch.embed_widths[i]});
    expect_shape(params.blocks, layer_name("embed", i, "b"), {arch.embed_widths[i]});
    in = arch.embed_widths[i];
    expected += 2;
  }
  const auto widths = posterior_layer_widths(arch);
  in = arch.global_dim();
  for (std::size_t i = 0; i < widths.size(); ++i) {
    expect_shape(params.blocks, layer_name("post", i, "w"), {in, widths[i]});
    expect_shape(params.blocks, layer_name("post", i, "b"), {widths[i]});
    in = widths[i];
    expected += 2;
  }
  expect_shape(params.blocks, "cls.w", {arch.global_dim(), arch.num_classes});
  expect_shape(params.blocks, "cls.b", {arch.num_classes});
  if (params.blocks.size() != expected + 2) throw std::invalid_argument("unexpected extra parameter blocks");
}

const nn::Tensor& FedVIParams::posterior_output_bias() const {
  return blocks.get(layer_name("post", arch.posterior_widths.size(), "b")).value;
}

namespace {

template <class Binder>
BoundParams bind_with(const ArchConfig& arch, Binder&& bind_one) {
  BoundParams bp;
  for (std::size_t i = 0; i < arch.embed_widths.size(); ++i) {
    bp.embed_w.push_back(bind_one(layer_name("embed", i, "w")));
    bp.embed_b.push_back(bind_one(layer_name("embed", i, "b")));
  }
  for (std::size_t i = 0; i <= arch.posterior_widths.size(); ++i) {
    bp.post_w.push_back(bind_one(layer_name("post", i, "w")));
    bp.post_b.push_back(bind_one(layer_name("post", i, "b")));
  }
  bp.cls_w = bind_one("cls.w");
  bp.cls_b = bind_one("cls.b");
  return bp;
}

}  // namespace

BoundParams bind(nn::Tape& tape, FedVIParams& params) {
  return bind_with(params.arch, [&](const std::string& name) { return tape.param(params.blocks.get(name)); });
}

BoundParams bind_const(nn::Tape& tape, const FedVIParams& params) {
  return bind_with(params.arch, [&](const std::string& name) { return tape.constant(params.blocks.get(name).value); });
}

namespace {

nn::Var apply_dropout(nn::Var h, const DropoutSpec& dropout) {
  if (!dropout.rng || dropout.rate <= 0.0) return h;
  std::bernoulli_distribution keep(1.0 - dropout.rate);
  nn::Tensor mask(h.shape(), 0.0);
  const double inv = 1.0 / (1.0 - dropout.rate);
  for (auto& m : mask.data()) m = keep(*dropout.rng) ? inv : 0.0;
  return nn::mul(h, h.tape()->constant(std::move(mask)));
}

}  // namespace

nn::Var embed(const BoundParams& p, nn::Var x, const DropoutSpec& dropout) {
  nn::Var h = x;
  const std::size_t layers = p.embed_w.size();
  for (std::size_t i = 0; i < layers; ++i) {
    h = nn::dense(h, p.embed_w[i], p.embed_b[i]);
    if (i + 1 < layers) h = nn::relu(h);
    h = apply_dropout(h, dropout);
  }
  return h;
}

FeatureSplit split_features(nn::Var rep, std::size_t global_dim) {
  const std::size_t d = rep.value().cols();
  return {nn::slice_cols(rep, 0, global_dim), nn::slice_cols(rep, global_dim, d)};
}

PosteriorVars construct_posterior(const BoundParams& p, const ArchConfig& arch, nn::Var support_global) {
  nn::Var h = support_global;
  const std::size_t layers = p.post_w.size();
  for (std::size_t i = 0; i < layers; ++i) {
    h = nn::dense(h, p.post_w[i], p.post_b[i]);
    if (i + 1 < layers) h = nn::relu(h);
  }
  const nn::Var g = nn::mean_rows(h);
  const std::size_t lk = arch.beta_dim();
  PosteriorVars out;
  out.mean = nn::scale(nn::slice(g, 0, lk), arch.mean_damp);
  const nn::Var spread = nn::exp(nn::scale(nn::slice(g, lk, 2 * lk), arch.logscale_damp));
  out.scale = nn::add_scalar(nn::scale(spread, arch.prior_scale()), arch.scale_floor);
  out.b_beta = nn::slice(g, 2 * lk, 2 * lk + arch.num_classes);
  return out;
}

nn::Var predict_logits(nn::Var cls_w, nn::Var b_global, nn::Var beta, nn::Var b_beta, nn::Var query_global,
                       nn::Var query_local, const ArchConfig& arch) {
  const nn::Var local_w = nn::reshape(beta, {arch.num_classes, arch.local_dim});
  const nn::Var local = nn::matmul_bt(query_local, local_w);
  const nn::Var global = nn::matmul(query_global, cls_w);
  return nn::add_row(nn::add_row(nn::add(local, global), b_beta), b_global);
}

SupportQuery split_support_query(std::size_t batch_size, double support_fraction) {
  const auto s = static_cast<std::size_t>(std::floor(support_fraction * static_cast<double>(batch_size)));
  if (s < 1 || s >= batch_size)
    throw std::invalid_argument("batch of size " + std::to_string(batch_size) +
                                " cannot be split into non-empty support and query sets");
  SupportQuery sq;
  sq.support.resize(s);
  sq.query.resize(batch_size - s);
  std::iota(sq.support.begin(), sq.support.end(), std::size_t{0});
  std::iota(sq.query.begin(), sq.query.end(), s);
  return sq;
}

nn::Tensor embed(const FedVIParams& params, const nn::Tensor& x) {
  nn::Tape t;
  const auto bp = bind_const(t, params);
  return embed(bp, t.constant(x)).value();
}

std::pair<nn::Tensor, nn::Tensor> split_features(const nn::Tensor& rep, std::size_t global_dim) {
  nn::Tape t;
  const auto fs = split_features(t.constant(rep), global_dim);
  return {fs.global.value(), fs.local.value()};
}

PosteriorStats construct_posterior(const FedVIParams& params, const nn::Tensor& support_global) {
  nn::Tape t;
  const auto bp = bind_const(t, params);
  const auto pv = construct_posterior(bp, params.arch, t.constant(support_global));
  return {dist::DiagGaussian(pv.mean.value().storage(), pv.scale.value().storage()), pv.b_beta.value().storage()};
}

nn::Tensor predict_logits(const nn::Tensor& cls_w, const nn::Tensor& b_global, std::span<const double> beta,
                          std::span<const double> b_beta, const nn::Tensor& query_global,
                          const nn::Tensor& query_local, const ArchConfig& arch) {
  nn::Tape t;
  const auto beta_v = t.constant(nn::Tensor::vector({beta.begin(), beta.end()}));
  const auto bb_v = t.constant(nn::Tensor::vector({b_beta.begin(), b_beta.end()}));
  return predict_logits(t.constant(cls_w), t.constant(b_global), beta_v, bb_v, t.constant(query_global),
                        t.constant(query_local), arch)
      .value();
}

namespace {

std::vector<int> select_labels(std::span<const int> y, std::span<const std::size_t> rows) {
  std::vector<int> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = y[rows[i]];
  return out;
}

LossParts fedvi_loss(nn::Tape& t, const BoundParams& bp, const ArchConfig& arch, const data::Batch& batch, double tau,
                     std::span<const double> noise, Rng* dropout_rng, nn::Var* loss_out) {
  const std::size_t B = batch.x.rows();
  if (batch.y.size() != B) throw nn::ShapeError("minibatch_loss: label count does not match batch rows");
  if (noise.size() != arch.beta_dim())
    throw nn::ShapeError("minibatch_loss: noise has " + std::to_string(noise.size()) + " entries, expected " +
                         std::to_string(arch.beta_dim()));
  const auto sq = split_support_query(B, arch.support_fraction);
  const nn::Var rep = embed(bp, t.constant(batch.x), DropoutSpec{arch.dropout, dropout_rng});
  const auto support = split_features(nn::gather_rows(rep, sq.support), arch.global_dim());
  const auto query = split_features(nn::gather_rows(rep, sq.query), arch.global_dim());
  const auto post = construct_posterior(bp, arch, support.global);
  const nn::Var beta = dist::sample_reparam(post.mean, post.scale, noise);
  const nn::Var logits = predict_logits(bp.cls_w, bp.cls_b, beta, post.b_beta, query.global, query.local, arch);
  const auto query_labels = select_labels(batch.y, sq.query);
  const nn::Var nll = nn::softmax_nll(logits, query_labels);
  const nn::Var kl = dist::kl_diag(post.mean, post.scale, arch.prior());
  const double weight = tau / static_cast<double>(B);
  const nn::Var loss = nn::add(nll, nn::scale(kl, weight));
  if (loss_out) *loss_out = loss;
  return {loss.value().item(), nll.value().item(), kl.value().item(), weight};
}

}  // namespace

LossParts minibatch_loss(FedVIParams& params, const data::Batch& batch, double tau, std::span<const double> noise,
                         Rng* dropout_rng, bool compute_grad) {
  nn::Tape t;
  const auto bp = compute_grad ? bind(t, params) : bind_const(t, params);
  nn::Var loss;
  const LossParts parts = fedvi_loss(t, bp, params.arch, batch, tau, noise, dropout_rng, &loss);
  if (compute_grad) t.backward(loss);
  return parts;
}

LossParts minibatch_loss(const FedVIParams& params, const data::Batch& batch, double tau,
                         std::span<const double> noise) {
  nn::Tape t;
  const auto bp = bind_const(t, params);
  return fedvi_loss(t, bp, params.arch, batch, tau, noise, nullptr, nullptr);
}

double global_only_loss(FedVIParams& params, const data::Batch& batch, Rng* dropout_rng, bool compute_grad) {
  nn::Tape t;
  const auto bp = compute_grad ? bind(t, params) : bind_const(t, params);
  const nn::Var rep = embed(bp, t.constant(batch.x), DropoutSpec{params.arch.dropout, dropout_rng});
  const nn::Var global = nn::slice_cols(rep, 0, params.arch.global_dim());
  const nn::Var logits = nn::add_row(nn::matmul(global, bp.cls_w), bp.cls_b);
  const nn::Var nll = nn::softmax_nll(logits, batch.y);
  if (compute_grad) t.backward(nll);
  return nll.value().item();
}

namespace {

int argmax_row(const nn::Tensor& logits, std::size_t r) {
  const std::size_t k = logits.cols();
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j)
    if (logits.at(r, j) > logits.at(r, best)) best = j;
  return static_cast<int>(best);
}

}  // namespace

QueryPredictions predict_query(const FedVIParams& params, const nn::Tensor& x) {
  const ArchConfig& arch = params.arch;
  nn::Tape t;
  const auto bp = bind_const(t, params);
  const auto sq = split_support_query(x.rows(), arch.support_fraction);
  const nn::Var rep = embed(bp, t.constant(x));
  const auto support = split_features(nn::gather_rows(rep, sq.support), arch.global_dim());
  const auto query = split_features(nn::gather_rows(rep, sq.query), arch.global_dim());
  const auto post = construct_posterior(bp, arch, support.global);
  const nn::Var logits = predict_logits(bp.cls_w, bp.cls_b, post.mean, post.b_beta, query.global, query.local, arch);
  QueryPredictions out{sq.query, {}};
  for (std::size_t r = 0; r < sq.query.size(); ++r) out.predicted.push_back(argmax_row(logits.value(), r));
  return out;
}

std::vector<int> predict_global(const FedVIParams& params, const nn::Tensor& x) {
  nn::Tape t;
  const auto bp = bind_const(t, params);
  const nn::Var rep = embed(bp, t.constant(x));
  const nn::Var global = nn::slice_cols(rep, 0, params.arch.global_dim());
  const nn::Var logits = nn::add_row(nn::matmul(global, bp.cls_w), bp.cls_b);
  std::vector<int> out;
  for (std::size_t r = 0; r < x.rows(); ++r) out.push_back(argmax_row(logits.value(), r));
  return out;
}

}  // namespace fedvi::model
