#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "fedvi/model.hpp"
#include "test_util.hpp"

using namespace fedvi::model;
using fedvi::nn::ParamSet;
using fedvi::nn::Tensor;
using testutil::random_batch;
using testutil::tiny_arch;
using testutil::uniform;

namespace {

FedVIParams random_params(const ArchConfig& arch, std::uint64_t seed, double bias_scale = 0.3) {
  fedvi::Rng rng = fedvi::make_stream(seed, {77});
  FedVIParams p = init_params(arch, rng);
  // Non-zero biases so every term of the forward pass is exercised.
  for (auto& b : p.blocks)
    if (b.name.back() == 'b')
      for (auto& v : b.value.data()) v = bias_scale * std::uniform_real_distribution<double>(-1, 1)(rng);
  return p;
}

Tensor manual_embed(const FedVIParams& p, const Tensor& x) {
  Tensor h = x;
  const std::size_t n = p.arch.embed_widths.size();
  for (std::size_t i = 0; i < n; ++i) {
    const std::string s = "embed." + std::to_string(i);
    h = fedvi::nn::dense_forward(h, p.blocks.get(s + ".w").value, p.blocks.get(s + ".b").value);
    if (i + 1 < n) h = fedvi::nn::relu(h);
  }
  return h;
}

Tensor rows_of(const Tensor& t, std::size_t begin, std::size_t end) {
  Tensor out({end - begin, t.cols()});
  for (std::size_t i = begin; i < end; ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) out.at(i - begin, j) = t.at(i, j);
  return out;
}

Tensor cols_of(const Tensor& t, std::size_t begin, std::size_t end) {
  Tensor out({t.rows(), end - begin});
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = begin; j < end; ++j) out.at(i, j - begin) = t.at(i, j);
  return out;
}

/// logits[q][y] = Σ_l beta[y·L + l]·local[q][l] + Σ_g w[g][y]·global[q][g] + b_beta[y] + b[y]
Tensor naive_logits(const Tensor& w, const Tensor& b, const std::vector<double>& beta,
                    const std::vector<double>& b_beta, const Tensor& qg, const Tensor& ql, std::size_t K) {
  const std::size_t L = ql.cols(), G = qg.cols();
  Tensor out({qg.rows(), K});
  for (std::size_t q = 0; q < qg.rows(); ++q)
    for (std::size_t y = 0; y < K; ++y) {
      double s = b_beta[y] + b[y];
      for (std::size_t l = 0; l < L; ++l) s += beta[y * L + l] * ql.at(q, l);
      for (std::size_t g = 0; g < G; ++g) s += w.at(g, y) * qg.at(q, g);
      out.at(q, y) = s;
    }
  return out;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("ArchConfig validation and derived sizes") {
  ArchConfig a;
  CHECK_NOTHROW(a.validate());
  CHECK(a.rep_dim() == 20);
  CHECK(a.global_dim() == 16);
  CHECK(a.posterior_out_width() == (2 * 4 + 1) * 5);
  a.local_dim = 20;
  CHECK_THROWS_AS(a.validate(), std::invalid_argument);
  a.local_dim = 0;
  CHECK_THROWS_AS(a.validate(), std::invalid_argument);
  a = ArchConfig{};
  a.support_fraction = 1.0;
  CHECK_THROWS_AS(a.validate(), std::invalid_argument);
}

TEST_CASE("init_params produces a layout consistent with the architecture") {
  const auto arch = tiny_arch();
  fedvi::Rng rng = fedvi::make_stream(1, {1});
  const auto p = init_params(arch, rng);
  CHECK_NOTHROW(check_layout(p));
  CHECK(p.posterior_output_bias().size() == arch.posterior_out_width());
  CHECK(p.blocks.get("cls.w").value.shape() == fedvi::nn::Shape{arch.global_dim(), arch.num_classes});
  auto broken = p;
  broken.blocks.get("cls.b").value = Tensor({arch.num_classes + 1});
  CHECK_THROWS_AS(check_layout(broken), std::invalid_argument);
}

TEST_CASE("embed: zero parameters give a zero representation") {
  auto p = random_params(tiny_arch(), 2);
  for (auto& b : p.blocks) b.value.fill(0.0);
  fedvi::Rng rng = fedvi::make_stream(2, {1});
  const Tensor rep = embed(p, uniform({4, 5}, rng));
  CHECK(rep == Tensor({4, 6}, 0.0));
}

TEST_CASE("embed: single identity layer returns the input") {
  ArchConfig a = tiny_arch(4);
  a.embed_widths = {4};
  a.local_dim = 1;
  auto p = random_params(a, 3);
  auto& w = p.blocks.get("embed.0.w").value;
  w.fill(0.0);
  for (std::size_t i = 0; i < 4; ++i) w.at(i, i) = 1.0;
  p.blocks.get("embed.0.b").value.fill(0.0);
  fedvi::Rng rng = fedvi::make_stream(3, {1});
  const Tensor x = uniform({5, 4}, rng);
  CHECK(embed(p, x) == x);
}

TEST_CASE("embed matches composing dense_forward and relu by hand") {
  const auto p = random_params(tiny_arch(), 4);
  fedvi::Rng rng = fedvi::make_stream(4, {1});
  const Tensor x = uniform({4, 5}, rng);
  CHECK(max_relative_error(embed(p, x), manual_embed(p, x)) < 1e-12);
}

TEST_CASE("split_support_query") {
  auto sq = split_support_query(256, 0.5);
  REQUIRE(sq.support.size() == 128);
  REQUIRE(sq.query.size() == 128);
  CHECK(sq.support.front() == 0);
  CHECK(sq.support.back() == 127);
  CHECK(sq.query.front() == 128);
  CHECK(sq.query.back() == 255);
  sq = split_support_query(3, 0.5);
  CHECK(sq.support == std::vector<std::size_t>{0});
  CHECK(sq.query == std::vector<std::size_t>{1, 2});
  sq = split_support_query(2, 0.5);
  CHECK(sq.support.size() == 1);
  CHECK(sq.query.size() == 1);
  CHECK_THROWS_AS(split_support_query(1, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(split_support_query(3, 0.2), std::invalid_argument);
}

TEST_CASE("split_features partitions columns") {
  fedvi::Rng rng = fedvi::make_stream(5, {1});
  const Tensor rep = uniform({3, 128}, rng);
  const auto [g, l] = split_features(rep, 102);
  CHECK(g.shape() == fedvi::nn::Shape{3, 102});
  CHECK(l.shape() == fedvi::nn::Shape{3, 26});
  CHECK(g.at(2, 101) == rep.at(2, 101));
  CHECK(l.at(2, 0) == rep.at(2, 102));
  CHECK(l.at(1, 25) == rep.at(1, 127));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 128; ++j) CHECK(rep.at(i, j) == (j < 102 ? g.at(i, j) : l.at(i, j - 102)));

  const Tensor two = Tensor::matrix({{1, 2}, {3, 4}});
  const auto [g2, l2] = split_features(two, 1);
  CHECK(g2 == Tensor::matrix({{1}, {3}}));
  CHECK(l2 == Tensor::matrix({{2}, {4}}));
}

TEST_CASE("construct_posterior with a zero network") {
  auto p = random_params(tiny_arch(), 6);
  for (auto& b : p.blocks)
    if (b.name.rfind("post.", 0) == 0) b.value.fill(0.0);
  fedvi::Rng rng = fedvi::make_stream(6, {1});
  const auto st = construct_posterior(p, uniform({3, p.arch.global_dim()}, rng));
  const double s0 = p.arch.prior_scale();
  for (double m : st.q.mean()) CHECK(m == 0.0);
  for (double s : st.q.scale()) CHECK(s == p.arch.scale_floor + s0);
  for (double b : st.b_beta) CHECK(b == 0.0);
  CHECK(st.b_beta.size() == p.arch.num_classes);
}

TEST_CASE("construct_posterior follows the damped slice layout") {
  const auto p = random_params(tiny_arch(), 7, 1.0);
  const auto& a = p.arch;
  fedvi::Rng rng = fedvi::make_stream(7, {1});
  const Tensor support = uniform({4, a.global_dim()}, rng);
  Tensor h = support;
  const std::size_t layers = a.posterior_widths.size() + 1;
  for (std::size_t i = 0; i < layers; ++i) {
    const std::string s = "post." + std::to_string(i);
    h = fedvi::nn::dense_forward(h, p.blocks.get(s + ".w").value, p.blocks.get(s + ".b").value);
    if (i + 1 < layers) h = fedvi::nn::relu(h);
  }
  std::vector<double> g(h.cols(), 0.0);
  for (std::size_t r = 0; r < h.rows(); ++r)
    for (std::size_t c = 0; c < h.cols(); ++c) g[c] += h.at(r, c) / static_cast<double>(h.rows());
  const std::size_t lk = a.beta_dim();
  const auto st = construct_posterior(p, support);
  for (std::size_t i = 0; i < lk; ++i) {
    CHECK(st.q.mean()[i] == doctest::Approx(a.mean_damp * g[i]).epsilon(1e-12));
    CHECK(st.q.scale()[i] ==
          doctest::Approx(a.scale_floor + a.prior_scale() * std::exp(a.logscale_damp * g[lk + i])).epsilon(1e-12));
  }
  for (std::size_t y = 0; y < a.num_classes; ++y) CHECK(st.b_beta[y] == doctest::Approx(g[2 * lk + y]).epsilon(1e-12));
}

TEST_CASE("construct_posterior is invariant to duplicating and permuting support rows") {
  const auto p = random_params(tiny_arch(), 8);
  fedvi::Rng rng = fedvi::make_stream(8, {1});
  const Tensor two = uniform({2, p.arch.global_dim()}, rng);
  Tensor four({4, two.cols()}), swapped({2, two.cols()});
  for (std::size_t j = 0; j < two.cols(); ++j) {
    four.at(0, j) = four.at(1, j) = two.at(0, j);
    four.at(2, j) = four.at(3, j) = two.at(1, j);
    swapped.at(0, j) = two.at(1, j);
    swapped.at(1, j) = two.at(0, j);
  }
  const auto a = construct_posterior(p, two), b = construct_posterior(p, four), c = construct_posterior(p, swapped);
  CHECK(max_abs_diff(a.q.mean(), b.q.mean()) < 1e-15);
  CHECK(max_abs_diff(a.q.scale(), b.q.scale()) < 1e-15);
  CHECK(max_abs_diff(a.b_beta, b.b_beta) < 1e-15);
  CHECK(a.q == c.q);
  CHECK(a.b_beta == c.b_beta);
}

TEST_CASE("posterior scale never drops below the floor") {
  auto p = random_params(tiny_arch(), 9);
  fedvi::Rng rng = fedvi::make_stream(9, {1});
  // Drive the log-scale slice far negative so exp underflows to zero.
  const std::size_t lk = p.arch.beta_dim();
  auto& out_bias = p.blocks.get("post.1.b").value;
  for (std::size_t i = lk; i < 2 * lk; ++i) out_bias[i] = -1e6;
  for (int t = 0; t < 20; ++t) {
    const auto st = construct_posterior(p, uniform({3, p.arch.global_dim()}, rng, -5, 5));
    for (double s : st.q.scale()) CHECK(s >= p.arch.scale_floor);
  }
}

TEST_CASE("posterior is near the prior at initialisation") {
  ArchConfig arch;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    fedvi::Rng rng = fedvi::make_stream(seed, {fedvi::stream::kInit});
    const auto p = init_params(arch, rng);
    fedvi::Rng xr = fedvi::make_stream(seed, {2});
    const Tensor x = uniform({16, arch.input_dim}, xr, -2, 2);
    const auto [g, l] = split_features(embed(p, x), arch.global_dim());
    const auto st = construct_posterior(p, g);
    const double s0 = arch.prior_scale();
    for (double m : st.q.mean()) CHECK(std::abs(m) < 0.05);
    for (double s : st.q.scale()) CHECK(std::abs(s - s0) < 0.05 * s0);
  }
}

TEST_CASE("predict_logits examples") {
  const auto arch = tiny_arch();
  const std::size_t G = arch.global_dim(), L = arch.local_dim, K = arch.num_classes;
  fedvi::Rng rng = fedvi::make_stream(10, {1});
  const Tensor w = uniform({G, K}, rng), b = uniform({K}, rng);
  const Tensor qg = uniform({5, G}, rng), ql = uniform({5, L}, rng);
  const auto beta = uniform({L * K}, rng).storage();
  const auto b_beta = uniform({K}, rng).storage();

  const auto full = predict_logits(w, b, beta, b_beta, qg, ql, arch);
  CHECK(max_relative_error(full, naive_logits(w, b, beta, b_beta, qg, ql, K)) < 1e-12);

  const std::vector<double> zero_beta(L * K, 0.0), zero_bb(K, 0.0);
  const auto global_only = predict_logits(w, b, zero_beta, zero_bb, qg, ql, arch);
  Tensor expect = testutil::naive_matmul(qg, w);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t y = 0; y < K; ++y) expect.at(i, y) += b[y];
  CHECK(max_relative_error(global_only, expect) < 1e-12);

  const Tensor zw({G, K}, 0.0), zb({K}, 0.0);
  const auto local_only = predict_logits(zw, zb, beta, b_beta, qg, ql, arch);
  CHECK(max_relative_error(local_only, naive_logits(zw, zb, beta, b_beta, Tensor({5, G}, 0.0), ql, K)) < 1e-12);
}

TEST_CASE("minibatch_loss equals the hand-assembled forward pass") {
  const auto arch = tiny_arch();
  const auto p = random_params(arch, 11);
  fedvi::Rng rng = fedvi::make_stream(11, {1});
  const auto batch = random_batch(7, arch.input_dim, arch.num_classes, rng);
  const auto noise = fedvi::standard_normal(arch.beta_dim(), rng);
  const double tau = 0.37;
  const auto parts = minibatch_loss(p, batch, tau, noise);

  const Tensor rep = manual_embed(p, batch.x);
  const std::size_t s = 3;  // floor(0.5 · 7)
  const Tensor sg = cols_of(rows_of(rep, 0, s), 0, arch.global_dim());
  const Tensor qg = cols_of(rows_of(rep, s, 7), 0, arch.global_dim());
  const Tensor ql = cols_of(rows_of(rep, s, 7), arch.global_dim(), arch.rep_dim());
  const auto st = construct_posterior(p, sg);
  const auto beta = fedvi::dist::sample_reparam(st.q, noise);
  const Tensor logits =
      naive_logits(p.blocks.get("cls.w").value, p.blocks.get("cls.b").value, beta, st.b_beta, qg, ql, arch.num_classes);
  const std::vector<int> qy(batch.y.begin() + s, batch.y.end());
  const double nll = fedvi::nn::softmax_nll(logits, qy);
  const double kl = fedvi::dist::kl_diag(st.q, arch.prior());

  CHECK(parts.nll == doctest::Approx(nll).epsilon(1e-12));
  CHECK(parts.kl == doctest::Approx(kl).epsilon(1e-12));
  CHECK(parts.kl_weight == tau / 7.0);
  CHECK(std::abs(parts.loss - (parts.nll + parts.kl_weight * parts.kl)) < 1e-12);
}

TEST_CASE("minibatch_loss with tau = 0 is the query NLL") {
  const auto arch = tiny_arch();
  const auto p = random_params(arch, 12);
  fedvi::Rng rng = fedvi::make_stream(12, {1});
  const auto batch = random_batch(8, arch.input_dim, arch.num_classes, rng);
  const auto parts = minibatch_loss(p, batch, 0.0, fedvi::standard_normal(arch.beta_dim(), rng));
  CHECK(parts.loss == parts.nll);
  CHECK(parts.kl > 0.0);
}

TEST_CASE("tau = 1e-9 makes the KL contribution negligible") {
  ArchConfig arch;
  fedvi::Rng rng = fedvi::make_stream(13, {1});
  const auto p = init_params(arch, rng);
  for (std::size_t B : {32u, 256u}) {
    const auto batch = random_batch(B, arch.input_dim, arch.num_classes, rng);
    const auto parts = minibatch_loss(p, batch, 1e-9, fedvi::standard_normal(arch.beta_dim(), rng));
    REQUIRE(std::abs(parts.kl) < 1e6);
    CHECK(parts.kl_weight * parts.kl < 1e-5 * parts.nll);
  }
}

TEST_CASE("extended-precision reference agrees with minibatch_loss") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto arch = tiny_arch();
    auto p = random_params(arch, 200 + seed);
    fedvi::Rng rng = fedvi::make_stream(seed, {13});
    testutil::randomize(p, rng);
    const auto batch = random_batch(2 + seed, arch.input_dim, arch.num_classes, rng);
    const auto noise = fedvi::standard_normal(arch.beta_dim(), rng);
    const double loss = minibatch_loss(p, batch, 0.7, noise).loss;
    CHECK(std::abs(loss - static_cast<double>(testutil::reference_loss(p, batch, 0.7, noise))) < 1e-12 * std::max(1.0, loss));
  }
}

TEST_CASE("minibatch_loss gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    auto arch = tiny_arch(4, 3);
    arch.embed_widths = {6, 5};
    arch.posterior_widths = {5};
    arch.local_dim = 2;
    auto p = random_params(arch, 100 + seed);
    fedvi::Rng rng = fedvi::make_stream(seed, {14});
    if (seed % 2) testutil::randomize(p, rng);
    const auto batch = random_batch(6, arch.input_dim, arch.num_classes, rng);
    const auto noise = fedvi::standard_normal(arch.beta_dim(), rng);
    const double tau = 0.5;
    minibatch_loss(p, batch, tau, noise);
    const auto fd = testutil::reference_loss_fd(p, batch, tau, noise, 1e-5);
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
      CAPTURE(p.blocks[i].name);
      CHECK(max_relative_error(p.blocks[i].grad, fd[i], 1e-8) < 1e-4);
    }
    // The double-precision loss itself as the oracle, on coordinates large
    // enough for its rounding error not to matter.
    const auto fd_double = fedvi::nn::finite_diff_grad(
        [&](const ParamSet& s) {
          FedVIParams q{arch, s};
          return minibatch_loss(q, batch, tau, noise).loss;
        },
        p.blocks, 1e-5);
    for (std::size_t i = 0; i < p.blocks.size(); ++i) CHECK(max_relative_error(p.blocks[i].grad, fd_double[i], 1e-5) < 1e-4);
  }
}

TEST_CASE("global_only_loss gradients match finite differences") {
  auto arch = tiny_arch(4, 3);
  auto p = random_params(arch, 15);
  fedvi::Rng rng = fedvi::make_stream(15, {1});
  const auto batch = random_batch(6, arch.input_dim, arch.num_classes, rng);
  global_only_loss(p, batch);
  const auto fd = fedvi::nn::finite_diff_grad(
      [&](const ParamSet& s) {
        FedVIParams q{arch, s};
        return global_only_loss(q, batch, nullptr, false);
      },
      p.blocks, 1e-5);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    CAPTURE(p.blocks[i].name);
    CHECK(max_relative_error(p.blocks[i].grad, fd[i], 1e-8) < 1e-4);
    if (p.blocks[i].name.rfind("post.", 0) == 0) CHECK(p.blocks[i].grad == Tensor(p.blocks[i].value.shape(), 0.0));
  }
}

TEST_CASE("support labels are never read") {
  const auto arch = tiny_arch();
  fedvi::Rng rng = fedvi::make_stream(16, {1});
  auto p = random_params(arch, 16);
  const auto batch = random_batch(9, arch.input_dim, arch.num_classes, rng);
  const auto noise = fedvi::standard_normal(arch.beta_dim(), rng);
  auto garbled = batch;
  for (std::size_t i = 0; i < 4; ++i) garbled.y[i] = (garbled.y[i] + 1 + static_cast<int>(i)) % 3;
  auto q = p;
  const auto a = minibatch_loss(p, batch, 0.8, noise);
  const auto b = minibatch_loss(q, garbled, 0.8, noise);
  CHECK(a.loss == b.loss);
  CHECK(a.kl == b.kl);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) CHECK(p.blocks[i].grad == q.blocks[i].grad);
}

TEST_CASE("permuting query rows leaves the loss unchanged") {
  const auto arch = tiny_arch();
  fedvi::Rng rng = fedvi::make_stream(17, {1});
  const auto p = random_params(arch, 17);
  const auto batch = random_batch(8, arch.input_dim, arch.num_classes, rng);
  const auto noise = fedvi::standard_normal(arch.beta_dim(), rng);
  std::vector<std::size_t> perm{0, 1, 2, 3, 7, 5, 4, 6};
  std::vector<std::size_t> sperm{2, 0, 3, 1, 4, 5, 6, 7};
  const auto qp = fedvi::data::ClientDataset{"c", batch.x, batch.y, 8}.rows(perm);
  const auto sp = fedvi::data::ClientDataset{"c", batch.x, batch.y, 8}.rows(sperm);
  const double base = minibatch_loss(p, batch, 0.3, noise).loss;
  CHECK(minibatch_loss(p, qp, 0.3, noise).loss == doctest::Approx(base).epsilon(1e-13));
  CHECK(minibatch_loss(p, sp, 0.3, noise).loss == doctest::Approx(base).epsilon(1e-13));
}

TEST_CASE("minibatch_loss is deterministic with frozen noise") {
  const auto arch = tiny_arch();
  fedvi::Rng rng = fedvi::make_stream(18, {1});
  const auto p = random_params(arch, 18);
  const auto batch = random_batch(8, arch.input_dim, arch.num_classes, rng);
  const auto noise = fedvi::standard_normal(arch.beta_dim(), rng);
  const auto a = minibatch_loss(p, batch, 0.3, noise), b = minibatch_loss(p, batch, 0.3, noise);
  CHECK(a.loss == b.loss);
  CHECK(a.nll == b.nll);
  CHECK(a.kl == b.kl);
}

TEST_CASE("minibatch_loss rejects wrong noise length and tiny batches") {
  const auto arch = tiny_arch();
  fedvi::Rng rng = fedvi::make_stream(19, {1});
  const auto p = random_params(arch, 19);
  const auto batch = random_batch(8, arch.input_dim, arch.num_classes, rng);
  CHECK_THROWS_AS(minibatch_loss(p, batch, 0.0, std::vector<double>(arch.beta_dim() + 1)), fedvi::nn::ShapeError);
  const auto one = random_batch(1, arch.input_dim, arch.num_classes, rng);
  CHECK_THROWS(minibatch_loss(p, one, 0.0, std::vector<double>(arch.beta_dim())));
}

TEST_CASE("dropout only acts when a generator is supplied") {
  auto arch = tiny_arch();
  arch.dropout = 0.5;
  auto p = random_params(arch, 20);
  fedvi::Rng rng = fedvi::make_stream(20, {1});
  const auto batch = random_batch(8, arch.input_dim, arch.num_classes, rng);
  const auto noise = fedvi::standard_normal(arch.beta_dim(), rng);
  auto off = p;
  off.arch.dropout = 0.0;
  const double eval = minibatch_loss(p, batch, 0.0, noise, nullptr, false).loss;
  CHECK(eval == minibatch_loss(off, batch, 0.0, noise, nullptr, false).loss);
  fedvi::Rng d1 = fedvi::make_stream(20, {2}), d2 = fedvi::make_stream(20, {2});
  const double train1 = minibatch_loss(p, batch, 0.0, noise, &d1, false).loss;
  const double train2 = minibatch_loss(p, batch, 0.0, noise, &d2, false).loss;
  CHECK(train1 == train2);
  CHECK(train1 != eval);
}

TEST_CASE("predict_query uses the posterior mean and ignores support labels") {
  const auto arch = tiny_arch();
  fedvi::Rng rng = fedvi::make_stream(21, {1});
  const auto p = random_params(arch, 21);
  const Tensor x = uniform({6, arch.input_dim}, rng);
  const auto pred = predict_query(p, x);
  CHECK(pred.query == std::vector<std::size_t>{3, 4, 5});

  const Tensor rep = manual_embed(p, x);
  const auto st = construct_posterior(p, cols_of(rows_of(rep, 0, 3), 0, arch.global_dim()));
  const Tensor logits = naive_logits(p.blocks.get("cls.w").value, p.blocks.get("cls.b").value, st.q.mean(),
                                     st.b_beta, cols_of(rows_of(rep, 3, 6), 0, arch.global_dim()),
                                     cols_of(rows_of(rep, 3, 6), arch.global_dim(), arch.rep_dim()), arch.num_classes);
  for (std::size_t r = 0; r < 3; ++r) {
    const auto row = std::span<const double>(logits.data().data() + r * arch.num_classes, arch.num_classes);
    CHECK(pred.predicted[r] == std::max_element(row.begin(), row.end()) - row.begin());
  }
}
