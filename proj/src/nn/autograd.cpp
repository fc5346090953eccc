#include "fedvi/nn/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace fedvi::nn {

const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("use of an unbound Var");
  return tape_->value(id_);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(ParamBlock& block) {
  nodes_.push_back(Node{block.value, {}, {}, &block, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::span<const Var> parents, BackwardFn fn, const char* op) {
  if (!value.all_finite())
    throw NumericError(std::string("non-finite value produced by ") + op);
  bool needs = false;
  for (const Var& p : parents) {
    if (p.tape() != this) throw std::logic_error(std::string(op) + ": operand recorded on another tape");
    needs = needs || nodes_[p.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : BackwardFn{}, nullptr, needs});
  return Var(this, nodes_.size() - 1);
}

Tensor* Tape::grad_sink(std::size_t id) {
  Node& n = nodes_[id];
  return n.requires_grad ? &n.grad : nullptr;
}

void Tape::backward(Var root) {
  if (root.tape() != this) throw std::logic_error("backward: root belongs to another tape");
  if (value(root.id()).size() != 1)
    throw std::logic_error("backward: root must be a scalar, got shape " + shape_str(value(root.id()).shape()));
  for (Node& n : nodes_)
    n.grad = n.requires_grad ? Tensor(n.value.shape(), 0.0) : Tensor{};
  if (!nodes_[root.id()].requires_grad) {
    for (Node& n : nodes_)
      if (n.param) n.param->grad = Tensor(n.value.shape(), 0.0);
    return;
  }
  nodes_[root.id()].grad[0] = 1.0;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.requires_grad && n.backward) n.backward(*this, i);
  }
  for (Node& n : nodes_)
    if (n.param) n.param->grad = n.grad;
}

namespace {

// C[n×m] += A[n×k] · B[k×m]
void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = c + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C[n×m] += A[n×k] · B[m×k]ᵀ
void gemm_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
      c[i * m + j] += s;
    }
}

// C[n×m] += A[k×n]ᵀ · B[k×m]
void gemm_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t i = 0; i < n; ++i) {
      const double api = a[p * n + i];
      if (api == 0.0) continue;
      double* ci = c + i * m;
      const double* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += api * bp[j];
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void add_into(Tensor* sink, const Tensor& g) {
  if (!sink) return;
  auto d = sink->data();
  auto s = g.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  if (av.cols() != bv.rows())
    throw ShapeError("matmul: cannot multiply " + shape_str(av.shape()) + " by " + shape_str(bv.shape()));
  const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
  Tensor out({n, m}, 0.0);
  gemm_nn(av.data().data(), bv.data().data(), out.data().data(), n, k, m);
  Tape& t = *a.tape();
  const Var parents[] = {a, b};
  return t.record(std::move(out), parents, [a, b, n, k, m](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (Tensor* ga = t.grad_sink(a.id()))
      gemm_nt(g.data().data(), t.value(b.id()).data().data(), ga->data().data(), n, m, k);
    if (Tensor* gb = t.grad_sink(b.id()))
      gemm_tn(t.value(a.id()).data().data(), g.data().data(), gb->data().data(), k, n, m);
  }, "matmul");
}

Var matmul_bt(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul_bt");
  require_matrix(bv, "matmul_bt");
  if (av.cols() != bv.cols())
    throw ShapeError("matmul_bt: cannot multiply " + shape_str(av.shape()) + " by transpose of " +
                     shape_str(bv.shape()));
  const std::size_t n = av.rows(), k = av.cols(), m = bv.rows();
  Tensor out({n, m}, 0.0);
  gemm_nt(av.data().data(), bv.data().data(), out.data().data(), n, k, m);
  Tape& t = *a.tape();
  const Var parents[] = {a, b};
  return t.record(std::move(out), parents, [a, b, n, k, m](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);  // [n×m]
    if (Tensor* ga = t.grad_sink(a.id()))
      gemm_nn(g.data().data(), t.value(b.id()).data().data(), ga->data().data(), n, m, k);
    if (Tensor* gb = t.grad_sink(b.id()))
      gemm_tn(g.data().data(), t.value(a.id()).data().data(), gb->data().data(), m, n, k);
  }, "matmul_bt");
}

Var add_row(Var a, Var row) {
  const Tensor& av = a.value();
  const Tensor& rv = row.value();
  require_matrix(av, "add_row");
  if (rv.size() != av.cols())
    throw ShapeError("add_row: row of shape " + shape_str(rv.shape()) + " does not match " + shape_str(av.shape()));
  Tensor out = av;
  const std::size_t n = av.rows(), m = av.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) += rv[j];
  Tape& t = *a.tape();
  const Var parents[] = {a, row};
  return t.record(std::move(out), parents, [a, row, n, m](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    add_into(t.grad_sink(a.id()), g);
    if (Tensor* gr = t.grad_sink(row.id()))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*gr)[j] += g.at(i, j);
  }, "add_row");
}

Var dense(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  require_matrix(xv, "dense");
  require_matrix(wv, "dense");
  if (xv.cols() != wv.rows() || bv.size() != wv.cols())
    throw ShapeError("dense: input " + shape_str(xv.shape()) + " does not conform to weight " +
                     shape_str(wv.shape()) + " and bias " + shape_str(bv.shape()));
  return add_row(matmul(x, w), b);
}

Var relu(Var x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  Tape& t = *x.tape();
  const Var parents[] = {x};
  return t.record(std::move(out), parents, [x](Tape& t, std::size_t self) {
    Tensor* gx = t.grad_sink(x.id());
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(x.id());
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) (*gx)[i] += g[i];
  }, "relu");
}

Var exp(Var x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = std::exp(v);
  Tape& t = *x.tape();
  const Var parents[] = {x};
  return t.record(std::move(out), parents, [x](Tape& t, std::size_t self) {
    Tensor* gx = t.grad_sink(x.id());
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * y[i];
  }, "exp");
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  Tape& t = *a.tape();
  const Var parents[] = {a, b};
  return t.record(std::move(out), parents, [a, b](Tape& t, std::size_t self) {
    add_into(t.grad_sink(a.id()), t.grad(self));
    add_into(t.grad_sink(b.id()), t.grad(self));
  }, "add");
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  Tape& t = *a.tape();
  const Var parents[] = {a, b};
  return t.record(std::move(out), parents, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    add_into(t.grad_sink(a.id()), g);
    if (Tensor* gb = t.grad_sink(b.id()))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  }, "sub");
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  Tape& t = *a.tape();
  const Var parents[] = {a, b};
  return t.record(std::move(out), parents, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (Tensor* ga = t.grad_sink(a.id())) {
      const Tensor& bv = t.value(b.id());
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (Tensor* gb = t.grad_sink(b.id())) {
      const Tensor& av = t.value(a.id());
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    }
  }, "mul");
}

Var scale(Var a, double c) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= c;
  Tape& t = *a.tape();
  const Var parents[] = {a};
  return t.record(std::move(out), parents, [a, c](Tape& t, std::size_t self) {
    Tensor* ga = t.grad_sink(a.id());
    const Tensor& g = t.grad(self);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += c * g[i];
  }, "scale");
}

Var add_scalar(Var a, double c) {
  Tensor out = a.value();
  for (auto& v : out.data()) v += c;
  Tape& t = *a.tape();
  const Var parents[] = {a};
  return t.record(std::move(out), parents, [a](Tape& t, std::size_t self) {
    add_into(t.grad_sink(a.id()), t.grad(self));
  }, "add_scalar");
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  Tape& t = *a.tape();
  const Var parents[] = {a};
  return t.record(std::move(out), parents, [a](Tape& t, std::size_t self) {
    add_into(t.grad_sink(a.id()), t.grad(self));
  }, "reshape");
}

Var mean_rows(Var a) {
  const Tensor& av = a.value();
  require_matrix(av, "mean_rows");
  const std::size_t n = av.rows(), m = av.cols();
  Tensor out({m}, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j] += av.at(i, j);
  for (auto& v : out.data()) v /= static_cast<double>(n);
  Tape& t = *a.tape();
  const Var parents[] = {a};
  return t.record(std::move(out), parents, [a, n, m](Tape& t, std::size_t self) {
    Tensor* ga = t.grad_sink(a.id());
    const Tensor& g = t.grad(self);
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) ga->at(i, j) += g[j] * inv;
  }, "mean_rows");
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  require_matrix(av, "slice_cols");
  if (begin >= end || end > av.cols())
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_str(av.shape()));
  const std::size_t n = av.rows(), w = end - begin;
  Tensor out({n, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out.at(i, j) = av.at(i, begin + j);
  Tape& t = *a.tape();
  const Var parents[] = {a};
  return t.record(std::move(out), parents, [a, begin, n, w](Tape& t, std::size_t self) {
    Tensor* ga = t.grad_sink(a.id());
    const Tensor& g = t.grad(self);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) ga->at(i, begin + j) += g.at(i, j);
  }, "slice_cols");
}

Var slice(Var v, std::size_t begin, std::size_t end) {
  const Tensor& vv = v.value();
  if (vv.rank() != 1 || begin >= end || end > vv.size())
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                     shape_str(vv.shape()));
  std::vector<double> out(vv.data().begin() + static_cast<std::ptrdiff_t>(begin),
                          vv.data().begin() + static_cast<std::ptrdiff_t>(end));
  Tape& t = *v.tape();
  const Var parents[] = {v};
  return t.record(Tensor::vector(std::move(out)), parents, [v, begin](Tape& t, std::size_t self) {
    Tensor* gv = t.grad_sink(v.id());
    const Tensor& g = t.grad(self);
    for (std::size_t i = 0; i < g.size(); ++i) (*gv)[begin + i] += g[i];
  }, "slice");
}

Var gather_rows(Var a, std::span<const std::size_t> rows) {
  const Tensor& av = a.value();
  require_matrix(av, "gather_rows");
  if (rows.empty()) throw ShapeError("gather_rows: empty row selection");
  const std::size_t m = av.cols();
  Tensor out({rows.size(), m});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= av.rows())
      throw std::out_of_range("gather_rows: row " + std::to_string(rows[i]) + " out of range for " +
                              shape_str(av.shape()));
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) = av.at(rows[i], j);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  Tape& t = *a.tape();
  const Var parents[] = {a};
  return t.record(std::move(out), parents, [a, idx = std::move(idx), m](Tape& t, std::size_t self) {
    Tensor* ga = t.grad_sink(a.id());
    const Tensor& g = t.grad(self);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < m; ++j) ga->at(idx[i], j) += g.at(i, j);
  }, "gather_rows");
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  Tape& t = *a.tape();
  const Var parents[] = {a};
  return t.record(Tensor::scalar(s), parents, [a](Tape& t, std::size_t self) {
    Tensor* ga = t.grad_sink(a.id());
    const double g = t.grad(self)[0];
    for (auto& v : ga->data()) v += g;
  }, "sum");
}

namespace {

void check_labels(const Tensor& logits, std::span<const int> labels) {
  require_matrix(logits, "softmax_nll");
  if (labels.size() != logits.rows())
    throw ShapeError("softmax_nll: " + std::to_string(labels.size()) + " labels for logits of shape " +
                     shape_str(logits.shape()));
  const auto k = static_cast<int>(logits.cols());
  for (int y : labels)
    if (y < 0 || y >= k)
      throw std::out_of_range("softmax_nll: label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
}

double row_logsumexp(const double* row, std::size_t k) {
  double mx = row[0];
  for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
  return mx + std::log(s);
}

}  // namespace

double softmax_nll(const Tensor& logits, std::span<const int> labels) {
  check_labels(logits, labels);
  const std::size_t k = logits.cols();
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const double* row = logits.data().data() + i * k;
    total += row_logsumexp(row, k) - row[labels[i]];
  }
  if (!std::isfinite(total)) throw NumericError("non-finite value produced by softmax_nll");
  return total;
}

Var softmax_nll(Var logits, std::span<const int> labels) {
  const double total = softmax_nll(logits.value(), labels);
  std::vector<int> y(labels.begin(), labels.end());
  Tape& t = *logits.tape();
  const Var parents[] = {logits};
  return t.record(Tensor::scalar(total), parents, [logits, y = std::move(y)](Tape& t, std::size_t self) {
    Tensor* gl = t.grad_sink(logits.id());
    const Tensor& lv = t.value(logits.id());
    const double g = t.grad(self)[0];
    const std::size_t k = lv.cols();
    for (std::size_t i = 0; i < lv.rows(); ++i) {
      const double* row = lv.data().data() + i * k;
      const double lse = row_logsumexp(row, k);
      for (std::size_t j = 0; j < k; ++j) {
        const double p = std::exp(row[j] - lse);
        gl->at(i, j) += g * (p - (static_cast<int>(j) == y[i] ? 1.0 : 0.0));
      }
    }
  }, "softmax_nll");
}

Tensor dense_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tape t;
  return dense(t.constant(x), t.constant(w), t.constant(b)).value();
}

Tensor relu(const Tensor& x) {
  Tensor out = x;
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return out;
}

}  // namespace fedvi::nn
