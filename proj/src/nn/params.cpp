#include "fedvi/nn/params.hpp"

#include <algorithm>
#include <stdexcept>

namespace fedvi::nn {

ParamBlock::ParamBlock(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
  grad = Tensor(value.shape(), 0.0);
}

ParamBlock& ParamSet::add(std::string name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter block name: " + name);
  blocks_.emplace_back(std::move(name), std::move(value));
  return blocks_.back();
}

std::size_t ParamSet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    if (blocks_[i].name == name) return i;
  throw std::out_of_range("no parameter block named " + name);
}

bool ParamSet::contains(const std::string& name) const {
  return std::any_of(blocks_.begin(), blocks_.end(), [&](const ParamBlock& b) { return b.name == name; });
}

ParamBlock& ParamSet::get(const std::string& name) { return blocks_[index_of(name)]; }
const ParamBlock& ParamSet::get(const std::string& name) const { return blocks_[index_of(name)]; }

std::size_t ParamSet::num_scalars() const {
  std::size_t n = 0;
  for (const auto& b : blocks_) n += b.value.size();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& b : blocks_) b.grad.fill(0.0);
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (const auto& b : blocks_) out.add(b.name, Tensor(b.value.shape(), 0.0));
  return out;
}

bool ParamSet::same_layout(const ParamSet& other) const {
  if (blocks_.size() != other.blocks_.size()) return false;
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    if (blocks_[i].name != other.blocks_[i].name || blocks_[i].value.shape() != other.blocks_[i].value.shape())
      return false;
  return true;
}

void ParamSet::axpy(double alpha, const ParamSet& other) {
  if (!same_layout(other)) throw ShapeError("axpy: parameter sets have different layouts");
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    auto dst = blocks_[i].value.data();
    auto src = other.blocks_[i].value.data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += alpha * src[j];
  }
}

void ParamSet::scale(double alpha) {
  for (auto& b : blocks_)
    for (auto& v : b.value.data()) v *= alpha;
}

bool operator==(const ParamSet& a, const ParamSet& b) {
  if (!a.same_layout(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].value != b[i].value) return false;
  return true;
}

}  // namespace fedvi::nn
