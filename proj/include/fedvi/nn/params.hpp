#pragma once

#include <string>
#include <vector>

#include "fedvi/nn/tensor.hpp"

namespace fedvi::nn {

struct ParamBlock {
  std::string name;
  Tensor value;
  Tensor grad;  // same shape as value

  ParamBlock() = default;
  ParamBlock(std::string n, Tensor v);
};

/// Ordered collection of uniquely named parameter blocks.
class ParamSet {
 public:
  ParamBlock& add(std::string name, Tensor value);

  std::size_t size() const { return blocks_.size(); }
  bool empty() const { return blocks_.empty(); }
  ParamBlock& operator[](std::size_t i) { return blocks_[i]; }
  const ParamBlock& operator[](std::size_t i) const { return blocks_[i]; }
  ParamBlock& get(const std::string& name);
  const ParamBlock& get(const std::string& name) const;
  std::size_t index_of(const std::string& name) const;
  bool contains(const std::string& name) const;

  auto begin() { return blocks_.begin(); }
  auto end() { return blocks_.end(); }
  auto begin() const { return blocks_.begin(); }
  auto end() const { return blocks_.end(); }

  std::size_t num_scalars() const;
  void zero_grad();

  /// Same names and shapes, values zeroed.
  ParamSet zeros_like() const;
  bool same_layout(const ParamSet& other) const;

  /// this.value += alpha * other.value, blockwise.
  void axpy(double alpha, const ParamSet& other);
  void scale(double alpha);

  friend bool operator==(const ParamSet& a, const ParamSet& b);

 private:
  std::vector<ParamBlock> blocks_;
};

}  // namespace fedvi::nn
