#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mtat/tensor.hpp"

namespace mtat {

/// Elementwise difference of two structurally identical ParamSets, held in
/// double precision so that adding it back onto the subtrahend restores the
/// minuend exactly.
struct ParamDelta {
  std::vector<std::string> names;
  std::vector<Tensor<double>> values;
};

/// Named, ordered collection of trainable tensors with a gradient slot each.
template <typename T>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
  };

  /// Appends a parameter; names must be unique. Returns its index.
  std::size_t add(std::string name, Tensor<T> value);

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::string& name(std::size_t i) const { return entries_.at(i).name; }
  Tensor<T>& value(std::size_t i) { return entries_.at(i).value; }
  const Tensor<T>& value(std::size_t i) const { return entries_.at(i).value; }
  Tensor<T>& grad(std::size_t i) { return entries_.at(i).grad; }
  const Tensor<T>& grad(std::size_t i) const { return entries_.at(i).grad; }
  const std::vector<Entry>& entries() const { return entries_; }

  /// Index of `name`; throws std::out_of_range when absent.
  std::size_t index_of(const std::string& name) const;
  bool contains(const std::string& name) const;

  void zero_grad();
  std::int64_t total_numel() const;

  /// Same names, order and shapes.
  bool same_structure(const ParamSet& other) const;

  /// Deep copy with gradients cleared.
  ParamSet clone() const;

  /// Bitwise equality of names, shapes and values (gradients ignored).
  bool values_equal(const ParamSet& other) const;

 private:
  std::vector<Entry> entries_;
};

/// a - b, computed exactly in double for every element.
template <typename T>
ParamDelta delta(const ParamSet<T>& a, const ParamSet<T>& b);

/// y += alpha * d, accumulated in double and rounded once to T.
template <typename T>
void axpy(ParamSet<T>& y, double alpha, const ParamDelta& d);

/// Throws std::invalid_argument naming the first mismatch when structures differ.
template <typename T>
void require_same_structure(const ParamSet<T>& a, const ParamSet<T>& b, const std::string& what);

}  // namespace mtat
