#include "mtat/param_set.hpp"

#include <cstring>
#include <stdexcept>

namespace mtat {

template <typename T>
std::size_t ParamSet<T>::add(std::string name, Tensor<T> value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  Tensor<T> grad(value.shape());
  entries_.push_back(Entry{std::move(name), std::move(value), std::move(grad)});
  return entries_.size() - 1;
}

template <typename T>
std::size_t ParamSet<T>::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return i;
  }
  throw std::out_of_range("no parameter named '" + name + "'");
}

template <typename T>
bool ParamSet<T>::contains(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return true;
  }
  return false;
}

template <typename T>
void ParamSet<T>::zero_grad() {
  for (auto& e : entries_) e.grad.fill(T(0));
}

template <typename T>
std::int64_t ParamSet<T>::total_numel() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

template <typename T>
bool ParamSet<T>::same_structure(const ParamSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name != other.entries_[i].name) return false;
    if (entries_[i].value.shape() != other.entries_[i].value.shape()) return false;
  }
  return true;
}

template <typename T>
ParamSet<T> ParamSet<T>::clone() const {
  ParamSet out;
  out.entries_ = entries_;
  out.zero_grad();
  return out;
}

template <typename T>
bool ParamSet<T>::values_equal(const ParamSet& other) const {
  if (!same_structure(other)) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto a = entries_[i].value.data();
    const auto b = other.entries_[i].value.data();
    if (std::memcmp(a.data(), b.data(), a.size_bytes()) != 0) return false;
  }
  return true;
}

template <typename T>
void require_same_structure(const ParamSet<T>& a, const ParamSet<T>& b, const std::string& what) {
  if (a.size() != b.size()) {
    throw std::invalid_argument(what + ": parameter count " + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.name(i) != b.name(i) || a.value(i).shape() != b.value(i).shape()) {
      throw std::invalid_argument(what + ": entry " + std::to_string(i) + " is " + a.name(i) +
                                  shape_str(a.value(i).shape()) + " vs " + b.name(i) +
                                  shape_str(b.value(i).shape()));
    }
  }
}

template <typename T>
ParamDelta delta(const ParamSet<T>& a, const ParamSet<T>& b) {
  require_same_structure(a, b, "delta");
  ParamDelta d;
  d.names.reserve(a.size());
  d.values.reserve(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto av = a.value(i).data();
    const auto bv = b.value(i).data();
    Tensor<double> diff(a.value(i).shape());
    for (std::size_t k = 0; k < av.size(); ++k) {
      diff[k] = static_cast<double>(av[k]) - static_cast<double>(bv[k]);
    }
    d.names.push_back(a.name(i));
    d.values.push_back(std::move(diff));
  }
  return d;
}

template <typename T>
void axpy(ParamSet<T>& y, double alpha, const ParamDelta& d) {
  if (d.values.size() != y.size()) {
    throw std::invalid_argument("axpy: delta has " + std::to_string(d.values.size()) +
                                " entries, params have " + std::to_string(y.size()));
  }
  for (std::size_t i = 0; i < y.size(); ++i) {
    auto yv = y.value(i).data();
    const auto dv = d.values[i].data();
    if (d.names[i] != y.name(i) || d.values[i].shape() != y.value(i).shape()) {
      throw std::invalid_argument("axpy: entry " + std::to_string(i) + " mismatch (" + d.names[i] +
                                  " vs " + y.name(i) + ")");
    }
    for (std::size_t k = 0; k < yv.size(); ++k) {
      yv[k] = static_cast<T>(static_cast<double>(yv[k]) + alpha * dv[k]);
    }
  }
}

template class ParamSet<float>;
template class ParamSet<double>;
template ParamDelta delta(const ParamSet<float>&, const ParamSet<float>&);
template ParamDelta delta(const ParamSet<double>&, const ParamSet<double>&);
template void axpy(ParamSet<float>&, double, const ParamDelta&);
template void axpy(ParamSet<double>&, double, const ParamDelta&);
template void require_same_structure(const ParamSet<float>&, const ParamSet<float>&, const std::string&);
template void require_same_structure(const ParamSet<double>&, const ParamSet<double>&,
                                     const std::string&);

}  // namespace mtat
