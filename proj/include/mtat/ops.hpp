#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mtat/graph.hpp"
#include "mtat/tensor.hpp"

// Differentiable operation catalog. Every op validates shapes (ShapeError with
// both shapes in the message) and rejects non-finite inputs (NonFiniteError).
// There is no implicit broadcasting: label maps are expanded with tile_label,
// per-sample blends use interpolate.
namespace mtat::ops {

struct Conv2dAttrs {
  std::int64_t stride = 1;
  std::int64_t pad = 0;
};

inline constexpr double kInstanceNormEps = 1e-5;
inline constexpr double kLeakySlope = 0.01;

/// x: N x C x H x W, weight: O x C x kh x kw, bias: O. Zero padding.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, std::optional<Var<T>> bias, Conv2dAttrs attrs);

/// Adjoint of conv2d. x: N x C x H x W, weight: C x O x kh x kw, bias: O.
/// Output spatial size is (H - 1) * stride - 2 * pad + kh.
template <typename T>
Var<T> conv_transpose2d(Var<T> x, Var<T> weight, std::optional<Var<T>> bias, Conv2dAttrs attrs);

/// x: N x F (trailing axes are flattened), weight: O x F, bias: O -> N x O.
template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, std::optional<Var<T>> bias);

/// Per-sample, per-channel normalisation over H x W with optional affine
/// scale/shift (both of length C).
template <typename T>
Var<T> instance_norm(Var<T> x, std::optional<Var<T>> gamma, std::optional<Var<T>> beta,
                     double eps = kInstanceNormEps);

template <typename T>
Var<T> relu(Var<T> x);
template <typename T>
Var<T> leaky_relu(Var<T> x, double slope = kLeakySlope);
template <typename T>
Var<T> tanh(Var<T> x);
template <typename T>
Var<T> abs(Var<T> x);
template <typename T>
Var<T> neg(Var<T> x);
template <typename T>
Var<T> scale(Var<T> x, double factor);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);

/// Full reductions to a rank-0 tensor.
template <typename T>
Var<T> sum(Var<T> x);
template <typename T>
Var<T> mean(Var<T> x);
/// Mean over every axis but the first: N x ... -> N.
template <typename T>
Var<T> sample_mean(Var<T> x);

/// N x ... -> N x (product of the rest).
template <typename T>
Var<T> flatten(Var<T> x);

/// Concatenation along axis 1 of N x Ci x H x W tensors.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts);

/// label: N x K -> N x K x H x W, each channel a constant map.
template <typename T>
Var<T> tile_label(Var<T> label, std::int64_t height, std::int64_t width);

/// u[n] * a + (1 - u[n]) * b with one coefficient per sample.
template <typename T>
Var<T> interpolate(Var<T> a, Var<T> b, const Tensor<T>& u);

/// Mean binary cross-entropy over all logits; targets must be 0 or 1.
template <typename T>
Var<T> bce_with_logits(Var<T> logits, const Tensor<T>& targets);

/// Mean softmax cross-entropy; targets are one-hot rows of an N x K tensor.
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, const Tensor<T>& targets);

/// Catalog identifiers, used by the finite-difference suite and the CLI.
std::vector<std::string> catalog();

}  // namespace mtat::ops
