#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "gridformer/tensor.hpp"

// Differentiable primitives. Binary elementwise ops broadcast with numpy
// rules; every op checks shapes up front and names both operands on mismatch.
namespace gridformer::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

// [..., m, k] x [..., k, n]; leading dims broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
Tensor index_select(const Tensor& a, std::size_t axis, std::span<const std::size_t> indices);
Tensor broadcast_to(const Tensor& a, const Shape& shape);

Tensor sum(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

Tensor softmax(const Tensor& a);  // last axis

inline constexpr double kLayerNormEps = 1e-6;
// Normalizes over the last axis, then applies gamma/beta of shape [last].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = kLayerNormEps);

Tensor gelu(const Tensor& a);  // exact erf form
Tensor tanh(const Tensor& a);

// Inverted dropout. Identity when !train or p == 0.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng, bool train);
// Stochastic depth: drops whole rows along axis 0 with probability p.
Tensor drop_path(const Tensor& x, double p, std::mt19937_64& rng, bool train);

}  // namespace gridformer::ops
