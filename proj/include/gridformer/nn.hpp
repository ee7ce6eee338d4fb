#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gridformer/ops.hpp"
#include "gridformer/param_store.hpp"

namespace gridformer::nn {

// x[..., in] * weight[in, out] + bias[out]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor linear(const ParamStore& params, const std::string& prefix, const Tensor& x);

// Parameter initializers. Weights are stored [in, out].
Tensor init_linear_weight(std::size_t in, std::size_t out, std::mt19937_64& rng);
Tensor init_uniform_fan_in(Shape shape, std::size_t fan_in, std::mt19937_64& rng);
void add_linear(ParamStore& params, const std::string& prefix, std::size_t in, std::size_t out,
                std::mt19937_64& rng, bool with_bias = true);
void add_layer_norm(ParamStore& params, const std::string& prefix, std::size_t dim);

Tensor layer_norm(const ParamStore& params, const std::string& prefix, const Tensor& x);

// Projections of a multi-head attention layer, stored under `prefix`:
// q_proj, k_proj, v_proj, out_proj. The key projection has no bias because
// a key bias shifts every logit of a query by the same amount and cancels in
// the softmax.
void add_attention(ParamStore& params, const std::string& prefix, std::size_t dim, std::mt19937_64& rng);

struct AttentionProbe {
  std::size_t query_length = 0;
  std::size_t key_length = 0;
  std::vector<double> weights;  // [N, heads, Lq, Lk] of the last call
};

// Scaled dot-product attention with per-head scale 1/sqrt(D/heads).
// query [N, Lq, D], key/value [N, Lk, D] -> [N, Lq, D].
Tensor multi_head_attention(const ParamStore& params, const std::string& prefix, const Tensor& query,
                            const Tensor& key, const Tensor& value, std::size_t heads,
                            AttentionProbe* probe = nullptr);

}  // namespace gridformer::nn
