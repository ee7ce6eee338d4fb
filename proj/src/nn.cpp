#include "gridformer/nn.hpp"

#include <algorithm>
#include <cmath>

#include "gridformer/error.hpp"

namespace gridformer::nn {

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  Tensor y = ops::matmul(x, weight);
  return bias.defined() ? ops::add(y, bias) : y;
}

Tensor linear(const ParamStore& params, const std::string& prefix, const Tensor& x) {
  const Tensor& w = params.at(prefix + ".weight");
  std::string bias_name = prefix + ".bias";
  return linear(x, w, params.contains(bias_name) ? params.at(bias_name) : Tensor{});
}

Tensor init_linear_weight(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  // Truncated normal, std 0.02, cut at two sigma.
  std::normal_distribution<double> normal(0.0, 0.02);
  std::vector<double> values(in * out);
  for (auto& v : values) {
    double s;
    do {
      s = normal(rng);
    } while (std::abs(s) > 0.04);
    v = s;
  }
  return Tensor::from({in, out}, std::move(values), true);
}

Tensor init_uniform_fan_in(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> uniform(-bound, bound);
  std::vector<double> values(numel(shape));
  for (auto& v : values) v = uniform(rng);
  return Tensor::from(std::move(shape), std::move(values), true);
}

void add_linear(ParamStore& params, const std::string& prefix, std::size_t in, std::size_t out,
                std::mt19937_64& rng, bool with_bias) {
  params.add(prefix + ".weight", init_linear_weight(in, out, rng));
  if (with_bias) params.add(prefix + ".bias", Tensor::zeros({out}, true));
}

void add_layer_norm(ParamStore& params, const std::string& prefix, std::size_t dim) {
  params.add(prefix + ".weight", Tensor::full({dim}, 1.0, true));
  params.add(prefix + ".bias", Tensor::zeros({dim}, true));
}

Tensor layer_norm(const ParamStore& params, const std::string& prefix, const Tensor& x) {
  return ops::layer_norm(x, params.at(prefix + ".weight"), params.at(prefix + ".bias"));
}

void add_attention(ParamStore& params, const std::string& prefix, std::size_t dim, std::mt19937_64& rng) {
  add_linear(params, prefix + ".q_proj", dim, dim, rng);
  add_linear(params, prefix + ".k_proj", dim, dim, rng, false);
  add_linear(params, prefix + ".v_proj", dim, dim, rng);
  add_linear(params, prefix + ".out_proj", dim, dim, rng);
}

namespace {

// [N, L, D] -> [N, heads, L, D/heads]
Tensor split_heads(const Tensor& x, std::size_t heads) {
  std::size_t n = x.dim(0), len = x.dim(1), d = x.dim(2);
  return ops::permute(ops::reshape(x, {n, len, heads, d / heads}), {0, 2, 1, 3});
}

}  // namespace

Tensor multi_head_attention(const ParamStore& params, const std::string& prefix, const Tensor& query,
                            const Tensor& key, const Tensor& value, std::size_t heads,
                            AttentionProbe* probe) {
  if (query.rank() != 3 || key.rank() != 3 || value.rank() != 3) {
    throw ShapeError("attention expects [N, L, D] inputs, got " + shape_str(query.shape()) + " and " +
                     shape_str(key.shape()));
  }
  std::size_t n = query.dim(0), lq = query.dim(1), d = query.dim(2);
  if (key.shape() != value.shape() || key.dim(0) != n || key.dim(2) != d) {
    throw ShapeError("attention: incompatible shapes " + shape_str(query.shape()) + " and " +
                     shape_str(key.shape()));
  }
  if (heads == 0 || d % heads != 0) {
    throw ValidationError("attention: " + std::to_string(heads) + " heads do not divide embedding dim " +
                          std::to_string(d));
  }
  Tensor q = split_heads(linear(params, prefix + ".q_proj", query), heads);
  Tensor k = split_heads(linear(params, prefix + ".k_proj", key), heads);
  Tensor v = split_heads(linear(params, prefix + ".v_proj", value), heads);
  double scale = 1.0 / std::sqrt(static_cast<double>(d / heads));
  Tensor logits = ops::scale(ops::matmul(q, ops::transpose(k, 2, 3)), scale);
  Tensor weights = ops::softmax(logits);
  if (probe) {
    probe->query_length = lq;
    probe->key_length = key.dim(1);
    probe->weights.assign(weights.data().begin(), weights.data().end());
  }
  Tensor mixed = ops::permute(ops::matmul(weights, v), {0, 2, 1, 3});
  return linear(params, prefix + ".out_proj", ops::reshape(mixed, {n, lq, d}));
}

}  // namespace gridformer::nn
