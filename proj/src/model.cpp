#include "gridformer/model.hpp"

#include <algorithm>
#include <cmath>

#include "gridformer/error.hpp"
#include "gridformer/gtb.hpp"

namespace gridformer {

std::size_t ModelConfig::mlp_hidden() const {
  return static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(embed_dim)));
}

void ModelConfig::validate() const {
  if (patch_size == 0 || embed_dim == 0 || heads == 0 || depth == 0) {
    throw ValidationError("patch_size, embed_dim, heads and depth must be positive");
  }
  if (embed_dim % heads != 0) {
    throw ValidationError("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " +
                          std::to_string(heads));
  }
  if (grid_h == 0 || grid_w == 0 || grid_h % patch_size != 0 || grid_w % patch_size != 0) {
    throw ValidationError("patch size " + std::to_string(patch_size) + " does not divide grid " +
                          std::to_string(grid_h) + "x" + std::to_string(grid_w));
  }
  if (head_depth == 0) throw ValidationError("head_depth must be at least 1");
  if (mlp_ratio <= 0.0 || mlp_hidden() == 0) throw ValidationError("mlp_ratio must be positive");
  if (drop_path < 0.0 || drop_path >= 1.0 || dropout < 0.0 || dropout >= 1.0) {
    throw ValidationError("dropout rates must lie in [0, 1)");
  }
  if (variables.empty()) throw ValidationError("model vocabulary is empty");
  VariableVocabulary unique(variables);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"patch_size", c.patch_size},
       {"embed_dim", c.embed_dim},
       {"depth", c.depth},
       {"heads", c.heads},
       {"mlp_ratio", c.mlp_ratio},
       {"head_hidden_dim", c.head_hidden_dim},
       {"head_depth", c.head_depth},
       {"drop_path", c.drop_path},
       {"dropout", c.dropout},
       {"grid_h", c.grid_h},
       {"grid_w", c.grid_w},
       {"variables", c.variables},
       {"projection_targets", c.projection_targets}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.patch_size = j.value("patch_size", d.patch_size);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.depth = j.value("depth", d.depth);
  c.heads = j.value("heads", d.heads);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.head_hidden_dim = j.value("head_hidden_dim", d.head_hidden_dim);
  c.head_depth = j.value("head_depth", d.head_depth);
  c.drop_path = j.value("drop_path", d.drop_path);
  c.dropout = j.value("dropout", d.dropout);
  c.grid_h = j.value("grid_h", d.grid_h);
  c.grid_w = j.value("grid_w", d.grid_w);
  c.variables = j.value("variables", d.variables);
  c.projection_targets = j.value("projection_targets", d.projection_targets);
}

namespace {

Tensor trunc_normal(Shape shape, std::mt19937_64& rng) {
  Tensor flat = nn::init_linear_weight(1, numel(shape), rng);
  return Tensor::from(std::move(shape), std::vector<double>(flat.data().begin(), flat.data().end()), true);
}

std::string token_embed_name(const std::string& v) { return "token_embed." + v; }
std::string var_embed_name(const std::string& v) { return "var_embed." + v; }
std::string block_name(std::size_t i) { return "blocks." + std::to_string(i); }
std::string head_layer_name(std::size_t k) { return "head." + std::to_string(k); }

std::size_t head_out_dim(const ModelConfig& c) { return c.variables.size() * c.patch_size * c.patch_size; }

void add_variable(ParamStore& params, const ModelConfig& c, const std::string& v, std::mt19937_64& rng) {
  nn::add_linear(params, token_embed_name(v), c.patch_size * c.patch_size, c.embed_dim, rng);
  params.add(var_embed_name(v), trunc_normal({c.embed_dim}, rng));
}

void add_head(ParamStore& params, const ModelConfig& c, std::mt19937_64& rng) {
  std::size_t in = c.embed_dim;
  for (std::size_t k = 0; k + 1 < c.head_depth; ++k) {
    nn::add_linear(params, head_layer_name(k), in, c.head_hidden_dim, rng);
    in = c.head_hidden_dim;
  }
  nn::add_linear(params, head_layer_name(c.head_depth - 1), in, head_out_dim(c), rng);
}

double block_drop_rate(const ModelConfig& c, std::size_t i) {
  if (c.depth == 1) return c.drop_path;
  return c.drop_path * static_cast<double>(i) / static_cast<double>(c.depth - 1);
}

void check_train_rng(const ModelConfig& c, const ForwardOptions& o) {
  if (o.train && (c.dropout > 0.0 || c.drop_path > 0.0) && o.rng == nullptr) {
    throw ValidationError("train-mode forward needs a random generator");
  }
}

Tensor maybe_dropout(const Tensor& x, double p, const ForwardOptions& o) {
  if (!o.train || p == 0.0) return x;
  return ops::dropout(x, p, *o.rng, true);
}

Tensor maybe_drop_path(const Tensor& x, double p, const ForwardOptions& o) {
  if (!o.train || p == 0.0) return x;
  return ops::drop_path(x, p, *o.rng, true);
}

// Pre-norm transformer blocks followed by the final norm. x is [B, L, D].
Tensor backbone(const Model& m, Tensor x, const ForwardOptions& o) {
  const auto& c = m.config;
  for (std::size_t i = 0; i < c.depth; ++i) {
    std::string b = block_name(i);
    double rate = block_drop_rate(c, i);
    Tensor h = nn::layer_norm(m.params, b + ".norm1", x);
    h = nn::multi_head_attention(m.params, b + ".attn", h, h, h, c.heads);
    x = ops::add(x, maybe_drop_path(h, rate, o));
    h = nn::layer_norm(m.params, b + ".norm2", x);
    h = ops::gelu(nn::linear(m.params, b + ".mlp.fc1", h));
    h = maybe_dropout(h, c.dropout, o);
    h = maybe_dropout(nn::linear(m.params, b + ".mlp.fc2", h), c.dropout, o);
    x = ops::add(x, maybe_drop_path(h, rate, o));
  }
  return nn::layer_norm(m.params, "norm", x);
}

Tensor window_pos_embed(const Model& m, const TokenWindow& w) {
  const auto& c = m.config;
  const Tensor& pos = m.params.at("pos_embed");
  if (w.row0 == 0 && w.col0 == 0 && w.rows == c.token_h() && w.cols == c.token_w()) {
    return ops::reshape(pos, {w.size(), c.embed_dim});
  }
  Tensor rows = ops::slice(pos, 0, w.row0, w.row0 + w.rows);
  return ops::reshape(ops::slice(rows, 1, w.col0, w.col0 + w.cols), {w.size(), c.embed_dim});
}

// Tokenize, aggregate and add positional embedding; [B, V, H', W'] -> [B, L, D].
Tensor embed_window(const Model& m, const Tensor& x, const std::vector<std::string>& variables,
                    const TokenWindow& w, ForwardTrace* trace) {
  const auto& c = m.config;
  if (w.size() == 0) throw ValidationError("token window is empty");
  if (w.row0 + w.rows > c.token_h() || w.col0 + w.cols > c.token_w()) {
    throw ValidationError("token window exceeds the " + std::to_string(c.token_h()) + "x" +
                          std::to_string(c.token_w()) + " token grid");
  }
  std::size_t p = c.patch_size;
  if (x.rank() != 4 || x.dim(2) != w.rows * p || x.dim(3) != w.cols * p) {
    throw ShapeError("input " + shape_str(x.shape()) + " does not cover a " + std::to_string(w.rows) + "x" +
                     std::to_string(w.cols) + " token window with patch size " + std::to_string(p));
  }
  Tensor tokens = tokenize_and_embed(m, x, variables);
  if (trace) trace->tokens_before_aggregation = tokens.dim(1) * tokens.dim(2);
  Tensor agg = aggregate_variables(m, tokens, trace ? &trace->aggregation : nullptr);
  if (trace) trace->backbone_sequence_length = agg.dim(1);
  return ops::add(agg, window_pos_embed(m, w));
}

std::vector<std::size_t> target_indices(const ModelConfig& c, const std::vector<std::string>& targets) {
  if (targets.empty()) throw ValidationError("no target variables requested");
  VariableVocabulary vocab(c.variables);
  std::vector<std::size_t> idx;
  for (const auto& t : targets) {
    auto k = vocab.find(t);
    if (!k) throw ValidationError("target variable '" + t + "' is not in the model vocabulary");
    idx.push_back(*k);
  }
  return idx;
}

}  // namespace

Model init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  Model m;
  m.config = config;
  m.config.projection_targets.clear();
  const auto& c = m.config;
  auto& p = m.params;
  for (const auto& v : c.variables) add_variable(p, c, v, rng);
  p.add("agg_query", trunc_normal({c.embed_dim}, rng));
  nn::add_attention(p, "agg_attn", c.embed_dim, rng);
  p.add("pos_embed", trunc_normal({c.token_h(), c.token_w(), c.embed_dim}, rng));
  nn::add_linear(p, "lead_embed", 1, c.embed_dim, rng);
  for (std::size_t i = 0; i < c.depth; ++i) {
    std::string b = block_name(i);
    nn::add_layer_norm(p, b + ".norm1", c.embed_dim);
    nn::add_attention(p, b + ".attn", c.embed_dim, rng);
    nn::add_layer_norm(p, b + ".norm2", c.embed_dim);
    nn::add_linear(p, b + ".mlp.fc1", c.embed_dim, c.mlp_hidden(), rng);
    nn::add_linear(p, b + ".mlp.fc2", c.mlp_hidden(), c.embed_dim, rng);
  }
  nn::add_layer_norm(p, "norm", c.embed_dim);
  add_head(p, c, rng);
  if (!config.projection_targets.empty()) add_projection_head(m, config.projection_targets, rng);
  return m;
}

bool is_positional_parameter(const std::string& name) {
  return name == "pos_embed" || name.rfind("var_embed.", 0) == 0;
}

bool is_layer_norm_parameter(const std::string& name) {
  return name.rfind("norm.", 0) == 0 || name.find(".norm1.") != std::string::npos ||
         name.find(".norm2.") != std::string::npos;
}

Tensor patchify(const Tensor& x, std::size_t p) {
  if (x.rank() != 4) throw ShapeError("patchify expects [B, C, H, W], got " + shape_str(x.shape()));
  std::size_t b = x.dim(0), c = x.dim(1), hh = x.dim(2), ww = x.dim(3);
  if (p == 0 || hh % p != 0 || ww % p != 0) {
    throw ShapeError("patch size " + std::to_string(p) + " does not divide " + shape_str(x.shape()));
  }
  std::size_t h = hh / p, w = ww / p;
  Tensor t = ops::reshape(x, {b, c, h, p, w, p});
  t = ops::permute(t, {0, 1, 2, 4, 3, 5});
  return ops::reshape(t, {b, c, h * w, p * p});
}

Tensor unpatchify(const Tensor& patches, std::size_t h, std::size_t w, std::size_t p) {
  if (patches.rank() != 4 || patches.dim(2) != h * w || patches.dim(3) != p * p) {
    throw ShapeError("unpatchify expects [B, C, " + std::to_string(h * w) + ", " + std::to_string(p * p) +
                     "], got " + shape_str(patches.shape()));
  }
  std::size_t b = patches.dim(0), c = patches.dim(1);
  Tensor t = ops::reshape(patches, {b, c, h, w, p, p});
  t = ops::permute(t, {0, 1, 2, 4, 3, 5});
  return ops::reshape(t, {b, c, h * p, w * p});
}

Tensor tokenize_and_embed(const Model& m, const Tensor& x, const std::vector<std::string>& variables) {
  const auto& c = m.config;
  if (x.rank() != 4) throw ShapeError("model input must be [B, V, H, W], got " + shape_str(x.shape()));
  if (variables.empty() || x.dim(1) != variables.size()) {
    throw ShapeError("input " + shape_str(x.shape()) + " does not match " + std::to_string(variables.size()) +
                     " variable names");
  }
  std::size_t dim = c.embed_dim, pp = c.patch_size * c.patch_size;
  std::vector<Tensor> weights, biases, var_embeds;
  for (const auto& v : variables) {
    if (!m.params.contains(var_embed_name(v))) {
      throw ValidationError("variable '" + v + "' is not in the model vocabulary");
    }
    weights.push_back(ops::reshape(m.params.at(token_embed_name(v) + ".weight"), {1, pp, dim}));
    biases.push_back(ops::reshape(m.params.at(token_embed_name(v) + ".bias"), {1, 1, dim}));
    var_embeds.push_back(ops::reshape(m.params.at(var_embed_name(v)), {1, 1, dim}));
  }
  Tensor patches = patchify(x, c.patch_size);  // [B, V, L, p*p]
  Tensor tokens = ops::matmul(patches, ops::concat(weights, 0));
  tokens = ops::add(tokens, ops::concat(biases, 0));
  return ops::add(tokens, ops::concat(var_embeds, 0));
}

Tensor aggregate_variables(const Model& m, const Tensor& tokens, nn::AttentionProbe* probe) {
  if (tokens.rank() != 4) throw ShapeError("aggregation expects [B, V, L, D], got " + shape_str(tokens.shape()));
  std::size_t b = tokens.dim(0), v = tokens.dim(1), len = tokens.dim(2), dim = tokens.dim(3);
  Tensor kv = ops::reshape(ops::permute(tokens, {0, 2, 1, 3}), {b * len, v, dim});
  Tensor query = ops::broadcast_to(ops::reshape(m.params.at("agg_query"), {1, 1, dim}), {b * len, 1, dim});
  Tensor out = nn::multi_head_attention(m.params, "agg_attn", query, kv, kv, m.config.heads, probe);
  return ops::reshape(out, {b, len, dim});
}

Tensor embed_lead_time(const Model& m, std::span<const double> lead_hours) {
  std::vector<double> scaled;
  for (double h : lead_hours) {
    if (!(h > 0.0) || !std::isfinite(h)) throw ValidationError("lead time must be positive, got " + std::to_string(h));
    scaled.push_back(h / kLeadTimeScaleHours);
  }
  std::size_t n = scaled.size();
  Tensor in = Tensor::from({n, 1, 1}, std::move(scaled));
  return nn::linear(m.params, "lead_embed", in);
}

Tensor forward_token_subset(const Model& m, const Tensor& x, const std::vector<std::string>& variables,
                            std::span<const double> lead_hours, const std::vector<std::string>& targets,
                            const TokenWindow& window, const ForwardOptions& o) {
  const auto& c = m.config;
  check_train_rng(c, o);
  auto idx = target_indices(c, targets);
  if (lead_hours.size() != x.dim(0)) {
    throw ShapeError("got " + std::to_string(lead_hours.size()) + " lead times for batch " + shape_str(x.shape()));
  }
  Tensor h = embed_window(m, x, variables, window, o.trace);
  h = ops::add(h, embed_lead_time(m, lead_hours));
  h = maybe_dropout(h, c.dropout, o);
  h = backbone(m, h, o);
  for (std::size_t k = 0; k < c.head_depth; ++k) {
    h = nn::linear(m.params, head_layer_name(k), h);
    if (k + 1 < c.head_depth) h = ops::gelu(h);
  }
  std::size_t b = h.dim(0), nv = c.variables.size(), pp = c.patch_size * c.patch_size;
  h = ops::permute(ops::reshape(h, {b, window.size(), nv, pp}), {0, 2, 1, 3});
  Tensor full = unpatchify(h, window.rows, window.cols, c.patch_size);
  return ops::index_select(full, 1, idx);
}

Tensor forward(const Model& m, const Tensor& x, const std::vector<std::string>& variables,
               std::span<const double> lead_hours, const std::vector<std::string>& targets,
               const ForwardOptions& o) {
  if (x.rank() == 4 && (x.dim(2) != m.config.grid_h || x.dim(3) != m.config.grid_w)) {
    throw ShapeError("input " + shape_str(x.shape()) + " does not match the model grid " +
                     std::to_string(m.config.grid_h) + "x" + std::to_string(m.config.grid_w));
  }
  return forward_token_subset(m, x, variables, lead_hours, targets, TokenWindow::full(m.config), o);
}

Model interpolate_pos_embed(const Model& m, std::size_t h2, std::size_t w2) {
  if (h2 == 0 || w2 == 0) throw ValidationError("target token grid must be nonempty");
  if (!m.config.projection_targets.empty()) {
    throw ValidationError("cannot change the grid of a model with a projection head");
  }
  const auto& c = m.config;
  Model out;
  out.config = c;
  out.config.grid_h = h2 * c.patch_size;
  out.config.grid_w = w2 * c.patch_size;
  out.norm_stats = m.norm_stats;
  out.params = m.params.clone();
  const Tensor& pos = m.params.at("pos_embed");
  auto resized = resize_bilinear(pos.data(), c.token_h(), c.token_w(), c.embed_dim, h2, w2);
  out.params.set("pos_embed", Tensor::from({h2, w2, c.embed_dim}, std::move(resized), pos.requires_grad()));
  return out;
}

std::vector<std::string> adapt_vocabulary(Model& m, const std::vector<std::string>& variables,
                                          std::mt19937_64& rng) {
  std::vector<std::string> fresh;
  auto& c = m.config;
  for (const auto& v : variables) {
    if (std::find(c.variables.begin(), c.variables.end(), v) != c.variables.end()) continue;
    c.variables.push_back(v);
    add_variable(m.params, c, v, rng);
    fresh.push_back(token_embed_name(v) + ".weight");
    fresh.push_back(token_embed_name(v) + ".bias");
    fresh.push_back(var_embed_name(v));
  }
  if (!fresh.empty()) {
    std::string last = head_layer_name(c.head_depth - 1);
    std::size_t in = m.params.at(last + ".weight").dim(0);
    m.params.erase(last + ".weight");
    m.params.erase(last + ".bias");
    nn::add_linear(m.params, last, in, head_out_dim(c), rng);
    fresh.push_back(last + ".weight");
    fresh.push_back(last + ".bias");
  }
  return fresh;
}

std::vector<std::string> add_projection_head(Model& m, const std::vector<std::string>& targets,
                                             std::mt19937_64& rng) {
  if (targets.empty()) throw ValidationError("projection head needs at least one target");
  VariableVocabulary unique(targets);
  auto& c = m.config;
  std::vector<std::string> old;
  for (const auto& [name, t] : m.params) {
    if (name.rfind("proj.", 0) == 0) old.push_back(name);
  }
  for (const auto& n : old) m.params.erase(n);
  c.projection_targets = targets;
  m.params.add("proj.time_query", trunc_normal({c.embed_dim}, rng));
  nn::add_attention(m.params, "proj.time_attn", c.embed_dim, rng);
  nn::add_linear(m.params, "proj.head", c.embed_dim, targets.size() * c.grid_h * c.grid_w, rng);
  std::vector<std::string> fresh;
  for (const auto& [name, t] : m.params) {
    if (name.rfind("proj.", 0) == 0) fresh.push_back(name);
  }
  return fresh;
}

Tensor projection_forward(const Model& m, const Tensor& history, const std::vector<std::string>& variables,
                          const ForwardOptions& o, nn::AttentionProbe* history_probe) {
  const auto& c = m.config;
  check_train_rng(c, o);
  if (c.projection_targets.empty()) throw ValidationError("model has no projection head");
  if (history.rank() != 5) throw ShapeError("history must be [B, T, V, H, W], got " + shape_str(history.shape()));
  std::size_t b = history.dim(0), t = history.dim(1), v = history.dim(2);
  if (t == 0) throw ValidationError("projection needs at least one history slice");
  if (history.dim(3) != c.grid_h || history.dim(4) != c.grid_w) {
    throw ShapeError("history " + shape_str(history.shape()) + " does not match the model grid");
  }
  Tensor x = ops::reshape(history, {b * t, v, c.grid_h, c.grid_w});
  Tensor h = embed_window(m, x, variables, TokenWindow::full(c), o.trace);
  h = maybe_dropout(h, c.dropout, o);
  h = backbone(m, h, o);
  h = ops::reshape(ops::mean(h, 1), {b, t, c.embed_dim});
  Tensor query = ops::broadcast_to(ops::reshape(m.params.at("proj.time_query"), {1, 1, c.embed_dim}),
                                   {b, 1, c.embed_dim});
  h = nn::multi_head_attention(m.params, "proj.time_attn", query, h, h, c.heads, history_probe);
  h = nn::linear(m.params, "proj.head", ops::reshape(h, {b, c.embed_dim}));
  return ops::reshape(h, {b, c.projection_targets.size(), c.grid_h, c.grid_w});
}

nlohmann::json checkpoint_manifest(const Model& m, const nlohmann::json& extra) {
  nlohmann::json j;
  j["kind"] = "checkpoint";
  j["dtype"] = "f32";
  j["config"] = m.config;
  j["norm_stats"] = m.norm_stats;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [name, t] : m.params) entries.push_back({{"name", name}, {"shape", t.shape()}});
  j["params"] = std::move(entries);
  if (!extra.is_null()) j["extra"] = extra;
  return j;
}

void save_checkpoint(const std::filesystem::path& path, const Model& m, const nlohmann::json& extra) {
  std::vector<float> payload;
  payload.reserve(m.params.total_elements());
  for (const auto& [name, t] : m.params) {
    for (double v : t.data()) payload.push_back(static_cast<float>(v));
  }
  write_gtb(path, checkpoint_manifest(m, extra), payload);
}

Model load_checkpoint(const std::filesystem::path& path, nlohmann::json* extra) {
  GtbContainer c = read_gtb(path);
  const auto& j = c.manifest;
  if (j.value("kind", std::string()) != "checkpoint") throw FormatError(path.string() + " is not a checkpoint");
  Model m;
  try {
    m.config = j.at("config").get<ModelConfig>();
    m.norm_stats = j.at("norm_stats").get<NormStats>();
    std::size_t offset = 0;
    for (const auto& e : j.at("params")) {
      auto shape = e.at("shape").get<Shape>();
      std::size_t n = numel(shape);
      if (offset + n > c.payload.size()) {
        throw FormatError("checkpoint payload too short for parameter '" + e.at("name").get<std::string>() +
                          "' at byte offset " + std::to_string(c.payload_offset + 4 * c.payload.size()));
      }
      std::vector<double> vals(c.payload.begin() + static_cast<std::ptrdiff_t>(offset),
                               c.payload.begin() + static_cast<std::ptrdiff_t>(offset + n));
      m.params.add(e.at("name").get<std::string>(), Tensor::from(std::move(shape), std::move(vals), true));
      offset += n;
    }
    if (offset != c.payload.size()) {
      throw FormatError("checkpoint payload has trailing data at byte offset " +
                        std::to_string(c.payload_offset + 4 * offset));
    }
    if (extra && j.contains("extra")) *extra = j.at("extra");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": invalid checkpoint manifest: " + e.what());
  }
  m.config.validate();
  return m;
}

GradCheckResult model_gradient_check(const Model& model, std::uint64_t seed, std::size_t batch,
                                     std::size_t max_coordinates) {
  PrecisionScope f64(Precision::f64);
  Model m = model;
  m.params = model.params.clone();
  const auto& c = m.config;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.3);
  for (auto& [name, t] : m.params) {
    t.set_requires_grad(true);
    for (auto& v : t.mutable_data()) v += normal(rng);
  }
  std::normal_distribution<double> unit;
  auto random_field = [&] {
    std::vector<double> v(batch * c.variables.size() * c.grid_h * c.grid_w);
    for (auto& x : v) x = unit(rng);
    return Tensor::from({batch, c.variables.size(), c.grid_h, c.grid_w}, std::move(v));
  };
  Tensor x = random_field(), target = random_field();
  std::vector<double> leads(batch);
  for (std::size_t b = 0; b < batch; ++b) leads[b] = 6.0 * static_cast<double>(1 + (b * 15) % 28);
  return gradient_check(m.params, [&](const ParamStore&) {
    Tensor err = ops::sub(forward(m, x, c.variables, leads, c.variables), target);
    return ops::mean_all(ops::mul(err, err));
  }, 1e-5, max_coordinates);
}

}  // namespace gridformer
