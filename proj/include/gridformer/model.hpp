#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gridformer/dataset.hpp"
#include "gridformer/gradcheck.hpp"
#include "gridformer/grid.hpp"
#include "gridformer/nn.hpp"
#include "gridformer/param_store.hpp"
#include "json.hpp"

namespace gridformer {

struct ModelConfig {
  std::size_t patch_size = 2;
  std::size_t embed_dim = 64;
  std::size_t depth = 2;
  std::size_t heads = 4;
  double mlp_ratio = 4.0;
  std::size_t head_hidden_dim = 64;
  std::size_t head_depth = 2;
  double drop_path = 0.1;
  double dropout = 0.1;
  std::size_t grid_h = 16;
  std::size_t grid_w = 32;
  std::vector<std::string> variables;  // vocabulary, fixed order
  // Targets of the projection head; empty when the model has none.
  std::vector<std::string> projection_targets;

  std::size_t token_h() const { return grid_h / patch_size; }
  std::size_t token_w() const { return grid_w / patch_size; }
  std::size_t mlp_hidden() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct Model {
  ModelConfig config;
  ParamStore params;
  NormStats norm_stats;
};

Model init_model(const ModelConfig& config, std::uint64_t seed);

// Learnable spatial and variable embeddings, exempt from weight decay.
bool is_positional_parameter(const std::string& name);
bool is_layer_norm_parameter(const std::string& name);

// Half-open token rectangle [row0, row0 + rows) x [col0, col0 + cols).
struct TokenWindow {
  std::size_t row0 = 0;
  std::size_t rows = 0;
  std::size_t col0 = 0;
  std::size_t cols = 0;

  static TokenWindow full(const ModelConfig& c) { return {0, c.token_h(), 0, c.token_w()}; }
  std::size_t size() const { return rows * cols; }
};

struct ForwardTrace {
  std::size_t tokens_before_aggregation = 0;  // V * h * w per sample
  std::size_t backbone_sequence_length = 0;
  nn::AttentionProbe aggregation;
};

struct ForwardOptions {
  bool train = false;
  std::mt19937_64* rng = nullptr;  // required in train mode
  ForwardTrace* trace = nullptr;
};

// [B, C, H, W] -> [B, C, h*w, p*p] and back.
Tensor patchify(const Tensor& x, std::size_t p);
Tensor unpatchify(const Tensor& patches, std::size_t h, std::size_t w, std::size_t p);

// x [B, V, h*p, w*p] -> [B, V, h*w, D] with per-variable patch embedding and
// variable embedding added.
Tensor tokenize_and_embed(const Model& model, const Tensor& x, const std::vector<std::string>& variables);
// [B, V, L, D] -> [B, L, D]: one learnable query attends over the V tokens at
// each position.
Tensor aggregate_variables(const Model& model, const Tensor& tokens, nn::AttentionProbe* probe = nullptr);
// Lead times in hours, one per batch element -> [B, 1, D].
Tensor embed_lead_time(const Model& model, std::span<const double> lead_hours);
inline constexpr double kLeadTimeScaleHours = 168.0;

// Full pipeline on the whole grid. x is [B, V, H, W] normalized values.
// Returns [B, V', H, W] for the requested targets.
Tensor forward(const Model& model, const Tensor& x, const std::vector<std::string>& variables,
               std::span<const double> lead_hours, const std::vector<std::string>& targets,
               const ForwardOptions& options = {});

// Same pipeline on a token sub-rectangle. x covers exactly the window, i.e.
// [B, V, rows*p, cols*p]; positional embeddings are gathered for it.
Tensor forward_token_subset(const Model& model, const Tensor& x, const std::vector<std::string>& variables,
                            std::span<const double> lead_hours, const std::vector<std::string>& targets,
                            const TokenWindow& window, const ForwardOptions& options = {});

// Bilinear (corner-aligned) resize of pos_embed to a new token grid; every
// other parameter is copied.
Model interpolate_pos_embed(const Model& model, std::size_t h2, std::size_t w2);

// Adds embedders for unseen input variables. When the vocabulary grows the
// last head layer is re-initialized to the new output width. Returns the
// names of the fresh parameters.
std::vector<std::string> adapt_vocabulary(Model& model, const std::vector<std::string>& variables,
                                          std::mt19937_64& rng);

// Adds the history-attention projection head for `targets`, replacing any
// existing one. Returns the names of the fresh parameters.
std::vector<std::string> add_projection_head(Model& model, const std::vector<std::string>& targets,
                                             std::mt19937_64& rng);

// history [B, T, V, H, W] -> [B, V', H, W] for the projection targets.
Tensor projection_forward(const Model& model, const Tensor& history, const std::vector<std::string>& variables,
                          const ForwardOptions& options = {}, nn::AttentionProbe* history_probe = nullptr);

nlohmann::json checkpoint_manifest(const Model& model, const nlohmann::json& extra = {});
void save_checkpoint(const std::filesystem::path& path, const Model& model, const nlohmann::json& extra = {});
Model load_checkpoint(const std::filesystem::path& path, nlohmann::json* extra = nullptr);

// Gradient check of an MSE forecast loss on random inputs over every
// parameter, with parameters first perturbed away from their init. Works on a
// copy of the parameters; switches to f64 for the duration.
GradCheckResult model_gradient_check(const Model& model, std::uint64_t seed, std::size_t batch = 2,
                                     std::size_t max_coordinates = 0);

}  // namespace gridformer
