#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "albertlab/common.hpp"
#include "albertlab/tensor.hpp"

namespace albert {

enum class Sharing { all, attention_only, ffn_only, none, grouped };
enum class Objective { mlm_only, mlm_nsp, mlm_sop };

Sharing sharing_from_string(const std::string& s);
std::string to_string(Sharing s);
Objective objective_from_string(const std::string& s);
std::string to_string(Objective o);

// Architecture hyperparameters. Zero means "derive the default" where noted;
// normalized() fills every derived field and checks the invariants.
struct ModelConfig {
  int num_layers = 12;
  int hidden_size = 768;
  int num_heads = 0;    // 0: H/64 (requires H >= 64)
  int embedding_size = 128;
  int vocab_size = 30000;
  int ffn_size = 0;     // 0: 4H
  int max_positions = 512;
  Sharing sharing = Sharing::all;
  int group_size = 0;   // layers per group; used only when sharing == grouped
  double dropout_p = 0.1;
  Objective objective = Objective::mlm_sop;
  std::optional<bool> factorize_embedding;  // unset: E != H; false with E != H is an error

  /// Copy with defaults resolved; throws ConfigError on invalid combinations.
  ModelConfig normalized() const;

  bool factorized() const;  // requires a normalized config
  bool has_sentence_pair_head_in_loss() const { return objective != Objective::mlm_only; }
};

ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json model_config_to_json(const ModelConfig& cfg);

/// Named configurations from the published tables, plus a desk-scale
/// "albert-tiny". Throws ConfigError for unknown names.
ModelConfig preset(const std::string& name);
std::vector<std::string> preset_names();

// Named parameter tensors plus the layer→group maps that route each encoder
// layer to its shared parameter block.
struct ParameterStore {
  std::vector<int> attention_group_of;  // size L
  std::vector<int> ffn_group_of;        // size L

  Tensor& add(const std::string& path, Tensor t);
  bool has(const std::string& path) const;
  const Tensor& at(const std::string& path) const;
  Tensor& at(const std::string& path);
  const std::vector<std::string>& paths() const { return order_; }  // insertion order
  std::size_t size() const { return order_.size(); }
  long long total_scalars() const;
  void zero_grads();

 private:
  std::vector<std::string> order_;
  std::map<std::string, Tensor> by_path_;
};

struct LayerGroups {
  std::vector<int> attention_group_of;
  std::vector<int> ffn_group_of;
  int num_attention_groups = 0;
  int num_ffn_groups = 0;
};

LayerGroups resolve_layer_groups(Sharing strategy, int num_layers, int group_size);

/// Allocates and initializes every tensor of the configured model
/// (truncated normal stddev 0.02, zero biases, unit layer-norm gains).
ParameterStore build_model(const ModelConfig& cfg, std::uint64_t seed);

struct ParameterCount {
  long long embeddings = 0;  // tables + embedding norm + projection
  long long attention = 0;   // across all attention groups
  long long ffn = 0;         // across all FFN groups
  long long pooler = 0;
  long long mlm_head = 0;
  long long sp_head = 0;
  long long encoder() const { return attention + ffn; }
  long long heads() const { return mlm_head + sp_head; }
  long long total() const { return embeddings + encoder() + pooler + heads(); }
};

/// Closed-form count of what build_model allocates (exact match asserted in
/// tests). Inventory: embedding tables at width E (+ E×H projection when
/// factorized), attention/FFN blocks with their layer-norms once per group,
/// pooler, MLM transform H×E + norm + V output bias, sentence-pair head.
ParameterCount count_parameters(const ModelConfig& cfg);

// One packed batch as the encoder consumes it; spans index row-major [B,S].
struct ModelInput {
  int batch = 0;
  int seq_len = 0;
  std::span<const int> token_ids;
  std::span<const int> segment_ids;
  std::span<const std::uint8_t> attention_mask;  // 1 = real token
};

struct ForwardOutput {
  Tensor hidden;      // [B,S,H] final layer
  Tensor pooled;      // [B,H] tanh pooler over position 0
  Tensor mlm_logits;  // [B,S,V]
  Tensor sp_logits;   // [B,2]; defined iff the objective has a sentence-pair loss
  std::vector<Tensor> layer_inputs;   // filled when trace: per-layer [B,S,H]
  std::vector<Tensor> layer_outputs;
};

ForwardOutput forward(const ParameterStore& params, const ModelConfig& cfg,
                      const ModelInput& in, bool training, bool trace, Rng& dropout_rng);

struct Losses {
  Tensor total;  // scalar
  Tensor mlm;    // scalar; 0 when every target is ignored
  Tensor sp;     // scalar; defined iff objective has a sentence-pair loss
  bool mlm_all_ignored = false;
};

/// Composes the pretraining loss from forward logits. mlm_targets is B*S with
/// kIgnoreIndex at unmasked/padded positions; sp_labels is B (kIgnoreIndex
/// entries are skipped).
Losses pretrain_losses(const ForwardOutput& out, std::span<const int> mlm_targets,
                       std::span<const int> sp_labels, Objective objective);

/// Initializes a deeper (or equal) target model from source parameters:
/// embeddings/pooler/heads copied, target layer i drawing from source layer
/// (i mod source_L). Configs must agree on H, E, V, A, ffn_size, P.
ParameterStore warm_start_expand(const ModelConfig& source_cfg, const ParameterStore& source,
                                 const ModelConfig& target_cfg);

}  // namespace albert
