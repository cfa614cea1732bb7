#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "albertlab/data.hpp"
#include "albertlab/model.hpp"
#include "albertlab/optim.hpp"

namespace albert {

// Everything one pretraining run needs; serialized as JSON with the same
// field names.
struct RunConfig {
  ModelConfig model;
  MaskingConfig masking;
  LambConfig optimizer;
  std::optional<Schedule> schedule;  // default: peak 0.00176, warmup max(1, max_steps/10),
                                     // total max_steps
  int batch_size = 16;
  long long max_steps = 2000;
  long long eval_every = 500;        // 0 disables intrinsic eval
  long long checkpoint_every = 500;  // 0 disables periodic checkpoints
  int eval_instances = 64;
  int max_len = 128;
  double short_prob = 0.1;
  std::string corpus;
  std::string output_dir;
  std::uint64_t seed = 42;
  bool save_optimizer = false;

  Schedule effective_schedule() const;
  void validate() const;  // throws ConfigError (corpus/output_dir checked at run time)
};

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& cfg);
RunConfig load_run_config(const std::string& path);

/// FNV-1a hash (16 hex chars) of a canonical JSON dump.
std::string json_digest(const nlohmann::json& j);

/// json_digest of the full run config; stamped on every output a run produces.
std::string config_digest(const RunConfig& cfg);

/// Deterministic sub-stream seed for a named purpose.
std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t tag);

struct PretrainOptions {
  bool no_dropout = false;
  std::string warm_start;  // checkpoint path to expand from
};

struct TrainResult {
  long long steps_completed = 0;
  bool aborted = false;
  std::string abort_reason;
  double step0_total_loss = 0.0;
  double final_total_loss = 0.0;
  std::string checkpoint_path;  // final checkpoint (last periodic one if aborted)
  std::string loss_csv_path;
  std::string digest;
  int effective_vocab = 0;
};

/// Runs the full pretraining loop: corpus -> vocabulary (capped at the
/// configured vocab_size, which shrinks to fit) -> instance stream ->
/// masked batches -> LAMB steps under the warmup/decay schedule. Writes
/// loss.csv, eval.csv, vocab.txt, and checkpoints under output_dir. Step 0 is
/// logged before any update. ALBERT_LAB_THREADS >= 2 moves batch production
/// to a pipeline thread without changing results. Non-finite losses or
/// gradients abort the run (aborted flag; the last periodic checkpoint stays
/// on disk).
TrainResult pretrain(const RunConfig& cfg, const PretrainOptions& opts = {});

struct GeneratedData {
  Vocabulary vocab;
  std::vector<TrainingInstance> instances;
  std::vector<int> span_length_log;  // every span length masking drew
  int effective_vocab = 0;
};

/// The data pipeline alone: corpus -> vocabulary -> `count` masked instances,
/// deterministic in cfg.seed. objective_override swaps the pair construction
/// (used to build NSP/SOP eval sets for one corpus).
GeneratedData generate_dataset(const RunConfig& cfg, int count,
                               std::optional<Objective> objective_override = std::nullopt);

}  // namespace albert
