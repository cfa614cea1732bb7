#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "albertlab/data.hpp"
#include "albertlab/model.hpp"

namespace albert {

/// Angle between two vectors in degrees, cosine clamped to [-1, 1]. Returns
/// false (leaving *out alone) when either vector has zero norm.
bool cosine_degrees(std::span<const double> a, std::span<const double> b, double* out);
double l2_distance(std::span<const double> a, std::span<const double> b);

struct LayerTraceRow {
  int layer = 0;
  double l2_distance = 0.0;
  double cos_degrees = 0.0;
};

struct LayerTrace {
  std::vector<LayerTraceRow> rows;  // one per layer
  long long skipped_tokens = 0;     // zero-norm vectors left out of the means
};

/// Per layer, the mean L2 distance and angle between the layer's input and
/// output hidden vectors, averaged over real (attention_mask == 1) tokens.
/// Runs in eval mode.
LayerTrace layer_io_similarity(const ParameterStore& params, const ModelConfig& cfg,
                               const Batch& batch);

/// CSV with a `# config_digest=` comment line and header
/// `layer,l2_distance,cos_degrees`.
std::string trace_to_csv(const LayerTrace& trace, const std::string& config_digest);

struct EvalReport {
  double mlm_accuracy = 0.0;
  long long mlm_correct = 0;
  long long mlm_total = 0;
  bool has_sp = false;
  double sp_accuracy = 0.0;
  long long sp_correct = 0;
  long long sp_total = 0;
  bool has_cross = false;
  double nsp_accuracy = 0.0;
  long long nsp_total = 0;
  double sop_accuracy = 0.0;
  long long sop_total = 0;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
};

/// Argmax MLM accuracy over masked positions, plus sentence-pair accuracy
/// over labeled instances when the objective has a sentence-pair head.
EvalReport intrinsic_eval(const ParameterStore& params, const ModelConfig& cfg,
                          const std::vector<TrainingInstance>& instances, int batch_size);

/// Sentence-pair accuracy of one model on an NSP-labeled and a SOP-labeled
/// set (fields nsp_accuracy / sop_accuracy). Label imbalance beyond 60/40 in
/// either set adds a warning.
EvalReport cross_objective_eval(const ParameterStore& params, const ModelConfig& cfg,
                                const std::vector<TrainingInstance>& nsp_set,
                                const std::vector<TrainingInstance>& sop_set, int batch_size);

struct ThroughputReport {
  int measured_steps = 0;  // first step is warmup and discarded
  int batch_size = 0;
  int seq_len = 0;
  double seconds_per_step = 0.0;
  double steps_per_sec = 0.0;
  double examples_per_sec = 0.0;
  long long parameter_count = 0;
  long long parameter_bytes = 0;

  nlohmann::json to_json() const;
};

/// Times full training steps (forward, backward, optimizer update) on a
/// synthetic batch. steps is the total run; the first is discarded, so
/// steps >= 3 is required.
ThroughputReport measure_throughput(const ModelConfig& cfg, int batch_size, int seq_len,
                                    int steps, std::uint64_t seed);

}  // namespace albert
