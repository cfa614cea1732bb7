#include "albertlab/diagnostics.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <sstream>

#include "albertlab/kernels.hpp"
#include "albertlab/optim.hpp"

namespace albert {

bool cosine_degrees(std::span<const double> a, std::span<const double> b, double* out) {
  if (a.size() != b.size()) throw ShapeError("cosine needs equal-length vectors");
  const kernels::KernelTable& kt = kernels::active();
  const double na = std::sqrt(kt.dot(a.data(), a.data(), a.size()));
  const double nb = std::sqrt(kt.dot(b.data(), b.data(), b.size()));
  if (na == 0.0 || nb == 0.0) return false;
  const double c = std::clamp(kt.dot(a.data(), b.data(), a.size()) / (na * nb), -1.0, 1.0);
  *out = std::acos(c) * 180.0 / std::numbers::pi;
  return true;
}

double l2_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("l2 distance needs equal-length vectors");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

LayerTrace layer_io_similarity(const ParameterStore& params, const ModelConfig& raw,
                               const Batch& batch) {
  const ModelConfig cfg = raw.normalized();
  Rng rng(0);
  ForwardOutput out = forward(params, cfg, batch.input(), /*training=*/false, /*trace=*/true, rng);
  const int H = cfg.hidden_size;
  const std::size_t tokens = static_cast<std::size_t>(batch.batch) *
                             static_cast<std::size_t>(batch.seq_len);

  LayerTrace trace;
  for (int layer = 0; layer < cfg.num_layers; ++layer) {
    std::span<const double> in = out.layer_inputs[static_cast<std::size_t>(layer)].data();
    std::span<const double> io = out.layer_outputs[static_cast<std::size_t>(layer)].data();
    double l2_sum = 0.0, deg_sum = 0.0;
    long long counted = 0;
    for (std::size_t t = 0; t < tokens; ++t) {
      if (!batch.attention_mask[t]) continue;
      std::span<const double> a = in.subspan(t * static_cast<std::size_t>(H),
                                             static_cast<std::size_t>(H));
      std::span<const double> b = io.subspan(t * static_cast<std::size_t>(H),
                                             static_cast<std::size_t>(H));
      double deg = 0.0;
      if (!cosine_degrees(a, b, &deg)) {
        ++trace.skipped_tokens;
        continue;
      }
      l2_sum += l2_distance(a, b);
      deg_sum += deg;
      ++counted;
    }
    LayerTraceRow row;
    row.layer = layer;
    if (counted > 0) {
      row.l2_distance = l2_sum / static_cast<double>(counted);
      row.cos_degrees = deg_sum / static_cast<double>(counted);
    }
    trace.rows.push_back(row);
  }
  return trace;
}

std::string trace_to_csv(const LayerTrace& trace, const std::string& config_digest) {
  std::ostringstream out;
  out.precision(17);
  out << "# config_digest=" << config_digest << "\n";
  out << "layer,l2_distance,cos_degrees\n";
  for (const LayerTraceRow& row : trace.rows) {
    out << row.layer << "," << row.l2_distance << "," << row.cos_degrees << "\n";
  }
  return out.str();
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["mlm_accuracy"] = mlm_accuracy;
  j["mlm_correct"] = mlm_correct;
  j["mlm_total"] = mlm_total;
  if (has_sp) {
    j["sp_accuracy"] = sp_accuracy;
    j["sp_correct"] = sp_correct;
    j["sp_total"] = sp_total;
  }
  if (has_cross) {
    j["nsp_accuracy"] = nsp_accuracy;
    j["nsp_total"] = nsp_total;
    j["sop_accuracy"] = sop_accuracy;
    j["sop_total"] = sop_total;
  }
  j["warnings"] = warnings;
  return j;
}

namespace {

struct SpCounts {
  long long correct = 0;
  long long total = 0;
  long long positives = 0;
};

// accumulate argmax accuracies over batches of instances
void eval_batches(const ParameterStore& params, const ModelConfig& cfg,
                  const std::vector<TrainingInstance>& instances, int batch_size,
                  EvalReport* report, SpCounts* sp) {
  if (instances.empty()) throw UsageError("cannot evaluate an empty instance set");
  if (batch_size < 1) throw UsageError("batch_size must be >= 1");
  const int V = cfg.vocab_size;
  Rng rng(0);
  for (std::size_t at = 0; at < instances.size(); at += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(instances.size(), at + static_cast<std::size_t>(batch_size));
    std::vector<TrainingInstance> chunk(instances.begin() + static_cast<std::ptrdiff_t>(at),
                                        instances.begin() + static_cast<std::ptrdiff_t>(end));
    for (const TrainingInstance& inst : chunk) validate_instance(inst, V, cfg.max_positions);
    Batch batch = pack_batch(chunk, cfg.max_positions);
    ForwardOutput out = forward(params, cfg, batch.input(), /*training=*/false, /*trace=*/false,
                                rng);
    if (report) {
      std::span<const double> logits = out.mlm_logits.data();
      for (std::size_t t = 0; t < batch.mlm_targets.size(); ++t) {
        const int target = batch.mlm_targets[t];
        if (target == kIgnoreIndex) continue;
        std::span<const double> row = logits.subspan(t * static_cast<std::size_t>(V),
                                                     static_cast<std::size_t>(V));
        const std::size_t argmax = static_cast<std::size_t>(
            std::max_element(row.begin(), row.end()) - row.begin());
        ++report->mlm_total;
        if (argmax == static_cast<std::size_t>(target)) ++report->mlm_correct;
      }
    }
    if (sp) {
      if (!out.sp_logits.defined()) {
        throw UsageError("sentence-pair evaluation needs a sentence-pair objective");
      }
      std::span<const double> logits = out.sp_logits.data();
      for (std::size_t b = 0; b < batch.sp_labels.size(); ++b) {
        const int label = batch.sp_labels[b];
        if (label == kIgnoreIndex) continue;
        const int pick = logits[b * 2] >= logits[b * 2 + 1] ? 0 : 1;
        ++sp->total;
        sp->positives += label;
        if (pick == label) ++sp->correct;
      }
    }
  }
}

void warn_if_imbalanced(const SpCounts& sp, const std::string& name,
                        std::vector<std::string>* warnings) {
  if (sp.total == 0) return;
  const double frac = static_cast<double>(sp.positives) / static_cast<double>(sp.total);
  if (frac > 0.6 || frac < 0.4) {
    std::ostringstream msg;
    msg.precision(3);
    msg << name << " label balance is " << frac * 100.0 << "% positive (beyond 60/40)";
    warnings->push_back(msg.str());
  }
}

}  // namespace

EvalReport intrinsic_eval(const ParameterStore& params, const ModelConfig& raw,
                          const std::vector<TrainingInstance>& instances, int batch_size) {
  const ModelConfig cfg = raw.normalized();
  EvalReport report;
  SpCounts sp;
  const bool want_sp = cfg.has_sentence_pair_head_in_loss();
  eval_batches(params, cfg, instances, batch_size, &report, want_sp ? &sp : nullptr);
  if (report.mlm_total > 0) {
    report.mlm_accuracy = static_cast<double>(report.mlm_correct) /
                          static_cast<double>(report.mlm_total);
  }
  if (want_sp && sp.total > 0) {
    report.has_sp = true;
    report.sp_correct = sp.correct;
    report.sp_total = sp.total;
    report.sp_accuracy = static_cast<double>(sp.correct) / static_cast<double>(sp.total);
  }
  return report;
}

EvalReport cross_objective_eval(const ParameterStore& params, const ModelConfig& raw,
                                const std::vector<TrainingInstance>& nsp_set,
                                const std::vector<TrainingInstance>& sop_set, int batch_size) {
  ModelConfig cfg = raw.normalized();
  if (cfg.objective == Objective::mlm_only) cfg.objective = Objective::mlm_sop;

  EvalReport report;
  report.has_cross = true;
  SpCounts nsp, sop;
  eval_batches(params, cfg, nsp_set, batch_size, nullptr, &nsp);
  eval_batches(params, cfg, sop_set, batch_size, nullptr, &sop);
  if (nsp.total == 0 || sop.total == 0) {
    throw DataError("cross-objective evaluation needs labeled instances in both sets");
  }
  report.nsp_total = nsp.total;
  report.nsp_accuracy = static_cast<double>(nsp.correct) / static_cast<double>(nsp.total);
  report.sop_total = sop.total;
  report.sop_accuracy = static_cast<double>(sop.correct) / static_cast<double>(sop.total);
  warn_if_imbalanced(nsp, "nsp eval set", &report.warnings);
  warn_if_imbalanced(sop, "sop eval set", &report.warnings);
  return report;
}

nlohmann::json ThroughputReport::to_json() const {
  return {{"measured_steps", measured_steps},
          {"batch_size", batch_size},
          {"seq_len", seq_len},
          {"seconds_per_step", seconds_per_step},
          {"steps_per_sec", steps_per_sec},
          {"examples_per_sec", examples_per_sec},
          {"parameter_count", parameter_count},
          {"parameter_bytes", parameter_bytes}};
}

ThroughputReport measure_throughput(const ModelConfig& raw, int batch_size, int seq_len,
                                    int steps, std::uint64_t seed) {
  const ModelConfig cfg = raw.normalized();
  if (steps < 3) throw ConfigError("throughput needs steps >= 3 (the first is discarded)");
  if (batch_size < 1 || seq_len < 2) throw ConfigError("throughput needs batch >= 1, seq >= 2");

  ParameterStore params = build_model(cfg, seed);
  LambConfig lamb;
  LambOptimizer opt(lamb, params);

  // synthetic batch: random words, one mask per eight positions
  Rng rng = Rng::stream(seed, 0x7468726f75676870ull);
  const std::size_t n = static_cast<std::size_t>(batch_size) * static_cast<std::size_t>(seq_len);
  Batch batch;
  batch.batch = batch_size;
  batch.seq_len = seq_len;
  batch.token_ids.resize(n);
  batch.segment_ids.resize(n);
  batch.attention_mask.assign(n, 1);
  batch.mlm_targets.assign(n, kIgnoreIndex);
  batch.sp_labels.resize(static_cast<std::size_t>(batch_size));
  const int first_word = std::min(kNumSpecials, cfg.vocab_size - 1);
  for (std::size_t i = 0; i < n; ++i) {
    batch.token_ids[i] = rng.uniform_int(first_word, cfg.vocab_size - 1);
    batch.segment_ids[i] = static_cast<int>(i % static_cast<std::size_t>(seq_len)) * 2 >= seq_len;
    if (i % 8 == 3) {
      batch.mlm_targets[i] = rng.uniform_int(first_word, cfg.vocab_size - 1);
      batch.token_ids[i] = kMaskId < cfg.vocab_size ? kMaskId : batch.token_ids[i];
    }
  }
  for (std::size_t b = 0; b < batch.sp_labels.size(); ++b) {
    batch.sp_labels[b] = static_cast<int>(b % 2);
  }

  Rng dropout_rng = Rng::stream(seed, 0x64726f70ull);
  double measured_seconds = 0.0;
  for (int s = 0; s < steps; ++s) {
    const auto t0 = std::chrono::steady_clock::now();
    params.zero_grads();
    Graph graph;
    ForwardOutput out = forward(params, cfg, batch.input(), /*training=*/true, /*trace=*/false,
                                dropout_rng);
    Losses losses = pretrain_losses(out, batch.mlm_targets, batch.sp_labels, cfg.objective);
    graph.backward(losses.total);
    opt.step(1e-3);
    const auto t1 = std::chrono::steady_clock::now();
    if (s > 0) measured_seconds += std::chrono::duration<double>(t1 - t0).count();
  }

  ThroughputReport r;
  r.measured_steps = steps - 1;
  r.batch_size = batch_size;
  r.seq_len = seq_len;
  r.seconds_per_step = measured_seconds / static_cast<double>(r.measured_steps);
  r.steps_per_sec = r.seconds_per_step > 0.0 ? 1.0 / r.seconds_per_step : 0.0;
  r.examples_per_sec = r.steps_per_sec * static_cast<double>(batch_size);
  r.parameter_count = count_parameters(cfg).total();
  r.parameter_bytes = r.parameter_count * static_cast<long long>(sizeof(double));
  return r;
}

}  // namespace albert
