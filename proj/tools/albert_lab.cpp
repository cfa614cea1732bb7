// albert-lab: parameter accounting, data pipeline, pretraining, and probing
// for the ALBERT model family.
#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "albertlab/checkpoint.hpp"
#include "albertlab/data.hpp"
#include "albertlab/diagnostics.hpp"
#include "albertlab/kernels.hpp"
#include "albertlab/model.hpp"
#include "albertlab/trainer.hpp"

namespace {

using namespace albert;

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << text;
}

// Output sink: --out writes a file, otherwise stdout.
void emit(const std::string& out_path, const std::string& text) {
  if (out_path.empty())
    std::cout << text;
  else
    write_text(out_path, text);
}

struct ParamsArgs {
  std::string preset;
  std::string config;
  std::vector<std::string> compare;
  bool json = false;
  bool throughput = false;
  int batch = 4;
  int seq = 64;
  int steps = 4;
  std::uint64_t seed = 0;
  // overrides, applied when the flag was passed
  int layers = 0, hidden = 0, heads = 0, embedding = 0, vocab = 0, ffn = 0, group_size = 0;
  int max_positions = 0;
  std::string sharing, objective;
  CLI::Option *layers_opt = nullptr, *hidden_opt = nullptr, *heads_opt = nullptr,
              *embedding_opt = nullptr, *vocab_opt = nullptr, *ffn_opt = nullptr,
              *group_opt = nullptr, *positions_opt = nullptr;
};

ModelConfig resolve_model(const std::string& name) {
  if (name.size() > 5 && name.substr(name.size() - 5) == ".json")
    return model_config_from_json(read_json_file(name));
  return preset(name);
}

ModelConfig params_base_config(const ParamsArgs& a) {
  if (!a.config.empty() && !a.preset.empty())
    throw UsageError("pass either --config or --preset, not both");
  ModelConfig cfg;
  if (!a.config.empty())
    cfg = model_config_from_json(read_json_file(a.config));
  else if (!a.preset.empty())
    cfg = preset(a.preset);
  if (a.layers_opt->count()) cfg.num_layers = a.layers;
  if (a.hidden_opt->count()) cfg.hidden_size = a.hidden;
  if (a.heads_opt->count()) cfg.num_heads = a.heads;
  if (a.embedding_opt->count()) {
    cfg.embedding_size = a.embedding;
    cfg.factorize_embedding.reset();  // re-derive from the new E
  }
  if (a.vocab_opt->count()) cfg.vocab_size = a.vocab;
  if (a.ffn_opt->count()) cfg.ffn_size = a.ffn;
  if (a.group_opt->count()) cfg.group_size = a.group_size;
  if (a.positions_opt->count()) cfg.max_positions = a.max_positions;
  if (!a.sharing.empty()) cfg.sharing = sharing_from_string(a.sharing);
  if (!a.objective.empty()) cfg.objective = objective_from_string(a.objective);
  return cfg;
}

nlohmann::json count_json(const ModelConfig& cfg) {
  const ModelConfig n = cfg.normalized();
  const ParameterCount c = count_parameters(n);
  nlohmann::json j;
  j["config"] = model_config_to_json(n);
  j["config_digest"] = json_digest(model_config_to_json(n));
  j["counts"] = {{"embeddings", c.embeddings}, {"attention", c.attention},
                 {"ffn", c.ffn},               {"pooler", c.pooler},
                 {"mlm_head", c.mlm_head},     {"sp_head", c.sp_head},
                 {"encoder", c.encoder()},     {"heads", c.heads()},
                 {"total", c.total()}};
  return j;
}

std::string describe(const ModelConfig& cfg) {
  const ModelConfig n = cfg.normalized();
  std::ostringstream out;
  out << "L=" << n.num_layers << " H=" << n.hidden_size << " A=" << n.num_heads
      << " E=" << n.embedding_size << " F=" << n.ffn_size << " V=" << n.vocab_size
      << " sharing=" << to_string(n.sharing) << " objective=" << to_string(n.objective);
  return out.str();
}

std::string count_table(const ModelConfig& cfg) {
  const ParameterCount c = count_parameters(cfg.normalized());
  std::ostringstream out;
  out << "config: " << describe(cfg) << "\n";
  auto row = [&out](const char* name, long long v) {
    out << "  " << name;
    for (std::size_t i = std::string(name).size(); i < 12; ++i) out << ' ';
    out << v << "\n";
  };
  row("embeddings", c.embeddings);
  row("attention", c.attention);
  row("ffn", c.ffn);
  row("pooler", c.pooler);
  row("mlm_head", c.mlm_head);
  row("sp_head", c.sp_head);
  row("encoder", c.encoder());
  row("total", c.total());
  return out.str();
}

int run_params(const ParamsArgs& a) {
  if (!a.compare.empty()) {
    const ModelConfig ca = resolve_model(a.compare[0]);
    const ModelConfig cb = resolve_model(a.compare[1]);
    const long long ta = count_parameters(ca.normalized()).total();
    const long long tb = count_parameters(cb.normalized()).total();
    const double ratio = static_cast<double>(ta) / static_cast<double>(tb);
    if (a.json) {
      nlohmann::json j;
      j["a"] = count_json(ca);
      j["b"] = count_json(cb);
      j["total_ratio"] = ratio;
      std::cout << j.dump(2) << "\n";
    } else {
      std::cout << "[" << a.compare[0] << "]\n" << count_table(ca) << "\n";
      std::cout << "[" << a.compare[1] << "]\n" << count_table(cb) << "\n";
      std::cout << "total ratio (" << a.compare[0] << " / " << a.compare[1] << "): " << ratio
                << "\n";
    }
    return 0;
  }

  const ModelConfig cfg = params_base_config(a);
  if (a.throughput) {
    const ThroughputReport report =
        measure_throughput(cfg.normalized(), a.batch, a.seq, a.steps, a.seed);
    if (a.json) {
      nlohmann::json j = report.to_json();
      j["config_digest"] = json_digest(model_config_to_json(cfg.normalized()));
      j["kernels"] = kernels::active_name();
      std::cout << j.dump(2) << "\n";
    } else {
      std::cout << "config: " << describe(cfg) << "\n"
                << "kernels: " << kernels::active_name() << "\n"
                << "steps/s: " << report.steps_per_sec
                << "  examples/s: " << report.examples_per_sec
                << "  s/step: " << report.seconds_per_step << "\n";
    }
    return 0;
  }
  if (a.json)
    std::cout << count_json(cfg).dump(2) << "\n";
  else
    std::cout << count_table(cfg);
  return 0;
}

struct DataArgs {
  std::string config;
  std::string corpus;
  std::string out;
  std::string vocab_out;
  std::string objective;
  int count = 32;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  bool json = false;
};

int run_data(const DataArgs& a) {
  RunConfig cfg;
  if (!a.config.empty()) cfg = load_run_config(a.config);
  if (!a.corpus.empty()) cfg.corpus = a.corpus;
  if (a.seed_opt->count()) cfg.seed = a.seed;
  std::optional<Objective> objective;
  if (!a.objective.empty()) objective = objective_from_string(a.objective);

  const GeneratedData data = generate_dataset(cfg, a.count, objective);
  if (!a.out.empty()) write_instances_jsonl(a.out, data.instances);
  if (!a.vocab_out.empty()) data.vocab.save(a.vocab_out);

  long long masked = 0, labeled = 0, positives = 0;
  for (const TrainingInstance& inst : data.instances) {
    masked += static_cast<long long>(inst.masked_positions.size());
    if (inst.sp_label != kNoLabel) {
      ++labeled;
      positives += inst.sp_label;
    }
  }
  std::vector<long long> span_counts;
  for (int n : data.span_length_log) {
    if (n >= static_cast<int>(span_counts.size())) span_counts.resize(n + 1, 0);
    ++span_counts[n];
  }

  nlohmann::json stats;
  stats["config_digest"] = config_digest(cfg);
  stats["count"] = data.instances.size();
  stats["effective_vocab"] = data.effective_vocab;
  stats["masked_positions"] = masked;
  stats["sp_labeled"] = labeled;
  stats["sp_positive"] = positives;
  stats["span_counts"] = span_counts;
  if (!a.out.empty()) stats["instances"] = a.out;
  if (a.json) {
    std::cout << stats.dump(2) << "\n";
  } else if (a.out.empty()) {
    // No file target: the instances themselves go to stdout.
    for (const TrainingInstance& inst : data.instances)
      std::cout << instance_to_json(inst).dump() << "\n";
  } else {
    std::cout << "wrote " << data.instances.size() << " instances to " << a.out
              << " (vocab " << data.effective_vocab << ")\n";
  }
  return 0;
}

struct PretrainArgs {
  std::string config;
  std::string corpus;
  std::string out;
  std::string warm_start;
  std::uint64_t seed = 0;
  long long steps = 0;
  int batch_size = 0;
  CLI::Option *seed_opt = nullptr, *steps_opt = nullptr, *batch_opt = nullptr;
  bool no_dropout = false;
  bool save_optimizer = false;
  bool json = false;
};

int run_pretrain(const PretrainArgs& a) {
  RunConfig cfg = load_run_config(a.config);
  if (!a.corpus.empty()) cfg.corpus = a.corpus;
  if (!a.out.empty()) cfg.output_dir = a.out;
  if (a.seed_opt->count()) cfg.seed = a.seed;
  if (a.steps_opt->count()) cfg.max_steps = a.steps;
  if (a.batch_opt->count()) cfg.batch_size = a.batch_size;
  if (a.save_optimizer) cfg.save_optimizer = true;

  PretrainOptions opts;
  opts.no_dropout = a.no_dropout;
  opts.warm_start = a.warm_start;

  const TrainResult res = pretrain(cfg, opts);
  if (res.aborted) {
    std::cerr << "error: training aborted: " << res.abort_reason;
    if (!res.checkpoint_path.empty())
      std::cerr << " (last checkpoint: " << res.checkpoint_path << ")";
    std::cerr << "\n";
    return 1;
  }
  if (a.json) {
    nlohmann::json j;
    j["config_digest"] = res.digest;
    j["steps_completed"] = res.steps_completed;
    j["step0_total_loss"] = res.step0_total_loss;
    j["final_total_loss"] = res.final_total_loss;
    j["checkpoint"] = res.checkpoint_path;
    j["loss_csv"] = res.loss_csv_path;
    j["effective_vocab"] = res.effective_vocab;
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << "trained " << res.steps_completed << " steps; loss "
              << res.step0_total_loss << " -> " << res.final_total_loss << "\n"
              << "checkpoint: " << res.checkpoint_path << "\n";
  }
  return 0;
}

// Shared by probe/eval: instances from a JSONL file, or generated from a raw
// corpus with the checkpoint's vocabulary budget (pass the training vocab.txt
// for id-exact agreement with the run that produced the checkpoint).
std::vector<TrainingInstance> instances_for_checkpoint(
    const ModelConfig& cfg, const std::string& instances_path, const std::string& corpus_path,
    const std::string& vocab_path, int count, int max_len, std::uint64_t seed, bool mask,
    std::optional<Objective> objective = std::nullopt) {
  if (instances_path.empty() == corpus_path.empty())
    throw UsageError("pass exactly one of --instances or --corpus");
  if (max_len <= 0 || max_len > cfg.max_positions) max_len = cfg.max_positions;

  std::vector<TrainingInstance> instances;
  if (!instances_path.empty()) {
    instances = read_instances_jsonl(instances_path);
  } else {
    const std::vector<RawDocument> raw = read_documents_file(corpus_path);
    if (raw.empty()) throw DataError("corpus " + corpus_path + " has no documents");
    Vocabulary vocab =
        vocab_path.empty()
            ? Vocabulary::build(flatten_tokens(raw), static_cast<std::size_t>(cfg.vocab_size))
            : Vocabulary::load(vocab_path);
    if (static_cast<int>(vocab.size()) > cfg.vocab_size)
      throw DataError("vocabulary has " + std::to_string(vocab.size()) +
                      " entries but the checkpoint was built for " +
                      std::to_string(cfg.vocab_size));
    InstanceGenerator gen(encode_documents(raw, vocab), objective.value_or(cfg.objective),
                          max_len, /*short_prob=*/0.0);
    Rng rng(seed);
    MaskingConfig masking;
    for (int i = 0; i < count; ++i) {
      TrainingInstance inst = gen.next(rng);
      if (mask) apply_masking(inst, masking, static_cast<int>(vocab.size()), rng);
      instances.push_back(std::move(inst));
    }
  }
  for (const TrainingInstance& inst : instances)
    validate_instance(inst, cfg.vocab_size, cfg.max_positions);
  return instances;
}

std::string checkpoint_digest(const Checkpoint& ck) {
  if (ck.sidecar.contains("config_digest") && ck.sidecar.at("config_digest").is_string())
    return ck.sidecar.at("config_digest").get<std::string>();
  return json_digest(model_config_to_json(ck.config));
}

struct ProbeArgs {
  std::string checkpoint;
  std::string corpus;
  std::string instances;
  std::string vocab;
  std::string out;
  int count = 8;
  int max_len = 0;
  std::uint64_t seed = 0;
};

int run_probe(const ProbeArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const std::vector<TrainingInstance> instances = instances_for_checkpoint(
      ck.config, a.instances, a.corpus, a.vocab, a.count, a.max_len, a.seed, /*mask=*/false);
  const Batch batch = pack_batch(instances, ck.config.max_positions);
  const LayerTrace trace = layer_io_similarity(ck.params, ck.config, batch);
  emit(a.out, trace_to_csv(trace, checkpoint_digest(ck)));
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string instances;
  std::string nsp_set;
  std::string sop_set;
  std::string out;
  int batch = 8;
};

int run_eval(const EvalArgs& a) {
  if (a.nsp_set.empty() != a.sop_set.empty())
    throw UsageError("--nsp-set and --sop-set go together");
  if (a.instances.empty() && a.nsp_set.empty())
    throw UsageError("pass --instances and/or --nsp-set/--sop-set");

  const Checkpoint ck = load_checkpoint(a.checkpoint);
  nlohmann::json j;
  j["checkpoint"] = a.checkpoint;
  j["config_digest"] = checkpoint_digest(ck);

  if (!a.instances.empty()) {
    const std::vector<TrainingInstance> set = instances_for_checkpoint(
        ck.config, a.instances, "", "", 0, 0, 0, false);
    j["intrinsic"] = intrinsic_eval(ck.params, ck.config, set, a.batch).to_json();
  }
  if (!a.nsp_set.empty()) {
    const std::vector<TrainingInstance> nsp =
        instances_for_checkpoint(ck.config, a.nsp_set, "", "", 0, 0, 0, false);
    const std::vector<TrainingInstance> sop =
        instances_for_checkpoint(ck.config, a.sop_set, "", "", 0, 0, 0, false);
    j["cross"] = cross_objective_eval(ck.params, ck.config, nsp, sop, a.batch).to_json();
  }
  emit(a.out, j.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"albert-lab: a small-scale ALBERT pretraining laboratory"};
  app.require_subcommand(1);

  ParamsArgs pa;
  CLI::App* params = app.add_subcommand("params", "parameter accounting and throughput");
  params->add_option("--preset", pa.preset, "named configuration (see README)");
  params->add_option("--config", pa.config, "model config JSON file");
  params->add_option("--compare", pa.compare, "two presets/configs to compare")
      ->expected(2);
  pa.layers_opt = params->add_option("--layers", pa.layers, "layer count override");
  pa.hidden_opt = params->add_option("--hidden", pa.hidden, "hidden size override");
  pa.heads_opt = params->add_option("--heads", pa.heads, "attention head override");
  pa.embedding_opt = params->add_option("--embedding", pa.embedding, "embedding size override");
  pa.vocab_opt = params->add_option("--vocab", pa.vocab, "vocabulary size override");
  pa.ffn_opt = params->add_option("--ffn", pa.ffn, "FFN size override");
  pa.group_opt = params->add_option("--group-size", pa.group_size, "grouped-sharing group size");
  pa.positions_opt =
      params->add_option("--max-positions", pa.max_positions, "position table override");
  params->add_option("--sharing", pa.sharing, "all|attention_only|ffn_only|none|grouped");
  params->add_option("--objective", pa.objective, "mlm_only|mlm_nsp|mlm_sop");
  params->add_flag("--json", pa.json, "machine-readable output");
  params->add_flag("--throughput", pa.throughput, "measure training steps/s on synthetic data");
  params->add_option("--batch", pa.batch, "throughput batch size");
  params->add_option("--seq", pa.seq, "throughput sequence length");
  params->add_option("--steps", pa.steps, "throughput step count (first is warmup)");
  params->add_option("--seed", pa.seed, "throughput init seed");

  DataArgs da;
  CLI::App* data = app.add_subcommand("data", "build masked pretraining instances");
  data->add_option("--config", da.config, "run config JSON file");
  data->add_option("--corpus", da.corpus, "corpus text file (blank lines split documents)");
  data->add_option("--out", da.out, "instances JSONL output path");
  data->add_option("--vocab-out", da.vocab_out, "write the vocabulary here");
  data->add_option("--objective", da.objective, "override pair construction");
  data->add_option("--count", da.count, "number of instances");
  da.seed_opt = data->add_option("--seed", da.seed, "seed override");
  data->add_flag("--json", da.json, "print stats JSON instead of instances");

  PretrainArgs ta;
  CLI::App* train = app.add_subcommand("pretrain", "run the training loop");
  train->add_option("--config", ta.config, "run config JSON file")->required();
  train->add_option("--corpus", ta.corpus, "corpus override");
  train->add_option("--out", ta.out, "output directory override");
  ta.seed_opt = train->add_option("--seed", ta.seed, "seed override");
  ta.steps_opt = train->add_option("--steps", ta.steps, "max_steps override");
  ta.batch_opt = train->add_option("--batch-size", ta.batch_size, "batch size override");
  train->add_option("--warm-start", ta.warm_start, "expand from this checkpoint");
  train->add_flag("--no-dropout", ta.no_dropout, "disable dropout for this run");
  train->add_flag("--save-optimizer", ta.save_optimizer, "store LAMB state in checkpoints");
  train->add_flag("--json", ta.json, "machine-readable summary");

  ProbeArgs ra;
  CLI::App* probe = app.add_subcommand("probe", "per-layer input/output similarity trace");
  probe->add_option("--checkpoint", ra.checkpoint, "ALBT checkpoint")->required();
  probe->add_option("--corpus", ra.corpus, "corpus to probe with");
  probe->add_option("--instances", ra.instances, "instances JSONL to probe with");
  probe->add_option("--vocab", ra.vocab, "vocabulary file (defaults to corpus-built)");
  probe->add_option("--count", ra.count, "instances per probe batch");
  probe->add_option("--max-len", ra.max_len, "probe sequence cap");
  probe->add_option("--seed", ra.seed, "instance sampling seed");
  probe->add_option("--out", ra.out, "CSV output path (default stdout)");

  EvalArgs ea;
  CLI::App* eval = app.add_subcommand("eval", "intrinsic and cross-objective evaluation");
  eval->add_option("--checkpoint", ea.checkpoint, "ALBT checkpoint")->required();
  eval->add_option("--instances", ea.instances, "instances JSONL for intrinsic eval");
  eval->add_option("--nsp-set", ea.nsp_set, "NSP-labeled instances JSONL");
  eval->add_option("--sop-set", ea.sop_set, "SOP-labeled instances JSONL");
  eval->add_option("--batch", ea.batch, "eval batch size");
  eval->add_option("--out", ea.out, "JSON output path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (params->parsed()) return run_params(pa);
    if (data->parsed()) return run_data(da);
    if (train->parsed()) return run_pretrain(ta);
    if (probe->parsed()) return run_probe(ra);
    if (eval->parsed()) return run_eval(ea);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
