#include "albertlab/trainer.hpp"

#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <thread>
#include <utility>

#include "albertlab/checkpoint.hpp"
#include "albertlab/diagnostics.hpp"
#include "albertlab/tensor.hpp"

namespace albert {
namespace {

constexpr std::uint64_t kDataTag = 0x6461746173747265ull;  // training instance stream
constexpr std::uint64_t kDropTag = 0x64726f706f757421ull;  // dropout masks
constexpr std::uint64_t kEvalTag = 0x6576616c73657431ull;  // held-out eval set
constexpr std::uint64_t kInitTag = 0x696e697477656967ull;  // weight init

const nlohmann::json& expect_object(const nlohmann::json& j, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
  return j;
}

long long get_int(const nlohmann::json& j, const char* key, long long fallback) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_number_integer())
    throw ConfigError(std::string("run config key '") + key + "' must be an integer");
  return j.at(key).get<long long>();
}

double get_num(const nlohmann::json& j, const char* key, double fallback) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_number())
    throw ConfigError(std::string("run config key '") + key + "' must be a number");
  return j.at(key).get<double>();
}

std::string get_str(const nlohmann::json& j, const char* key, const std::string& fallback) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_string())
    throw ConfigError(std::string("run config key '") + key + "' must be a string");
  return j.at(key).get<std::string>();
}

bool get_bool(const nlohmann::json& j, const char* key, bool fallback) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_boolean())
    throw ConfigError(std::string("run config key '") + key + "' must be a boolean");
  return j.at(key).get<bool>();
}

std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

int env_thread_count() {
  const char* v = std::getenv("ALBERT_LAB_THREADS");
  if (v == nullptr || *v == '\0') return 1;
  char* end = nullptr;
  long n = std::strtol(v, &end, 10);
  if (end == v || *end != '\0' || n < 1)
    throw ConfigError("ALBERT_LAB_THREADS must be a positive integer, got '" + std::string(v) +
                      "'");
  return static_cast<int>(n);
}

// Produces batches ahead of the training loop on one pipeline thread.
// Production order is the consumption order, so results match the
// single-threaded path bit for bit.
class BatchPipeline {
 public:
  BatchPipeline(std::function<Batch()> make, long long total, bool threaded)
      : make_(std::move(make)), remaining_(total), threaded_(threaded) {
    if (threaded_) worker_ = std::thread([this] { produce(); });
  }

  ~BatchPipeline() {
    if (!threaded_) return;
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    space_.notify_all();
    worker_.join();
  }

  BatchPipeline(const BatchPipeline&) = delete;
  BatchPipeline& operator=(const BatchPipeline&) = delete;

  Batch next() {
    if (!threaded_) return make_();
    std::unique_lock<std::mutex> lk(mu_);
    item_.wait(lk, [this] { return !queue_.empty() || error_ != nullptr; });
    if (queue_.empty()) std::rethrow_exception(error_);
    Batch b = std::move(queue_.front());
    queue_.pop_front();
    space_.notify_all();
    return b;
  }

 private:
  static constexpr std::size_t kDepth = 4;

  void produce() {
    try {
      for (long long i = 0; i < remaining_; ++i) {
        Batch b = make_();
        std::unique_lock<std::mutex> lk(mu_);
        space_.wait(lk, [this] { return queue_.size() < kDepth || stop_; });
        if (stop_) return;
        queue_.push_back(std::move(b));
        item_.notify_all();
      }
    } catch (...) {
      std::lock_guard<std::mutex> lk(mu_);
      error_ = std::current_exception();
      item_.notify_all();
    }
  }

  std::function<Batch()> make_;
  long long remaining_;
  bool threaded_;
  std::thread worker_;
  std::mutex mu_;
  std::condition_variable item_;
  std::condition_variable space_;
  std::deque<Batch> queue_;
  std::exception_ptr error_;
  bool stop_ = false;
};

}  // namespace

Schedule RunConfig::effective_schedule() const {
  if (schedule.has_value()) return *schedule;
  Schedule s;
  s.peak_lr = 0.00176;
  s.total_steps = std::max<long long>(1, max_steps);
  s.warmup_steps = std::max<long long>(1, max_steps / 10);
  return s;
}

void RunConfig::validate() const {
  model.normalized();
  masking.validate();
  optimizer.validate();
  effective_schedule().validate();
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
  if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (eval_instances < 1) throw ConfigError("eval_instances must be >= 1");
  if (max_len < 2) throw ConfigError("max_len must be >= 2");
  if (max_len > model.normalized().max_positions)
    throw ConfigError("max_len " + std::to_string(max_len) + " exceeds max_positions " +
                      std::to_string(model.normalized().max_positions));
  if (!(short_prob >= 0.0 && short_prob <= 1.0))
    throw ConfigError("short_prob must lie in [0, 1]");
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  expect_object(j, "run config");
  static const char* known[] = {"model",      "masking",          "optimizer",
                                "schedule",   "batch_size",       "max_steps",
                                "eval_every", "checkpoint_every", "eval_instances",
                                "max_len",    "short_prob",       "corpus",
                                "output_dir", "seed",             "save_optimizer"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError("unknown run config key '" + it.key() + "'");
  }
  RunConfig cfg;
  if (j.contains("model")) cfg.model = model_config_from_json(j.at("model"));
  if (j.contains("masking")) cfg.masking = masking_config_from_json(j.at("masking"));
  if (j.contains("optimizer")) cfg.optimizer = lamb_config_from_json(j.at("optimizer"));
  if (j.contains("schedule")) cfg.schedule = schedule_from_json(j.at("schedule"));
  cfg.batch_size = static_cast<int>(get_int(j, "batch_size", cfg.batch_size));
  cfg.max_steps = get_int(j, "max_steps", cfg.max_steps);
  cfg.eval_every = get_int(j, "eval_every", cfg.eval_every);
  cfg.checkpoint_every = get_int(j, "checkpoint_every", cfg.checkpoint_every);
  cfg.eval_instances = static_cast<int>(get_int(j, "eval_instances", cfg.eval_instances));
  cfg.max_len = static_cast<int>(get_int(j, "max_len", cfg.max_len));
  cfg.short_prob = get_num(j, "short_prob", cfg.short_prob);
  cfg.corpus = get_str(j, "corpus", cfg.corpus);
  cfg.output_dir = get_str(j, "output_dir", cfg.output_dir);
  long long seed = get_int(j, "seed", static_cast<long long>(cfg.seed));
  if (seed < 0) throw ConfigError("seed must be non-negative");
  cfg.seed = static_cast<std::uint64_t>(seed);
  cfg.save_optimizer = get_bool(j, "save_optimizer", cfg.save_optimizer);
  return cfg;
}

nlohmann::json run_config_to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["model"] = model_config_to_json(cfg.model);
  j["masking"] = masking_config_to_json(cfg.masking);
  j["optimizer"] = lamb_config_to_json(cfg.optimizer);
  j["schedule"] = schedule_to_json(cfg.effective_schedule());
  j["batch_size"] = cfg.batch_size;
  j["max_steps"] = cfg.max_steps;
  j["eval_every"] = cfg.eval_every;
  j["checkpoint_every"] = cfg.checkpoint_every;
  j["eval_instances"] = cfg.eval_instances;
  j["max_len"] = cfg.max_len;
  j["short_prob"] = cfg.short_prob;
  j["corpus"] = cfg.corpus;
  j["output_dir"] = cfg.output_dir;
  j["seed"] = cfg.seed;
  j["save_optimizer"] = cfg.save_optimizer;
  return j;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return run_config_from_json(j);
}

std::string json_digest(const nlohmann::json& j) {
  const std::string canon = j.dump();
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a 64
  for (unsigned char c : canon) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_digest(const RunConfig& cfg) { return json_digest(run_config_to_json(cfg)); }

std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t tag) {
  return Rng::stream(seed, tag).next_u64();
}

GeneratedData generate_dataset(const RunConfig& cfg, int count,
                               std::optional<Objective> objective_override) {
  cfg.validate();
  if (count < 1) throw UsageError("instance count must be >= 1");
  if (cfg.corpus.empty()) throw ConfigError("run config needs a corpus path");
  const ModelConfig mcfg = cfg.model.normalized();

  GeneratedData out;
  const std::vector<RawDocument> raw = read_documents_file(cfg.corpus);
  if (raw.empty()) throw DataError("corpus " + cfg.corpus + " has no documents");
  out.vocab = Vocabulary::build(flatten_tokens(raw), static_cast<std::size_t>(mcfg.vocab_size));
  out.effective_vocab = static_cast<int>(out.vocab.size());

  const Objective objective = objective_override.value_or(mcfg.objective);
  InstanceGenerator gen(encode_documents(raw, out.vocab), objective, cfg.max_len,
                        cfg.short_prob);
  Rng rng = Rng::stream(cfg.seed, kDataTag);
  out.instances.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    TrainingInstance inst = gen.next(rng);
    apply_masking(inst, cfg.masking, out.effective_vocab, rng, &out.span_length_log);
    out.instances.push_back(std::move(inst));
  }
  return out;
}

TrainResult pretrain(const RunConfig& cfg, const PretrainOptions& opts) {
  cfg.validate();
  if (cfg.corpus.empty()) throw ConfigError("run config needs a corpus path");
  if (cfg.output_dir.empty()) throw ConfigError("run config needs an output_dir");

  ModelConfig mcfg = cfg.model.normalized();
  if (opts.no_dropout) mcfg.dropout_p = 0.0;

  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir);
  const std::string out_dir = cfg.output_dir;

  const std::vector<RawDocument> raw = read_documents_file(cfg.corpus);
  if (raw.empty()) throw DataError("corpus " + cfg.corpus + " has no documents");
  const Vocabulary vocab =
      Vocabulary::build(flatten_tokens(raw), static_cast<std::size_t>(mcfg.vocab_size));
  mcfg.vocab_size = static_cast<int>(vocab.size());  // shrink to what the corpus provides
  vocab.save(out_dir + "/vocab.txt");

  InstanceGenerator gen(encode_documents(raw, vocab), mcfg.objective, cfg.max_len,
                        cfg.short_prob);

  TrainResult result;
  result.digest = config_digest(cfg);
  result.effective_vocab = mcfg.vocab_size;

  ParameterStore params;
  if (!opts.warm_start.empty()) {
    Checkpoint source = load_checkpoint(opts.warm_start);
    params = warm_start_expand(source.config, source.params, mcfg);
  } else {
    params = build_model(mcfg, sub_seed(cfg.seed, kInitTag));
  }

  const Schedule schedule = cfg.effective_schedule();
  LambOptimizer opt(cfg.optimizer, params);

  Rng data_rng = Rng::stream(cfg.seed, kDataTag);
  Rng dropout_rng = Rng::stream(cfg.seed, kDropTag);

  std::vector<TrainingInstance> eval_set;
  if (cfg.eval_every > 0) {
    Rng eval_rng = Rng::stream(cfg.seed, kEvalTag);
    eval_set.reserve(static_cast<std::size_t>(cfg.eval_instances));
    for (int i = 0; i < cfg.eval_instances; ++i) {
      TrainingInstance inst = gen.next(eval_rng);
      apply_masking(inst, cfg.masking, mcfg.vocab_size, eval_rng);
      eval_set.push_back(std::move(inst));
    }
  }

  result.loss_csv_path = out_dir + "/loss.csv";
  std::ofstream loss_csv(result.loss_csv_path);
  if (!loss_csv) throw IoError("cannot write " + result.loss_csv_path);
  loss_csv << "# config_digest=" << result.digest << "\n";
  loss_csv << "step,lr,total_loss,mlm_loss,sp_loss\n";

  std::ofstream eval_csv;
  if (cfg.eval_every > 0) {
    eval_csv.open(out_dir + "/eval.csv");
    if (!eval_csv) throw IoError("cannot write " + out_dir + "/eval.csv");
    eval_csv << "# config_digest=" << result.digest << "\n";
    eval_csv << "step,mlm_accuracy,sp_accuracy\n";
  }

  auto checkpoint_extras = [&]() {
    std::vector<std::pair<std::string, Tensor>> extra;
    if (cfg.save_optimizer) extra = opt.state_tensors();
    return extra;
  };
  auto save_at = [&](const std::string& path, long long step) {
    nlohmann::json extra;
    extra["step"] = step;
    extra["config_digest"] = result.digest;
    save_checkpoint(path, mcfg, params, checkpoint_extras(), extra);
  };

  auto make_batch = [&]() {
    std::vector<TrainingInstance> instances;
    instances.reserve(static_cast<std::size_t>(cfg.batch_size));
    for (int i = 0; i < cfg.batch_size; ++i) {
      TrainingInstance inst = gen.next(data_rng);
      apply_masking(inst, cfg.masking, mcfg.vocab_size, data_rng);
      instances.push_back(std::move(inst));
    }
    return pack_batch(instances, cfg.max_len);
  };
  BatchPipeline pipeline(make_batch, cfg.max_steps, env_thread_count() >= 2);

  std::string last_periodic;
  for (long long step = 0; step < cfg.max_steps; ++step) {
    const Batch batch = pipeline.next();
    const double lr = schedule.lr_at_step(step);
    try {
      params.zero_grads();
      Graph graph;
      ForwardOutput fwd =
          forward(params, mcfg, batch.input(), /*training=*/true, /*trace=*/false, dropout_rng);
      Losses losses = pretrain_losses(fwd, batch.mlm_targets, batch.sp_labels, mcfg.objective);
      const double total = losses.total.item();
      if (!std::isfinite(total))
        throw NumericError("non-finite loss at step " + std::to_string(step));

      loss_csv << step << ',' << format_g17(lr) << ',' << format_g17(total) << ','
               << format_g17(losses.mlm.item()) << ',';
      if (losses.sp.defined()) loss_csv << format_g17(losses.sp.item());
      loss_csv << '\n';
      loss_csv.flush();
      if (step == 0) result.step0_total_loss = total;
      result.final_total_loss = total;

      graph.backward(losses.total);
      opt.step(lr);
    } catch (const NumericError& e) {
      result.aborted = true;
      result.abort_reason = e.what();
      result.checkpoint_path = last_periodic;
      return result;
    }
    result.steps_completed = step + 1;

    const long long done = step + 1;
    if (cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.max_steps)) {
      EvalReport report = intrinsic_eval(params, mcfg, eval_set, cfg.batch_size);
      eval_csv << done << ',' << format_g17(report.mlm_accuracy) << ',';
      if (report.has_sp) eval_csv << format_g17(report.sp_accuracy);
      eval_csv << '\n';
      eval_csv.flush();
    }
    if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.max_steps) {
      last_periodic = out_dir + "/checkpoint_step" + std::to_string(done) + ".albt";
      save_at(last_periodic, done);
    }
  }

  result.checkpoint_path = out_dir + "/checkpoint_final.albt";
  save_at(result.checkpoint_path, result.steps_completed);
  return result;
}

}  // namespace albert
