#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "albertlab/common.hpp"
#include "albertlab/model.hpp"

namespace albert {

struct LambConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 0.01;
  double clip_lo = 0.0;   // trust ratio clamp
  double clip_hi = 10.0;
  bool exclude_bias_and_norm = false;  // skip decay and trust scaling for
                                       // paths ending in bias/.gamma/.beta

  void validate() const;  // throws ConfigError
};

LambConfig lamb_config_from_json(const nlohmann::json& j);
nlohmann::json lamb_config_to_json(const LambConfig& cfg);

/// True for parameters the exclusion flag exempts from decay and trust scaling.
bool lamb_excluded_path(const std::string& path);

// Layer-wise adaptive moments: per tensor,
//   m <- b1 m + (1-b1) g          v <- b2 v + (1-b2) g^2
//   u = m_hat / (sqrt(v_hat) + eps) + wd * w
//   r = ||w|| / ||u||  (1 when either norm is zero), clamped to [clip_lo, clip_hi]
//   w <- w - lr * r * u
class LambOptimizer {
 public:
  LambOptimizer(LambConfig cfg, ParameterStore& params);

  /// One update from the gradients currently on the parameters. Non-finite
  /// gradients raise NumericError.
  void step(double lr);

  long long steps_taken() const { return t_; }

  /// Moment state as checkpoint tensors: optim.m.<path>, optim.v.<path>, optim.t.
  std::vector<std::pair<std::string, Tensor>> state_tensors() const;
  void load_state(const std::vector<std::pair<std::string, Tensor>>& tensors);

 private:
  struct Slot {
    std::string path;
    Tensor param;
    std::vector<double> m;
    std::vector<double> v;
    bool excluded = false;
  };
  LambConfig cfg_;
  std::vector<Slot> slots_;
  long long t_ = 0;
};

// Linear warmup to peak_lr over warmup_steps, then linear decay to zero at
// total_steps. Steps past the end clamp to zero with a one-time warning.
struct Schedule {
  double peak_lr = 0.00176;
  long long warmup_steps = 1;
  long long total_steps = 1;

  void validate() const;  // throws ConfigError

  double lr_at_step(long long step, std::ostream* warn_to = nullptr) const;
  bool warned_past_total() const { return warned_; }

 private:
  mutable bool warned_ = false;
};

Schedule schedule_from_json(const nlohmann::json& j);
nlohmann::json schedule_to_json(const Schedule& s);

}  // namespace albert
