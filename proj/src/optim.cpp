#include "albertlab/optim.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>

#include "albertlab/kernels.hpp"

namespace albert {

void LambConfig::validate() const {
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw ConfigError("lamb betas must be in [0, 1)");
  }
  if (eps <= 0.0) throw ConfigError("lamb eps must be positive");
  if (weight_decay < 0.0) throw ConfigError("lamb weight_decay must be nonnegative");
  if (clip_lo < 0.0 || clip_hi < clip_lo) {
    throw ConfigError("lamb trust clip range must satisfy 0 <= clip_lo <= clip_hi");
  }
}

LambConfig lamb_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("optimizer config must be a JSON object");
  LambConfig c;
  try {
    for (const auto& item : j.items()) {
      const std::string& k = item.key();
      if (k == "beta1") {
        c.beta1 = item.value().get<double>();
      } else if (k == "beta2") {
        c.beta2 = item.value().get<double>();
      } else if (k == "eps") {
        c.eps = item.value().get<double>();
      } else if (k == "weight_decay") {
        c.weight_decay = item.value().get<double>();
      } else if (k == "clip_lo") {
        c.clip_lo = item.value().get<double>();
      } else if (k == "clip_hi") {
        c.clip_hi = item.value().get<double>();
      } else if (k == "exclude_bias_and_norm") {
        c.exclude_bias_and_norm = item.value().get<bool>();
      } else {
        throw ConfigError("unknown optimizer config key '" + k + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad optimizer config value: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json lamb_config_to_json(const LambConfig& cfg) {
  return {{"beta1", cfg.beta1},
          {"beta2", cfg.beta2},
          {"eps", cfg.eps},
          {"weight_decay", cfg.weight_decay},
          {"clip_lo", cfg.clip_lo},
          {"clip_hi", cfg.clip_hi},
          {"exclude_bias_and_norm", cfg.exclude_bias_and_norm}};
}

bool lamb_excluded_path(const std::string& path) {
  auto ends_with = [&](const char* suffix) {
    const std::size_t n = std::char_traits<char>::length(suffix);
    return path.size() >= n && path.compare(path.size() - n, n, suffix) == 0;
  };
  return ends_with("bias") || ends_with(".gamma") || ends_with(".beta");
}

LambOptimizer::LambOptimizer(LambConfig cfg, ParameterStore& params) : cfg_(cfg) {
  cfg_.validate();
  slots_.reserve(params.size());
  for (const std::string& path : params.paths()) {
    Tensor& t = params.at(path);
    if (!t.requires_grad()) {
      throw UsageError("parameter '" + path + "' does not track gradients");
    }
    Slot s;
    s.path = path;
    s.param = t;  // shares storage with the store
    s.m.assign(t.numel(), 0.0);
    s.v.assign(t.numel(), 0.0);
    s.excluded = cfg_.exclude_bias_and_norm && lamb_excluded_path(path);
    slots_.push_back(std::move(s));
  }
}

void LambOptimizer::step(double lr) {
  if (!std::isfinite(lr) || lr < 0.0) throw UsageError("learning rate must be finite and >= 0");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  std::vector<double> u;
  for (Slot& s : slots_) {
    const std::size_t n = s.param.numel();
    std::span<const double> g = s.param.grad();
    std::span<double> w = s.param.data();
    u.resize(n);
    const double wd = s.excluded ? 0.0 : cfg_.weight_decay;
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(g[i])) {
        throw NumericError("non-finite gradient in '" + s.path + "'");
      }
      s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
      s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double m_hat = s.m[i] / bc1;
      const double v_hat = s.v[i] / bc2;
      u[i] = m_hat / (std::sqrt(v_hat) + cfg_.eps) + wd * w[i];
    }
    const kernels::KernelTable& kt = kernels::active();
    double r = 1.0;
    if (!s.excluded) {
      const double w_norm = std::sqrt(kt.dot(w.data(), w.data(), n));
      const double u_norm = std::sqrt(kt.dot(u.data(), u.data(), n));
      if (w_norm > 0.0 && u_norm > 0.0) {
        r = std::clamp(w_norm / u_norm, cfg_.clip_lo, cfg_.clip_hi);
      }
    }
    kt.axpy(-lr * r, u.data(), w.data(), n);
  }
}

std::vector<std::pair<std::string, Tensor>> LambOptimizer::state_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(slots_.size() * 2 + 1);
  for (const Slot& s : slots_) {
    Tensor m = Tensor::zeros(s.param.shape());
    Tensor v = Tensor::zeros(s.param.shape());
    std::copy(s.m.begin(), s.m.end(), m.data().begin());
    std::copy(s.v.begin(), s.v.end(), v.data().begin());
    out.emplace_back("optim.m." + s.path, std::move(m));
    out.emplace_back("optim.v." + s.path, std::move(v));
  }
  out.emplace_back("optim.t", Tensor::scalar(static_cast<double>(t_)));
  return out;
}

void LambOptimizer::load_state(const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : tensors) by_name[name] = &t;

  auto take = [&](const std::string& name, const Shape& shape) -> const Tensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("optimizer state is missing '" + name + "'");
    if (it->second->shape() != shape) {
      throw DataError("optimizer state '" + name + "' has shape " +
                      shape_to_string(it->second->shape()) + ", expected " +
                      shape_to_string(shape));
    }
    const Tensor& t = *it->second;
    by_name.erase(it);
    return t;
  };

  for (Slot& s : slots_) {
    const Tensor& m = take("optim.m." + s.path, s.param.shape());
    const Tensor& v = take("optim.v." + s.path, s.param.shape());
    std::copy(m.data().begin(), m.data().end(), s.m.begin());
    std::copy(v.data().begin(), v.data().end(), s.v.begin());
  }
  auto it = by_name.find("optim.t");
  if (it == by_name.end() || it->second->numel() != 1) {
    throw DataError("optimizer state is missing 'optim.t'");
  }
  t_ = static_cast<long long>(it->second->data()[0]);
  by_name.erase(it);
  if (!by_name.empty()) {
    throw DataError("optimizer state has unknown tensor '" + by_name.begin()->first + "'");
  }
}

void Schedule::validate() const {
  if (!(peak_lr > 0.0)) throw ConfigError("schedule peak_lr must be positive");
  if (warmup_steps < 1 || total_steps < warmup_steps) {
    throw ConfigError("schedule needs 1 <= warmup_steps <= total_steps");
  }
}

double Schedule::lr_at_step(long long step, std::ostream* warn_to) const {
  validate();
  if (step < 0) throw UsageError("schedule step must be >= 0");
  if (step <= warmup_steps) {
    return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  if (step >= total_steps) {
    if (step > total_steps && !warned_) {
      warned_ = true;
      std::ostream& out = warn_to ? *warn_to : std::cerr;
      out << "warning: step " << step << " is past the schedule end " << total_steps
          << "; learning rate clamped to 0\n";
    }
    return 0.0;
  }
  return peak_lr * static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup_steps);
}

Schedule schedule_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("schedule config must be a JSON object");
  Schedule s;
  try {
    for (const auto& item : j.items()) {
      const std::string& k = item.key();
      if (k == "peak_lr") {
        s.peak_lr = item.value().get<double>();
      } else if (k == "warmup_steps") {
        s.warmup_steps = item.value().get<long long>();
      } else if (k == "total_steps") {
        s.total_steps = item.value().get<long long>();
      } else {
        throw ConfigError("unknown schedule config key '" + k + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad schedule config value: ") + e.what());
  }
  return s;
}

nlohmann::json schedule_to_json(const Schedule& s) {
  return {{"peak_lr", s.peak_lr},
          {"warmup_steps", s.warmup_steps},
          {"total_steps", s.total_steps}};
}

}  // namespace albert
