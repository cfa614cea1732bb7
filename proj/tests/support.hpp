#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "albertlab/common.hpp"
#include "albertlab/tensor.hpp"

namespace testsupport {

inline double l2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// Norm-based relative error, robust near zero.
inline double rel_err(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    diff += d * d;
  }
  return std::sqrt(diff) / std::max(l2(a) + l2(b), 1e-12);
}

/// Central finite differences against the recorded backward pass.
///
/// `build` reruns the whole forward computation from the current contents of
/// `params` and returns the scalar loss (ops record onto the ambient graph iff
/// one is active). Returns the worst per-tensor relative error.
inline double grad_check(const std::function<albert::Tensor()>& build,
                         std::vector<albert::Tensor> params, double h = 1e-5) {
  using albert::Tensor;
  for (Tensor& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    albert::Graph graph;
    Tensor loss = build();
    graph.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Tensor& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    std::vector<double> fd(p.numel());
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double orig = p.data()[i];
      p.data()[i] = orig + h;
      const double up = build().item();
      p.data()[i] = orig - h;
      const double down = build().item();
      p.data()[i] = orig;
      fd[i] = (up - down) / (2.0 * h);
    }
    worst = std::max(worst, rel_err(analytic[pi], fd));
  }
  return worst;
}

inline albert::Tensor random_tensor(albert::Shape shape, albert::Rng& rng, double scale = 1.0) {
  albert::Tensor t = albert::Tensor::zeros(std::move(shape));
  for (double& v : t.data()) v = rng.normal() * scale;
  return t;
}

/// Unique scratch directory under the system temp dir; removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& label) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("albertlab_" + label + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct CommandResult {
  int exit_code;
  std::string output;  // stdout and stderr interleaved
};

/// Runs a shell command, capturing combined output.
inline CommandResult run_command(const std::string& cmd) {
  std::string full = cmd + " 2>&1";
  FILE* pipe = ::popen(full.c_str(), "r");
  if (pipe == nullptr) return {-1, "popen failed"};
  std::string output;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) output.append(buf.data(), n);
  int status = ::pclose(pipe);
  int code = (status >= 0 && WIFEXITED(status)) ? WEXITSTATUS(status) : -1;
  return {code, output};
}

}  // namespace testsupport
