#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "albertlab/common.hpp"

namespace albert {

using Shape = std::vector<int>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Marker for rows excluded from cross-entropy (and from its gradient).
inline constexpr int kIgnoreIndex = -1;

// Dense row-major tensor. Copying a Tensor is cheap and shares storage; the
// gradient buffer exists iff requires_grad and has the same shape as the data.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int dim(int axis) const;
  std::size_t numel() const;

  std::span<double> data();
  std::span<const double> data() const;
  std::span<double> grad();
  std::span<const double> grad() const;

  bool requires_grad() const;
  /// Enables gradient accumulation; allocates a zeroed grad buffer.
  void set_requires_grad(bool value);
  void zero_grad();

  /// Value of a one-element tensor.
  double item() const;

  /// True when every element is finite.
  bool all_finite() const;

  /// Deep copy (fresh storage, grad not copied).
  Tensor clone() const;

  struct Storage;
  const std::shared_ptr<Storage>& storage() const { return storage_; }

 private:
  explicit Tensor(std::shared_ptr<Storage> s) : storage_(std::move(s)) {}
  Storage& st();
  const Storage& st() const;
  std::shared_ptr<Storage> storage_;
};

// Tape of executed ops for one forward pass. While a Graph is alive on a
// thread, ops involving requires_grad tensors record their backward closures
// onto it in execution order. One backward sweep per recorded forward;
// episodes are confined to a single thread.
class Graph {
 public:
  Graph();
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Reverse sweep from a recorded scalar; fills grads of reachable tensors.
  void backward(const Tensor& loss);

  std::size_t num_ops() const { return tape_.size(); }

  static Graph* current();

  // Used by op implementations.
  void record(const Tensor& output, std::function<void()> backward_fn);

 private:
  std::vector<std::function<void()>> tape_;
  std::unordered_set<const Tensor::Storage*> outputs_;
  bool backward_done_ = false;
  Graph* previous_ = nullptr;
};

/// backward() on the graph currently recording; UsageError when there is none.
void backward(const Tensor& loss);

// --- ops -------------------------------------------------------------------
// Every op is differentiable where meaningful; gradients accumulate into the
// inputs' grad buffers during Graph::backward.

/// a[..×k] · b[k×n] -> [..×n]; leading axes of `a` are treated as rows.
Tensor matmul(const Tensor& a, const Tensor& b);

/// a[..×k] · b[n×k]ᵀ -> [..×n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);

/// Batched a[...,m,k] · b[...,k,n]; leading axes must match.
Tensor bmm_nn(const Tensor& a, const Tensor& b);

/// Batched a[...,m,k] · b[...,n,k]ᵀ.
Tensor bmm_nt(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);

/// Elementwise product of same-shape tensors.
Tensor mul(const Tensor& a, const Tensor& b);

/// x[..×n] + bias[n], broadcast over leading axes.
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor scale(const Tensor& x, double factor);

/// Max-subtracted softmax along `axis` (negative axes count from the back).
Tensor softmax(const Tensor& x, int axis);

/// Per-vector normalization over the last axis (biased variance), then affine.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-12);

/// x * Phi(x) with the exact Gaussian CDF.
Tensor gelu(const Tensor& x);

Tensor tanh_act(const Tensor& x);

/// Inverted dropout: zero with probability p and scale survivors by 1/(1-p)
/// in training mode; identity in eval mode or at p = 0. Requires p < 1.
Tensor dropout(const Tensor& x, double p, bool training, Rng& rng);

/// Row gather: table[V×E] by id -> [lead..., E]. lead_shape defaults to
/// {len(ids)}; its product must equal len(ids). Backward scatter-adds, so
/// duplicate ids accumulate.
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids, Shape lead_shape = {});

/// [B,S,H] -> [B,A,S,H/A]
Tensor split_heads(const Tensor& x, int num_heads);

/// [B,A,S,Dh] -> [B,S,A*Dh]
Tensor merge_heads(const Tensor& x);

/// scores[B,A,S,S] with -1e9 added at key positions where mask[b*S+t] == 0.
Tensor add_key_padding_mask(const Tensor& scores, std::span<const std::uint8_t> mask);

/// x[B,S,H] -> x[:,0,:] as [B,H]
Tensor first_token(const Tensor& x);

/// Mean negative log-softmax over rows whose target is not ignore_marker.
/// logits has rank >= 2 and is treated as rows x classes (last axis). Zero
/// (with *all_ignored = true) when every row is ignored.
Tensor cross_entropy_logits(const Tensor& logits, std::span<const int> targets,
                            int ignore_marker = kIgnoreIndex, bool* all_ignored = nullptr);

/// Sum of all elements, as a scalar tensor.
Tensor sum(const Tensor& x);

}  // namespace albert
