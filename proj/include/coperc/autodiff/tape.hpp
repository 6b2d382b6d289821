#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "coperc/autodiff/tensor.hpp"

namespace coperc::ad {

enum class OpKind {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kAffine,
  kMatmul,
  kRelu,
  kExp,
  kLog,
  kSigmoid,
  kLogSigmoid,
  kAbs,
  kSum,
  kSumAxis,
  kMean,
  kSoftmax,
  kMaxAxis,
  kConcat,
  kIndexSelect,
  kScatterAdd,
  kBroadcast,
  kReshape,
};

std::string_view op_name(OpKind kind);

/// Raised when backward is requested from an untracked or non-scalar loss.
class BackwardError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Tape;

/// View handed to a node's backward rule.
///
/// Gradients and eligibility masks of inputs are allocated lazily; an input
/// that is not tracked has no slot and `tracked(i)` is false. Eligibility marks
/// which scalar slots structurally receive gradient (a max routes only to its
/// argmax, a gather only to the gathered rows), independent of the numeric
/// value of the gradient.
class BackwardContext {
 public:
  std::span<const double> grad_out() const noexcept { return grad_out_; }
  std::span<const std::uint8_t> elig_out() const noexcept { return elig_out_; }
  bool any_eligible() const noexcept { return any_elig_; }

  bool tracked(std::size_t input) const;
  std::span<double> grad_in(std::size_t input);
  std::span<std::uint8_t> elig_in(std::size_t input);

  /// Marks every slot of `input` eligible when any output slot is.
  void dense_eligibility(std::size_t input);

 private:
  friend class Tape;
  BackwardContext(Tape& tape, NodeId node);

  Tape& tape_;
  NodeId node_;
  std::span<const double> grad_out_;
  std::span<const std::uint8_t> elig_out_;
  bool any_elig_ = false;
};

using BackwardFn = std::function<void(BackwardContext&)>;

struct TrackedCounts {
  /// Scalars held by backward rules (saved activations, argmax indices).
  std::int64_t activations = 0;
  /// Eligible gradient slots summed over tensors marked with the group.
  std::int64_t grad_entries = 0;
};

/// Gradients produced by one backward pass, keyed by node id.
class Gradients {
 public:
  bool has(const Tensor& t) const;
  bool has(NodeId node) const;
  Tensor of(const Tensor& t) const;
  std::span<const double> values(NodeId node) const;
  std::int64_t eligible_count(NodeId node) const;

 private:
  friend class Tape;
  std::vector<Shape> shapes_;
  std::vector<std::vector<double>> grads_;
  std::vector<std::vector<std::uint8_t>> elig_;
};

/// Append-only record of tracked operations.
///
/// Node ids are assigned in creation order, so inputs always precede outputs
/// and a reverse sweep over ids is a valid topological order. A Tape is
/// confined to one thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `leaf` as a tracked input. Leaves are owned elsewhere and do
  /// not count towards saved activations.
  Tensor watch(const Tensor& leaf, std::string label = {});

  /// Appends a node for an op output. `inputs` holds kNoNode for untracked
  /// operands. Returns the tracked output tensor.
  Tensor record(OpKind kind, const std::vector<NodeId>& inputs, Shape shape,
                std::vector<double> values, std::int64_t saved, BackwardFn backward);

  /// Tags a tracked tensor so count_tracked can report its gradient slots.
  void mark(const Tensor& t, std::string group);

  Gradients backward(const Tensor& loss);

  TrackedCounts count_tracked(std::string_view group, const Gradients& grads) const;

  std::int64_t size() const noexcept { return static_cast<std::int64_t>(nodes_.size()); }
  std::int64_t saved_activations() const noexcept { return live_saved_; }
  std::int64_t peak_saved_activations() const noexcept { return peak_saved_; }
  bool is_leaf(NodeId node) const;
  OpKind kind(NodeId node) const;
  const std::vector<NodeId>& inputs(NodeId node) const;

  /// Drops every node and its saved state. Outstanding tracked tensors must
  /// not be used with this tape afterwards.
  void clear();
  void reset_peak() noexcept { peak_saved_ = live_saved_; }

 private:
  friend class BackwardContext;

  struct Node {
    OpKind kind;
    std::vector<NodeId> inputs;
    Shape shape;
    std::int64_t saved = 0;
    BackwardFn backward;
    std::vector<std::string> groups;
  };

  std::vector<Node> nodes_;
  std::int64_t live_saved_ = 0;
  std::int64_t peak_saved_ = 0;

  // Scratch state of the backward pass in flight.
  std::vector<std::vector<double>>* grads_ = nullptr;
  std::vector<std::vector<std::uint8_t>>* elig_ = nullptr;
};

}  // namespace coperc::ad
