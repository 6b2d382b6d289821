#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace coperc::ad {

using Shape = std::vector<std::int64_t>;
using NodeId = std::int64_t;

inline constexpr NodeId kNoNode = -1;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised for incompatible operand shapes or bad axes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Tape;

/// Dense row-major tensor of doubles.
///
/// The value buffer is immutable and shared between copies, so passing a
/// Tensor around is cheap. A tensor produced by an operation with at least one
/// tracked input carries a node on that input's Tape; untracked tensors never
/// accumulate gradient.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const noexcept { return shape_; }
  std::int64_t rank() const noexcept { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t numel() const noexcept { return static_cast<std::int64_t>(data_->size()); }
  std::int64_t dim(std::int64_t axis) const;

  std::span<const double> values() const noexcept { return *data_; }
  const double* data() const noexcept { return data_->data(); }
  double item() const;

  bool tracked() const noexcept { return tape_ != nullptr; }
  Tape* tape() const noexcept { return tape_; }
  NodeId node() const noexcept { return node_; }

  /// Same values, no tape node.
  Tensor detached() const;

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  NodeId node_ = kNoNode;
};

}  // namespace coperc::ad
