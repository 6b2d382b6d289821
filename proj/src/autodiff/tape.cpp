#include "coperc/autodiff/tape.hpp"

#include <algorithm>

namespace coperc::ad {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kAffine: return "affine";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kRelu: return "relu";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kLogSigmoid: return "log_sigmoid";
    case OpKind::kAbs: return "abs";
    case OpKind::kSum: return "sum";
    case OpKind::kSumAxis: return "sum_axis";
    case OpKind::kMean: return "mean";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kMaxAxis: return "max_axis";
    case OpKind::kConcat: return "concat";
    case OpKind::kIndexSelect: return "index_select";
    case OpKind::kScatterAdd: return "scatter_add";
    case OpKind::kBroadcast: return "broadcast";
    case OpKind::kReshape: return "reshape";
  }
  return "unknown";
}

// ---- BackwardContext ------------------------------------------------------

BackwardContext::BackwardContext(Tape& tape, NodeId node) : tape_(tape), node_(node) {
  auto& g = (*tape.grads_)[static_cast<std::size_t>(node)];
  auto& e = (*tape.elig_)[static_cast<std::size_t>(node)];
  grad_out_ = g;
  elig_out_ = e;
  any_elig_ = std::any_of(e.begin(), e.end(), [](std::uint8_t v) { return v != 0; });
}

bool BackwardContext::tracked(std::size_t input) const {
  const auto& ins = tape_.nodes_[static_cast<std::size_t>(node_)].inputs;
  return input < ins.size() && ins[input] != kNoNode;
}

std::span<double> BackwardContext::grad_in(std::size_t input) {
  const auto& ins = tape_.nodes_[static_cast<std::size_t>(node_)].inputs;
  if (!tracked(input)) throw BackwardError("gradient requested for an untracked input");
  auto id = static_cast<std::size_t>(ins[input]);
  auto& buf = (*tape_.grads_)[id];
  if (buf.empty()) {
    buf.assign(static_cast<std::size_t>(numel(tape_.nodes_[id].shape)), 0.0);
    (*tape_.elig_)[id].assign(buf.size(), 0);
  }
  return buf;
}

std::span<std::uint8_t> BackwardContext::elig_in(std::size_t input) {
  grad_in(input);  // allocates both buffers
  auto id = static_cast<std::size_t>(tape_.nodes_[static_cast<std::size_t>(node_)].inputs[input]);
  return (*tape_.elig_)[id];
}

void BackwardContext::dense_eligibility(std::size_t input) {
  auto e = elig_in(input);
  if (any_elig_) std::fill(e.begin(), e.end(), std::uint8_t{1});
}

// ---- Gradients ------------------------------------------------------------

bool Gradients::has(NodeId node) const {
  return node >= 0 && static_cast<std::size_t>(node) < grads_.size() &&
         !grads_[static_cast<std::size_t>(node)].empty();
}

bool Gradients::has(const Tensor& t) const { return t.tracked() && has(t.node()); }

std::span<const double> Gradients::values(NodeId node) const {
  if (!has(node)) return {};
  return grads_[static_cast<std::size_t>(node)];
}

Tensor Gradients::of(const Tensor& t) const {
  if (!has(t)) return Tensor::zeros(t.shape());
  return Tensor(t.shape(), grads_[static_cast<std::size_t>(t.node())]);
}

std::int64_t Gradients::eligible_count(NodeId node) const {
  if (!has(node)) return 0;
  const auto& e = elig_[static_cast<std::size_t>(node)];
  return std::count_if(e.begin(), e.end(), [](std::uint8_t v) { return v != 0; });
}

// ---- Tape -----------------------------------------------------------------

Tensor Tape::watch(const Tensor& leaf, std::string label) {
  Tensor t = leaf.detached();
  Node n{OpKind::kLeaf, {}, leaf.shape(), 0, {}, {}};
  if (!label.empty()) n.groups.push_back(std::move(label));
  nodes_.push_back(std::move(n));
  t.tape_ = this;
  t.node_ = static_cast<NodeId>(nodes_.size() - 1);
  return t;
}

Tensor Tape::record(OpKind kind, const std::vector<NodeId>& inputs, Shape shape,
                    std::vector<double> values, std::int64_t saved, BackwardFn backward) {
  Tensor t(std::move(shape), std::move(values));
  nodes_.push_back(Node{kind, inputs, t.shape(), saved, std::move(backward), {}});
  live_saved_ += saved;
  peak_saved_ = std::max(peak_saved_, live_saved_);
  t.tape_ = this;
  t.node_ = static_cast<NodeId>(nodes_.size() - 1);
  return t;
}

void Tape::mark(const Tensor& t, std::string group) {
  if (!t.tracked() || t.tape() != this) return;
  nodes_[static_cast<std::size_t>(t.node())].groups.push_back(std::move(group));
}

bool Tape::is_leaf(NodeId node) const {
  return nodes_.at(static_cast<std::size_t>(node)).kind == OpKind::kLeaf;
}

OpKind Tape::kind(NodeId node) const { return nodes_.at(static_cast<std::size_t>(node)).kind; }

const std::vector<NodeId>& Tape::inputs(NodeId node) const {
  return nodes_.at(static_cast<std::size_t>(node)).inputs;
}

Gradients Tape::backward(const Tensor& loss) {
  if (!loss.tracked()) {
    throw BackwardError("backward called on an untracked loss; no tensor in its graph requires gradients");
  }
  if (loss.tape() != this) throw BackwardError("loss belongs to a different tape");
  if (loss.numel() != 1) {
    throw BackwardError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
  }

  Gradients out;
  out.grads_.resize(nodes_.size());
  out.elig_.resize(nodes_.size());
  out.shapes_.reserve(nodes_.size());
  for (const auto& n : nodes_) out.shapes_.push_back(n.shape);

  grads_ = &out.grads_;
  elig_ = &out.elig_;
  auto root = static_cast<std::size_t>(loss.node());
  out.grads_[root] = {1.0};
  out.elig_[root] = {1};

  try {
    for (std::size_t id = root + 1; id-- > 0;) {
      auto& node = nodes_[id];
      if (out.grads_[id].empty() || !node.backward) continue;
      BackwardContext ctx(*this, static_cast<NodeId>(id));
      node.backward(ctx);
    }
  } catch (...) {
    grads_ = nullptr;
    elig_ = nullptr;
    throw;
  }
  grads_ = nullptr;
  elig_ = nullptr;
  return out;
}

TrackedCounts Tape::count_tracked(std::string_view group, const Gradients& grads) const {
  TrackedCounts c;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const auto& n = nodes_[id];
    c.activations += n.saved;
    if (std::find(n.groups.begin(), n.groups.end(), group) != n.groups.end()) {
      c.grad_entries += grads.eligible_count(static_cast<NodeId>(id));
    }
  }
  return c;
}

void Tape::clear() {
  nodes_.clear();
  nodes_.shrink_to_fit();
  live_saved_ = 0;
  peak_saved_ = 0;
}

}  // namespace coperc::ad
