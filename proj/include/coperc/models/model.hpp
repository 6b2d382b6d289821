#pragma once

#include <cstdint>
#include <array>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "coperc/autodiff/tape.hpp"
#include "coperc/autodiff/tensor.hpp"
#include "coperc/models/bev.hpp"
#include "coperc/rng.hpp"
#include "coperc/scene/geometry.hpp"

namespace coperc::models {

enum class FusionKind { kMaxout, kNaive, kAttention };

std::string to_string(FusionKind kind);
FusionKind parse_fusion(const std::string& name);

struct ModelConfig {
  GridConfig grid;
  int d = 8;
  FusionKind fusion = FusionKind::kAttention;
  /// Rows of the encoder input per agent; clouds beyond this are truncated.
  std::int64_t max_points = 720;
  /// Initial classification bias; sigmoid(-2.19) ~ 0.1.
  double cls_bias_init = -2.19;

  /// Stable hash of every field that affects parameter shapes or semantics.
  std::uint64_t hash() const;
};

/// BEV feature map: `grid` is (H, W, d).
struct BevFeatureMap {
  ad::Tensor grid;
};

/// Named parameter tensors in a fixed order. Stored untracked; `view` watches
/// them on a tape for one training step.
class ModelParams {
 public:
  ModelParams() = default;
  ModelParams(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const std::vector<std::pair<std::string, ad::Tensor>>& entries() const { return entries_; }
  const ad::Tensor& at(const std::string& name) const;
  void set(const std::string& name, ad::Tensor value);
  std::int64_t count() const;

  /// Name -> tensor map; watched on `tape` when non-null.
  std::map<std::string, ad::Tensor> view(ad::Tape* tape) const;

 private:
  ModelConfig config_;
  std::vector<std::pair<std::string, ad::Tensor>> entries_;
};

using ParamView = std::map<std::string, ad::Tensor>;

/// Parameter names and shapes implied by a config.
std::vector<std::pair<std::string, ad::Shape>> parameter_shapes(const ModelConfig& config);

/// Shared encoder over a batch of agents: stacks the inputs along a leading
/// member axis and returns (B, H, W, d). Per-point 2-layer MLP, max-pool per
/// cell (empty cells are zero), then two bias-free 3x3 convolutions, so an
/// empty cloud encodes to an all-zero map.
ad::Tensor encode_batch(std::span<const PillarInput> inputs, const ParamView& p, const ModelConfig& config);
BevFeatureMap encode(const PillarInput& input, const ParamView& p, const ModelConfig& config);
/// Member `b` of a batched encoder output as an (H, W, d) map.
BevFeatureMap unstack(const ad::Tensor& batched, std::int64_t b);

/// Pillar features before the convolutions, (B*H*W, d); exposed for tests.
ad::Tensor pillar_features(std::span<const PillarInput> inputs, const ParamView& p, const ModelConfig& config);

/// 3x3 same-padding convolution (+ bias when given) + relu over (B*H*W, d_in)
/// maps.
ad::Tensor conv3x3(const ad::Tensor& x, const ad::Tensor& w, const ad::Tensor* b, std::int64_t batch, int height,
                   int width);
ad::Tensor linear(const ad::Tensor& x, const ad::Tensor& w, const ad::Tensor& b);

class FusionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Elementwise max over agents; ties go to the lowest agent index.
BevFeatureMap fuse_maxout(std::span<const BevFeatureMap> maps);
/// Per-cell uniform pick among agents whose cell is valid; no valid agent
/// gives zero.
BevFeatureMap fuse_naive(std::span<const BevFeatureMap> maps, std::span<const std::vector<std::uint8_t>> valid,
                         Rng& rng);
/// Validity of each cell: any nonzero channel.
std::vector<std::uint8_t> nonzero_cells(const BevFeatureMap& map);
/// Per-cell single-head scaled dot-product attention over agents; the query
/// comes from `maps[ego]`, keys and values from every map.
BevFeatureMap fuse_attention(std::span<const BevFeatureMap> maps, std::size_t ego, const ParamView& p);

inline constexpr int kRegChannels = 6;  // dx, dy, log l, log w, sin yaw, cos yaw

struct DetectionOutput {
  ad::Tensor logits;  // (H*W)
  ad::Tensor reg;     // (H*W, 6)
  int height = 0;
  int width = 0;

  /// sigmoid(logits), row-major (H, W).
  std::vector<double> scores() const;
};

DetectionOutput detect_head(const BevFeatureMap& fused, const ParamView& p, const ModelConfig& config);

/// Regression target of a box relative to its center cell.
struct CellTarget {
  std::int64_t cell = -1;
  std::array<double, kRegChannels> reg{};
};

/// -1 cell when the center is outside the grid.
CellTarget encode_box(const ObjectBox& box, const GridConfig& grid);
ObjectBox decode_cell(std::int64_t cell, std::span<const double> reg, const GridConfig& grid);

struct HeatmapTarget {
  std::vector<double> heat;            // (H*W) in [0, 1]; 1 exactly at centers
  std::vector<std::int64_t> pos_cells;  // one per in-grid box, deduplicated
  std::vector<double> reg;              // (P, 6)
};

HeatmapTarget build_targets(std::span<const ObjectBox> boxes, const GridConfig& grid);

struct LossParts {
  ad::Tensor total;
  double cls = 0.0;
  double reg = 0.0;
};

/// Focal loss on a Gaussian center heatmap plus L1 regression on center cells:
/// loss = cls + weight * reg, both normalized by max(1, #centers).
LossParts detection_loss(const DetectionOutput& out, std::span<const ObjectBox> gt, const GridConfig& grid,
                         double reg_weight = 1.0);

struct ScoredBox {
  ObjectBox box;
  double score = 0.0;
};

/// Cells scoring >= threshold that are local maxima in their 3x3 window,
/// highest score first (ties by cell index).
std::vector<ScoredBox> decode(const DetectionOutput& out, const GridConfig& grid, double score_threshold);

}  // namespace coperc::models
