#include <algorithm>
#include <cmath>

#include "coperc/autodiff/ops.hpp"
#include "coperc/models/model.hpp"

namespace coperc::models {

using namespace coperc::ad;

std::vector<double> DetectionOutput::scores() const {
  std::vector<double> s(logits.values().begin(), logits.values().end());
  for (auto& v : s) v = 1.0 / (1.0 + std::exp(-v));
  return s;
}

DetectionOutput detect_head(const BevFeatureMap& fused, const ParamView& p, const ModelConfig& config) {
  const int H = config.grid.height(), W = config.grid.width();
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  if (fused.grid.shape() != Shape{H, W, config.d}) {
    throw ShapeError("detect_head: expected (" + std::to_string(H) + ", " + std::to_string(W) + ", " +
                     std::to_string(config.d) + "), got " + ad::to_string(fused.grid.shape()));
  }
  Tensor x = reshape(fused.grid, {hw, config.d});
  Tensor h = conv3x3(x, p.at("head.conv.w"), &p.at("head.conv.b"), 1, H, W);
  DetectionOutput out;
  out.logits = reshape(linear(h, p.at("head.cls.w"), p.at("head.cls.b")), {hw});
  out.reg = linear(h, p.at("head.reg.w"), p.at("head.reg.b"));
  out.height = H;
  out.width = W;
  return out;
}

CellTarget encode_box(const ObjectBox& box, const GridConfig& grid) {
  CellTarget t;
  t.cell = grid.cell_of(box.center.x, box.center.y);
  if (t.cell < 0) return t;
  const Vec2 c = grid.cell_center(t.cell);
  t.reg = {(box.center.x - c.x) / grid.cell,
           (box.center.y - c.y) / grid.cell,
           std::log(box.length / grid.cell),
           std::log(box.width / grid.cell),
           std::sin(box.yaw),
           std::cos(box.yaw)};
  return t;
}

ObjectBox decode_cell(std::int64_t cell, std::span<const double> reg, const GridConfig& grid) {
  const Vec2 c = grid.cell_center(cell);
  ObjectBox b;
  b.center = {c.x + reg[0] * grid.cell, c.y + reg[1] * grid.cell};
  b.length = std::exp(std::clamp(reg[2], -6.0, 6.0)) * grid.cell;
  b.width = std::exp(std::clamp(reg[3], -6.0, 6.0)) * grid.cell;
  b.yaw = (reg[4] == 0.0 && reg[5] == 0.0) ? 0.0 : std::atan2(reg[4], reg[5]);
  b.id = -1;
  return b;
}

HeatmapTarget build_targets(std::span<const ObjectBox> boxes, const GridConfig& grid) {
  const int H = grid.height(), W = grid.width();
  HeatmapTarget t;
  t.heat.assign(static_cast<std::size_t>(H) * W, 0.0);
  for (const auto& b : boxes) {
    const auto ct = encode_box(b, grid);
    if (ct.cell < 0) continue;
    const int r0 = static_cast<int>(ct.cell / W), c0 = static_cast<int>(ct.cell % W);
    const double sigma = std::max(0.5, std::min(b.length, b.width) / (2.0 * grid.cell));
    const int rad = static_cast<int>(std::ceil(3.0 * sigma));
    for (int r = std::max(0, r0 - rad); r <= std::min(H - 1, r0 + rad); ++r) {
      for (int c = std::max(0, c0 - rad); c <= std::min(W - 1, c0 + rad); ++c) {
        const double d2 = (r - r0) * (r - r0) + (c - c0) * (c - c0);
        auto& h = t.heat[static_cast<std::size_t>(r) * W + c];
        h = std::max(h, std::exp(-d2 / (2.0 * sigma * sigma)));
      }
    }
    if (std::find(t.pos_cells.begin(), t.pos_cells.end(), ct.cell) != t.pos_cells.end()) continue;
    t.pos_cells.push_back(ct.cell);
    t.reg.insert(t.reg.end(), ct.reg.begin(), ct.reg.end());
  }
  return t;
}

LossParts detection_loss(const DetectionOutput& out, std::span<const ObjectBox> gt, const GridConfig& grid,
                         double reg_weight) {
  const auto target = build_targets(gt, grid);
  const auto hw = static_cast<std::int64_t>(target.heat.size());
  if (out.logits.numel() != hw) throw ShapeError("detection_loss: output does not match grid");
  const auto n_pos = static_cast<std::int64_t>(target.pos_cells.size());
  const double norm = static_cast<double>(std::max<std::int64_t>(1, n_pos));

  std::vector<double> pos_mask(static_cast<std::size_t>(hw), 0.0), neg_w(static_cast<std::size_t>(hw), 0.0);
  for (auto c : target.pos_cells) pos_mask[static_cast<std::size_t>(c)] = 1.0;
  for (std::size_t i = 0; i < neg_w.size(); ++i) {
    if (pos_mask[i] == 0.0) neg_w[i] = std::pow(1.0 - target.heat[i], 4);
  }

  const Tensor& z = out.logits;
  Tensor p = sigmoid(z);
  Tensor one_minus_p = affine(p, -1.0, 1.0);
  Tensor pos_term = sum(mul(mul(mul(one_minus_p, one_minus_p), log_sigmoid(z)), Tensor({hw}, std::move(pos_mask))));
  Tensor neg_term = sum(mul(mul(mul(p, p), log_sigmoid(affine(z, -1.0))), Tensor({hw}, std::move(neg_w))));
  Tensor cls = affine(add(pos_term, neg_term), -1.0 / norm);

  LossParts parts;
  parts.cls = cls.item();
  parts.total = cls;
  if (n_pos > 0) {
    Tensor pred = index_select(out.reg, target.pos_cells);
    Tensor tgt({n_pos, kRegChannels}, target.reg);
    Tensor reg = affine(sum(abs(sub(pred, tgt))), 1.0 / norm);
    parts.reg = reg.item();
    parts.total = add(cls, affine(reg, reg_weight));
  }
  return parts;
}

std::vector<ScoredBox> decode(const DetectionOutput& out, const GridConfig& grid, double score_threshold) {
  const auto s = out.scores();
  const int H = out.height, W = out.width;
  const auto reg = out.reg.values();
  std::vector<std::pair<double, std::int64_t>> keep;
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      const auto i = static_cast<std::size_t>(r) * W + c;
      if (s[i] < score_threshold) continue;
      bool peak = true;
      for (int dr = -1; dr <= 1 && peak; ++dr) {
        for (int dc = -1; dc <= 1; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if ((dr == 0 && dc == 0) || rr < 0 || rr >= H || cc < 0 || cc >= W) continue;
          if (s[static_cast<std::size_t>(rr) * W + cc] > s[i]) {
            peak = false;
            break;
          }
        }
      }
      if (peak) keep.emplace_back(s[i], static_cast<std::int64_t>(i));
    }
  }
  std::sort(keep.begin(), keep.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<ScoredBox> boxes;
  for (const auto& [score, cell] : keep) {
    boxes.push_back({decode_cell(cell, reg.subspan(static_cast<std::size_t>(cell) * kRegChannels, kRegChannels), grid),
                     score});
  }
  return boxes;
}

}  // namespace coperc::models
