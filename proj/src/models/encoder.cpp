#include <algorithm>
#include <stdexcept>

#include "coperc/autodiff/ops.hpp"
#include "coperc/models/model.hpp"

namespace coperc::models {

using namespace coperc::ad;

namespace {

const Tensor& param(const ParamView& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw std::out_of_range("missing parameter " + name);
  return it->second;
}

}  // namespace

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  return add(y, broadcast(b, y.shape()));
}

Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor* b, std::int64_t batch, int height, int width) {
  const std::int64_t hw = static_cast<std::int64_t>(height) * width;
  if (x.rank() != 2 || x.dim(0) != batch * hw) {
    throw ShapeError("conv3x3: expected (" + std::to_string(batch * hw) + ", d) input, got " + ad::to_string(x.shape()));
  }
  const std::int64_t d_in = x.dim(1);
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(batch * hw * 9));
  for (std::int64_t n = 0; n < batch; ++n) {
    for (int r = 0; r < height; ++r) {
      for (int c = 0; c < width; ++c) {
        for (int dr = -1; dr <= 1; ++dr) {
          for (int dc = -1; dc <= 1; ++dc) {
            const int rr = r + dr, cc = c + dc;
            const bool inside = rr >= 0 && rr < height && cc >= 0 && cc < width;
            idx.push_back(inside ? n * hw + static_cast<std::int64_t>(rr) * width + cc : -1);
          }
        }
      }
    }
  }
  Tensor cols = reshape(index_select(x, idx), {batch * hw, 9 * d_in});
  Tensor y = matmul(cols, w);
  if (b) y = add(y, broadcast(*b, y.shape()));
  return relu(y);
}

Tensor pillar_features(std::span<const PillarInput> inputs, const ParamView& p, const ModelConfig& config) {
  if (inputs.empty()) throw ShapeError("encoder: empty batch");
  const std::int64_t hw = config.grid.cells();
  const auto B = static_cast<std::int64_t>(inputs.size());
  std::vector<Tensor> feats;
  std::vector<std::vector<std::int64_t>> members(static_cast<std::size_t>(B * hw));
  std::int64_t row = 0;
  for (std::int64_t b = 0; b < B; ++b) {
    const auto& in = inputs[static_cast<std::size_t>(b)];
    if (in.features.rank() != 2 || in.features.dim(1) != kPointFeatures || in.cells.numel() != in.features.dim(0)) {
      throw ShapeError("encoder: malformed pillar input " + ad::to_string(in.features.shape()));
    }
    feats.push_back(in.features);
    for (double c : in.cells.values()) {
      if (c >= 0) members[static_cast<std::size_t>(b * hw + static_cast<std::int64_t>(c))].push_back(row);
      ++row;
    }
  }
  Tensor x = feats.size() == 1 ? feats[0] : concat(feats);
  Tensor h = relu(linear(x, param(p, "enc.mlp1.w"), param(p, "enc.mlp1.b")));
  h = relu(linear(h, param(p, "enc.mlp2.w"), param(p, "enc.mlp2.b")));

  std::size_t kmax = 1;
  for (const auto& m : members) kmax = std::max(kmax, m.size());
  std::vector<std::int64_t> gather(members.size() * kmax, -1);
  for (std::size_t cell = 0; cell < members.size(); ++cell) {
    std::copy(members[cell].begin(), members[cell].end(), gather.begin() + static_cast<std::ptrdiff_t>(cell * kmax));
  }
  // relu outputs are >= 0, so zero padding never beats a real point
  Tensor g = reshape(index_select(h, gather), {B * hw, static_cast<std::int64_t>(kmax), config.d});
  return max(g, 1).values;
}

Tensor encode_batch(std::span<const PillarInput> inputs, const ParamView& p, const ModelConfig& config) {
  const int H = config.grid.height(), W = config.grid.width();
  const auto B = static_cast<std::int64_t>(inputs.size());
  Tensor x = pillar_features(inputs, p, config);
  x = conv3x3(x, param(p, "enc.conv1.w"), nullptr, B, H, W);
  x = conv3x3(x, param(p, "enc.conv2.w"), nullptr, B, H, W);
  return reshape(x, {B, H, W, config.d});
}

BevFeatureMap unstack(const Tensor& batched, std::int64_t b) {
  if (batched.rank() != 4) throw ShapeError("unstack: expected (B, H, W, d), got " + ad::to_string(batched.shape()));
  const auto& s = batched.shape();
  if (s[0] == 1) return {reshape(batched, {s[1], s[2], s[3]})};
  Tensor flat = reshape(batched, {s[0], s[1] * s[2] * s[3]});
  const std::int64_t row[1] = {b};
  return {reshape(index_select(flat, row), {s[1], s[2], s[3]})};
}

BevFeatureMap encode(const PillarInput& input, const ParamView& p, const ModelConfig& config) {
  return unstack(encode_batch(std::span<const PillarInput>(&input, 1), p, config), 0);
}

}  // namespace coperc::models
