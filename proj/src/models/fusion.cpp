#include <cmath>

#include "coperc/autodiff/ops.hpp"
#include "coperc/models/model.hpp"

namespace coperc::models {

using namespace coperc::ad;

namespace {

void check_maps(const char* op, std::span<const BevFeatureMap> maps) {
  if (maps.empty()) throw FusionError(std::string(op) + ": no feature maps");
  for (const auto& m : maps) {
    if (m.grid.rank() != 3 || m.grid.shape() != maps[0].grid.shape()) {
      throw FusionError(std::string(op) + ": feature map shape mismatch " + ad::to_string(maps[0].grid.shape()) +
                        " vs " + ad::to_string(m.grid.shape()));
    }
  }
}

// All maps as one (M*H*W, d) row table, agent-major.
Tensor row_table(std::span<const BevFeatureMap> maps, std::int64_t hw, std::int64_t d) {
  std::vector<Tensor> rows;
  for (const auto& m : maps) rows.push_back(reshape(m.grid, {hw, d}));
  return rows.size() == 1 ? rows[0] : concat(rows);
}

}  // namespace

BevFeatureMap fuse_maxout(std::span<const BevFeatureMap> maps) {
  check_maps("fuse_maxout", maps);
  if (maps.size() == 1) return maps[0];
  std::vector<Tensor> grids;
  for (const auto& m : maps) grids.push_back(m.grid);
  return {max(stack(grids), 0).values};
}

std::vector<std::uint8_t> nonzero_cells(const BevFeatureMap& map) {
  const auto& s = map.grid.shape();
  const std::int64_t hw = s[0] * s[1], d = s[2];
  std::vector<std::uint8_t> valid(static_cast<std::size_t>(hw), 0);
  const double* v = map.grid.data();
  for (std::int64_t c = 0; c < hw; ++c) {
    for (std::int64_t k = 0; k < d; ++k) {
      if (v[c * d + k] != 0.0) {
        valid[static_cast<std::size_t>(c)] = 1;
        break;
      }
    }
  }
  return valid;
}

BevFeatureMap fuse_naive(std::span<const BevFeatureMap> maps, std::span<const std::vector<std::uint8_t>> valid,
                         Rng& rng) {
  check_maps("fuse_naive", maps);
  const auto& s = maps[0].grid.shape();
  const std::int64_t hw = s[0] * s[1], d = s[2];
  if (valid.size() != maps.size()) throw FusionError("fuse_naive: one validity mask per map required");
  for (const auto& v : valid) {
    if (static_cast<std::int64_t>(v.size()) != hw) throw FusionError("fuse_naive: validity mask size mismatch");
  }
  std::vector<std::int64_t> pick(static_cast<std::size_t>(hw), -1);
  std::vector<std::int64_t> cand;
  for (std::int64_t c = 0; c < hw; ++c) {
    cand.clear();
    for (std::size_t m = 0; m < maps.size(); ++m) {
      if (valid[m][static_cast<std::size_t>(c)]) cand.push_back(static_cast<std::int64_t>(m));
    }
    if (cand.empty()) continue;
    const auto m = cand.size() == 1 ? cand[0] : cand[rng.below(cand.size())];
    pick[static_cast<std::size_t>(c)] = m * hw + c;
  }
  Tensor table = row_table(maps, hw, d);
  return {reshape(index_select(table, pick), s)};
}

BevFeatureMap fuse_attention(std::span<const BevFeatureMap> maps, std::size_t ego, const ParamView& p) {
  check_maps("fuse_attention", maps);
  if (ego >= maps.size()) throw FusionError("fuse_attention: ego index out of range");
  const auto& s = maps[0].grid.shape();
  const std::int64_t hw = s[0] * s[1], d = s[2];
  const auto M = static_cast<std::int64_t>(maps.size());
  const Tensor& wq = p.at("att.q");
  const Tensor& wk = p.at("att.k");
  const Tensor& wv = p.at("att.v");

  Tensor table = row_table(maps, hw, d);
  Tensor q = matmul(reshape(maps[ego].grid, {hw, d}), wq);
  Tensor k = reshape(matmul(table, wk), {M, hw, d});
  Tensor v = reshape(matmul(table, wv), {M, hw, d});
  Tensor scores = affine(sum(mul(broadcast(q, {M, hw, d}), k), 2), 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor weights = softmax(scores, 0);  // (M, hw)
  Tensor blended = sum(mul(broadcast(reshape(weights, {M, hw, 1}), {M, hw, d}), v), 0);
  return {reshape(blended, s)};
}

}  // namespace coperc::models
