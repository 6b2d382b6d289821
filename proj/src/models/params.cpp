#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "coperc/models/model.hpp"

namespace coperc::models {
namespace {

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::string to_string(FusionKind kind) {
  switch (kind) {
    case FusionKind::kMaxout: return "maxout";
    case FusionKind::kNaive: return "naive";
    case FusionKind::kAttention: return "attention";
  }
  return "?";
}

FusionKind parse_fusion(const std::string& name) {
  if (name == "maxout") return FusionKind::kMaxout;
  if (name == "naive") return FusionKind::kNaive;
  if (name == "attention") return FusionKind::kAttention;
  throw std::invalid_argument("unknown fusion '" + name + "' (expected maxout, naive or attention)");
}

std::uint64_t ModelConfig::hash() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "grid=%.17g,%.17g,%.17g,%.17g,%.17g;d=%d;fusion=%s;max_points=%lld", grid.x_min,
                grid.x_max, grid.y_min, grid.y_max, grid.cell, d, to_string(fusion).c_str(),
                static_cast<long long>(max_points));
  return fnv1a(buf);
}

std::vector<std::pair<std::string, ad::Shape>> parameter_shapes(const ModelConfig& c) {
  const std::int64_t d = c.d;
  std::vector<std::pair<std::string, ad::Shape>> s{
      {"enc.mlp1.w", {kPointFeatures, d}}, {"enc.mlp1.b", {d}},
      {"enc.mlp2.w", {d, d}},              {"enc.mlp2.b", {d}},
      {"enc.conv1.w", {9 * d, d}},         {"enc.conv2.w", {9 * d, d}},
  };
  if (c.fusion == FusionKind::kAttention) {
    s.push_back({"att.q", {d, d}});
    s.push_back({"att.k", {d, d}});
    s.push_back({"att.v", {d, d}});
  }
  s.push_back({"head.conv.w", {9 * d, d}});
  s.push_back({"head.conv.b", {d}});
  s.push_back({"head.cls.w", {d, 1}});
  s.push_back({"head.cls.b", {1}});
  s.push_back({"head.reg.w", {d, kRegChannels}});
  s.push_back({"head.reg.b", {kRegChannels}});
  return s;
}

ModelParams::ModelParams(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config.grid.validate();
  if (config.d < 1) throw std::invalid_argument("feature width d must be positive");
  for (auto& [name, shape] : parameter_shapes(config)) {
    Rng rng(Rng::derive(seed, fnv1a(name)));
    const auto n = ad::numel(shape);
    std::vector<double> v(static_cast<std::size_t>(n), 0.0);
    const bool bias = name.ends_with(".b");
    if (name == "head.cls.b") {
      v[0] = config.cls_bias_init;
    } else if (!bias) {
      double stddev = std::sqrt(2.0 / static_cast<double>(shape[0]));  // relu layers
      if (name.starts_with("att.")) stddev = 1.0 / std::sqrt(static_cast<double>(shape[0]));
      if (name == "head.cls.w" || name == "head.reg.w") stddev = 0.1 / std::sqrt(static_cast<double>(shape[0]));
      for (auto& x : v) x = stddev * rng.normal();
    }
    entries_.emplace_back(name, ad::Tensor(shape, std::move(v)));
  }
}

const ad::Tensor& ModelParams::at(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw std::out_of_range("no parameter named " + name);
}

void ModelParams::set(const std::string& name, ad::Tensor value) {
  for (auto& [n, t] : entries_) {
    if (n == name) {
      if (t.shape() != value.shape()) {
        throw ad::ShapeError("parameter " + name + ": expected " + ad::to_string(t.shape()) + ", got " +
                             ad::to_string(value.shape()));
      }
      t = value.detached();
      return;
    }
  }
  throw std::out_of_range("no parameter named " + name);
}

std::int64_t ModelParams::count() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

ParamView ModelParams::view(ad::Tape* tape) const {
  ParamView v;
  for (const auto& [name, t] : entries_) v.emplace(name, tape ? tape->watch(t, name) : t);
  return v;
}

}  // namespace coperc::models
