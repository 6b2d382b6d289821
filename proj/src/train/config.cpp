#include "coperc/train/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <type_traits>
#include <algorithm>

namespace fs = std::filesystem;

namespace coperc::train {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double to_double(const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("not a number: '" + v + "'");
  return out;
}

std::int64_t to_int(const std::string& v) {
  std::int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("not an integer: '" + v + "'");
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("not a boolean: '" + v + "'");
}

// Shortest text that parses back to the same double.
std::string num(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

struct Field {
  const char* key;
  std::function<void(TrainConfig&, const std::string&, const fs::path&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

fs::path resolve(const std::string& v, const fs::path& base) {
  fs::path p(v);
  return p.is_relative() && !base.empty() ? base / p : p;
}

#define NUM_FIELD(name, member, conv)                                                              \
  Field {                                                                                          \
    name, [](TrainConfig& c, const std::string& v, const fs::path&) { c.member = static_cast<std::remove_cvref_t<decltype(c.member)>>(conv(v)); },       \
        [](const TrainConfig& c) { return num(static_cast<double>(c.member)); }                    \
  }
#define PATH_FIELD(name, member)                                                                   \
  Field {                                                                                          \
    name, [](TrainConfig& c, const std::string& v, const fs::path& b) { c.member = resolve(v, b); }, \
        [](const TrainConfig& c) { return c.member.string(); }                                     \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> f{
      NUM_FIELD("epochs", epochs, to_int),
      NUM_FIELD("batch_size", batch_size, to_int),
      NUM_FIELD("lr", lr, to_double),
      NUM_FIELD("weight_decay", weight_decay, to_double),
      Field{"lr_drops",
            [](TrainConfig& c, const std::string& v, const fs::path&) {
              c.lr_drops.clear();
              std::stringstream ss(v);
              std::string item;
              while (std::getline(ss, item, ',')) {
                item = trim(item);
                if (!item.empty()) c.lr_drops.push_back(static_cast<int>(to_int(item)));
              }
            },
            [](const TrainConfig& c) {
              std::string s;
              for (std::size_t i = 0; i < c.lr_drops.size(); ++i) s += (i ? "," : "") + std::to_string(c.lr_drops[i]);
              return s;
            }},
      NUM_FIELD("lr_drop_factor", lr_drop_factor, to_double),
      Field{"ngrad", [](TrainConfig& c, const std::string& v, const fs::path&) { c.ngrad = GradPolicy::parse(v); },
            [](const TrainConfig& c) { return c.ngrad.to_string(); }},
      NUM_FIELD("seed", seed, to_int),
      Field{"fusion",
            [](TrainConfig& c, const std::string& v, const fs::path&) { c.model.fusion = models::parse_fusion(v); },
            [](const TrainConfig& c) { return models::to_string(c.model.fusion); }},
      NUM_FIELD("feature_dim", model.d, to_int),
      NUM_FIELD("max_points", model.max_points, to_int),
      NUM_FIELD("cls_bias_init", model.cls_bias_init, to_double),
      NUM_FIELD("grid_x_min", model.grid.x_min, to_double),
      NUM_FIELD("grid_x_max", model.grid.x_max, to_double),
      NUM_FIELD("grid_y_min", model.grid.y_min, to_double),
      NUM_FIELD("grid_y_max", model.grid.y_max, to_double),
      NUM_FIELD("grid_cell", model.grid.cell, to_double),
      NUM_FIELD("comm_range", comm_range, to_double),
      NUM_FIELD("max_cooperators", max_cooperators, to_int),
      NUM_FIELD("min_box_points", min_box_points, to_int),
      Field{"box_points",
            [](TrainConfig& c, const std::string& v, const fs::path&) {
              if (v != "fused" && v != "ego") throw ConfigError("expected 'fused' or 'ego', got '" + v + "'");
              c.box_points_ego_only = v == "ego";
            },
            [](const TrainConfig& c) { return std::string(c.box_points_ego_only ? "ego" : "fused"); }},
      Field{"augment", [](TrainConfig& c, const std::string& v, const fs::path&) { c.augment.enabled = to_bool(v); },
            [](const TrainConfig& c) { return std::string(c.augment.enabled ? "true" : "false"); }},
      NUM_FIELD("aug_max_rotation", augment.max_rotation, to_double),
      Field{"aug_flip", [](TrainConfig& c, const std::string& v, const fs::path&) { c.augment.flip = to_bool(v); },
            [](const TrainConfig& c) { return std::string(c.augment.flip ? "true" : "false"); }},
      NUM_FIELD("aug_scale_min", augment.scale_min, to_double),
      NUM_FIELD("aug_scale_max", augment.scale_max, to_double),
      NUM_FIELD("reg_weight", reg_weight, to_double),
      NUM_FIELD("score_threshold", score_threshold, to_double),
      NUM_FIELD("nms_iou", nms_iou, to_double),
      PATH_FIELD("train_data", train_data),
      PATH_FIELD("test_data", test_data),
      PATH_FIELD("out_dir", out_dir),
      PATH_FIELD("checkpoint", checkpoint),
      NUM_FIELD("max_frames", max_frames, to_int),
  };
  return f;
}

void validate(const TrainConfig& c) {
  if (c.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(c.lr > 0.0)) throw ConfigError("lr must be > 0");
  if (c.weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (c.model.d < 1) throw ConfigError("feature_dim must be >= 1");
  if (c.model.max_points < 1) throw ConfigError("max_points must be >= 1");
  if (!(c.comm_range > 0.0)) throw ConfigError("comm_range must be > 0");
  if (c.augment.scale_min > c.augment.scale_max) throw ConfigError("aug_scale_min exceeds aug_scale_max");
  try {
    c.model.grid.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

controller::ControllerConfig TrainConfig::controller_config() const {
  controller::ControllerConfig c;
  c.model = model;
  c.comm_range = comm_range;
  c.max_cooperators = max_cooperators;
  c.policy = ngrad;
  c.min_box_points = min_box_points;
  c.box_points_ego_only = box_points_ego_only;
  c.reg_weight = reg_weight;
  return c;
}

fs::path TrainConfig::checkpoint_path() const { return checkpoint.empty() ? out_dir / "model.ckpt" : checkpoint; }

TrainConfig parse_config(const std::string& text, const fs::path& base_dir) {
  TrainConfig c;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    const auto& fs_ = fields();
    auto it = std::find_if(fs_.begin(), fs_.end(), [&](const Field& f) { return key == f.key; });
    if (it == fs_.end()) throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    try {
      it->set(c, value, base_dir);
    } catch (const std::exception& e) {
      throw ConfigError("line " + std::to_string(lineno) + " (" + key + "): " + e.what());
    }
  }
  validate(c);
  return c;
}

TrainConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path.parent_path());
}

std::string to_text(const TrainConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(config) + "\n";
  return out;
}

}  // namespace coperc::train
