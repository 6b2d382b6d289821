#include "coperc/dataio/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "coperc/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace coperc::dataio {
namespace {

json box_json(const ObjectBox& b) {
  return {{"id", b.id}, {"center", {b.center.x, b.center.y}}, {"size", {b.length, b.width}}, {"yaw", b.yaw}};
}

ObjectBox box_from(const json& j) {
  ObjectBox b;
  b.id = j.at("id").get<int>();
  b.center = {j.at("center").at(0).get<double>(), j.at("center").at(1).get<double>()};
  b.length = j.at("size").at(0).get<double>();
  b.width = j.at("size").at(1).get<double>();
  b.yaw = j.at("yaw").get<double>();
  if (!(b.length > 0.0 && b.width > 0.0)) throw DataError("annotation " + std::to_string(b.id) + " has non-positive size");
  return b;
}

std::vector<ObjectBox> boxes_from(const json& j) {
  std::vector<ObjectBox> out;
  for (const auto& e : j) out.push_back(box_from(e));
  return out;
}

json boxes_json(const std::vector<ObjectBox>& boxes) {
  json arr = json::array();
  for (const auto& b : boxes) arr.push_back(box_json(b));
  return arr;
}

void put_f32(std::string& out, float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

float get_f32(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

// Objects within sensor range of a CAV, its own body excluded.
void annotate(const std::vector<ObjectBox>& objects, CavId self, const Pose& pose, double range,
              std::vector<ObjectBox>& local, std::vector<ObjectBox>& global) {
  for (const auto& b : objects) {
    if (b.id == self) continue;
    if (distance(Pose{b.center.x, b.center.y, 0.0}, pose) > range) continue;
    global.push_back(b);
    local.push_back(b.to_local(pose));
  }
}

}  // namespace

FrameSample make_sample(const Scenario& scenario, int frame) {
  if (frame < 0 || frame >= scenario.frames()) throw DataError("frame " + std::to_string(frame) + " out of range");
  const auto& lidar = scenario.config.lidar;
  FrameSample s;
  s.scenario_id = scenario_id_for(scenario.seed);
  s.frame = frame;
  s.timestamp = scenario.timestamp(frame);
  s.ego = scenario.ego;
  for (const auto& cav : scenario.cavs) {
    CavFrame cf;
    cf.id = cav.id;
    cf.pose = cav.poses[static_cast<std::size_t>(frame)];
    cf.sensor = {lidar.n_rays, lidar.max_range, lidar.noise_sigma};
    cf.cloud = simulate_lidar(scenario, frame, cav.id, lidar);
    annotate(scenario.objects[static_cast<std::size_t>(frame)], cav.id, cf.pose, lidar.max_range,
             cf.local_annotations, cf.global_annotations);
    s.cavs.push_back(std::move(cf));
  }
  return s;
}

std::string scenario_id_for(std::uint64_t seed) {
  std::ostringstream os;
  os << "scn_" << seed;
  return os.str();
}

json to_json(const MetaDict& meta) {
  json frames = json::array();
  for (const auto& f : meta.frames) {
    json cavs = json::array();
    for (const auto& c : f.cavs) {
      cavs.push_back({
          {"id", c.id},
          {"pose", {{"x", c.pose.x}, {"y", c.pose.y}, {"yaw", c.pose.yaw}}},
          {"sensor",
           {{"type", "lidar2d"},
            {"n_rays", c.sensor.n_rays},
            {"max_range", c.sensor.max_range},
            {"noise_sigma", c.sensor.noise_sigma}}},
          {"points", c.point_file},
          {"num_points", c.num_points},
          {"local_annotations", boxes_json(c.local_annotations)},
          {"global_annotations", boxes_json(c.global_annotations)},
      });
    }
    frames.push_back({{"frame", f.frame}, {"timestamp", f.timestamp}, {"ego", f.ego}, {"cavs", std::move(cavs)}});
  }
  return {
      {"format_version", meta.format_version},
      {"scenario_id", meta.scenario_id},
      {"seed", meta.seed},
      {"map_extent", {{"half_length", meta.extent.half_length}, {"half_width", meta.extent.half_width}}},
      {"frames", std::move(frames)},
  };
}

MetaDict meta_from_json(const json& j) {
  MetaDict m;
  m.format_version = j.at("format_version").get<int>();
  if (m.format_version != kFormatVersion) {
    throw DataError("unsupported format_version " + std::to_string(m.format_version));
  }
  m.scenario_id = j.at("scenario_id").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.extent.half_length = j.at("map_extent").at("half_length").get<double>();
  m.extent.half_width = j.at("map_extent").at("half_width").get<double>();
  for (const auto& jf : j.at("frames")) {
    FrameMeta f;
    f.frame = jf.at("frame").get<int>();
    f.timestamp = jf.at("timestamp").get<double>();
    f.ego = jf.at("ego").get<int>();
    int egos = 0;
    for (const auto& jc : jf.at("cavs")) {
      CavMeta c;
      c.id = jc.at("id").get<int>();
      const auto& p = jc.at("pose");
      c.pose = {p.at("x").get<double>(), p.at("y").get<double>(), p.at("yaw").get<double>()};
      if (!std::isfinite(c.pose.x) || !std::isfinite(c.pose.y) || !std::isfinite(c.pose.yaw)) {
        throw DataError("non-finite pose for CAV " + std::to_string(c.id));
      }
      const auto& s = jc.at("sensor");
      c.sensor = {s.at("n_rays").get<int>(), s.at("max_range").get<double>(), s.value("noise_sigma", 0.0)};
      c.point_file = jc.at("points").get<std::string>();
      c.num_points = jc.value("num_points", std::int64_t{-1});
      c.local_annotations = boxes_from(jc.at("local_annotations"));
      c.global_annotations = boxes_from(jc.at("global_annotations"));
      egos += c.id == f.ego;
      f.cavs.push_back(std::move(c));
    }
    if (egos != 1) throw DataError("frame " + std::to_string(f.frame) + " must name exactly one ego present in its CAV list");
    m.frames.push_back(std::move(f));
  }
  return m;
}

void write_points(const fs::path& path, const std::vector<LidarPoint>& points) {
  std::string bytes;
  bytes.reserve(points.size() * kPointRecordBytes);
  for (const auto& p : points) {
    put_f32(bytes, static_cast<float>(p.x));
    put_f32(bytes, static_cast<float>(p.y));
    put_f32(bytes, static_cast<float>(p.intensity));
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("failed writing " + path.string());
}

std::vector<LidarPoint> decode_points(const std::string& bytes, const std::string& path_for_errors) {
  if (bytes.size() % kPointRecordBytes != 0) {
    throw DataError("point file " + path_for_errors + " has " + std::to_string(bytes.size()) +
                    " bytes, not a multiple of " + std::to_string(kPointRecordBytes));
  }
  std::vector<LidarPoint> out(bytes.size() / kPointRecordBytes);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const char* p = bytes.data() + i * kPointRecordBytes;
    out[i] = {get_f32(p), get_f32(p + 4), get_f32(p + 8)};
  }
  return out;
}

MetaDict export_scenario(const Scenario& scenario, const fs::path& out_dir) {
  MetaDict meta;
  meta.scenario_id = scenario_id_for(scenario.seed);
  meta.seed = scenario.seed;
  meta.extent = scenario.config.extent;
  meta.base_dir = out_dir;

  std::error_code ec;
  fs::create_directories(out_dir / meta.scenario_id, ec);
  if (ec) throw DataError("cannot create " + (out_dir / meta.scenario_id).string() + ": " + ec.message());

  const auto& lidar = scenario.config.lidar;
  for (int f = 0; f < scenario.frames(); ++f) {
    FrameMeta fm;
    fm.frame = f;
    fm.timestamp = scenario.timestamp(f);
    fm.ego = scenario.ego;
    const auto& objects = scenario.objects[static_cast<std::size_t>(f)];
    for (const auto& cav : scenario.cavs) {
      CavMeta cm;
      cm.id = cav.id;
      cm.pose = cav.poses[static_cast<std::size_t>(f)];
      cm.sensor = {lidar.n_rays, lidar.max_range, lidar.noise_sigma};
      char name[64];
      std::snprintf(name, sizeof(name), "f%03d_cav%d.bin", f, cav.id);
      cm.point_file = (fs::path(meta.scenario_id) / name).generic_string();
      auto cloud = simulate_lidar(scenario, f, cav.id, lidar);
      cm.num_points = static_cast<std::int64_t>(cloud.size());
      write_points(out_dir / cm.point_file, cloud.points);
      annotate(objects, cav.id, cm.pose, lidar.max_range, cm.local_annotations, cm.global_annotations);
      fm.cavs.push_back(std::move(cm));
    }
    meta.frames.push_back(std::move(fm));
  }

  const auto meta_path = out_dir / (meta.scenario_id + ".json");
  std::ofstream os(meta_path, std::ios::trunc);
  if (!os) throw DataError("cannot open " + meta_path.string() + " for writing");
  os << to_json(meta).dump(1) << '\n';
  if (!os) throw DataError("failed writing " + meta_path.string());
  return meta;
}

const CavFrame& FrameSample::cav(CavId id) const {
  for (const auto& c : cavs) {
    if (c.id == id) return c;
  }
  throw DataError("frame " + std::to_string(frame) + " of " + scenario_id + " has no CAV " + std::to_string(id));
}

std::vector<ObjectBox> FrameSample::global_boxes() const {
  std::vector<ObjectBox> out;
  std::set<int> seen;
  for (const auto& c : cavs) {
    for (const auto& b : c.global_annotations) {
      if (b.id == ego || !seen.insert(b.id).second) continue;
      out.push_back(b);
    }
  }
  std::sort(out.begin(), out.end(), [](const ObjectBox& a, const ObjectBox& b) { return a.id < b.id; });
  return out;
}

FileReader default_reader() {
  return [](const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
  };
}

std::vector<fs::path> list_meta_files(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".json") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

FrameLoader::FrameLoader(std::vector<fs::path> meta_paths, LoaderOptions options) : options_(std::move(options)) {
  if (options_.batch_size == 0) throw DataError("batch_size must be positive");
  if (!options_.reader) options_.reader = default_reader();
  if (!options_.warn) options_.warn = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
  for (const auto& path : meta_paths) {
    try {
      auto meta = meta_from_json(json::parse(options_.reader(path)));
      meta.base_dir = path.parent_path();
      metas_.push_back(std::move(meta));
    } catch (const std::exception& e) {
      const std::string msg = "meta file " + path.string() + ": " + e.what();
      if (options_.strict) throw DataError(msg);
      options_.warn("skipping " + msg);
    }
  }
  for (std::size_t m = 0; m < metas_.size(); ++m) {
    for (std::size_t f = 0; f < metas_[m].frames.size(); ++f) refs_.push_back({m, f});
  }
  reset(0);
}

FrameLoader::~FrameLoader() {
  for (auto& p : pending_) {
    if (p.valid()) p.wait();
  }
}

std::size_t FrameLoader::num_batches() const {
  return (order_.size() + options_.batch_size - 1) / options_.batch_size;
}

void FrameLoader::reset(std::uint64_t epoch) {
  for (auto& p : pending_) {
    if (p.valid()) p.wait();
  }
  pending_.clear();
  order_.resize(refs_.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  if (options_.shuffle_seed) {
    Rng rng(Rng::derive(*options_.shuffle_seed, epoch));
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.below(i)]);
  }
  cursor_ = 0;
}

std::optional<FrameSample> FrameLoader::load(const Ref& ref) const {
  const auto& meta = metas_[ref.meta];
  const auto& fm = meta.frames[ref.frame];
  FrameSample s;
  s.scenario_id = meta.scenario_id;
  s.frame = fm.frame;
  s.timestamp = fm.timestamp;
  s.ego = fm.ego;
  for (const auto& cm : fm.cavs) {
    const auto path = meta.base_dir / cm.point_file;
    CavFrame cf;
    cf.id = cm.id;
    cf.pose = cm.pose;
    cf.sensor = cm.sensor;
    cf.local_annotations = cm.local_annotations;
    cf.global_annotations = cm.global_annotations;
    try {
      cf.cloud.points = decode_points(options_.reader(path), path.string());
    } catch (const std::exception& e) {
      if (options_.strict) throw DataError(std::string("point file ") + path.string() + ": " + e.what());
      options_.warn("skipping frame " + std::to_string(fm.frame) + " of " + meta.scenario_id + ": " + e.what());
      return std::nullopt;
    }
    cf.cloud.frame_pose = cm.pose;
    cf.cloud.max_range = cm.sensor.max_range;
    s.cavs.push_back(std::move(cf));
  }
  return s;
}

void FrameLoader::fill_prefetch() {
  while (pending_.size() < std::max<std::size_t>(options_.prefetch, 1) && cursor_ < order_.size()) {
    const Ref ref = refs_[order_[cursor_++]];
    if (options_.prefetch == 0) {
      std::promise<std::optional<FrameSample>> done;
      try {
        done.set_value(load(ref));
      } catch (...) {
        done.set_exception(std::current_exception());
      }
      pending_.push_back(done.get_future());
    } else {
      pending_.push_back(std::async(std::launch::async, [this, ref] { return load(ref); }));
    }
  }
}

std::optional<FrameBatch> FrameLoader::next() {
  FrameBatch batch;
  while (batch.frames.size() < options_.batch_size) {
    fill_prefetch();
    if (pending_.empty()) break;
    auto f = std::move(pending_.front());
    pending_.pop_front();
    auto sample = f.get();
    if (sample) batch.frames.push_back(std::move(*sample));
  }
  if (batch.frames.empty()) return std::nullopt;
  return batch;
}

}  // namespace coperc::dataio
