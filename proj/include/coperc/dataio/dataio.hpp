#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <future>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coperc/ids.hpp"
#include "coperc/scene/geometry.hpp"
#include "coperc/scene/scene.hpp"

namespace coperc::dataio {

inline constexpr int kFormatVersion = 1;
/// Point record on disk: x, y, intensity as little-endian float32.
inline constexpr std::size_t kPointRecordBytes = 12;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SensorParams {
  int n_rays = 0;
  double max_range = 0.0;
  double noise_sigma = 0.0;
};

struct CavMeta {
  CavId id = 0;
  Pose pose;
  SensorParams sensor;
  std::string point_file;  // relative to the meta file's directory
  std::int64_t num_points = 0;
  std::vector<ObjectBox> local_annotations;   // CAV frame
  std::vector<ObjectBox> global_annotations;  // world frame
};

struct FrameMeta {
  int frame = 0;
  double timestamp = 0.0;
  CavId ego = 0;
  std::vector<CavMeta> cavs;
};

/// Parsed meta JSON of one scenario.
struct MetaDict {
  int format_version = kFormatVersion;
  std::string scenario_id;
  std::uint64_t seed = 0;
  MapExtent extent;
  std::vector<FrameMeta> frames;
  std::filesystem::path base_dir;  // directory of the meta file
};

nlohmann::json to_json(const MetaDict& meta);
MetaDict meta_from_json(const nlohmann::json& j);

std::string scenario_id_for(std::uint64_t seed);

/// Writes `<out>/<id>.json` plus one point file per (frame, CAV) under
/// `<out>/<id>/`. Returns the meta that was written.
MetaDict export_scenario(const Scenario& scenario, const std::filesystem::path& out_dir);

void write_points(const std::filesystem::path& path, const std::vector<LidarPoint>& points);
std::vector<LidarPoint> decode_points(const std::string& bytes, const std::string& path_for_errors);

/// One CAV of a served frame; the cloud is in the CAV's sensor frame.
struct CavFrame {
  CavId id = 0;
  Pose pose;
  SensorParams sensor;
  PointCloud cloud;
  std::vector<ObjectBox> local_annotations;
  std::vector<ObjectBox> global_annotations;
};

struct FrameSample {
  std::string scenario_id;
  int frame = 0;
  double timestamp = 0.0;
  CavId ego = 0;
  std::vector<CavFrame> cavs;

  const CavFrame& cav(CavId id) const;
  /// Union of all CAVs' global annotations (deduplicated by id), ego body
  /// excluded.
  std::vector<ObjectBox> global_boxes() const;
};

/// The sample the loader would serve for `frame` of an exported scenario,
/// built in memory (clouds not quantized to float32).
FrameSample make_sample(const Scenario& scenario, int frame);

struct FrameBatch {
  std::vector<FrameSample> frames;
};

/// Reads a whole file; injectable so tests can observe file access.
using FileReader = std::function<std::string(const std::filesystem::path&)>;
FileReader default_reader();

using WarningSink = std::function<void(const std::string&)>;

struct LoaderOptions {
  std::size_t batch_size = 2;
  std::optional<std::uint64_t> shuffle_seed;
  bool strict = true;
  /// Frames loaded ahead of consumption; 0 loads on demand.
  std::size_t prefetch = 0;
  FileReader reader;
  WarningSink warn;
};

/// Lazy, deterministic stream of FrameBatches over a set of meta files.
/// Meta JSON is parsed up front; point files are read when a frame is served.
class FrameLoader {
 public:
  FrameLoader(std::vector<std::filesystem::path> meta_paths, LoaderOptions options);
  ~FrameLoader();
  FrameLoader(const FrameLoader&) = delete;
  FrameLoader& operator=(const FrameLoader&) = delete;

  std::size_t num_frames() const { return order_.size(); }
  std::size_t num_batches() const;

  /// Starts a new pass; with a shuffle seed, epoch e uses a permutation derived
  /// from (seed, e).
  void reset(std::uint64_t epoch = 0);
  std::optional<FrameBatch> next();

  const std::vector<MetaDict>& metas() const { return metas_; }

 private:
  struct Ref {
    std::size_t meta;
    std::size_t frame;
  };

  std::optional<FrameSample> load(const Ref& ref) const;
  void fill_prefetch();

  std::vector<MetaDict> metas_;
  std::vector<Ref> refs_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  LoaderOptions options_;
  std::deque<std::future<std::optional<FrameSample>>> pending_;
};

/// Lists `*.json` meta files of a directory in lexical order.
std::vector<std::filesystem::path> list_meta_files(const std::filesystem::path& dir);

}  // namespace coperc::dataio
