// Python extension: scenario generation and loading, train/test/vis runs,
// evaluation geometry and the control-message parser.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "coperc/autodiff/ops.hpp"
#include "coperc/dataio/dataio.hpp"
#include "coperc/models/checkpoint.hpp"
#include "coperc/models/model.hpp"
#include "coperc/service/protocol.hpp"
#include "coperc/train/eval.hpp"
#include "coperc/train/runner.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace coperc;

namespace {

// (x, y, length, width, yaw)
using BoxTuple = std::tuple<double, double, double, double, double>;

ObjectBox to_box(const BoxTuple& t) {
  ObjectBox b;
  b.center = {std::get<0>(t), std::get<1>(t)};
  b.length = std::get<2>(t);
  b.width = std::get<3>(t);
  b.yaw = std::get<4>(t);
  return b;
}

py::dict box_dict(const ObjectBox& b) {
  py::dict d;
  d["id"] = b.id;
  d["x"] = b.center.x;
  d["y"] = b.center.y;
  d["length"] = b.length;
  d["width"] = b.width;
  d["yaw"] = b.yaw;
  return d;
}

py::array_t<double> points_array(const std::vector<LidarPoint>& pts) {
  py::array_t<double> a({static_cast<py::ssize_t>(pts.size()), static_cast<py::ssize_t>(3)});
  auto m = a.mutable_unchecked<2>();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    m(i, 0) = pts[i].x;
    m(i, 1) = pts[i].y;
    m(i, 2) = pts[i].intensity;
  }
  return a;
}

py::dict frame_dict(const dataio::FrameSample& s) {
  py::dict d;
  d["scenario_id"] = s.scenario_id;
  d["frame"] = s.frame;
  d["timestamp"] = s.timestamp;
  d["ego"] = s.ego;
  py::list cavs;
  for (const auto& c : s.cavs) {
    py::dict cd;
    cd["id"] = c.id;
    cd["pose"] = py::make_tuple(c.pose.x, c.pose.y, c.pose.yaw);
    cd["points"] = points_array(c.cloud.points);
    py::list boxes;
    for (const auto& b : c.local_annotations) boxes.append(box_dict(b));
    cd["local_annotations"] = boxes;
    cavs.append(cd);
  }
  d["cavs"] = cavs;
  return d;
}

py::object from_json(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

}  // namespace

PYBIND11_MODULE(_coperc, m) {
  m.doc() = "collective perception training framework";

  m.def(
      "generate",
      [](std::uint64_t seed, const fs::path& out_dir, int n_cavs, int frames, int objects) {
        ScenarioConfig cfg;
        cfg.n_cavs = n_cavs;
        cfg.frames = frames;
        cfg.n_objects = objects;
        const auto meta = dataio::export_scenario(generate_scenario(seed, cfg), out_dir);
        return out_dir / (meta.scenario_id + ".json");
      },
      py::arg("seed"), py::arg("out_dir"), py::arg("n_cavs") = 3, py::arg("frames") = 4, py::arg("objects") = 12,
      "Generates one scenario and exports it; returns the meta file path.");

  m.def(
      "load_frames",
      [](const std::vector<fs::path>& metas) {
        dataio::FrameLoader loader(metas, {.batch_size = 1});
        py::list out;
        while (auto batch = loader.next())
          for (const auto& f : batch->frames) out.append(frame_dict(f));
        return out;
      },
      py::arg("meta_paths"), "Loads every frame of the given meta files in order.");

  m.def("list_meta_files", &dataio::list_meta_files, py::arg("directory"));

  m.def(
      "run",
      [](const std::string& mode, const std::string& config_text, const fs::path& base_dir) {
        const auto cfg = train::parse_config(config_text, base_dir);
        const auto m = agent::parse_mode(mode);
        nlohmann::json summary;
        {
          py::gil_scoped_release release;
          summary = train::run_mode(m, cfg);
        }
        return from_json(summary);
      },
      py::arg("mode"), py::arg("config"), py::arg("base_dir") = fs::path(),
      "Runs train, test or vis from config text; returns the run summary.");

  m.def(
      "normalize_config",
      [](const std::string& config_text, const fs::path& base_dir) {
        return train::to_text(train::parse_config(config_text, base_dir));
      },
      py::arg("config"), py::arg("base_dir") = fs::path(), "Parses and validates config text; returns it in full.");

  m.def(
      "rotated_iou", [](const BoxTuple& a, const BoxTuple& b) { return train::rotated_iou(to_box(a), to_box(b)); },
      py::arg("a"), py::arg("b"), "IoU of two (x, y, length, width, yaw) boxes.");

  m.def(
      "average_precision",
      [](const std::vector<std::pair<std::vector<std::pair<BoxTuple, double>>, std::vector<BoxTuple>>>& frames,
         double iou_threshold) {
        std::vector<train::EvalFrame> ef;
        for (const auto& [preds, gt] : frames) {
          train::EvalFrame f;
          for (const auto& [b, s] : preds) f.predictions.push_back({to_box(b), s});
          for (const auto& b : gt) f.gt.push_back(to_box(b));
          ef.push_back(std::move(f));
        }
        const auto r = train::average_precision(ef, iou_threshold);
        py::dict d;
        d["ap"] = r.ap;
        d["true_positives"] = r.true_positives;
        d["false_positives"] = r.false_positives;
        d["false_negatives"] = r.false_negatives;
        return d;
      },
      py::arg("frames"), py::arg("iou_threshold"),
      "frames: [(predictions [(box, score)], gt [box])]; boxes are (x, y, length, width, yaw).");

  m.def(
      "nms",
      [](const std::vector<std::pair<BoxTuple, double>>& boxes, double iou_threshold) {
        std::vector<models::ScoredBox> in;
        for (const auto& [b, s] : boxes) in.push_back({to_box(b), s});
        std::vector<std::pair<BoxTuple, double>> out;
        for (const auto& k : train::nms(std::move(in), iou_threshold))
          out.push_back({{k.box.center.x, k.box.center.y, k.box.length, k.box.width, k.box.yaw}, k.score});
        return out;
      },
      py::arg("boxes"), py::arg("iou_threshold") = 0.3);

  m.def(
      "encoder_grad_slots",
      [](const std::string& fusion, int agents, int n_grad, int h, int w, int d, std::uint64_t seed) {
        models::ModelConfig cfg;
        cfg.grid = {0.0, static_cast<double>(w), 0.0, static_cast<double>(h), 1.0};
        cfg.d = d;
        cfg.fusion = models::parse_fusion(fusion);
        if (n_grad < 1 || n_grad > agents) throw std::invalid_argument("need 1 <= n_grad <= agents");
        models::ModelParams params(cfg, seed);
        Rng rng(seed);
        ad::Tape tape;
        const auto pv = params.view(&tape);
        std::vector<models::BevFeatureMap> maps;
        for (int a = 0; a < agents; ++a) {
          std::vector<double> v(static_cast<std::size_t>(h * w * d));
          for (auto& x : v) x = rng.uniform();
          ad::Tensor t({h, w, d}, std::move(v));
          if (a < n_grad) {
            t = tape.watch(t);
            tape.mark(t, "encoder_output");
          }
          maps.push_back({t});
        }
        std::vector<std::vector<std::uint8_t>> valid;
        for (const auto& mp : maps) valid.push_back(models::nonzero_cells(mp));
        models::BevFeatureMap fused;
        switch (cfg.fusion) {
          case models::FusionKind::kAttention: fused = models::fuse_attention(maps, 0, pv); break;
          case models::FusionKind::kMaxout: fused = models::fuse_maxout(maps); break;
          case models::FusionKind::kNaive: fused = models::fuse_naive(maps, valid, rng); break;
        }
        auto grads = tape.backward(ad::sum(fused.grid));
        return tape.count_tracked("encoder_output", grads).grad_entries;
      },
      py::arg("fusion"), py::arg("agents"), py::arg("n_grad"), py::arg("h") = 16, py::arg("w") = 16, py::arg("d") = 8,
      py::arg("seed") = 0, "Encoder-output gradient slots after fusing random maps and back-propagating.");

  m.def(
      "parse_control",
      [](const std::string& text) { return from_json(service::to_json(service::parse_control(text))); },
      py::arg("text"), "Validates one control message; raises ValueError when malformed.");

  py::register_exception<dataio::DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<train::ConfigError>(m, "ConfigError", PyExc_ValueError);
}
