#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "spongelab/error.hpp"
#include "spongelab/evaluation.hpp"
#include "spongelab/gradcheck.hpp"
#include "spongelab/model.hpp"
#include "spongelab/streaming.hpp"
#include "spongelab/synthetic.hpp"
#include "spongelab/trainer.hpp"

namespace py = pybind11;
using namespace spongelab;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Tensor from_numpy(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

VideoTensor video_from_numpy(const Array& a) {
  if (a.ndim() != 4) throw ShapeError("video must have shape (T, H, W, C)");
  return VideoTensor(from_numpy(a));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Sponge-patch laboratory: toy video-language victim, universal patch training, streaming simulation";

  // Translators run newest first, so the subclass is registered last.
  py::register_exception<Error>(m, "SpongelabError", PyExc_RuntimeError);
  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);

  m.def(
      "gen_video",
      [](std::uint64_t seed, const std::string& label, const std::string& domain) {
        return to_numpy(gen_video(seed, parse_label(label), parse_domain(domain)).video.pixels());
      },
      py::arg("seed"), py::arg("label") = "YES", py::arg("domain") = "A",
      "One synthetic clip as a (T, H, W, C) array in [0, 1].");

  m.def(
      "gen_stream",
      [](int n_frames, std::uint64_t seed, const std::string& domain) {
        return to_numpy(gen_stream(n_frames, seed, parse_domain(domain)).pixels());
      },
      py::arg("n_frames"), py::arg("seed"), py::arg("domain") = "A");

  py::class_<ModelParams>(m, "Model")
      .def_static(
          "init", [](std::uint64_t seed) { return ModelParams::init(ModelConfig{}, seed); },
          py::arg("seed"), "Randomly initialized default-size model.")
      .def_static(
          "load", [](const std::filesystem::path& dir) { return load_params(dir); },
          py::arg("path"))
      .def("save", [](const ModelParams& p, const std::filesystem::path& dir) { save_params(dir, p); })
      .def_property_readonly("parameter_count", &ModelParams::parameter_count)
      .def(
          "generate",
          [](const ModelParams& p, const Array& video, int max_new_tokens, double temperature,
             std::uint64_t seed) {
            DecodeConfig dc;
            dc.max_new_tokens = max_new_tokens;
            dc.temperature = temperature;
            dc.seed = seed;
            return generate(p, video_from_numpy(video), kDefaultPrompt, dc).tokens;
          },
          py::arg("video"), py::arg("max_new_tokens") = kDefaultMaxNewTokens,
          py::arg("temperature") = 0.0, py::arg("seed") = 0,
          "Answer the default question about a clip; returns generated token ids.");

  m.def(
      "train_patch",
      [](const ModelParams& victim, const std::vector<Array>& videos, int epochs, int size,
         std::uint64_t seed) {
        TrainConfig cfg;
        cfg.epochs = epochs;
        cfg.patch_h = cfg.patch_w = size;
        cfg.seed = seed;
        std::vector<VideoTensor> vs;
        for (const auto& v : videos) vs.push_back(video_from_numpy(v));
        UniversalResult result;
        {
          py::gil_scoped_release release;
          result = train_universal(vs, victim, cfg);
        }
        return py::make_tuple(to_numpy(result.trigger.patch.delta), result.log.epoch_mean_total);
      },
      py::arg("victim"), py::arg("videos"), py::arg("epochs") = 30, py::arg("size") = 8,
      py::arg("seed") = 0,
      "Train a universal patch at the bottom-right corner; returns (patch, per-epoch mean loss).");

  m.def(
      "apply_patch",
      [](const Array& video, const Array& patch, int row, int col) {
        return to_numpy(apply_patch(video_from_numpy(video), from_numpy(patch), row, col).pixels());
      },
      py::arg("video"), py::arg("patch"), py::arg("row"), py::arg("col"));

  m.def(
      "cum_latency",
      [](const std::vector<double>& raw, double interval) { return cum_latency(raw, interval); },
      py::arg("raw"), py::arg("interval") = 0.5);

  m.def(
      "first_violation",
      [](const std::vector<double>& cum, double total, double human) {
        return safety_violations(cum, SafetyBudget{total, human}).first;
      },
      py::arg("cum"), py::arg("total") = 5.0, py::arg("human") = 2.72,
      "1-based index of the first decision over the safety budget, or None.");

  m.def(
      "gradcheck",
      [](std::uint64_t seed) {
        const auto r = run_gradcheck(seed);
        return py::make_tuple(r.passed, r.max_rel_error);
      },
      py::arg("seed") = 7, "Finite-difference check of every primitive and the joint loss.");
}
