#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "ovseg/commands.hpp"
#include "ovseg/config.hpp"
#include "ovseg/distill.hpp"
#include "ovseg/encoder.hpp"
#include "ovseg/head.hpp"
#include "ovseg/image.hpp"
#include "ovseg/params.hpp"
#include "ovseg/pipeline.hpp"
#include "ovseg/upsampler.hpp"

namespace py = pybind11;
using namespace ovseg;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const F64& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

SegmentationMask to_mask(const U8& a) {
  if (a.ndim() != 2) throw DimensionError("mask must be a 2-D uint8 array");
  SegmentationMask m(static_cast<std::size_t>(a.shape(1)), static_cast<std::size_t>(a.shape(0)));
  std::copy(a.data(), a.data() + a.size(), m.labels.begin());
  return m;
}

py::array_t<std::uint8_t> from_mask(const SegmentationMask& m) {
  py::array_t<std::uint8_t> out({static_cast<py::ssize_t>(m.height), static_cast<py::ssize_t>(m.width)});
  std::copy(m.labels.begin(), m.labels.end(), out.mutable_data());
  return out;
}

RunConfig config_from(const py::dict& overrides) {
  RunConfig rc;
  for (const auto& [k, v] : overrides) rc.set(py::str(k), py::str(v));
  return rc;
}

JbuParams jbu_from(const py::object& weights, std::uint64_t seed, std::size_t radius, double tau_s, double tau_r) {
  if (weights.is_none()) return JbuParams::init(seed, radius, 32, tau_s, tau_r);
  return UpsamplerParams::from_params(load_ovw1(weights.cast<std::string>())).jbu;
}

int run_command(const std::string& name, const py::dict& overrides, const std::string& workdir) {
  CommandContext ctx;
  ctx.config = config_from(overrides);
  ctx.workdir = workdir;
  std::ostringstream log;
  ctx.log = &log;
  int (*fn)(const CommandContext&) = nullptr;
  if (name == "train-upsampler") fn = cmd_train_upsampler;
  else if (name == "distill") fn = cmd_distill;
  else if (name == "segment") fn = cmd_segment;
  else if (name == "eval") fn = cmd_eval;
  else if (name == "gradcheck") fn = cmd_gradcheck;
  else if (name == "gen-toy-data") fn = cmd_gen_toy_data;
  else throw ConfigError("unknown command '" + name + "'");
  py::gil_scoped_release release;
  return fn(ctx);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Open-vocabulary segmentation core: feature upsampling, bias alleviation, distillation losses, metrics";

  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<InputError>(m, "InputError", PyExc_OSError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def(
      "jbu_once",
      [](const F64& lowres, const F64& guidance, std::uint64_t seed, std::size_t radius, double tau_spatial,
         double tau_range, const py::object& weights) {
        return to_numpy(jbu_once(to_tensor(lowres), to_tensor(guidance),
                                 jbu_from(weights, seed, radius, tau_spatial, tau_range)));
      },
      py::arg("lowres"), py::arg("guidance"), py::arg("seed") = 0, py::arg("radius") = 5,
      py::arg("tau_spatial") = 2.0, py::arg("tau_range") = 1.0, py::arg("weights") = py::none(),
      "One 2x joint bilateral upsampling step of a [c, h, w] map guided by a [3, 2h, 2w] image.");

  m.def(
      "upsample",
      [](const F64& lowres, const F64& image, std::size_t steps, std::uint64_t seed, const py::object& weights) {
        return to_numpy(upsample(to_tensor(lowres), to_tensor(image), jbu_from(weights, seed, 5, 2.0, 1.0), steps));
      },
      py::arg("lowres"), py::arg("image"), py::arg("steps") = 4, py::arg("seed") = 0, py::arg("weights") = py::none(),
      "`steps` shared upsampling steps; the image is resized to each intermediate grid for guidance.");

  m.def(
      "alleviate_global_bias",
      [](const F64& patches, const F64& cls, double lam) {
        return to_numpy(alleviate_global_bias(to_tensor(patches), to_tensor(cls), lam));
      },
      py::arg("patches"), py::arg("cls"), py::arg("lam") = 0.3);

  m.def(
      "segment_tokens",
      [](const F64& tokens, std::size_t h, std::size_t w, const F64& embeddings, const std::vector<std::size_t>& owner,
         double lam) {
        TokenSequence seq{to_tensor(tokens), h, w};
        std::vector<ClassGroup> groups;
        for (std::size_t r = 0; r < owner.size(); ++r) {
          if (owner[r] >= groups.size()) groups.resize(owner[r] + 1);
          groups[owner[r]].name = "class" + std::to_string(owner[r]);
          groups[owner[r]].synonyms.push_back("s" + std::to_string(r));
        }
        const ClassVocabulary vocab(groups, to_tensor(embeddings));
        const Tensor deb = alleviate_global_bias(seq, BiasConfig{lam});
        return from_mask(segment_argmax(group_reduce(similarity_logits(deb, vocab), vocab), h, w));
      },
      py::arg("tokens"), py::arg("h"), py::arg("w"), py::arg("embeddings"), py::arg("owner"), py::arg("lam") = 0.3,
      "Mask from [1 + h*w, c] tokens (CLS first) against unit embeddings; owner[r] is the class of row r. Rows "
      "must be grouped by class in order.");

  m.def(
      "loss_cls_contrast",
      [](const F64& a, const F64& b, double tau) { return loss_cls_contrast(to_tensor(a), to_tensor(b), tau).item(); },
      py::arg("opt_cls"), py::arg("sar_cls"), py::arg("tau") = 0.07);
  m.def(
      "loss_cls_distill", [](const F64& a, const F64& b) { return loss_cls_distill(to_tensor(a), to_tensor(b)).item(); },
      py::arg("opt_cls"), py::arg("sar_cls"));
  m.def(
      "loss_local_distill",
      [](const F64& a, const F64& b, std::size_t h, std::size_t w, std::size_t k) {
        return loss_local_distill(to_tensor(a), to_tensor(b), h, w, k).item();
      },
      py::arg("opt_local"), py::arg("sar_local"), py::arg("h"), py::arg("w"), py::arg("k") = 7);
  m.def(
      "region_mean_pool",
      [](const F64& local, std::size_t h, std::size_t w, std::size_t k) {
        return to_numpy(region_mean_pool(to_tensor(local), h, w, k));
      },
      py::arg("local"), py::arg("h"), py::arg("w"), py::arg("k") = 7);

  m.def("window_positions", &window_positions, py::arg("length"), py::arg("window") = 224, py::arg("stride") = 112);

  m.def(
      "miou",
      [](const U8& pred, const U8& gt, std::size_t n) {
        const IouReport r = miou(confusion(to_mask(pred), to_mask(gt), n));
        return py::make_tuple(r.iou, r.miou);
      },
      py::arg("pred"), py::arg("gt"), py::arg("num_classes"), "(per-class IoU, mIoU); 255 in gt is ignored.");

  m.def(
      "read_pnm",
      [](const std::string& path) {
        const Raster r = load_raster(path);
        std::vector<py::ssize_t> shape = {static_cast<py::ssize_t>(r.height), static_cast<py::ssize_t>(r.width)};
        if (r.channels == 3) shape.push_back(3);
        py::array_t<std::uint8_t> out(shape);
        std::copy(r.samples.begin(), r.samples.end(), out.mutable_data());
        return out;
      },
      py::arg("path"), "P5 -> [H, W] or P6 -> [H, W, 3] uint8.");
  m.def(
      "write_pnm",
      [](const std::string& path, const U8& a) {
        if (a.ndim() != 2 && !(a.ndim() == 3 && a.shape(2) == 3)) throw DimensionError("expected [H, W] or [H, W, 3]");
        Raster r(static_cast<std::size_t>(a.shape(1)), static_cast<std::size_t>(a.shape(0)), a.ndim() == 3 ? 3 : 1);
        std::copy(a.data(), a.data() + a.size(), r.samples.begin());
        save_raster(path, r);
      },
      py::arg("path"), py::arg("array"));

  m.def(
      "load_ovw1",
      [](const std::string& path) {
        py::dict out;
        for (const auto& [name, t] : load_ovw1(path)) out[py::str(name)] = to_numpy(t);
        return out;
      },
      py::arg("path"));
  m.def(
      "save_ovw1",
      [](const std::string& path, const py::dict& tensors) {
        ParamSet ps;
        for (const auto& [k, v] : tensors) ps.add(py::str(k), to_tensor(v.cast<F64>()));
        save_ovw1(path, ps);
      },
      py::arg("path"), py::arg("tensors"), "Records are written in the dict's order as f32.");

  m.def("config_help", &config_help);
  m.def("default_config", [] { return RunConfig().values(); });
  m.def("run", &run_command, py::arg("command"), py::arg("config") = py::dict(), py::arg("workdir") = ".",
        "Run a subcommand (train-upsampler, distill, segment, eval, gradcheck, gen-toy-data); returns the exit status.");
}
