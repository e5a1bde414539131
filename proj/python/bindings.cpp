#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "menet/data.hpp"
#include "menet/distortions.hpp"
#include "menet/gradcheck.hpp"
#include "menet/losses.hpp"
#include "menet/metrics.hpp"
#include "menet/robustness.hpp"
#include "menet/saliency.hpp"
#include "menet/trainer.hpp"
#include "menet/version.hpp"

namespace py = pybind11;
using namespace menet;

namespace {

using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;
using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

template <typename T, typename A>
Tensor<T> to_tensor(const A& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<T>(shape, std::vector<T>(a.data(), a.data() + a.size()));
}

template <typename T>
py::array_t<T> to_array(const Tensor<T>& t) {
  py::array_t<T> out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.raw(), t.raw() + t.size(), out.mutable_data());
  return out;
}

template <typename T>
py::array_t<T> to_array(const std::vector<T>& v, std::vector<py::ssize_t> shape) {
  py::array_t<T> out(shape);
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

std::vector<double> doubles(const F64& a) { return {a.data(), a.data() + a.size()}; }
std::vector<std::uint8_t> bytes(const U8& a) { return {a.data(), a.data() + a.size()}; }

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }
nlohmann::json from_py(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

py::dict sample_dict(const SampleRecord& s) {
  py::dict d;
  d["id"] = s.id;
  d["image"] = to_array(s.image);
  d["mask"] = to_array(s.mask, {py::ssize_t(s.size()), py::ssize_t(s.size())});
  return d;
}

// Python-facing model: a checkpoint plus inference.
struct Model {
  Checkpoint ckpt;

  py::list predict(const F32& images, const std::string& map) const {
    if (images.ndim() != 4) throw ContractError("predict: expected N x 3 x H x W images");
    const MapKind kind = map == "ce" ? MapKind::ce : MapKind::metric;
    const auto maps = menet::predict(ckpt.params, to_tensor<float>(images), CentroidWeighting::posterior, kind);
    py::list out;
    for (const auto& m : maps) {
      const py::ssize_t n = py::ssize_t(m.size);
      py::dict d;
      d["metric"] = to_array(m.metric, {n, n});
      d["ce"] = to_array(m.ce, {n, n});
      d["binary"] = to_array(m.binary, {n, n});
      out.append(d);
    }
    return out;
  }

  py::dict robustness(const F64& image, const std::string& head, const std::string& norm) const {
    const auto params = ckpt.params.cast<double>();
    const Tensor<double> x = to_tensor<double>(image);
    RobustnessOptions opts;
    opts.head = head == "ce" ? ScalarHead::ce : ScalarHead::metric;
    const Probe probe = menet_probe(params, x, opts);
    const auto g = input_gradient(probe, x);
    const auto b = lipschitz_bound(probe, parse_norm(norm));
    py::dict d;
    d["g"] = to_array(g);
    d["G"] = to_array(b.G);
    d["M"] = b.M;
    d["stats"] = to_py(abs_stats(g));
    d["violations"] = check_dominance(b.G, g).violations;
    return d;
  }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "MEnet saliency toolkit";
  m.attr("__version__") = kVersion;

  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  m.def("adaptive_threshold", [](const F64& s) { return adaptive_threshold(doubles(s)); });
  m.def("f_beta", &f_beta, py::arg("precision"), py::arg("recall"));
  m.def(
      "f_measure",
      [](const F64& s, const U8& mask, double threshold) {
        const auto pr = f_measure(doubles(s), bytes(mask), threshold);
        return py::make_tuple(pr.precision, pr.recall, pr.f);
      },
      py::arg("s"), py::arg("mask"), py::arg("threshold"), "(precision, recall, F_beta) at s > threshold");
  m.def("mae", [](const F64& s, const U8& mask) { return mae(doubles(s), bytes(mask)); });
  m.def("pr_curve", [](const U8& s8, const U8& mask) {
    const auto c = pr_curve(bytes(s8), bytes(mask));
    return py::make_tuple(to_array(std::vector<double>(c.precision.begin(), c.precision.end()), {256}),
                          to_array(std::vector<double>(c.recall.begin(), c.recall.end()), {256}));
  });
  m.def("evaluate", [](const std::vector<F64>& maps, const std::vector<U8>& masks) {
    if (maps.size() != masks.size()) throw ContractError("evaluate: maps and masks differ in count");
    EvalAccumulator acc;
    for (std::size_t i = 0; i < maps.size(); ++i) acc.add(std::to_string(i), doubles(maps[i]), bytes(masks[i]));
    return to_py(acc.report());
  });

  m.def(
      "generate_synthetic",
      [](std::size_t n, int size, std::uint64_t seed) {
        py::list out;
        for (const auto& s : generate_synthetic(n, size, Rng(seed, streams::kData))) out.append(sample_dict(s));
        return out;
      },
      py::arg("n"), py::arg("size") = 64, py::arg("seed") = 1);
  m.def("load_dataset", [](const std::string& dir) {
    py::list out;
    for (const auto& s : load_dataset(dir)) out.append(sample_dict(s));
    return out;
  });

  m.def(
      "awgn",
      [](const F32& image, double sigma, std::uint64_t seed) {
        Rng rng(seed, streams::kDistortion);
        return to_array(awgn(to_tensor<float>(image), sigma, rng));
      },
      py::arg("image"), py::arg("sigma"), py::arg("seed") = 0);
  m.def("dct_quant", [](const F32& image, int quality) { return to_array(dct_quant(to_tensor<float>(image), quality)); },
        py::arg("image"), py::arg("quality"));

  m.def(
      "metric_losses",
      [](const F64& embeddings, const U8& labels) {
        // one image, every pixel sampled: (pairwise, centroid)
        Tape<double> tape;
        const auto e = tape.constant(to_tensor<double>(embeddings));
        const auto lab = bytes(labels);
        const std::vector<SampleSet> samples{full_sample_set(lab)};
        return py::make_tuple(scalar(metric_loss_pairwise(e, lab, samples)),
                              scalar(metric_loss_centroid(e, lab, samples)));
      },
      py::arg("embeddings"), py::arg("labels"));

  m.def(
      "gradcheck",
      [](std::uint64_t seed, bool network) {
        GradcheckOptions opts;
        opts.seed = seed;
        opts.network = network;
        opts.model.input_size = 8;
        py::list out;
        for (const auto& c : run_gradcheck(opts)) out.append(to_py(c));
        return out;
      },
      py::arg("seed") = 0, py::arg("network") = true);

  py::class_<Model>(m, "Model")
      .def_static(
          "create",
          [](const py::object& model, const py::object& train) {
            ModelConfig mc = model.is_none() ? ModelConfig{} : from_py(model).get<ModelConfig>();
            TrainConfig tc = train.is_none() ? TrainConfig{} : from_py(train).get<TrainConfig>();
            return Model{initial_checkpoint(mc, tc)};
          },
          py::arg("model") = py::none(), py::arg("train") = py::none())
      .def_static("load", [](const std::string& path) { return Model{load_checkpoint(path)}; })
      .def("save", [](const Model& self, const std::string& path) { save_checkpoint(path, self.ckpt); })
      .def_property_readonly("config", [](const Model& self) { return to_py(self.ckpt.params.config); })
      .def_property_readonly("train_config", [](const Model& self) { return to_py(self.ckpt.train); })
      .def_property_readonly("iteration", [](const Model& self) { return self.ckpt.iteration; })
      .def("predict", &Model::predict, py::arg("images"), py::arg("binary_map") = "metric")
      .def("robustness", &Model::robustness, py::arg("image"), py::arg("head") = "metric", py::arg("norm") = "l2")
      .def(
          "train",
          [](Model& self, const std::vector<py::dict>& samples, std::int64_t iterations) {
            std::vector<SampleRecord> data;
            for (const auto& d : samples) {
              SampleRecord s;
              s.id = d["id"].cast<std::string>();
              s.image = to_tensor<float>(d["image"].cast<F32>());
              s.mask = bytes(d["mask"].cast<U8>());
              data.push_back(std::move(s));
            }
            self.ckpt.train.iterations = iterations;
            TrainResult res;
            {
              py::gil_scoped_release release;
              res = train_loop(self.ckpt, data);
            }
            self.ckpt = std::move(res.checkpoint);
            py::list losses;
            for (const auto& r : res.history) losses.append(r.total);
            return losses;
          },
          py::arg("samples"), py::arg("iterations"), "Continue training to `iterations`; returns the total loss per step");
}
