#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>
#include <optional>
#include <string>

#include "gmc/flops.hpp"
#include "gmc/gate.hpp"
#include "gmc/train.hpp"
#include "gmc/verify.hpp"

namespace py = pybind11;
using namespace gmc;

namespace {

using NetworkF = Network<float>;
using Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

TensorF to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  std::vector<float> data(a.data(), a.data() + a.size());
  return TensorF(std::move(shape), std::move(data));
}

Array to_array(const TensorF& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

BlockMode parse_mode(const std::string& s) {
  if (s == "dense") return BlockMode::dense;
  if (s == "masked") return BlockMode::masked;
  if (s == "sparse") return BlockMode::sparse;
  throw py::value_error("mode must be dense, masked or sparse");
}

py::dict flops_dict(const FlopsReport& r) {
  py::list layers;
  for (const auto& l : r.per_layer)
    layers.append(py::dict(py::arg("layer") = l.layer, py::arg("kind") = l.kind, py::arg("conv_macs") = l.conv_macs,
                           py::arg("aux_ops") = l.aux_ops, py::arg("linear_macs") = l.linear_macs));
  return py::dict(py::arg("conv_macs") = r.total_conv_macs, py::arg("linear_macs") = r.total_linear_macs,
                  py::arg("aux_ops") = r.total_aux, py::arg("k_used") = r.k_used, py::arg("layers") = layers);
}

py::dict trace_dict(const TrainingTrace& t) {
  std::vector<std::int64_t> step;
  std::vector<double> loss, task, balance, acc;
  for (const auto& r : t.rows) {
    step.push_back(r.step);
    loss.push_back(r.loss);
    task.push_back(r.task_loss);
    balance.push_back(r.balance_loss);
    acc.push_back(r.acc);
  }
  return py::dict(py::arg("step") = step, py::arg("loss") = loss, py::arg("task_loss") = task,
                  py::arg("balance_loss") = balance, py::arg("acc") = acc, py::arg("val_accuracy") = t.val_accuracy,
                  py::arg("final_cv_squared") = t.rows.empty() ? 0.0 : t.final_cv_squared());
}

}  // namespace

PYBIND11_MODULE(gmcnn, m) {
  m.doc() = "Question-gated grouped-convolution networks";
  // Translators run newest first, so the subclass is registered last.
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  py::class_<NetworkConfig>(m, "Config")
      .def_static("from_file", [](const std::filesystem::path& p) { return load_config(p); })
      .def_static("from_json", [](const std::string& text) { return parse_config(text); })
      .def("to_json", [](const NetworkConfig& c) { return serialize_config(c); })
      .def_readonly("name", &NetworkConfig::name)
      .def_readonly("question_dim", &NetworkConfig::question_dim)
      .def_readonly("classes", &NetworkConfig::classes)
      .def_property_readonly("input_shape",
                             [](const NetworkConfig& c) {
                               return py::make_tuple(c.input.channels, c.input.height, c.input.width);
                             })
      .def("extents", [](const NetworkConfig& c) {
        py::list out;
        for (const auto& e : stage_output_extents(c)) out.append(py::make_tuple(e.layer, e.channels, e.height, e.width));
        return out;
      });

  m.def("conv_flops", &conv_flops, py::arg("c_in"), py::arg("c_out"), py::arg("p"), py::arg("h_o"), py::arg("w_o"),
        py::arg("groups") = 1);
  m.def(
      "flops",
      [](const NetworkConfig& cfg, std::optional<std::int64_t> k, std::int64_t batch,
         std::optional<std::int64_t> height, std::optional<std::int64_t> width) {
        return flops_dict(network_flops(cfg, {k, batch, height, width}));
      },
      py::arg("config"), py::arg("k") = py::none(), py::arg("batch") = 1, py::arg("height") = py::none(),
      py::arg("width") = py::none());

  m.def(
      "verify",
      [](const NetworkConfig& cfg, std::int64_t trials, std::uint64_t seed, const std::string& dtype,
         bool inject_fault) {
        if (dtype != "f32" && dtype != "f64") throw py::value_error("dtype must be f32 or f64");
        VerifyReport r;
        {
          py::gil_scoped_release release;
          if (dtype == "f64")
            r = verify_config<double>(cfg, trials, seed, inject_fault);
          else
            r = verify_config<float>(cfg, trials, seed, inject_fault);
        }
        return py::dict(py::arg("passed") = r.passed(), py::arg("max_forward") = r.max_forward,
                        py::arg("max_backward") = r.max_backward, py::arg("tolerance") = r.tolerance,
                        py::arg("worst_seed") = r.worst_seed);
      },
      py::arg("config"), py::arg("trials") = 200, py::arg("seed") = 0, py::arg("dtype") = "f64",
      py::arg("inject_fault") = false);

  m.def(
      "gradcheck",
      [](std::uint64_t seed) {
        std::vector<GradCheck> results;
        {
          py::gil_scoped_release release;
          results = gradcheck_suite(seed);
        }
        py::list out;
        for (const auto& r : results)
          out.append(py::dict(py::arg("name") = r.name, py::arg("error") = r.error, py::arg("checked") = r.checked,
                              py::arg("skipped") = r.skipped));
        return out;
      },
      py::arg("seed") = 1);

  m.def(
      "normalize_gates",
      [](std::vector<double> g_raw) {
        std::vector<double> g;
        bool fallback = false;
        normalize_gates<double>(g_raw, g, fallback);
        return py::make_tuple(g, fallback);
      },
      py::arg("g_raw"));
  m.def(
      "topk_select", [](std::vector<double> g, std::int64_t k) { return topk_select<double>(g, k); }, py::arg("g"),
      py::arg("k"));
  m.def(
      "cv_squared", [](std::vector<double> v) { return cv_squared<double>(v); }, py::arg("values"));

  py::class_<NetworkF>(m, "Network")
      .def(py::init([](const NetworkConfig& cfg, std::uint64_t seed) { return build_network<float>(cfg, seed); }),
           py::arg("config"), py::arg("seed") = 0)
      .def_static("load", [](const std::filesystem::path& dir) { return load_checkpoint<float>(dir); })
      .def("save", [](NetworkF& n, const std::filesystem::path& dir) { save_checkpoint(n, dir); })
      .def_property_readonly("config", [](const NetworkF& n) { return n.config; })
      .def_readonly("block_names", &NetworkF::block_names)
      .def("parameter_count", &NetworkF::parameter_count)
      .def("set_k", &NetworkF::set_k, py::arg("k"))
      .def(
          "set_training", [](NetworkF& n, bool on) { n.set_bn_mode(on ? BnMode::training : BnMode::inference); },
          py::arg("on"))
      .def(
          "forward",
          [](NetworkF& n, const Array& images, const Array& questions, const std::string& mode) {
            const auto out = network_forward(n, to_tensor(images), to_tensor(questions), {parse_mode(mode)});
            py::list gates;
            for (const auto& block : out.decisions) {
              py::list rows;
              for (const auto& d : block)
                rows.append(py::dict(py::arg("g_norm") = d.g_norm, py::arg("selected") = d.selected,
                                     py::arg("fallback") = d.fallback_used));
              gates.append(rows);
            }
            return py::make_tuple(to_array(out.logits), gates);
          },
          py::arg("images"), py::arg("questions"), py::arg("mode") = "sparse")
      .def(
          "count_macs",
          [](NetworkF& n, const Array& images, const Array& questions) {
            MacCounter c;
            network_forward(n, to_tensor(images), to_tensor(questions), {}, &c);
            return py::dict(py::arg("conv_macs") = c.conv_macs, py::arg("linear_macs") = c.linear_macs,
                            py::arg("aux_ops") = c.aux_ops);
          },
          py::arg("images"), py::arg("questions"));

  m.def(
      "train",
      [](const NetworkConfig& cfg, std::uint64_t seed, std::int64_t steps, double lr, double momentum,
         std::int64_t batch, double lam, std::optional<std::int64_t> k, std::optional<double> target_accuracy,
         std::int64_t train_size, std::int64_t val_size) {
        auto task = task_for_config(cfg, seed);
        task.n_train = train_size;
        task.n_val = val_size;
        TrainConfig tc;
        tc.seed = seed;
        tc.steps = steps;
        tc.lr = lr;
        tc.momentum = momentum;
        tc.batch = batch;
        tc.lambda = lam;
        tc.k = k;
        tc.target_accuracy = target_accuracy;
        tc.validate();
        auto net = build_network<float>(cfg, seed);
        TrainingTrace trace;
        double acc = 0;
        {
          py::gil_scoped_release release;
          const auto train = generate_dataset<float>(task, Split::train);
          const auto val = generate_dataset<float>(task, Split::val);
          trace = train_loop(net, train, &val, tc);
          acc = evaluate(net, val, k).accuracy;
        }
        return py::make_tuple(std::move(net), trace_dict(trace), acc);
      },
      py::arg("config"), py::arg("seed") = 0, py::arg("steps") = 500, py::arg("lr") = 0.05, py::arg("momentum") = 0.9,
      py::arg("batch") = 64, py::arg("lam") = 0.01, py::arg("k") = py::none(), py::arg("target_accuracy") = py::none(),
      py::arg("train_size") = 8192, py::arg("val_size") = 2000,
      "Trains on the synthetic colour-at-quadrant task; returns (network, trace, final val accuracy).");
}
