// Python bindings: networks, checkpoints, datasets, pruning and metrics.
// Tensors cross the boundary as float32 numpy arrays (copied).

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "maxprune/dataio.hpp"
#include "maxprune/errors.hpp"
#include "maxprune/metrics.hpp"
#include "maxprune/persist.hpp"
#include "maxprune/pruning.hpp"
#include "maxprune/trainer.hpp"

namespace py = pybind11;
using namespace maxprune;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

py::array_t<float> to_numpy(const Tensor& t) {
  py::array_t<float> a(t.shape().dims());
  std::copy(t.raw(), t.raw() + t.numel(), a.mutable_data());
  return a;
}

Tensor from_numpy(const FloatArray& a) {
  std::vector<std::size_t> dims(a.shape(), a.shape() + a.ndim());
  return Tensor(Shape(dims), std::vector<float>(a.data(), a.data() + a.size()));
}

Variant parse_variant(const std::string& name) {
  if (name == "baseline") return Variant::baseline;
  if (name == "mfc") return Variant::mfc;
  if (name == "mc") return Variant::mc;
  throw ArgumentError("unknown variant '" + name + "' (baseline | mfc | mc)");
}

Dataset make_dataset(const FloatArray& images, std::vector<int> labels) {
  Dataset d;
  d.images = from_numpy(images);
  d.labels = std::move(labels);
  if (d.images.shape().rank() != 4 || d.images.shape()[0] != d.labels.size())
    throw DimensionError("images must be [N, C, H, W] with one label per sample");
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Maxout neuron pruning and magnitude weight pruning";

  // Exception hierarchy: Error, then one subclass per category.
  static py::exception<Error> error(m, "Error");
  static py::exception<DimensionError> dimension_error(m, "DimensionError", error.ptr());
  static py::exception<StructureError> structure_error(m, "StructureError", error.ptr());
  static py::exception<DataError> data_error(m, "DataError", error.ptr());
  static py::exception<FormatError> format_error(m, "FormatError", error.ptr());
  static py::exception<ArgumentError> argument_error(m, "ArgumentError", error.ptr());
  static py::exception<IoError> io_error(m, "IoError", error.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const DimensionError& e) {
      py::set_error(dimension_error, e.what());
    } catch (const StructureError& e) {
      py::set_error(structure_error, e.what());
    } catch (const DataError& e) {
      py::set_error(data_error, e.what());
    } catch (const FormatError& e) {
      py::set_error(format_error, e.what());
    } catch (const ArgumentError& e) {
      py::set_error(argument_error, e.what());
    } catch (const IoError& e) {
      py::set_error(io_error, e.what());
    } catch (const Error& e) {
      py::set_error(error, e.what());
    }
  });

  py::class_<NetworkSpec>(m, "NetworkSpec")
      .def_static(
          "reference",
          [](const std::string& variant, std::size_t fc_size, std::size_t k, std::size_t conv1,
             std::size_t conv2) {
            return NetworkSpec::reference(parse_variant(variant), fc_size, k, conv1, conv2);
          },
          py::arg("variant"), py::arg("fc_size") = 512, py::arg("k") = 4, py::arg("conv1") = 20,
          py::arg("conv2") = 0)
      .def_property_readonly("variant", [](const NetworkSpec& s) { return std::string(to_string(s.variant)); })
      .def_readonly("fc_size", &NetworkSpec::fc_size)
      .def("without_maxout", &NetworkSpec::without_maxout)
      .def("__eq__", [](const NetworkSpec& a, const NetworkSpec& b) { return a == b; });

  py::class_<Network>(m, "Network")
      .def_readonly("spec", &Network::spec)
      .def_readonly("structure_version", &Network::structure_version)
      .def_property_readonly("k", [](const Network& n) -> py::object {
        return n.maxout ? py::cast(n.maxout->k_current) : py::none();
      })
      .def_property_readonly("survivors", [](const Network& n) -> py::object {
        return n.maxout ? py::cast(n.maxout->survivors) : py::none();
      })
      .def_property_readonly("layer_count", [](const Network& n) { return n.params.size(); })
      .def("weight", [](const Network& n, std::size_t l) { return to_numpy(n.params.at(l).weight); })
      .def("bias", [](const Network& n, std::size_t l) { return to_numpy(n.params.at(l).bias); })
      .def("mask", [](const Network& n, std::size_t l) { return n.params.at(l).mask; })
      .def("predict", [](const Network& n, const FloatArray& x) { return to_numpy(predict(n, from_numpy(x))); });

  m.def(
      "build_network", [](const NetworkSpec& spec, std::uint64_t seed) { return build_network(spec, seed); },
      py::arg("spec"), py::arg("seed") = 1);
  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));
  m.def("save_checkpoint", &save_checkpoint, py::arg("net"), py::arg("path"), py::arg("sparse") = false);

  py::class_<Dataset>(m, "Dataset")
      .def(py::init(&make_dataset), py::arg("images"), py::arg("labels"))
      .def("__len__", &Dataset::size)
      .def_property_readonly("images", [](const Dataset& d) { return to_numpy(d.images); })
      .def_readonly("labels", &Dataset::labels)
      .def_readonly("split", &Dataset::split);
  m.def("load_mnist", &load_mnist, py::arg("dir"), py::arg("split"));
  m.def("subset", &subset, py::arg("data"), py::arg("begin"), py::arg("count"));

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("base_lr", &TrainConfig::base_lr)
      .def_readwrite("momentum", &TrainConfig::momentum)
      .def_readwrite("weight_decay", &TrainConfig::weight_decay)
      .def_readwrite("lr_gamma", &TrainConfig::lr_gamma)
      .def_readwrite("lr_power", &TrainConfig::lr_power)
      .def_readwrite("iterations", &TrainConfig::iterations)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("seed", &TrainConfig::seed);
  m.def("lr_at", &lr_at, py::arg("iteration"), py::arg("config"));
  m.def(
      "train",
      [](Network& net, const Dataset& data, const TrainConfig& cfg) {
        std::vector<double> losses;
        py::gil_scoped_release release;
        for (const auto& h : train(net, data, cfg)) losses.push_back(h.loss);
        return losses;
      },
      py::arg("net"), py::arg("data"), py::arg("config"), "Trains in place; returns per-step losses.");
  m.def("evaluate", &evaluate, py::arg("net"), py::arg("data"), py::arg("threads") = 1,
        py::call_guard<py::gil_scoped_release>());

  py::class_<WinnerCounts>(m, "WinnerCounts")
      .def_readonly("positions", &WinnerCounts::positions)
      .def_property_readonly("counts", [](const WinnerCounts& w) {
        std::vector<std::vector<std::uint64_t>> out;
        for (const auto& u : w.units) out.push_back(u.counts);
        return out;
      });
  m.def("count_winners", &count_winners, py::arg("net"), py::arg("data"), py::arg("threads") = 1);
  m.def("prune_least_active", &prune_least_active, py::arg("net"), py::arg("counts"));

  py::class_<WeightThreshold>(m, "WeightThreshold")
      .def_readonly("tau", &WeightThreshold::tau)
      .def_readonly("count", &WeightThreshold::count);
  m.def("threshold_for_fraction", &threshold_for_fraction, py::arg("net"), py::arg("fraction"));
  m.def(
      "prune_weights",
      [](const Network& net, double fraction) {
        return prune_weights(net, threshold_for_fraction(net, fraction)).first;
      },
      py::arg("net"), py::arg("fraction"), "Masks the floor(fraction * N) smallest-magnitude weights.");

  py::class_<ParamAccount>(m, "ParamAccount")
      .def_readonly("original", &ParamAccount::original)
      .def_readonly("current", &ParamAccount::current)
      .def_readonly("masked", &ParamAccount::masked)
      .def_property_readonly("pw_percent", &ParamAccount::pw_percent)
      .def_property_readonly("combined_percent", &ParamAccount::combined_percent);
  m.def("param_account", &param_account, py::arg("original"), py::arg("current"));
  m.def("dead_neuron_fraction", &dead_neuron_fraction, py::arg("net"));

  m.def(
      "bray_curtis",
      [](std::vector<float> u, std::vector<float> v) { return bray_curtis(u, v); },
      py::arg("u"), py::arg("v"));
  m.def(
      "far_frr",
      [](std::vector<double> matched, std::vector<double> nonmatched, double tau) {
        const RatePair r = far_frr({std::move(matched), std::move(nonmatched)}, tau);
        return py::make_tuple(r.far, r.frr);
      },
      py::arg("matched"), py::arg("nonmatched"), py::arg("tau"));
  m.def(
      "eer",
      [](std::vector<double> matched, std::vector<double> nonmatched) {
        const EerResult r = eer({std::move(matched), std::move(nonmatched)});
        return py::make_tuple(r.eer, r.threshold);
      },
      py::arg("matched"), py::arg("nonmatched"), "Returns (eer, threshold).");
  m.def(
      "randomization_test",
      [](std::vector<std::uint8_t> a, std::vector<std::uint8_t> b, std::size_t permutations,
         std::uint64_t seed) {
        Rng rng(seed);
        return randomization_test(a, b, permutations, rng);
      },
      py::arg("errors_a"), py::arg("errors_b"), py::arg("permutations") = 10000, py::arg("seed") = 1);
}
