// Python bindings: interval statistics, metrics, the CI loss oracle, FTNS
// files, synthetic data, and model training/prediction.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>

#include "mtci/data.hpp"
#include "mtci/error.hpp"
#include "mtci/losses.hpp"
#include "mtci/model_check.hpp"
#include "mtci/stats.hpp"
#include "mtci/trainer.hpp"

namespace py = pybind11;
using namespace mtci;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using StrMap = std::map<std::string, std::string>;

StrMap to_map(const KeyValues& kv) {
  StrMap out;
  for (const auto& [k, v] : kv.entries()) out[k] = v;
  return out;
}

KeyValues from_map(const StrMap& m) {
  KeyValues kv;
  for (const auto& [k, v] : m) kv.set(k, v);
  return kv;
}

TrainConfig train_config(const StrMap& overrides) {
  auto cfg = config_from_kv(from_map(overrides));
  cfg.validate();
  return cfg;
}

Array to_array(const Shape& shape, std::span<const double> data) {
  std::vector<py::ssize_t> dims(shape.begin(), shape.end());
  Array out(dims);
  std::copy(data.begin(), data.end(), out.mutable_data());
  return out;
}

Shape shape_of(const Array& a) {
  return Shape(a.shape(), a.shape() + a.ndim());
}

std::vector<double> values_of(const Array& a) {
  return {a.data(), a.data() + a.size()};
}

py::dict report_dict(const EvalReport& r) {
  py::dict d;
  const auto kv = r.to_kv();
  for (const auto& [k, v] : kv.entries()) {
    if (k.starts_with("note")) continue;
    d[py::str(k)] = k == "n" ? py::object(py::int_(parse_size(v, k))) : py::object(py::float_(parse_double(v, k)));
  }
  d["notes"] = r.notes;
  for (const char* key : {"pcc_mu", "scc_mu", "pcc_sigma", "scc_sigma"}) {
    if (!d.contains(key)) d[key] = py::none();
  }
  return d;
}

// Trained or freshly initialized network plus the configuration it was built with.
struct PyModel {
  TrainConfig cfg;
  Model model;
  OptimizerState state;
  std::size_t epochs_done = 0;

  explicit PyModel(TrainConfig c)
      : cfg(std::move(c)), model{cfg.model, init_parameters(cfg.model)},
        state(OptimizerState::for_params(model.params)) {}
  PyModel(Checkpoint ck)
      : cfg(ck.cfg), model{ck.cfg.model, std::move(ck.params)}, state(std::move(ck.state)),
        epochs_done(ck.epochs_done) {}

  py::tuple predict(const Array& features) const {
    if (features.ndim() != 4) throw ShapeError("predict expects features of shape [N, C, H, W]");
    const Shape item_shape(features.shape() + 1, features.shape() + 4);
    const std::size_t per_item = shape_numel(item_shape);
    std::vector<DatasetItem> items(static_cast<std::size_t>(features.shape(0)));
    std::vector<const DatasetItem*> ptrs;
    for (std::size_t i = 0; i < items.size(); ++i) {
      const double* p = features.data() + i * per_item;
      items[i].features = Tensor::from_data(item_shape, std::vector<double>(p, p + per_item));
      ptrs.push_back(&items[i]);
    }
    const auto pred = predict_impl(ptrs);
    return py::make_tuple(to_array({pred.mu.size()}, pred.mu), to_array({pred.sigma.size()}, pred.sigma));
  }

  Predictions predict_impl(std::span<const DatasetItem* const> items) const {
    py::gil_scoped_release release;
    return mtci::predict(model, items);
  }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multi-task opinion-score prediction with confidence-interval ranking";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<ParseError>(m, "ParseError", base.ptr());
  py::register_exception<UndefinedCorrelation>(m, "UndefinedCorrelation", PyExc_ValueError);

  py::class_<ScoreLabel>(m, "ScoreLabel")
      .def(py::init([](double mu, double sigma, std::uint64_t n_obs, std::string item_id) {
             ScoreLabel l;
             l.mu = mu;
             l.sigma = sigma;
             l.n_obs = n_obs;
             l.item_id = std::move(item_id);
             validate_label(l);
             return l;
           }),
           py::arg("mu"), py::arg("sigma"), py::arg("n_obs"), py::arg("item_id") = "")
      .def_readwrite("item_id", &ScoreLabel::item_id)
      .def_readwrite("mu", &ScoreLabel::mu)
      .def_readwrite("sigma", &ScoreLabel::sigma)
      .def_readwrite("n_obs", &ScoreLabel::n_obs)
      .def_readonly("votes", &ScoreLabel::votes)
      .def("__repr__", [](const ScoreLabel& l) {
        return "ScoreLabel(item_id='" + l.item_id + "', mu=" + format_double(l.mu) +
               ", sigma=" + format_double(l.sigma) + ", n_obs=" + std::to_string(l.n_obs) + ")";
      });

  m.def("label_from_votes", &label_from_votes, py::arg("votes"), py::arg("item_id") = "",
        "mu and population sigma of a 10-bin histogram of integer votes 1..10.");
  m.def("ci_mean", [](const ScoreLabel& l, double z) {
    const auto i = ci_mean(l, {z});
    return py::make_tuple(i.lo, i.hi);
  }, py::arg("label"), py::arg("z") = 1.96);
  m.def("sigma_of_difference", &sigma_of_difference, py::arg("a"), py::arg("b"));
  m.def("ci_difference", [](const ScoreLabel& a, const ScoreLabel& b, double z) {
    const auto i = ci_difference(a, b, {z});
    return py::make_tuple(i.lo, i.hi);
  }, py::arg("a"), py::arg("b"), py::arg("z") = 1.96);
  m.def("significantly_different", [](const ScoreLabel& a, const ScoreLabel& b, double z) {
    return significantly_different(a, b, {z});
  }, py::arg("a"), py::arg("b"), py::arg("z") = 1.96);
  m.def("compare", [](const ScoreLabel& a, const ScoreLabel& b, double z) {
    return std::string(verdict_name(compare_items(a, b, {z})));
  }, py::arg("a"), py::arg("b"), py::arg("z") = 1.96, "'A>B', 'B>A' or 'not-significant'.");

  m.def("pcc", [](std::vector<double> x, std::vector<double> y) { return pcc(x, y); });
  m.def("scc", [](std::vector<double> x, std::vector<double> y) { return scc(x, y); });
  m.def("average_ranks", [](std::vector<double> x) { return average_ranks(x); });
  m.def("binary_accuracy", [](std::vector<double> gt, std::vector<double> pred, double cutoff) {
    return binary_accuracy(gt, pred, cutoff);
  }, py::arg("gt_mu"), py::arg("pred_mu"), py::arg("cutoff") = 5.0);

  m.def("gate", [](const ScoreLabel& a, const ScoreLabel& b, double tau, double z) {
    LossConfig cfg;
    cfg.tau = tau;
    cfg.z = z;
    return gate_l_ci(a, b, cfg);
  }, py::arg("a"), py::arg("b"), py::arg("tau") = 0.2, py::arg("z") = 1.96);
  m.def("loss_ci", [](std::vector<double> mus, std::vector<double> mu_hats, std::vector<double> sigmas,
                      std::vector<std::uint64_t> n_obs, double tau, double z) {
    LossConfig cfg;
    cfg.tau = tau;
    cfg.z = z;
    return loss_ci_oracle(mus, mu_hats, sigmas, n_obs, cfg);
  }, py::arg("mus"), py::arg("mu_hats"), py::arg("sigmas"), py::arg("n_obs"), py::arg("tau") = 0.2,
        py::arg("z") = 1.96);

  m.def("default_config", [] { return to_map(config_to_kv(TrainConfig{})); },
        "Every training key with its default value.");

  m.def("read_tensor_file", [](const std::filesystem::path& path) {
    py::dict out;
    for (const auto& e : read_tensor_file(path)) out[py::str(e.name)] = to_array(e.shape, e.data);
    return out;
  }, py::arg("path"));
  m.def("write_tensor_file", [](const std::filesystem::path& path, const std::map<std::string, Array>& arrays) {
    std::vector<TensorEntry> entries;
    for (const auto& [name, a] : arrays) entries.push_back({name, shape_of(a), values_of(a)});
    write_tensor_file(path, entries);
  }, py::arg("path"), py::arg("arrays"));

  m.def("generate_synthetic", [](std::size_t n_items, std::size_t channels, std::size_t spatial,
                                 std::uint64_t seed, std::uint64_t n_obs) {
    SynthSpec spec;
    spec.n_items = n_items;
    spec.channels = channels;
    spec.spatial = spatial;
    spec.seed = seed;
    spec.n_obs = n_obs;
    const auto data = generate_synthetic(spec);
    Array features({static_cast<py::ssize_t>(n_items), static_cast<py::ssize_t>(channels),
                    static_cast<py::ssize_t>(spatial), static_cast<py::ssize_t>(spatial)});
    double* out = features.mutable_data();
    std::vector<ScoreLabel> labels;
    for (const auto& item : data.dataset.items) {
      out = std::copy(item.features.data().begin(), item.features.data().end(), out);
      labels.push_back(item.label);
    }
    py::dict d;
    d["features"] = features;
    d["labels"] = labels;
    d["latent_mu"] = data.latent_mu;
    d["latent_sigma"] = data.latent_sigma;
    return d;
  }, py::arg("n_items") = 256, py::arg("channels") = 64, py::arg("spatial") = 5, py::arg("seed") = 0,
        py::arg("n_obs") = 210);

  m.def("write_dataset", [](const std::filesystem::path& dir, const Array& features,
                            const std::vector<ScoreLabel>& labels, std::optional<std::vector<std::string>> splits) {
    if (features.ndim() != 4 || static_cast<std::size_t>(features.shape(0)) != labels.size()) {
      throw ShapeError("write_dataset expects features [N, C, H, W] and N labels");
    }
    if (splits && splits->size() != labels.size()) throw ShapeError("write_dataset expects N split names");
    const Shape item_shape(features.shape() + 1, features.shape() + 4);
    const std::size_t per_item = shape_numel(item_shape);
    Dataset ds;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const double* p = features.data() + i * per_item;
      const std::string id = labels[i].item_id.empty() ? "item" + std::to_string(i) : labels[i].item_id;
      auto l = labels[i];
      l.item_id = id;
      ds.items.push_back({id, Tensor::from_data(item_shape, std::vector<double>(p, p + per_item)), l,
                          splits ? parse_split((*splits)[i]) : Split::train});
    }
    ds.validate();
    save_dataset(dir, ds);
  }, py::arg("dir"), py::arg("features"), py::arg("labels"), py::arg("splits") = py::none(),
        "Writes features.ftns, labels.csv and splits.csv; unnamed items get ids item0, item1, ...");

  py::class_<PyModel>(m, "Model")
      .def(py::init([](const StrMap& config) { return PyModel(train_config(config)); }),
           py::arg("config") = StrMap{}, "Freshly initialized model; `config` overrides default_config() keys.")
      .def_static("load", [](const std::filesystem::path& path) { return PyModel(load_checkpoint(path)); })
      .def("save", [](const PyModel& self, const std::filesystem::path& path) {
        save_checkpoint(path, self.model.params, self.cfg, self.state, self.epochs_done);
      })
      .def("predict", &PyModel::predict, py::arg("features"),
           "Returns (mu_hat, sigma_hat) arrays for features of shape [N, C, H, W].")
      .def_property_readonly("config", [](const PyModel& self) { return to_map(config_to_kv(self.cfg)); })
      .def_property_readonly("parameter_count", [](const PyModel& self) { return self.model.params.count(); })
      .def_readonly("epochs_done", &PyModel::epochs_done)
      .def("fit", [](PyModel& self, const std::filesystem::path& data_dir) {
        const auto ds = load_dataset(data_dir);
        std::vector<py::dict> history;
        FitResult r;
        {
          py::gil_scoped_release release;
          r = fit(self.model, ds, self.cfg, self.state, self.epochs_done);
        }
        self.epochs_done += r.history.size();
        for (const auto& e : r.history) {
          py::dict d;
          d["epoch"] = e.epoch;
          d["lr"] = e.lr;
          d["loss_total"] = e.total;
          d["loss_mae_mu"] = e.mae_mu;
          d["loss_ci"] = e.ci;
          d["loss_sigma"] = e.sigma;
          d["pairs"] = e.pairs;
          d["gated_pairs"] = e.gated_pairs;
          history.push_back(d);
        }
        return history;
      }, py::arg("data_dir"), "Trains from epochs_done up to config['train.epochs'] on a dataset directory.")
      .def("evaluate", [](const PyModel& self, const std::filesystem::path& data_dir, const std::string& split) {
        const auto ds = load_dataset(data_dir);
        const auto items = ds.subset(parse_split(split));
        if (items.empty()) throw ConfigError("split", "dataset has no '" + split + "' items");
        return report_dict(evaluate(self.model, items, self.cfg.loss, self.cfg.acc_cutoff));
      }, py::arg("data_dir"), py::arg("split") = "test");

  m.def("model_grad_check", [](const StrMap& config, std::uint64_t seed) {
    auto cfg = model_config_from_kv(from_map(config), ModelConfig::toy());
    cfg.seed = seed;
    ModelGradCheck r;
    {
      py::gil_scoped_release release;
      r = model_grad_check(cfg, seed + 1);
    }
    py::dict d;
    d["max_rel_error"] = r.max_rel_error;
    d["worst_parameter"] = r.worst_name;
    d["worst_element"] = r.worst_element;
    d["elements_per_head"] = r.checked;
    d["kink_limited"] = r.kink_limited;
    return d;
  }, py::arg("config") = StrMap{}, py::arg("seed") = 0,
        "Finite-difference check of both heads over every parameter; toy size by default.");
}
