#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <memory>
#include <optional>
#include <sstream>

#include "fusionreid/commands.hpp"
#include "fusionreid/dmf.hpp"
#include "fusionreid/evaluator.hpp"
#include "fusionreid/trainer.hpp"

namespace py = pybind11;
using namespace fusionreid;

namespace {

using OptPath = std::optional<std::filesystem::path>;
using Strings = std::vector<std::string>;

py::dict report_dict(const EvalReport& r) {
  py::dict d;
  d["mAP"] = r.mAP;
  d["cmc"] = r.cmc;
  d["ap"] = r.ap;
  d["num_queries"] = r.num_queries;
  d["skipped"] = r.skipped;
  return d;
}

// Runs a command with captured streams: (exit code, stdout, stderr).
template <class F>
py::tuple captured(F&& f) {
  std::ostringstream out, err;
  int code = 0;
  {
    py::gil_scoped_release release;
    code = f(out, err);
  }
  return py::make_tuple(code, out.str(), err.str());
}

CommonArgs common(const OptPath& config, const Strings& overrides, const std::filesystem::path& out) {
  return CommonArgs{config, overrides, out};
}

// A prepared run and its model, for interactive use.
class Session {
 public:
  Session(const OptPath& config, const Strings& overrides)
      : run_(prepare_run(config, overrides)), model_(build_model(run_.config, run_.data)) {}

  py::list train() {
    TrainOutcome t;
    {
      py::gil_scoped_release release;
      t = train_model(*model_, run_.config, run_.data);
    }
    py::list rows;
    for (const auto& m : t.log) {
      py::dict d;
      d["step"] = m.step;
      d["epoch"] = m.epoch;
      d["lr"] = m.lr;
      d["total"] = m.total;
      d["ce_sum"] = m.ce_sum;
      d["tri_sum"] = m.tri_sum;
      d["grad_norm"] = m.grad_norm;
      rows.append(d);
    }
    return rows;
  }

  py::dict evaluate() {
    EvalReport r;
    {
      py::gil_scoped_release release;
      r = evaluate_model(*model_, run_.config, run_.data);
    }
    return report_dict(r);
  }

  // images: [B, 3, H, W] in [0, 1] -> L2-normalized [B, D] embeddings.
  py::array_t<double> extract(py::array_t<double, py::array::c_style | py::array::forcecast> images,
                              const std::vector<int>& cam_ids) {
    if (images.ndim() != 4) throw DimensionError("extract: images must be [B, 3, H, W]");
    const std::size_t b = images.shape(0), c = images.shape(1), h = images.shape(2), w = images.shape(3);
    if (cam_ids.size() != b) throw DimensionError("extract: one camera id per image");
    Dataset data;
    data.height = h;
    data.width = w;
    const double* src = images.data();
    for (std::size_t i = 0; i < b; ++i) {
      Sample s;
      s.image = Tensor({c, h, w}, std::vector<double>(src + i * c * h * w, src + (i + 1) * c * h * w));
      s.cam_id = cam_ids[i];
      data.samples.push_back(std::move(s));
    }
    std::vector<std::size_t> idx(b);
    for (std::size_t i = 0; i < b; ++i) idx[i] = i;
    const auto recs = extract_features(*model_, data, idx, run_.config.eval_batch);
    const std::size_t d = recs.empty() ? 0 : recs[0].feature.size();
    py::array_t<double> out({b, d});
    auto m = out.mutable_unchecked<2>();
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t k = 0; k < d; ++k) m(i, k) = recs[i].feature[k];
    return out;
  }

  void save(const std::filesystem::path& path) const {
    checkpoint_save(capture_state(run_.config, *model_, nullptr, 0), path);
  }
  void load(const std::filesystem::path& path) { restore_state(checkpoint_load(path), *model_, nullptr); }

  std::size_t num_params() const { return model_->store().num_scalars(); }
  std::size_t num_params_prefix(const std::string& prefix) const { return model_->store().num_scalars(prefix); }
  FlatConfig config() const { return to_flat(run_.config); }

 private:
  PreparedRun run_;
  std::unique_ptr<FusionReid> model_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Toy two-backbone re-identification model with stacked fusion layers";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<UsageError>(m, "UsageError", base.ptr());
  py::register_exception<NumericalError>(m, "NumericalError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());

  m.def(
      "resolve_config",
      [](const OptPath& config, const Strings& overrides) {
        return to_flat(resolve_config(config, overrides, nullptr));
      },
      py::arg("config") = py::none(), py::arg("overrides") = Strings{});

  m.def(
      "lr_schedule",
      [](double epoch, double base_lr, double peak_lr, double warmup_epochs, double total_epochs, double min_lr) {
        OptimConfig o;
        o.base_lr = base_lr;
        o.peak_lr = peak_lr;
        o.warmup_epochs = warmup_epochs;
        o.total_epochs = total_epochs;
        o.min_lr = min_lr;
        o.validate();
        return lr_schedule(epoch, o);
      },
      py::arg("epoch"), py::arg("base_lr") = 5e-4, py::arg("peak_lr") = 5e-3, py::arg("warmup_epochs") = 10.0,
      py::arg("total_epochs") = 180.0, py::arg("min_lr") = 0.0);

  m.def("average_precision", &average_precision, py::arg("relevance"));

  m.def(
      "evaluate_distances",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> dist, const std::vector<int>& q_pids,
         const std::vector<int>& q_cams, const std::vector<int>& g_pids, const std::vector<int>& g_cams,
         std::size_t max_rank) {
        if (dist.ndim() != 2) throw DimensionError("evaluate_distances: dist must be [Q, G]");
        std::vector<double> d(dist.data(), dist.data() + dist.size());
        if (static_cast<std::size_t>(dist.shape(0)) != q_pids.size() ||
            static_cast<std::size_t>(dist.shape(1)) != g_pids.size())
          throw DimensionError("evaluate_distances: dist shape does not match the id lists");
        return report_dict(evaluate_distances(d, q_pids, q_cams, g_pids, g_cams, max_rank));
      },
      py::arg("dist"), py::arg("q_pids"), py::arg("q_cams"), py::arg("g_pids"), py::arg("g_cams"),
      py::arg("max_rank") = 10);

  m.def(
      "dmf_param_counts",
      [](std::size_t dim, std::size_t heads, std::size_t layers, const std::string& variant, bool seu_shared,
         bool mfu_shared, std::size_t d_c, std::size_t d_t) {
        DmfConfig c;
        c.dim = dim;
        c.heads = heads;
        c.layers = layers;
        c.variant = parse_variant(variant);
        c.seu_shared = seu_shared;
        c.mfu_shared = mfu_shared;
        c.validate();
        const DmfParamCounts p = count_params(c, d_c, d_t);
        py::dict d;
        d["lru_c"] = p.lru_c;
        d["lru_t"] = p.lru_t;
        d["seu"] = p.seu;
        d["mfu"] = p.mfu;
        d["per_layer"] = p.per_layer;
        d["stack"] = p.stack;
        d["total"] = p.total;
        return d;
      },
      py::arg("dim") = 64, py::arg("heads") = 4, py::arg("layers") = 2, py::arg("variant") = "seu_then_mfu",
      py::arg("seu_shared") = true, py::arg("mfu_shared") = false, py::arg("d_c") = 64, py::arg("d_t") = 64);

  m.def("ablation_presets", &ablation_presets);

  m.def(
      "train",
      [](const std::filesystem::path& out, const OptPath& config, const Strings& overrides, const OptPath& resume) {
        return captured([&](std::ostream& o, std::ostream& e) {
          return cmd_train(common(config, overrides, out), resume, o, e);
        });
      },
      py::arg("out"), py::arg("config") = py::none(), py::arg("overrides") = Strings{},
      py::arg("resume") = py::none());
  m.def(
      "evaluate",
      [](const std::filesystem::path& out, const std::filesystem::path& checkpoint, const OptPath& config,
         const Strings& overrides) {
        return captured([&](std::ostream& o, std::ostream& e) {
          return cmd_eval(common(config, overrides, out), checkpoint, o, e);
        });
      },
      py::arg("out"), py::arg("checkpoint"), py::arg("config") = py::none(), py::arg("overrides") = Strings{});
  m.def(
      "ablate",
      [](const std::filesystem::path& out, const std::string& preset, const Strings& grid, bool train,
         const OptPath& config, const Strings& overrides) {
        return captured([&](std::ostream& o, std::ostream& e) {
          return cmd_ablate(common(config, overrides, out), preset, grid, train, o, e);
        });
      },
      py::arg("out"), py::arg("preset") = "", py::arg("grid") = Strings{}, py::arg("train") = true,
      py::arg("config") = py::none(), py::arg("overrides") = Strings{});
  m.def(
      "synth_data",
      [](const std::filesystem::path& out, const OptPath& config, const Strings& overrides) {
        return captured([&](std::ostream& o, std::ostream& e) {
          return cmd_synth_data(common(config, overrides, out), o, e);
        });
      },
      py::arg("out"), py::arg("config") = py::none(), py::arg("overrides") = Strings{});

  py::class_<Session>(m, "Session")
      .def(py::init<const OptPath&, const Strings&>(), py::arg("config") = py::none(),
           py::arg("overrides") = Strings{})
      .def("train", &Session::train)
      .def("evaluate", &Session::evaluate)
      .def("extract", &Session::extract, py::arg("images"), py::arg("cam_ids"))
      .def("save", &Session::save, py::arg("path"))
      .def("load", &Session::load, py::arg("path"))
      .def("num_params", &Session::num_params)
      .def("num_params_prefix", &Session::num_params_prefix, py::arg("prefix"))
      .def_property_readonly("config", &Session::config);
}
