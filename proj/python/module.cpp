#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "netren/closed_loop.hpp"
#include "netren/experiment.hpp"

namespace py = pybind11;
using namespace netren;

namespace {

py::dict matrices_dict(const RenMatrices& m) {
  py::dict d;
  d["A1"] = m.A1;
  d["B1"] = m.B1;
  d["B2"] = m.B2;
  d["C1"] = m.C1;
  d["D11"] = m.D11;
  d["D12"] = m.D12;
  d["C2"] = m.C2;
  d["D21"] = m.D21;
  d["D22"] = m.D22;
  return d;
}

RenMatrices matrices_from(const py::dict& d) {
  RenMatrices m;
  m.A1 = d["A1"].cast<Mat>();
  m.B1 = d["B1"].cast<Mat>();
  m.B2 = d["B2"].cast<Mat>();
  m.C1 = d["C1"].cast<Mat>();
  m.D11 = d["D11"].cast<Mat>();
  m.D12 = d["D12"].cast<Mat>();
  m.C2 = d["C2"].cast<Mat>();
  m.D21 = d["D21"].cast<Mat>();
  m.D22 = d["D22"].cast<Mat>();
  m.check_shapes();
  return m;
}

py::dict rollout_dict(const RolloutRecord& r) {
  auto stack = [](const std::vector<Vec>& seq) {
    Mat out(static_cast<Eigen::Index>(seq.size()), seq.empty() ? 0 : seq.front().size());
    for (std::size_t t = 0; t < seq.size(); ++t) out.row(static_cast<Eigen::Index>(t)) = seq[t].transpose();
    return out;
  };
  py::dict d;
  d["x"] = stack(r.x);
  d["u"] = stack(r.u);
  d["w"] = stack(r.w);
  d["what"] = stack(r.what);
  d["v"] = stack(r.v);
  d["z"] = stack(r.z);
  return d;
}

py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

json from_py(const py::object& o) {
  return json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

}  // namespace

PYBIND11_MODULE(netren, m) {
  m.doc() = "Networked L2-bounded recurrent equilibrium network controllers";

  py::enum_<Activation>(m, "Activation").value("Tanh", Activation::Tanh).value("ReLU", Activation::ReLU);

  py::class_<RenDims>(m, "RenDims")
      .def(py::init([](int c, int s, int q, int r) { return RenDims{c, s, q, r}; }), py::arg("state"),
           py::arg("neurons"), py::arg("inputs"), py::arg("outputs"))
      .def_readwrite("state", &RenDims::state)
      .def_readwrite("neurons", &RenDims::neurons)
      .def_readwrite("inputs", &RenDims::inputs)
      .def_readwrite("outputs", &RenDims::outputs)
      .def("param_count", &RenDims::param_count);

  m.def(
      "build_ren",
      [](const Vec& theta, double gamma, const RenDims& dims) { return matrices_dict(build_ren({theta, gamma}, dims)); },
      py::arg("theta"), py::arg("gamma"), py::arg("dims"));
  m.def(
      "equilibrium_solve",
      [](const py::dict& mat, const Vec& xi, const Vec& v, Activation act) {
        return equilibrium_solve(matrices_from(mat), {xi}, v, act);
      },
      py::arg("mat"), py::arg("xi"), py::arg("v"), py::arg("act") = Activation::Tanh);
  m.def(
      "ren_step",
      [](const py::dict& mat, const Vec& xi, const Vec& v, Activation act) {
        const RenStepResult r = ren_step(matrices_from(mat), {xi}, v, act);
        return py::make_tuple(r.next.xi, r.z);
      },
      py::arg("mat"), py::arg("xi"), py::arg("v"), py::arg("act") = Activation::Tanh);
  m.def(
      "ren_rollout",
      [](const py::dict& mat, const std::vector<Vec>& inputs, Activation act) {
        const RenRollout r = ren_rollout(matrices_from(mat), inputs, act);
        return py::make_tuple(r.outputs, r.gain_ratio);
      },
      py::arg("mat"), py::arg("inputs"), py::arg("act") = Activation::Tanh);

  m.def(
      "build_from_topology",
      [](int nodes, const std::vector<std::pair<int, int>>& edges, const std::vector<std::array<int, 4>>& dims,
         double weight) {
        Topology t{nodes, edges};
        std::vector<AgentDims> ad;
        for (const auto& d : dims) ad.push_back({d[0], d[1], d[2], d[3]});
        return to_py(spec_to_json(build_from_topology(t, ad, weight)));
      },
      py::arg("nodes"), py::arg("edges"), py::arg("dims"), py::arg("coupling_weight") = 1.0,
      "dims holds (n, m, q, r) per agent; q = 0 picks the minimum. Returns the spec as a dict.");
  m.def(
      "validate_interconnection",
      [](const py::object& spec) { return to_py(violations_to_json(validate_interconnection(spec_from_json(from_py(spec))))); },
      py::arg("spec"));
  m.def(
      "allocate_gains",
      [](const py::object& spec, const Vec& b, double gamma_R) {
        const InterconnectionSpec s = spec_from_json(from_py(spec));
        require_valid(s);
        const GainAllocation g = allocate_gains(s, compute_index_sets(s), b, gamma_R);
        py::dict d;
        d["alpha"] = g.alpha;
        d["gamma"] = g.gamma;
        d["h"] = g.h;
        std::vector<std::string> br;
        for (GainBranch x : g.branch) br.push_back(to_string(x));
        d["branch"] = br;
        return d;
      },
      py::arg("spec"), py::arg("b"), py::arg("gamma_R"));
  m.def(
      "assemble_lmi",
      [](const py::object& spec, const Vec& alpha, const Vec& gamma, double gamma_R) {
        return assemble_lmi(spec_from_json(from_py(spec)), alpha, gamma, gamma_R);
      },
      py::arg("spec"), py::arg("alpha"), py::arg("gamma"), py::arg("gamma_R"));
  m.def(
      "check_negative_semidefinite",
      [](const Mat& a, double tol) {
        const SemidefiniteCheck c = check_negative_semidefinite(a, tol);
        return py::make_tuple(c.feasible, c.max_eigenvalue);
      },
      py::arg("matrix"), py::arg("tol") = kLmiTol);

  m.def(
      "vehicle_step",
      [](double mass, double friction, double ts, const Vec2& p, const Vec2& v, const Vec2& f, const Vec2& u) {
        const auto [pn, vn] = vehicle_step(mass, friction, ts, p, v, f, u);
        return py::make_tuple(pn, vn);
      },
      py::arg("mass"), py::arg("friction"), py::arg("sample_time"), py::arg("p"), py::arg("v"), py::arg("force"),
      py::arg("u"));

  py::class_<TrainableParams>(m, "Params")
      .def_readwrite("theta", &TrainableParams::theta)
      .def_readwrite("b", &TrainableParams::b)
      .def_readwrite("gamma_R", &TrainableParams::gamma_R);

  py::class_<Experiment>(m, "Experiment")
      .def_static(
          "load", [](const std::string& path) { return load_experiment_file(path); }, py::arg("path"))
      .def_static(
          "from_dict", [](const py::object& cfg) { return load_experiment(from_py(cfg)); }, py::arg("config"))
      .def_readonly("name", &Experiment::name)
      .def_readonly("hash", &Experiment::hash)
      .def_readonly("gamma_R", &Experiment::gamma_R)
      .def_property_readonly("spec", [](const Experiment& ex) { return to_py(spec_to_json(ex.spec)); })
      .def_property_readonly("num_agents", [](const Experiment& ex) { return ex.spec.num_agents(); })
      .def("init_params", [](const Experiment& ex, std::uint64_t seed) { return initial_params(ex, seed); },
           py::arg("seed"))
      .def(
          "samples",
          [](const Experiment& ex, std::uint64_t seed, int count) {
            std::mt19937_64 rng(seed);
            return draw_samples(ex.noise, count, rng);
          },
          py::arg("seed"), py::arg("count"))
      .def(
          "simulate",
          [](const Experiment& ex, const TrainableParams& p, const std::vector<Vec>& noise, int T) {
            const ControllerNetwork net = make_controller(ex.problem(), p);
            return rollout_dict(closed_loop_rollout(*ex.plant, net, noise, T));
          },
          py::arg("params"), py::arg("noise"), py::arg("horizon"))
      .def(
          "gains",
          [](const Experiment& ex, const TrainableParams& p) {
            const auto g = allocate_gains(ex.spec, compute_index_sets(ex.spec), p.b, p.gamma_R);
            return py::make_tuple(g.gamma, certify(ex.spec, g).max_eigenvalue);
          },
          py::arg("params"))
      .def(
          "loss_terms",
          [](const Experiment& ex, const Vec& x, const Vec& u) {
            const StageLossTerms t = stage_loss_terms(ex.loss, x, u);
            py::dict d;
            d["trajectory"] = t.trajectory;
            d["collision"] = t.collision;
            d["obstacle"] = t.obstacle;
            d["formation"] = t.formation;
            return d;
          },
          py::arg("x"), py::arg("u"))
      .def(
          "loss",
          [](const Experiment& ex, const TrainableParams& p, const std::vector<std::vector<Vec>>& samples) {
            return empirical_loss(ex.problem(), p, samples);
          },
          py::arg("params"), py::arg("samples"))
      .def(
          "gradient",
          [](const Experiment& ex, const TrainableParams& p, const std::vector<std::vector<Vec>>& samples) {
            const GradientRecord g = grad_params(ex.problem(), p, samples);
            return py::make_tuple(g.loss, g.theta, g.b);
          },
          py::arg("params"), py::arg("samples"))
      .def(
          "train",
          [](const Experiment& ex, int epochs, std::uint64_t seed, bool debug_certify) {
            TrainingConfig cfg = ex.training;
            cfg.epochs = epochs;
            cfg.seed = seed;
            cfg.debug_certify = debug_certify;
            TrainState st;
            st.params = initial_params(ex, seed);
            {
              py::gil_scoped_release release;
              st = train(ex.problem(), cfg, ex.noise, std::move(st));
            }
            return py::make_tuple(st.params, st.loss_history, st.final_loss);
          },
          py::arg("epochs"), py::arg("seed"), py::arg("debug_certify") = false);

  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_RuntimeError);
  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
}
