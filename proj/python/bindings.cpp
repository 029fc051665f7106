// Python bindings. Structured values cross the boundary as canonical JSON
// text; the asa package decodes them with the json module.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "asa/analysis.hpp"
#include "asa/datastore.hpp"
#include "asa/engine.hpp"
#include "asa/protocol.hpp"
#include "asa/scenario.hpp"
#include "asa/wez.hpp"

namespace py = pybind11;
using asa::Json;

namespace {

asa::ModelRegistry registry_for(const std::vector<std::string>& extension_dirs) {
  auto r = asa::ModelRegistry::with_builtins();
  for (const auto& d : extension_dirs) {
    const auto failures = r.load_extension_dir(d);
    if (!failures.empty()) throw asa::Error("ArtifactUnloadable", failures.front());
  }
  return r;
}

std::string validate_scenario(const std::string& scenario, const std::vector<std::string>& extension_dirs) {
  const auto spec = Json::parse(scenario).get<asa::ScenarioSpec>();
  const auto manifests = registry_for(extension_dirs).manifests();
  return Json(asa::validate(spec, manifests)).dump();
}

std::string run_scenario(const std::string& scenario, std::optional<std::uint64_t> seed, const std::string& run_id,
                         const std::vector<std::string>& extension_dirs) {
  const auto spec = Json::parse(scenario).get<asa::ScenarioSpec>();
  const auto registry = registry_for(extension_dirs);
  asa::CollectingSink sink;
  asa::FreeRunning control;
  asa::RunOutcome outcome;
  {
    py::gil_scoped_release release;
    outcome = asa::run_simulation(spec, registry, sink, control, {run_id, seed});
  }
  return Json{{"status", asa::to_string(outcome.status)},
              {"reason", outcome.reason},
              {"failed_agent_id", outcome.failed_agent_id},
              {"last_step", outcome.last_step},
              {"records", sink.records()}}
      .dump();
}

std::string canonical_log(const std::string& records) {
  return asa::to_canonical_log(Json::parse(records).get<std::vector<asa::StepRecord>>());
}

std::string expand_batch(const std::string& tmpl, const std::string& bindings, std::uint64_t batch_seed,
                         const std::string& batch_id) {
  const auto t = Json::parse(tmpl).get<asa::ScenarioTemplate>();
  const auto b = Json::parse(bindings).get<std::vector<asa::BindingSet>>();
  return Json(asa::expand_batch(t, b, batch_seed, batch_id)).dump();
}

std::string read_records(const std::string& data_root, const std::string& run_id, std::optional<std::uint32_t> attempt,
                         std::uint64_t from_step, std::uint64_t to_step, const std::set<std::string>& tags) {
  asa::store::RecordStore store(data_root, asa::store::StoreOptions{});
  return Json(store.read(run_id, attempt, from_step, to_step, tags)).dump();
}

std::string compute_metric(const std::string& records, const std::string& spec) {
  const auto recs = Json::parse(records).get<std::vector<asa::StepRecord>>();
  const auto m = Json::parse(spec).get<asa::analysis::MetricSpec>();
  const auto v = asa::analysis::compute_metric(recs, m);
  return Json{{"value", v.value ? Json(*v.value) : Json(nullptr)}, {"warnings", v.warnings}}.dump();
}

asa::analysis::BatchSummary summary_of(const std::string& batch_id, const std::string& rows) {
  std::vector<asa::analysis::RunRow> out;
  for (const auto& r : Json::parse(rows)) {
    asa::analysis::RunRow row;
    row.run_index = r.at("run_index").get<std::uint64_t>();
    row.run_id = r.value("run_id", std::to_string(row.run_index));
    row.bindings = r.value("bindings", asa::BindingSet{});
    for (const auto& [k, v] : r.at("metrics").items()) {
      row.metrics[k] = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
    }
    out.push_back(std::move(row));
  }
  return asa::analysis::aggregate(batch_id, std::move(out));
}

std::string summarize(const std::vector<std::optional<double>>& values) {
  const auto s = asa::analysis::summarize(values);
  auto opt = [](const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); };
  return Json{{"n", s.n},
              {"undefined", s.undefined},
              {"mean", opt(s.mean)},
              {"std", opt(s.std)},
              {"min", opt(s.min)},
              {"max", opt(s.max)},
              {"ci95", s.ci95_lo ? Json::array({*s.ci95_lo, *s.ci95_hi}) : Json(nullptr)}}
      .dump();
}

asa::protocol::MsgType type_named(const std::string& name) {
  for (int t = 1; t <= 10; ++t) {
    const auto type = static_cast<asa::protocol::MsgType>(t);
    if (asa::protocol::type_name(type) == name) return type;
  }
  throw asa::Error("UnknownType", "no message type '" + name + "'");
}

py::bytes encode_message(const std::string& type, const std::string& body) {
  const auto frame = asa::protocol::encode(asa::protocol::body_from_json(type_named(type), Json::parse(body)));
  return py::bytes(reinterpret_cast<const char*>(frame.data()), frame.size());
}

py::tuple decode_frame(const py::bytes& data) {
  const std::string raw = data;
  const auto r = asa::protocol::decode(std::span(reinterpret_cast<const std::uint8_t*>(raw.data()), raw.size()));
  py::object message = py::none();
  if (r.message) {
    message = py::make_tuple(asa::protocol::type_name(asa::protocol::type_of(*r.message)),
                             asa::protocol::body_to_json(*r.message).dump());
  }
  return py::make_tuple(asa::protocol::to_string(r.status), message, r.consumed, r.detail);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Simulation engine, batch expansion, record store and analysis";

  static py::exception<asa::Error> error(m, "AsaError", PyExc_ValueError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const asa::Error& e) {
      PyErr_SetString(error.ptr(), (e.code() + ": " + e.what()).c_str());
    } catch (const Json::exception& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    }
  });

  m.def("validate_scenario", &validate_scenario, py::arg("scenario"), py::arg("extension_dirs") = std::vector<std::string>{});
  m.def("run_scenario", &run_scenario, py::arg("scenario"), py::arg("seed") = std::nullopt, py::arg("run_id") = "run",
        py::arg("extension_dirs") = std::vector<std::string>{});
  m.def("canonical_log", &canonical_log, py::arg("records"));
  m.def("engine_invocations", &asa::engine_invocations);

  m.def("resolve", [](const std::string& tmpl, const std::string& binding) {
    return Json(asa::resolve(Json::parse(tmpl).get<asa::ScenarioTemplate>(), Json::parse(binding).get<asa::BindingSet>()))
        .dump();
  });
  m.def("full_factorial", [](const std::string& factors) {
    return Json(asa::full_factorial(asa::factors_from_json(Json::parse(factors)))).dump();
  });
  m.def("latin_hypercube", [](std::size_t n, const std::string& ranges, std::uint64_t seed) {
    return Json(asa::latin_hypercube(n, asa::ranges_from_json(Json::parse(ranges)), seed)).dump();
  });
  m.def("expand_batch", &expand_batch, py::arg("template"), py::arg("bindings"), py::arg("batch_seed"),
        py::arg("batch_id"));
  m.def("derive_seed", &asa::derive_seed, py::arg("batch_seed"), py::arg("index"));

  m.def("read_records", &read_records, py::arg("data_root"), py::arg("run_id"), py::arg("attempt") = std::nullopt,
        py::arg("from_step") = 0, py::arg("to_step") = UINT64_MAX, py::arg("tags") = std::set<std::string>{});

  m.def("compute_metric", &compute_metric, py::arg("records"), py::arg("spec"));
  m.def("summarize", &summarize, py::arg("values"));
  m.def(
      "aggregate", [](const std::string& id, const std::string& rows) { return Json(asa::analysis::to_json(summary_of(id, rows))).dump(); },
      py::arg("batch_id"), py::arg("rows"));
  m.def(
      "runs_csv", [](const std::string& id, const std::string& rows) { return asa::analysis::runs_csv(summary_of(id, rows)); },
      py::arg("batch_id"), py::arg("rows"));
  m.def(
      "summary_csv",
      [](const std::string& id, const std::string& rows) { return asa::analysis::summary_csv(summary_of(id, rows)); },
      py::arg("batch_id"), py::arg("rows"));

  m.def(
      "estimate_wez_max_range",
      [](double target_speed, double aspect, double launch_range_m, double missile_speed_mps, double turn_rate,
         double hit_radius_m, double max_flight_s, double dt) {
        return asa::estimate_wez_max_range(
            target_speed, aspect, {launch_range_m, missile_speed_mps, turn_rate, hit_radius_m, max_flight_s, dt});
      },
      py::arg("target_speed"), py::arg("aspect"), py::arg("launch_range_m") = 30000.0,
      py::arg("missile_speed_mps") = 1000.0, py::arg("missile_turn_rate_rad_s") = 0.5, py::arg("hit_radius_m") = 50.0,
      py::arg("max_flight_s") = 60.0, py::arg("dt") = 0.1);

  m.def("encode_message", &encode_message, py::arg("type"), py::arg("body"));
  m.def("decode_frame", &decode_frame, py::arg("data"));
}
