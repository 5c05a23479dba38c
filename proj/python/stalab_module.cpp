#include <optional>
#include <string>
#include <vector>

#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "stalab/audit.hpp"
#include "stalab/corpus.hpp"
#include "stalab/error.hpp"
#include "stalab/records.hpp"
#include "stalab/run.hpp"
#include "stalab/sta.hpp"
#include "stalab/stats.hpp"

namespace py = pybind11;
using namespace stalab;

namespace {

// JSON crosses the boundary as text; Python callers get plain dicts.
py::object to_py(const nlohmann::ordered_json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

py::dict record_dict(const FactRecord& r) {
    py::dict d;
    d["id"] = r.id;
    d["prompt"] = r.prompt;
    d["completion"] = r.completion;
    d["split"] = to_string(r.split);
    return d;
}

std::vector<FactRecord> records_from(const py::list& items) {
    std::vector<FactRecord> out;
    for (const auto& item : items) {
        const auto d = item.cast<py::dict>();
        FactRecord r;
        r.id = d["id"].cast<std::string>();
        r.prompt = d["prompt"].cast<std::string>();
        r.completion = d["completion"].cast<std::string>();
        if (d.contains("split")) r.split = split_from_string(d["split"].cast<std::string>());
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace

PYBIND11_MODULE(_stalab, m) {
    m.doc() = "Soft token attack laboratory";

    static py::exception<Error> error(m, "Error");
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            error((e.error_class() + ": " + e.what()).c_str());
        }
    });

    m.def("encode", [](const std::string& s) { return encode(s); });
    m.def("decode", [](const TokenSeq& t) { return decode(t); });

    m.def(
        "gen_fact_corpus",
        [](std::uint64_t seed, int n_facts, double forget_fraction, int n_holdout) {
            CorpusParams p;
            p.seed = seed;
            p.n_facts = n_facts;
            p.forget_fraction = forget_fraction;
            p.n_holdout = n_holdout;
            py::list out;
            for (const auto& r : gen_fact_corpus(p).records) out.append(record_dict(r));
            return out;
        },
        py::arg("seed") = 7, py::arg("n_facts") = 100, py::arg("forget_fraction") = 0.10, py::arg("n_holdout") = 20);

    m.def(
        "gen_random_string", [](std::uint64_t seed, int length) { return gen_random_string(seed, length).text; },
        py::arg("seed"), py::arg("length"));

    m.def(
        "welch_t",
        [](const std::vector<double>& a, const std::vector<double>& b, const std::string& alternative) {
            Alternative alt = Alternative::two_sided;
            if (alternative == "less") alt = Alternative::less;
            else if (alternative == "greater") alt = Alternative::greater;
            else if (alternative != "two-sided") throw InvalidArgument("unknown alternative " + alternative);
            const auto r = welch_t(a, b, alt);
            py::dict d;
            d["t"] = r.t;
            d["dof"] = r.dof;
            d["p"] = r.p;
            d["degenerate"] = r.degenerate;
            return d;
        },
        py::arg("a"), py::arg("b"), py::arg("alternative") = "two-sided");

    py::class_<AttackBudget>(m, "AttackBudget")
        .def(py::init<>())
        .def_readwrite("max_iters_per_token", &AttackBudget::max_iters_per_token)
        .def_readwrite("lr", &AttackBudget::lr)
        .def_readwrite("max_soft_tokens", &AttackBudget::max_soft_tokens)
        .def_readwrite("max_restarts", &AttackBudget::max_restarts)
        .def_readwrite("runs_per_prompt", &AttackBudget::runs_per_prompt);

    py::class_<ModelCheckpoint>(m, "Checkpoint")
        .def_readonly("id", &ModelCheckpoint::id)
        .def_property_readonly("provenance", [](const ModelCheckpoint& c) { return c.provenance.label(); })
        .def_readonly("training_manifest", &ModelCheckpoint::training_manifest);

    m.def("load_checkpoint", [](const std::filesystem::path& p) { return load_checkpoint(p); });

    m.def(
        "attack",
        [](const ModelCheckpoint& ckpt, std::optional<std::string> prompt, const std::string& completion,
           const AttackBudget& budget, std::uint64_t seed) {
            AttackTarget t;
            t.id = "python";
            if (prompt) t.prompt = encode(*prompt);
            t.completion = encode(completion);
            AttackOutcome o;
            {
                py::gil_scoped_release release;
                o = attack_schedule(ckpt, t, budget, seed);
            }
            return to_py(to_json(o));
        },
        py::arg("checkpoint"), py::arg("prompt"), py::arg("completion"), py::arg("budget") = AttackBudget{},
        py::arg("seed") = 0);

    m.def(
        "sta_audit",
        [](const ModelCheckpoint& unlearned, const ModelCheckpoint& fine_tuned, const py::list& forget,
           const AttackBudget& budget, std::uint64_t seed, double alpha) {
            const auto records = records_from(forget);
            AuditReport r;
            {
                py::gil_scoped_release release;
                r = sta_audit(unlearned, fine_tuned, records, budget, seed, alpha);
            }
            return to_py(to_json(r));
        },
        py::arg("unlearned"), py::arg("fine_tuned"), py::arg("forget"), py::arg("budget") = AttackBudget{},
        py::arg("seed") = 0, py::arg("alpha") = 0.05);

    m.def(
        "oracle_audit",
        [](const ModelCheckpoint& model, const std::vector<std::string>& candidates, const py::list& corpus) {
            FactCorpus c;
            c.records = records_from(corpus);
            py::dict out;
            for (const auto& d : oracle_audit(ModelManifest::of(model), candidates, c)) out[py::str(d.record_id)] = d.a;
            return out;
        },
        py::arg("model"), py::arg("candidates"), py::arg("corpus"));

    m.def(
        "load_config",
        [](std::optional<std::filesystem::path> path, const std::vector<std::string>& overrides) {
            return to_py(to_json(load_config(path, overrides, std::nullopt)));
        },
        py::arg("path") = py::none(), py::arg("overrides") = std::vector<std::string>{});

    py::class_<Lab>(m, "Lab")
        .def(py::init([](const std::filesystem::path& dir, const std::vector<std::string>& overrides,
                         std::optional<std::filesystem::path> config, int workers, bool force) {
                 return Lab(load_config(config, overrides, std::nullopt), dir, workers, force);
             }),
             py::arg("dir"), py::arg("overrides") = std::vector<std::string>{}, py::arg("config") = py::none(),
             py::arg("workers") = 1, py::arg("force") = false)
        .def("gen_corpus", &Lab::gen_corpus, py::call_guard<py::gil_scoped_release>())
        .def("pretrain", &Lab::pretrain, py::call_guard<py::gil_scoped_release>())
        .def("finetune", &Lab::finetune, py::call_guard<py::gil_scoped_release>())
        .def("unlearn", &Lab::unlearn, py::arg("method") = "all", py::call_guard<py::gil_scoped_release>())
        .def("attack", &Lab::attack, py::call_guard<py::gil_scoped_release>())
        .def("randstring", &Lab::randstring, py::call_guard<py::gil_scoped_release>())
        .def("audit", &Lab::audit, py::call_guard<py::gil_scoped_release>())
        .def("probe", &Lab::probe, py::call_guard<py::gil_scoped_release>())
        .def("report", &Lab::report, py::call_guard<py::gil_scoped_release>())
        .def("pipeline", &Lab::pipeline, py::call_guard<py::gil_scoped_release>())
        .def("zoo_ids", &Lab::zoo_ids)
        .def("artifact", [](const Lab& lab, const std::string& rel) { return lab.artifact(rel); })
        .def_property_readonly("dir", [](const Lab& lab) { return lab.dir(); });
}
