#include "stalab/run.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include "stalab/error.hpp"
#include "stalab/hash.hpp"
#include "stalab/parallel.hpp"
#include "stalab/records.hpp"
#include "stalab/rng.hpp"
#include "stalab/stats.hpp"

namespace stalab {

using nlohmann::json;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

// --- configuration ----------------------------------------------------------

RunConfig RunConfig::defaults() {
    RunConfig c;
    // Two layers: at this training budget a deeper model ends pretraining at a higher loss.
    c.model.layers = 2;
    c.pretrain.epochs = 6;
    c.pretrain.batch_size = 16;
    c.pretrain.lr = 3e-3;
    c.finetune.epochs = 80;
    c.finetune.batch_size = 10;
    c.finetune.lr = 2e-3;
    c.finetune.loss_kind = LossKind::completion_only;
    for (auto m : kAllUnlearnMethods) {
        UnlearnSpec s;
        s.method = m;
        s.lr = 1e-5;
        s.steps = 30;
        if (m == UnlearnMethod::IDK) {
            // Refusals need far larger moves than pushing the true completion away.
            s.lr = 1e-4;
            s.steps = 100;
        }
        c.unlearn[to_string(m)] = s;
    }
    return c;
}

void RunConfig::validate() const {
    model.validate();
    pretrain.validate();
    finetune.validate();
    budget.validate();
    if (filler.n_docs < 1) throw InvalidConfig("filler.n_docs must be >= 1");
    if (memorization_gate < 0 || memorization_gate > 1) throw InvalidConfig("memorization_gate must be in [0, 1]");
    for (auto m : methods) {
        const auto it = unlearn.find(to_string(m));
        if (it == unlearn.end()) throw InvalidConfig("no unlearning spec for " + to_string(m));
        UnlearnSpec s = it->second;
        s.reference = "fine_tuned";
        s.validate();
    }
    if (randstring.ks.empty() || randstring.length_step < 1 || randstring.max_length < randstring.length_step ||
        randstring.strings_per_point < 1)
        throw InvalidConfig("randstring sweep is empty");
    for (int k : randstring.ks)
        if (k < 1) throw InvalidConfig("randstring.ks must be positive");
    if (!(audit.alpha > 0 && audit.alpha < 1)) throw InvalidConfig("audit.alpha must be in (0, 1)");
    if (attack.holdout_runs < 1) throw InvalidConfig("attack.holdout_runs must be >= 1");
    if (probe.min_per_class < 1 || probe.l2 < 0) throw InvalidConfig("invalid probe parameters");
}

std::uint64_t stage_seed(const RunConfig& config, SeedStream stream) {
    if (stream == SeedStream::corpus) return config.seed;
    return derive_seed(config.seed, static_cast<std::uint64_t>(stream));
}

namespace {

const char* to_string(LossKind k) { return k == LossKind::full_sequence ? "full_sequence" : "completion_only"; }

const char* to_string(Alternative a) {
    switch (a) {
    case Alternative::less: return "less";
    case Alternative::greater: return "greater";
    default: return "two-sided";
    }
}

void check_keys(const json& j, std::initializer_list<const char*> known, const std::string& where) {
    if (!j.is_object()) throw InvalidConfig(where + " must be an object");
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok) throw InvalidConfig("unknown key " + where + "." + key);
    }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw InvalidConfig("ill-typed value for " + where + "." + key);
    }
}

ordered_json train_json(const TrainSpec& s) {
    return {{"epochs", s.epochs},       {"batch_size", s.batch_size},     {"lr", s.lr},
            {"min_lr_ratio", s.min_lr_ratio}, {"weight_decay", s.weight_decay}, {"grad_clip", s.grad_clip},
            {"loss_kind", to_string(s.loss_kind)}};
}

void read_train(const json& j, TrainSpec& s, const std::string& where, double* gate = nullptr) {
    if (gate) {
        check_keys(j, {"epochs", "batch_size", "lr", "min_lr_ratio", "weight_decay", "grad_clip", "loss_kind",
                       "memorization_gate"},
                   where);
        read(j, "memorization_gate", *gate, where);
    } else {
        check_keys(j, {"epochs", "batch_size", "lr", "min_lr_ratio", "weight_decay", "grad_clip", "loss_kind"},
                   where);
    }
    read(j, "epochs", s.epochs, where);
    read(j, "batch_size", s.batch_size, where);
    read(j, "lr", s.lr, where);
    read(j, "min_lr_ratio", s.min_lr_ratio, where);
    read(j, "weight_decay", s.weight_decay, where);
    read(j, "grad_clip", s.grad_clip, where);
    std::string kind = to_string(s.loss_kind);
    read(j, "loss_kind", kind, where);
    if (kind == "full_sequence") s.loss_kind = LossKind::full_sequence;
    else if (kind == "completion_only") s.loss_kind = LossKind::completion_only;
    else throw InvalidConfig("unknown " + where + ".loss_kind " + kind);
}

ordered_json unlearn_json(const UnlearnSpec& s) {
    return {{"beta", s.beta}, {"retain_weight", s.retain_weight}, {"steps", s.steps}, {"lr", s.lr},
            {"retain_batch", s.retain_batch}};
}

void read_unlearn(const json& j, UnlearnSpec& s, const std::string& where) {
    check_keys(j, {"beta", "retain_weight", "steps", "lr", "retain_batch"}, where);
    read(j, "beta", s.beta, where);
    read(j, "retain_weight", s.retain_weight, where);
    read(j, "steps", s.steps, where);
    read(j, "lr", s.lr, where);
    read(j, "retain_batch", s.retain_batch, where);
}

} // namespace

ordered_json to_json(const RunConfig& c) {
    ordered_json j;
    j["seed"] = c.seed;
    j["corpus"] = {{"n_facts", c.corpus.n_facts},
                   {"forget_fraction", c.corpus.forget_fraction},
                   {"n_holdout", c.corpus.n_holdout},
                   {"min_completion", c.corpus.min_completion},
                   {"max_completion", c.corpus.max_completion}};
    j["filler"] = {{"n_docs", c.filler.n_docs}};
    j["model"] = {{"layers", c.model.layers},         {"heads", c.model.heads},
                  {"model_dim", c.model.model_dim},   {"ffn_dim", c.model.ffn_dim},
                  {"context_len", c.model.context_len}};
    j["pretrain"] = train_json(c.pretrain);
    j["finetune"] = train_json(c.finetune);
    j["finetune"]["memorization_gate"] = c.memorization_gate;
    ordered_json methods = ordered_json::array();
    for (auto m : c.methods) methods.push_back(to_string(m));
    ordered_json specs = ordered_json::object();
    for (auto m : kAllUnlearnMethods) {
        const auto it = c.unlearn.find(to_string(m));
        if (it != c.unlearn.end()) specs[to_string(m)] = unlearn_json(it->second);
    }
    j["unlearn"] = {{"methods", methods}, {"specs", specs}};
    const auto& b = c.budget;
    j["attack"] = {{"max_iters_per_token", b.max_iters_per_token},
                   {"lr", b.lr},
                   {"beta1", b.beta1},
                   {"beta2", b.beta2},
                   {"weight_decay", b.weight_decay},
                   {"max_soft_tokens", b.max_soft_tokens},
                   {"plateau_fraction", b.plateau_fraction},
                   {"plateau_min_rel_improvement", b.plateau_min_rel_improvement},
                   {"max_restarts", b.max_restarts},
                   {"runs_per_prompt", b.runs_per_prompt},
                   {"holdout_models", c.attack.holdout_models},
                   {"holdout_runs", c.attack.holdout_runs}};
    j["randstring"] = {{"ks", c.randstring.ks},
                       {"length_step", c.randstring.length_step},
                       {"max_length", c.randstring.max_length},
                       {"strings_per_point", c.randstring.strings_per_point}};
    j["audit"] = {{"alpha", c.audit.alpha}, {"alternative", to_string(c.audit.alternative)}};
    j["probe"] = {{"min_per_class", c.probe.min_per_class}, {"l2", c.probe.l2}};
    return j;
}

RunConfig config_from_json(const json& j) {
    RunConfig c = RunConfig::defaults();
    if (j.is_null()) return c;
    check_keys(j, {"seed", "corpus", "filler", "model", "pretrain", "finetune", "unlearn", "attack", "randstring",
                   "audit", "probe"},
               "config");
    read(j, "seed", c.seed, "config");
    if (j.contains("corpus")) {
        const auto& s = j["corpus"];
        check_keys(s, {"n_facts", "forget_fraction", "n_holdout", "min_completion", "max_completion"}, "corpus");
        read(s, "n_facts", c.corpus.n_facts, "corpus");
        read(s, "forget_fraction", c.corpus.forget_fraction, "corpus");
        read(s, "n_holdout", c.corpus.n_holdout, "corpus");
        read(s, "min_completion", c.corpus.min_completion, "corpus");
        read(s, "max_completion", c.corpus.max_completion, "corpus");
    }
    if (j.contains("filler")) {
        check_keys(j["filler"], {"n_docs"}, "filler");
        read(j["filler"], "n_docs", c.filler.n_docs, "filler");
    }
    if (j.contains("model")) {
        const auto& s = j["model"];
        check_keys(s, {"layers", "heads", "model_dim", "ffn_dim", "context_len"}, "model");
        read(s, "layers", c.model.layers, "model");
        read(s, "heads", c.model.heads, "model");
        read(s, "model_dim", c.model.model_dim, "model");
        read(s, "ffn_dim", c.model.ffn_dim, "model");
        read(s, "context_len", c.model.context_len, "model");
    }
    if (j.contains("pretrain")) read_train(j["pretrain"], c.pretrain, "pretrain");
    if (j.contains("finetune")) read_train(j["finetune"], c.finetune, "finetune", &c.memorization_gate);
    if (j.contains("unlearn")) {
        const auto& s = j["unlearn"];
        check_keys(s, {"methods", "defaults", "specs"}, "unlearn");
        if (s.contains("methods")) {
            std::vector<std::string> names;
            read(s, "methods", names, "unlearn");
            c.methods.clear();
            try {
                for (const auto& n : names) c.methods.push_back(unlearn_method_from_string(n));
            } catch (const UnknownMethod& e) {
                throw InvalidConfig(e.what());
            }
        }
        if (s.contains("defaults"))
            for (auto& [name, spec] : c.unlearn) read_unlearn(s["defaults"], spec, "unlearn.defaults");
        if (s.contains("specs")) {
            if (!s["specs"].is_object()) throw InvalidConfig("unlearn.specs must be an object");
            for (const auto& [name, spec_json] : s["specs"].items()) {
                const auto it = c.unlearn.find(name);
                if (it == c.unlearn.end()) throw InvalidConfig("unknown unlearning method " + name);
                read_unlearn(spec_json, it->second, "unlearn.specs." + name);
            }
        }
    }
    if (j.contains("attack")) {
        const auto& s = j["attack"];
        check_keys(s, {"max_iters_per_token", "lr", "beta1", "beta2", "weight_decay", "max_soft_tokens",
                       "plateau_fraction", "plateau_min_rel_improvement", "max_restarts", "runs_per_prompt",
                       "holdout_models", "holdout_runs"},
                   "attack");
        auto& b = c.budget;
        read(s, "max_iters_per_token", b.max_iters_per_token, "attack");
        read(s, "lr", b.lr, "attack");
        read(s, "beta1", b.beta1, "attack");
        read(s, "beta2", b.beta2, "attack");
        read(s, "weight_decay", b.weight_decay, "attack");
        read(s, "max_soft_tokens", b.max_soft_tokens, "attack");
        read(s, "plateau_fraction", b.plateau_fraction, "attack");
        read(s, "plateau_min_rel_improvement", b.plateau_min_rel_improvement, "attack");
        read(s, "max_restarts", b.max_restarts, "attack");
        read(s, "runs_per_prompt", b.runs_per_prompt, "attack");
        read(s, "holdout_models", c.attack.holdout_models, "attack");
        read(s, "holdout_runs", c.attack.holdout_runs, "attack");
    }
    if (j.contains("randstring")) {
        const auto& s = j["randstring"];
        check_keys(s, {"ks", "length_step", "max_length", "strings_per_point"}, "randstring");
        read(s, "ks", c.randstring.ks, "randstring");
        read(s, "length_step", c.randstring.length_step, "randstring");
        read(s, "max_length", c.randstring.max_length, "randstring");
        read(s, "strings_per_point", c.randstring.strings_per_point, "randstring");
    }
    if (j.contains("audit")) {
        const auto& s = j["audit"];
        check_keys(s, {"alpha", "alternative"}, "audit");
        read(s, "alpha", c.audit.alpha, "audit");
        std::string alt = to_string(c.audit.alternative);
        read(s, "alternative", alt, "audit");
        if (alt == "two-sided") c.audit.alternative = Alternative::two_sided;
        else if (alt == "less") c.audit.alternative = Alternative::less;
        else if (alt == "greater") c.audit.alternative = Alternative::greater;
        else throw InvalidConfig("unknown audit.alternative " + alt);
    }
    if (j.contains("probe")) {
        const auto& s = j["probe"];
        check_keys(s, {"min_per_class", "l2"}, "probe");
        read(s, "min_per_class", c.probe.min_per_class, "probe");
        read(s, "l2", c.probe.l2, "probe");
    }
    return c;
}

void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw InvalidConfig("override must look like key=value: " + assignment);
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;
    }
    if (j.is_null()) j = json::object();
    json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw InvalidConfig("empty key in override " + assignment);
        if (!node->is_object()) throw InvalidConfig("override path crosses a non-object: " + assignment);
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        if (node->is_null()) *node = json::object();
        start = dot + 1;
    }
}

RunConfig load_config(const std::optional<fs::path>& path, const std::vector<std::string>& overrides,
                      std::optional<std::uint64_t> seed) {
    json j = json::object();
    if (path) {
        std::ifstream in(*path);
        if (!in) throw MissingArtifact("cannot read config " + path->string());
        try {
            j = json::parse(in);
        } catch (const json::exception& e) {
            throw InvalidConfig(path->string() + ": " + e.what());
        }
    }
    for (const auto& o : overrides) apply_override(j, o);
    if (seed) j["seed"] = *seed;
    RunConfig c = config_from_json(j);
    c.validate();
    return c;
}

// --- manifest ---------------------------------------------------------------

RunManifest RunManifest::load(const fs::path& run_dir) {
    RunManifest m;
    const auto path = run_dir / "manifest.json";
    if (!fs::exists(path)) return m;
    try {
        const auto j = json::parse(read_text(path));
        m.code_version = j.at("code_version").get<std::string>();
        m.config_hash = j.at("config_hash").get<std::string>();
        for (const auto& [name, s] : j.at("stages").items()) {
            StageRecord r;
            r.config_hash = s.at("config_hash").get<std::string>();
            r.completed_at = s.value("completed_at", "");
            for (const auto& a : s.at("artifacts"))
                r.artifacts.push_back({a.at("path").get<std::string>(), a.at("sha256").get<std::string>()});
            m.stages[name] = std::move(r);
        }
    } catch (const json::exception& e) {
        throw CorruptArtifact("manifest.json: " + std::string(e.what()));
    }
    return m;
}

void RunManifest::save(const fs::path& run_dir) const {
    ordered_json j;
    j["code_version"] = code_version;
    j["config_hash"] = config_hash;
    ordered_json stages_json = ordered_json::object();
    for (const auto& [name, s] : stages) {
        ordered_json arts = ordered_json::array();
        for (const auto& a : s.artifacts) arts.push_back({{"path", a.path}, {"sha256", a.sha256}});
        stages_json[name] = {{"config_hash", s.config_hash}, {"completed_at", s.completed_at}, {"artifacts", arts}};
    }
    j["stages"] = stages_json;
    write_text_atomic(run_dir / "manifest.json", j.dump(2) + "\n");
}

// --- lab ----------------------------------------------------------------------

namespace {

std::string now_utc() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string ckpt_path(const std::string& id) { return "zoo/" + id + ".ckpt"; }
std::string attack_log(const std::string& id) { return "logs/attack-" + id + ".jsonl"; }

std::string fmt(double v, int digits = 6) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(digits);
    os << v;
    return os.str();
}

} // namespace

Lab::Lab(RunConfig config, fs::path run_dir, int workers, bool force)
    : m_config(std::move(config)), m_dir(std::move(run_dir)), m_workers(std::max(1, workers)), m_force(force) {
    m_config.validate();
    fs::create_directories(m_dir);
    m_manifest = RunManifest::load(m_dir);
    m_manifest.code_version = kCodeVersion;
    m_manifest.config_hash = sha256_hex(to_json(m_config).dump());
    write_text_atomic(m_dir / "config.json", to_json(m_config).dump(2) + "\n");
    m_manifest.save(m_dir);
}

void Lab::log(const std::string& msg) const {
    if (m_log) m_log(msg);
}

fs::path Lab::artifact(const std::string& relpath) const {
    for (const auto& [name, stage] : m_manifest.stages) {
        for (const auto& a : stage.artifacts) {
            if (a.path != relpath) continue;
            const auto full = m_dir / relpath;
            if (!fs::exists(full)) throw MissingArtifact(relpath + " is listed by stage " + name + " but missing");
            if (sha256_file(full) != a.sha256) throw CorruptArtifact(relpath + " does not match its checksum");
            return full;
        }
    }
    throw MissingArtifact(relpath + " has not been produced; run the stage that creates it first");
}

bool Lab::run_stage(const std::string& name, const ordered_json& stage_config, const std::vector<std::string>& inputs,
                    const std::function<std::vector<std::string>()>& body) {
    std::string material = stage_config.dump();
    for (const auto& in : inputs) {
        const auto path = artifact(in);
        material += "\n" + in + " " + sha256_file(path);
    }
    const std::string hash = sha256_hex(material);
    const auto it = m_manifest.stages.find(name);
    if (it != m_manifest.stages.end()) {
        if (it->second.config_hash != hash && !m_force)
            throw ConfigMismatch("stage " + name + " was produced with a different configuration or inputs; "
                                 "use a fresh --out directory or --force");
        if (it->second.config_hash == hash) {
            bool intact = true;
            for (const auto& a : it->second.artifacts) {
                const auto full = m_dir / a.path;
                intact = intact && fs::exists(full) && sha256_file(full) == a.sha256;
            }
            if (intact) {
                log("skip " + name);
                return false;
            }
        }
    }
    log("run " + name);
    const auto outputs = body();
    StageRecord record;
    record.config_hash = hash;
    record.completed_at = now_utc();
    for (const auto& out : outputs) record.artifacts.push_back({out, sha256_file(m_dir / out)});
    m_manifest.stages[name] = std::move(record);
    m_manifest.save(m_dir);
    return true;
}

std::vector<std::string> Lab::zoo_ids() const {
    std::vector<std::string> ids{"base", "fine_tuned"};
    for (auto m : m_config.methods) ids.push_back("unlearned-" + to_string(m));
    return ids;
}

bool Lab::gen_corpus() {
    const auto& c = m_config;
    ordered_json cfg = {{"seed", c.seed}, {"corpus", to_json(c)["corpus"]}, {"filler", to_json(c)["filler"]}};
    return run_stage("corpus", cfg, {}, [&] {
        CorpusParams params = c.corpus;
        params.seed = stage_seed(c, SeedStream::corpus);
        const auto corpus = gen_fact_corpus(params);
        write_corpus(corpus, m_dir / "corpus/facts.jsonl");
        write_split_manifest(corpus, m_dir / "corpus/splits.json");
        write_lines(gen_filler_text(stage_seed(c, SeedStream::filler), c.filler.n_docs, corpus),
                    m_dir / "corpus/filler.txt");
        return std::vector<std::string>{"corpus/facts.jsonl", "corpus/splits.json", "corpus/filler.txt"};
    });
}

namespace {

ordered_json train_log_json(const TrainLog& log) {
    return {{"initial_loss", log.initial_loss}, {"epoch_loss", log.epoch_loss}, {"final_loss", log.final_loss}};
}

} // namespace

bool Lab::pretrain() {
    const auto& c = m_config;
    const auto full = to_json(c);
    ordered_json cfg = {{"seed", c.seed}, {"model", full["model"]}, {"pretrain", full["pretrain"]}};
    return run_stage("pretrain", cfg, {"corpus/filler.txt"}, [&] {
        const auto docs = read_lines(artifact("corpus/filler.txt"));
        ModelConfig mc = c.model;
        mc.seed = stage_seed(c, SeedStream::model);
        TrainSpec spec = c.pretrain;
        spec.seed = stage_seed(c, SeedStream::pretrain);
        TrainLog log;
        const auto base = stalab::pretrain(mc, docs, spec, &log);
        save_checkpoint(base, m_dir / ckpt_path("base"));
        auto j = train_log_json(log);
        j["loss_reduction"] = log.initial_loss / log.final_loss;
        write_text_atomic(m_dir / "logs/pretrain.json", j.dump(2) + "\n");
        return std::vector<std::string>{ckpt_path("base"), "logs/pretrain.json"};
    });
}

bool Lab::finetune() {
    const auto& c = m_config;
    ordered_json cfg = {{"seed", c.seed}, {"finetune", to_json(c)["finetune"]}};
    return run_stage("finetune", cfg, {ckpt_path("base"), "corpus/facts.jsonl"}, [&] {
        const auto base = load_checkpoint(artifact(ckpt_path("base")));
        const auto corpus = read_corpus(artifact("corpus/facts.jsonl"));
        std::vector<FactRecord> trained;
        for (const auto& r : corpus.records)
            if (r.split != Split::holdout) trained.push_back(r);
        TrainSpec spec = c.finetune;
        spec.seed = stage_seed(c, SeedStream::finetune);
        TrainLog log;
        const auto ft = stalab::finetune(base, trained, spec, c.memorization_gate, &log);
        save_checkpoint(ft, m_dir / ckpt_path("fine_tuned"));
        auto j = train_log_json(log);
        j["memorized_trained"] = memorization_rate(ft, trained);
        j["memorized_holdout"] = memorization_rate(ft, corpus.select(Split::holdout));
        write_text_atomic(m_dir / "logs/finetune.json", j.dump(2) + "\n");
        return std::vector<std::string>{ckpt_path("fine_tuned"), "logs/finetune.json"};
    });
}

bool Lab::unlearn(const std::string& method) {
    const auto& c = m_config;
    if (method == "all") {
        bool ran = false;
        for (auto m : c.methods) ran = unlearn(to_string(m)) || ran;
        ran = unlearn("retrain") || ran;
        std::vector<std::string> inputs;
        for (const auto& id : zoo_ids()) inputs.push_back(ckpt_path(id));
        inputs.push_back(ckpt_path("retrain"));
        ran = run_stage("zoo", ordered_json::object(), inputs,
                        [&] {
                            ordered_json zoo = ordered_json::array();
                            for (const auto& in : inputs) {
                                const auto ck = load_checkpoint(artifact(in));
                                zoo.push_back({{"id", ck.id},
                                               {"provenance", ck.provenance.label()},
                                               {"file", in},
                                               {"training_manifest", ck.training_manifest}});
                            }
                            write_text_atomic(m_dir / "zoo/zoo.json", zoo.dump(2) + "\n");
                            return std::vector<std::string>{"zoo/zoo.json"};
                        }) ||
              ran;
        return ran;
    }
    if (method == "retrain") {
        ordered_json cfg = {{"seed", c.seed}, {"finetune", to_json(c)["finetune"]}};
        return run_stage("unlearn:retrain", cfg, {ckpt_path("base"), "corpus/facts.jsonl"}, [&] {
            // Exact unlearning: the whole lineage retrained without the forget set.
            const auto base = load_checkpoint(artifact(ckpt_path("base")));
            const auto corpus = read_corpus(artifact("corpus/facts.jsonl"));
            TrainSpec spec = c.finetune;
            spec.seed = stage_seed(c, SeedStream::finetune);
            auto ret = stalab::finetune(base, corpus.select(Split::retain), spec, c.memorization_gate);
            ret.id = "retrain";
            ret.provenance = {ProvenanceKind::unlearned, "retrain"};
            save_checkpoint(ret, m_dir / ckpt_path("retrain"));
            return std::vector<std::string>{ckpt_path("retrain")};
        });
    }
    const UnlearnMethod m = unlearn_method_from_string(method);
    UnlearnSpec spec = c.unlearn.at(to_string(m));
    spec.method = m;
    spec.seed = derive_seed(stage_seed(c, SeedStream::unlearn), static_cast<std::uint64_t>(m));
    spec.reference = "fine_tuned";
    const std::string id = "unlearned-" + to_string(m);
    ordered_json cfg = {{"seed", c.seed}, {"method", to_string(m)}, {"spec", unlearn_json(spec)}};
    return run_stage("unlearn:" + to_string(m), cfg, {ckpt_path("fine_tuned"), "corpus/facts.jsonl"}, [&] {
        const auto ft = load_checkpoint(artifact(ckpt_path("fine_tuned")));
        const auto corpus = read_corpus(artifact("corpus/facts.jsonl"));
        const auto forget = corpus.select(Split::forget);
        const auto retain = corpus.select(Split::retain);
        const auto u = stalab::unlearn(ft, forget, retain, spec);
        save_checkpoint(u, m_dir / ckpt_path(id));
        const double f0 = mean_completion_nll(ft, forget), f1 = mean_completion_nll(u, forget);
        const double r0 = mean_completion_nll(ft, retain), r1 = mean_completion_nll(u, retain);
        ordered_json j;
        j["method"] = to_string(m);
        j["forget_nll_before"] = f0;
        j["forget_nll_after"] = f1;
        j["forget_nll_ratio"] = f1 / f0;
        j["retain_nll_before"] = r0;
        j["retain_nll_after"] = r1;
        j["retain_accuracy"] = memorization_rate(u, retain);
        j["forget_accuracy"] = memorization_rate(u, forget);
        if (m == UnlearnMethod::IDK) {
            j["refusal_rate"] = refusal_rate(u, forget);
            j["gate"] = "refusal_rate >= 0.8";
            j["gate_passed"] = refusal_rate(u, forget) >= 0.8;
        } else {
            j["gate"] = "forget_nll_ratio >= 1.5";
            j["gate_passed"] = f1 >= 1.5 * f0;
        }
        if (has_retain_term(m)) j["retain_within_2x"] = r1 <= 2.0 * r0;
        write_text_atomic(m_dir / ("logs/unlearn-" + to_string(m) + ".json"), j.dump(2) + "\n");
        return std::vector<std::string>{ckpt_path(id), "logs/unlearn-" + to_string(m) + ".json"};
    });
}

bool Lab::attack() {
    bool ran = false;
    for (const auto& id : zoo_ids()) ran = attack_model(id) || ran;
    return ran;
}

bool Lab::attack_model(const std::string& id) {
    const auto& c = m_config;
    const bool with_holdout = std::find(c.attack.holdout_models.begin(), c.attack.holdout_models.end(), id) !=
                              c.attack.holdout_models.end();
    auto cfg = to_json(c)["attack"];
    cfg["seed"] = c.seed;
    cfg["with_holdout"] = with_holdout;
    return run_stage("attack:" + id, cfg, {ckpt_path(id), "corpus/facts.jsonl"}, [&] {
        const auto ck = load_checkpoint(artifact(ckpt_path(id)));
        const auto corpus = read_corpus(artifact("corpus/facts.jsonl"));
        const auto seed = stage_seed(c, SeedStream::attack);
        auto outcomes = attack_records(ck, corpus.select(Split::forget), c.budget, seed, m_workers);
        if (with_holdout) {
            AttackBudget b = c.budget;
            b.runs_per_prompt = c.attack.holdout_runs;
            auto h = attack_records(ck, corpus.select(Split::holdout), b, seed, m_workers);
            outcomes.insert(outcomes.end(), h.begin(), h.end());
        }
        write_outcomes(outcomes, m_dir / attack_log(id));
        write_timings(outcomes, m_dir / ("logs/timing-" + id + ".csv"));
        return std::vector<std::string>{attack_log(id)};
    });
}

std::map<int, int> max_elicited_length(const std::vector<LengthPoint>& points) {
    std::map<int, int> best;
    std::map<int, bool> broken;
    std::vector<LengthPoint> sorted = points;
    std::sort(sorted.begin(), sorted.end(),
              [](const LengthPoint& a, const LengthPoint& b) { return std::tie(a.k, a.length) < std::tie(b.k, b.length); });
    for (const auto& p : sorted) {
        best.try_emplace(p.k, 0);
        if (broken[p.k]) continue;
        if (p.attempts > 0 && p.successes == p.attempts) best[p.k] = p.length;
        else broken[p.k] = true;
    }
    return best;
}

bool Lab::randstring() {
    const auto& c = m_config;
    auto cfg = to_json(c)["randstring"];
    cfg["seed"] = c.seed;
    cfg["budget"] = to_json(c)["attack"];
    return run_stage("randstring", cfg, {ckpt_path("base")}, [&] {
        const auto ck = load_checkpoint(artifact(ckpt_path("base")));
        const auto model = ck.model<float>();
        const auto seed = stage_seed(c, SeedStream::randstring);
        const int n = c.randstring.strings_per_point;
        std::vector<AttackOutcome> all;
        std::vector<LengthPoint> points;
        for (int k : c.randstring.ks) {
            for (int len = c.randstring.length_step; len <= c.randstring.max_length; len += c.randstring.length_step) {
                if (len + k + 1 > c.model.context_len) break;
                std::vector<AttackOutcome> outs(static_cast<std::size_t>(n));
                parallel_for(outs.size(), m_workers, [&](std::size_t s) {
                    // The same strings are used for every k.
                    const auto rs = gen_random_string(derive_seed(derive_seed(seed, static_cast<std::uint64_t>(len)), s),
                                                      len);
                    auto o = elicit_random_string(model, rs, k, c.budget,
                                                  derive_seed(derive_seed(seed, 1000 + static_cast<std::uint64_t>(k)),
                                                              static_cast<std::uint64_t>(len) * 64 + s));
                    o.model_id = ck.id;
                    o.run = static_cast<int>(s);
                    outs[s] = std::move(o);
                });
                LengthPoint p{k, len, 0, n};
                for (const auto& o : outs) p.successes += o.success ? 1 : 0;
                points.push_back(p);
                all.insert(all.end(), outs.begin(), outs.end());
                log("randstring k=" + std::to_string(k) + " length=" + std::to_string(len) + " " +
                    std::to_string(p.successes) + "/" + std::to_string(n));
                if (p.successes < n) break;
            }
        }
        write_outcomes(all, m_dir / "logs/randstring.jsonl");
        write_timings(all, m_dir / "logs/timing-randstring.csv");
        std::ostringstream pts;
        pts << "k,length,successes,attempts\n";
        for (const auto& p : points) pts << p.k << ',' << p.length << ',' << p.successes << ',' << p.attempts << '\n';
        write_text_atomic(m_dir / "reports/randstring_points.csv", pts.str());
        std::ostringstream lk;
        lk << "k,max_length\n";
        for (const auto& [k, l] : max_elicited_length(points)) lk << k << ',' << l << '\n';
        write_text_atomic(m_dir / "reports/fig2.csv", lk.str());
        return std::vector<std::string>{"logs/randstring.jsonl", "reports/randstring_points.csv", "reports/fig2.csv"};
    });
}

namespace {

std::vector<AttackOutcome> forget_outcomes(const std::vector<AttackOutcome>& all, const FactCorpus& corpus) {
    std::set<std::string> forget;
    for (const auto& id : corpus.ids(Split::forget)) forget.insert(id);
    std::vector<AttackOutcome> out;
    for (const auto& o : all)
        if (forget.contains(o.target_id)) out.push_back(o);
    return out;
}

TableRow table_row(const std::string& id, const std::vector<AttackOutcome>& outcomes, int cap) {
    std::vector<double> v;
    int failures = 0;
    for (const auto& o : outcomes) {
        v.push_back(sample_value(o, cap));
        failures += o.success ? 0 : 1;
    }
    TableRow r;
    r.model_id = id;
    r.mean = v.empty() ? 0.0 : mean(v);
    r.sd = v.size() < 2 ? 0.0 : sample_sd(v);
    r.n = static_cast<int>(v.size());
    r.failures = failures;
    return r;
}

} // namespace

bool Lab::audit() {
    const auto& c = m_config;
    std::vector<std::string> inputs{"corpus/facts.jsonl", "zoo/zoo.json"};
    for (const auto& id : zoo_ids()) inputs.push_back(attack_log(id));
    ordered_json cfg = to_json(c)["audit"];
    cfg["cap"] = c.budget.max_soft_tokens;
    return run_stage("audit", cfg, inputs, [&] {
        const auto corpus = read_corpus(artifact("corpus/facts.jsonl"));
        const int cap = c.budget.max_soft_tokens;
        std::map<std::string, std::vector<AttackOutcome>> forget;
        for (const auto& id : zoo_ids()) forget[id] = forget_outcomes(read_outcomes(artifact(attack_log(id))), corpus);

        std::vector<TableRow> rows;
        for (const auto& id : zoo_ids()) rows.push_back(table_row(id, forget[id], cap));
        std::vector<AuditReport> reports;
        for (const auto& id : zoo_ids()) {
            if (id == "base") continue;
            for (const std::string baseline : {"fine_tuned", "base"}) {
                if (id == baseline) continue;
                reports.push_back(build_report(id, forget[id], baseline, forget[baseline], cap, c.audit.alpha,
                                               c.audit.alternative));
            }
        }
        ordered_json arr = ordered_json::array();
        for (const auto& r : reports) arr.push_back(to_json(r));
        write_text_atomic(m_dir / "reports/audit.json", arr.dump(2) + "\n");
        write_text_atomic(m_dir / "reports/table.txt",
                          render_table_text(rows, "Soft tokens needed to elicit forget-set completions"));
        write_text_atomic(m_dir / "reports/table.csv", render_table_csv(rows));
        write_text_atomic(m_dir / "reports/pairs.txt", render_pairs_text(reports));
        write_text_atomic(m_dir / "reports/pairs.csv", render_pairs_csv(reports));

        // Oracle audit of every zoo model, exact unlearning included.
        const auto zoo = json::parse(read_text(artifact("zoo/zoo.json")));
        std::vector<std::string> candidates;
        for (const auto& r : corpus.records) candidates.push_back(r.id);
        ordered_json oracle = ordered_json::array();
        for (const auto& entry : zoo) {
            ModelManifest mm{entry.at("id").get<std::string>(),
                             Provenance::parse(entry.at("provenance").get<std::string>()),
                             entry.at("training_manifest").get<std::vector<std::string>>()};
            const auto decisions = oracle_audit(mm, candidates, corpus);
            // Ground truth for the oracle: which facts the lineage actually trained on.
            std::vector<std::string> members;
            if (mm.provenance.kind == ProvenanceKind::fine_tuned ||
                (mm.provenance.kind == ProvenanceKind::unlearned && mm.provenance.method != "retrain")) {
                members = corpus.trained_ids();
            } else if (mm.provenance.kind == ProvenanceKind::unlearned) {
                members = corpus.ids(Split::retain);
            }
            const auto q = score_decisions(decisions, members);
            int forget_flagged = 0;
            for (const auto& d : decisions)
                if (corpus.find(d.record_id).split == Split::forget) forget_flagged += d.a;
            oracle.push_back({{"model_id", mm.model_id},
                              {"provenance", mm.provenance.label()},
                              {"precision", q.precision()},
                              {"recall", q.recall()},
                              {"forget_records_flagged", forget_flagged}});
        }
        write_text_atomic(m_dir / "reports/oracle.json", oracle.dump(2) + "\n");
        return std::vector<std::string>{"reports/audit.json", "reports/table.txt", "reports/table.csv",
                                        "reports/pairs.txt",  "reports/pairs.csv", "reports/oracle.json"};
    });
}

bool Lab::probe() {
    const auto& c = m_config;
    std::vector<std::string> inputs{"zoo/zoo.json"};
    for (const auto& id : zoo_ids()) inputs.push_back(attack_log(id));
    ordered_json cfg = to_json(c)["probe"];
    cfg["seed"] = c.seed;
    return run_stage("probe", cfg, inputs, [&] {
        std::map<std::string, Provenance> provenance;
        for (const auto& entry : json::parse(read_text(artifact("zoo/zoo.json"))))
            provenance[entry.at("id").get<std::string>()] =
                Provenance::parse(entry.at("provenance").get<std::string>());
        std::vector<AttackOutcome> all;
        for (const auto& id : zoo_ids()) {
            auto o = read_outcomes(artifact(attack_log(id)));
            all.insert(all.end(), o.begin(), o.end());
        }
        // Too few k=1 rows is a finding about the zoo, not a broken run: record it and leave the fit out.
        const auto data = collect_probe_data(all, provenance, 0);
        ordered_json j;
        j["rows_base"] = data.count(0, false);
        j["rows_fine_tuned"] = data.count(1, false);
        j["rows_unlearned"] = data.count(1, true);
        const auto need = static_cast<std::size_t>(c.probe.min_per_class);
        if (data.count(0, false) < need || data.count(1, false) < need || data.count(1, true) == 0) {
            j["status"] = "insufficient_data";
            j["min_per_class"] = c.probe.min_per_class;
            write_text_atomic(m_dir / "reports/probe.json", j.dump(2) + "\n");
            return std::vector<std::string>{"reports/probe.json"};
        }
        ProbeOptions opts;
        opts.l2 = c.probe.l2;
        const auto real = train_probe(data, opts);
        const auto shuffled = train_probe(permute_labels(data, stage_seed(c, SeedStream::probe)), opts);
        j["status"] = "fitted";
        j["train_accuracy"] = real.train_accuracy;
        j["eval_accuracy"] = real.eval_accuracy;
        j["permutation_train_accuracy"] = shuffled.train_accuracy;
        j["permutation_eval_accuracy"] = shuffled.eval_accuracy;
        write_text_atomic(m_dir / "reports/probe.json", j.dump(2) + "\n");
        return std::vector<std::string>{"reports/probe.json"};
    });
}

bool Lab::report() {
    std::vector<std::string> inputs{"logs/pretrain.json", "logs/finetune.json", "reports/table.txt",
                                    "reports/pairs.txt",  "reports/oracle.json", "reports/fig2.csv",
                                    "reports/probe.json"};
    for (auto m : m_config.methods) inputs.push_back("logs/unlearn-" + to_string(m) + ".json");
    return run_stage("report", ordered_json::object(), inputs, [&] {
        std::ostringstream os;
        const auto pre = json::parse(read_text(artifact("logs/pretrain.json")));
        const auto ft = json::parse(read_text(artifact("logs/finetune.json")));
        os << "# Run report\n\n";
        os << "## Models\n\n";
        os << "pretrain loss " << fmt(pre["initial_loss"].get<double>(), 4) << " -> "
           << fmt(pre["final_loss"].get<double>(), 4) << "\n";
        os << "fine-tune memorized " << fmt(ft["memorized_trained"].get<double>(), 4) << " of trained facts, "
           << fmt(ft["memorized_holdout"].get<double>(), 4) << " of holdout facts\n\n";
        os << "method    forget NLL ratio  retain acc  gate\n";
        for (auto m : m_config.methods) {
            const auto u = json::parse(read_text(artifact("logs/unlearn-" + to_string(m) + ".json")));
            std::string name = to_string(m);
            name.resize(10, ' ');
            std::string ratio = fmt(u["forget_nll_ratio"].get<double>(), 3);
            ratio.resize(18, ' ');
            os << name << ratio << fmt(u["retain_accuracy"].get<double>(), 3) << "       "
               << u["gate"].get<std::string>() << ": "
               << (u["gate_passed"].get<bool>() ? "pass" : "FAIL") << "\n";
        }
        os << "\n## Soft tokens needed (forget set)\n\n" << read_text(artifact("reports/table.txt"));
        os << "\n## Pairwise Welch tests\n\n" << read_text(artifact("reports/pairs.txt"));
        os << "\n## Oracle audit\n\n";
        for (const auto& o : json::parse(read_text(artifact("reports/oracle.json"))))
            os << o["model_id"].get<std::string>() << ": precision " << fmt(o["precision"].get<double>(), 3)
               << " recall " << fmt(o["recall"].get<double>(), 3) << " forget flagged "
               << o["forget_records_flagged"].get<int>() << "\n";
        os << "\n## Random strings, max elicited length L(k)\n\n" << read_text(artifact("reports/fig2.csv"));
        const auto pr = json::parse(read_text(artifact("reports/probe.json")));
        os << "\n## Soft-token probe\n\n";
        os << "rows: base " << pr["rows_base"].get<int>() << ", fine-tuned " << pr["rows_fine_tuned"].get<int>()
           << ", unlearned " << pr["rows_unlearned"].get<int>() << "\n";
        if (pr["status"] == "fitted") {
            os << "train accuracy " << fmt(pr["train_accuracy"].get<double>(), 4) << ", eval accuracy "
               << fmt(pr["eval_accuracy"].get<double>(), 4) << "\n";
            os << "shuffled labels: train " << fmt(pr["permutation_train_accuracy"].get<double>(), 4) << ", eval "
               << fmt(pr["permutation_eval_accuracy"].get<double>(), 4) << "\n";
        } else {
            os << "not fitted: fewer than " << pr["min_per_class"].get<int>()
               << " single-token successes in a training class, or none on unlearned models\n";
        }
        write_text_atomic(m_dir / "reports/report.md", os.str());
        return std::vector<std::string>{"reports/report.md"};
    });
}

void Lab::pipeline() {
    gen_corpus();
    pretrain();
    finetune();
    unlearn("all");
    attack();
    randstring();
    audit();
    probe();
    report();
}

} // namespace stalab
