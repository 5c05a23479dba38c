#include "stalab/records.hpp"

#include <fstream>
#include <sstream>

#include "stalab/error.hpp"

namespace stalab {

using nlohmann::json;
using nlohmann::ordered_json;

ordered_json to_json(const AttackOutcome& o) {
    ordered_json j;
    j["schema"] = kOutcomeSchema;
    j["model_id"] = o.model_id;
    j["target_id"] = o.target_id;
    j["run"] = o.run;
    j["soft_tokens_used"] = o.soft_tokens_used;
    j["ks_tried"] = o.ks_tried;
    j["iterations"] = o.iterations;
    j["schedule_iterations"] = o.schedule_iterations;
    j["restarts"] = o.restarts;
    j["success"] = o.success;
    j["initial_loss"] = o.initial_loss;
    j["final_loss"] = o.final_loss;
    j["best_loss"] = o.best_loss;
    j["seed"] = o.seed;
    j["init_token_ids"] = o.init_token_ids;
    ordered_json rows = ordered_json::array();
    for (Eigen::Index r = 0; r < o.soft_embeddings.rows(); ++r) {
        ordered_json row = ordered_json::array();
        for (Eigen::Index c = 0; c < o.soft_embeddings.cols(); ++c) row.push_back(o.soft_embeddings(r, c));
        rows.push_back(std::move(row));
    }
    j["soft_embeddings"] = std::move(rows);
    return j;
}

AttackOutcome outcome_from_json(const json& j) {
    if (j.value("schema", std::string{}) != kOutcomeSchema)
        throw CorruptArtifact("unexpected outcome schema " + j.value("schema", std::string{"<none>"}));
    AttackOutcome o;
    o.model_id = j.at("model_id").get<std::string>();
    o.target_id = j.at("target_id").get<std::string>();
    o.run = j.at("run").get<int>();
    o.soft_tokens_used = j.at("soft_tokens_used").get<int>();
    o.ks_tried = j.at("ks_tried").get<std::vector<int>>();
    o.iterations = j.at("iterations").get<long>();
    o.schedule_iterations = j.at("schedule_iterations").get<long>();
    o.restarts = j.at("restarts").get<int>();
    o.success = j.at("success").get<bool>();
    o.initial_loss = j.at("initial_loss").get<double>();
    o.final_loss = j.at("final_loss").get<double>();
    o.best_loss = j.at("best_loss").get<double>();
    o.seed = j.at("seed").get<std::uint64_t>();
    o.init_token_ids = j.at("init_token_ids").get<TokenSeq>();
    const auto& rows = j.at("soft_embeddings");
    const auto n = static_cast<Eigen::Index>(rows.size());
    const auto d = n == 0 ? Eigen::Index{0} : static_cast<Eigen::Index>(rows[0].size());
    o.soft_embeddings.resize(n, d);
    for (Eigen::Index r = 0; r < n; ++r) {
        if (static_cast<Eigen::Index>(rows[r].size()) != d) throw CorruptArtifact("ragged soft_embeddings");
        for (Eigen::Index c = 0; c < d; ++c) o.soft_embeddings(r, c) = rows[r][c].get<float>();
    }
    return o;
}

void write_outcomes(std::span<const AttackOutcome> outcomes, const std::filesystem::path& path) {
    std::ostringstream os;
    for (const auto& o : outcomes) os << to_json(o).dump() << '\n';
    write_text_atomic(path, os.str());
}

std::vector<AttackOutcome> read_outcomes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("cannot read outcomes " + path.string());
    std::vector<AttackOutcome> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            out.push_back(outcome_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw CorruptArtifact(path.string() + ": " + e.what());
        }
    }
    return out;
}

void write_timings(std::span<const AttackOutcome> outcomes, const std::filesystem::path& path) {
    std::ostringstream os;
    os << "model_id,target_id,run,elapsed_seconds\n";
    for (const auto& o : outcomes)
        os << o.model_id << ',' << o.target_id << ',' << o.run << ',' << o.elapsed_seconds << '\n';
    write_text_atomic(path, os.str());
}

namespace {

ordered_json samples_json(const std::vector<SampleRecord>& samples) {
    ordered_json arr = ordered_json::array();
    for (const auto& s : samples)
        arr.push_back({{"record_id", s.record_id}, {"run", s.run}, {"value", s.value}, {"success", s.success}});
    return arr;
}

std::vector<SampleRecord> samples_from_json(const json& arr, const std::string& model_id) {
    std::vector<SampleRecord> out;
    for (const auto& s : arr)
        out.push_back({model_id, s.at("record_id").get<std::string>(), s.at("run").get<int>(),
                       s.at("value").get<double>(), s.at("success").get<bool>()});
    return out;
}

const char* to_string(Alternative a) {
    switch (a) {
    case Alternative::less: return "less";
    case Alternative::greater: return "greater";
    default: return "two-sided";
    }
}

Alternative alternative_from_string(const std::string& s) {
    if (s == "less") return Alternative::less;
    if (s == "greater") return Alternative::greater;
    if (s == "two-sided") return Alternative::two_sided;
    throw CorruptArtifact("unknown alternative " + s);
}

} // namespace

ordered_json to_json(const AuditReport& r) {
    ordered_json j;
    j["schema"] = kReportSchema;
    j["model_a"] = r.model_a;
    j["model_b"] = r.model_b;
    j["mean_a"] = r.mean_a;
    j["sd_a"] = r.sd_a;
    j["mean_b"] = r.mean_b;
    j["sd_b"] = r.sd_b;
    j["failures_a"] = r.failures_a;
    j["failures_b"] = r.failures_b;
    j["t"] = r.test.t;
    j["dof"] = r.test.dof;
    j["p"] = r.test.p;
    j["degenerate"] = r.test.degenerate;
    j["alternative"] = to_string(r.alternative);
    j["alpha"] = r.alpha;
    j["decision"] = to_string(r.decision);
    j["score"] = r.score;
    j["score_kind"] = "heuristic: 1 - p";
    j["samples_a"] = samples_json(r.samples_a);
    j["samples_b"] = samples_json(r.samples_b);
    return j;
}

AuditReport report_from_json(const json& j) {
    if (j.value("schema", std::string{}) != kReportSchema) throw CorruptArtifact("unexpected report schema");
    AuditReport r;
    r.model_a = j.at("model_a").get<std::string>();
    r.model_b = j.at("model_b").get<std::string>();
    r.mean_a = j.at("mean_a").get<double>();
    r.sd_a = j.at("sd_a").get<double>();
    r.mean_b = j.at("mean_b").get<double>();
    r.sd_b = j.at("sd_b").get<double>();
    r.failures_a = j.at("failures_a").get<int>();
    r.failures_b = j.at("failures_b").get<int>();
    r.test.t = j.at("t").get<double>();
    r.test.dof = j.at("dof").get<double>();
    r.test.p = j.at("p").get<double>();
    r.test.degenerate = j.at("degenerate").get<bool>();
    r.alternative = alternative_from_string(j.at("alternative").get<std::string>());
    r.alpha = j.at("alpha").get<double>();
    r.decision = j.at("decision").get<std::string>() == "distinguishable" ? Decision::distinguishable
                                                                          : Decision::indistinguishable;
    r.score = j.at("score").get<double>();
    r.samples_a = samples_from_json(j.at("samples_a"), r.model_a);
    r.samples_b = samples_from_json(j.at("samples_b"), r.model_b);
    return r;
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << text;
        if (!out) throw IoError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("cannot read " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

} // namespace stalab
