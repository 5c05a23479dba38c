#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "stalab/audit.hpp"
#include "stalab/corpus.hpp"
#include "stalab/learn.hpp"
#include "stalab/model.hpp"
#include "stalab/probe.hpp"
#include "stalab/sta.hpp"

namespace stalab {

inline constexpr const char* kCodeVersion = "stalab 0.1.0";

struct FillerParams {
    int n_docs = 8000;
};

struct AttackPlan {
    /// Models whose holdout facts are attacked in addition to the forget set.
    std::vector<std::string> holdout_models{"base", "fine_tuned"};
    /// Runs per holdout fact (the forget set always uses runs_per_prompt).
    int holdout_runs = 5;
};

struct RandStringSweep {
    std::vector<int> ks{1, 2, 4, 8};
    int length_step = 8;
    int max_length = 512;
    int strings_per_point = 5;
};

struct AuditParams {
    double alpha = 0.05;
    Alternative alternative = Alternative::two_sided;
};

struct ProbeParams {
    int min_per_class = 20;
    double l2 = 1.0;
};

/// Everything a run needs. Stage seeds derive from `seed`.
struct RunConfig {
    std::uint64_t seed = 7;
    CorpusParams corpus;
    FillerParams filler;
    ModelConfig model;
    TrainSpec pretrain;
    TrainSpec finetune;
    double memorization_gate = 0.95;
    std::vector<UnlearnMethod> methods{kAllUnlearnMethods.begin(), kAllUnlearnMethods.end()};
    /// Per-method unlearning specs; method, seed and reference are filled in.
    std::map<std::string, UnlearnSpec> unlearn;
    AttackBudget budget;
    AttackPlan attack;
    RandStringSweep randstring;
    AuditParams audit;
    ProbeParams probe;

    static RunConfig defaults();
    void validate() const;
};

/// Stage seed streams.
enum class SeedStream : std::uint64_t { corpus, filler, model, pretrain, finetune, unlearn, attack, randstring, probe };
std::uint64_t stage_seed(const RunConfig& config, SeedStream stream);

nlohmann::ordered_json to_json(const RunConfig& config);
/// Overlays `j` onto the defaults. Throws InvalidConfig on unknown keys or
/// ill-typed values.
RunConfig config_from_json(const nlohmann::json& j);
/// Applies "a.b.c=value" where value is parsed as JSON, falling back to a
/// plain string. Throws InvalidConfig.
void apply_override(nlohmann::json& j, const std::string& assignment);

RunConfig load_config(const std::optional<std::filesystem::path>& path, const std::vector<std::string>& overrides,
                      std::optional<std::uint64_t> seed);

struct ArtifactRecord {
    std::string path;  ///< relative to the run directory
    std::string sha256;
};

struct StageRecord {
    std::string config_hash;
    std::vector<ArtifactRecord> artifacts;
    std::string completed_at;
};

/// manifest.json in the run directory.
struct RunManifest {
    std::string code_version = kCodeVersion;
    std::string config_hash;
    std::map<std::string, StageRecord> stages;

    static RunManifest load(const std::filesystem::path& run_dir);
    void save(const std::filesystem::path& run_dir) const;
};

/// Orchestrates the stages inside one run directory. Each stage is skipped
/// when the manifest already holds it with the same stage hash and intact
/// artifacts; a different stage hash raises ConfigMismatch unless `force`.
class Lab {
public:
    Lab(RunConfig config, std::filesystem::path run_dir, int workers = 1, bool force = false);

    const RunConfig& config() const { return m_config; }
    const std::filesystem::path& dir() const { return m_dir; }
    void set_log(std::function<void(const std::string&)> log) { m_log = std::move(log); }

    /// Each returns true when the stage ran, false when it was skipped.
    bool gen_corpus();
    bool pretrain();
    bool finetune();
    /// `method` is a method name, "all", or "retrain".
    bool unlearn(const std::string& method = "all");
    /// Attacks every zoo model; attack_model attacks one.
    bool attack();
    bool attack_model(const std::string& id);
    bool randstring();
    bool audit();
    bool probe();
    bool report();
    /// Every stage in order.
    void pipeline();

    /// Artifact path after verifying its checksum against the manifest.
    /// Throws MissingArtifact or CorruptArtifact.
    std::filesystem::path artifact(const std::string& relpath) const;

    /// Zoo model ids in report order: base, fine_tuned, unlearned-<M>...
    std::vector<std::string> zoo_ids() const;

private:
    bool run_stage(const std::string& name, const nlohmann::ordered_json& stage_config,
                   const std::vector<std::string>& inputs, const std::function<std::vector<std::string>()>& body);
    void log(const std::string& msg) const;

    RunConfig m_config;
    std::filesystem::path m_dir;
    int m_workers;
    bool m_force;
    RunManifest m_manifest;
    std::function<void(const std::string&)> m_log;
};

/// L(k): the longest swept length at which every string was elicited.
struct LengthPoint {
    int k = 0;
    int length = 0;
    int successes = 0;
    int attempts = 0;
};
std::map<int, int> max_elicited_length(const std::vector<LengthPoint>& points);

} // namespace stalab
