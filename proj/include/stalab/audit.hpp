#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "stalab/corpus.hpp"
#include "stalab/model.hpp"
#include "stalab/sta.hpp"
#include "stalab/stats.hpp"

namespace stalab {

/// What the oracle auditor is allowed to see about a model: its id and the
/// training manifest of its whole lineage.
struct ModelManifest {
    std::string model_id;
    Provenance provenance;
    std::vector<std::string> training_manifest;

    static ModelManifest of(const ModelCheckpoint& ckpt) {
        return {ckpt.id, ckpt.provenance, ckpt.training_manifest};
    }
};

struct OracleDecision {
    std::string model_id;
    std::string record_id;
    int a = 0;  ///< 1 iff the record is in the model's training lineage
};

/// Ground-truth membership decisions. Throws UnknownRecord for candidates
/// that are not in `corpus`.
std::vector<OracleDecision> oracle_audit(const ModelManifest& model, std::span<const std::string> candidates,
                                         const FactCorpus& corpus);

struct DecisionQuality {
    int true_positive = 0;
    int false_positive = 0;
    int false_negative = 0;
    int true_negative = 0;
    /// 1.0 when there are no positive predictions (resp. no positives).
    double precision() const;
    double recall() const;
};

/// Scores decisions against `members` (the ids that truly were trained).
DecisionQuality score_decisions(std::span<const OracleDecision> decisions, std::span<const std::string> members);

enum class Decision { distinguishable, indistinguishable };
std::string to_string(Decision d);

struct SampleRecord {
    std::string model_id;
    std::string record_id;
    int run = 0;
    double value = 0.0;  ///< soft tokens used, or cap + 1 on failure
    bool success = false;
};

struct AuditReport {
    std::string model_a;
    std::string model_b;
    std::vector<SampleRecord> samples_a;
    std::vector<SampleRecord> samples_b;
    double mean_a = 0.0, sd_a = 0.0;
    double mean_b = 0.0, sd_b = 0.0;
    int failures_a = 0, failures_b = 0;
    WelchResult test;
    Alternative alternative = Alternative::two_sided;
    double alpha = 0.05;
    Decision decision = Decision::indistinguishable;
    /// Heuristic score 1 − p clamped into (0, 1); not a calibrated probability.
    double score = 0.0;

    std::vector<double> values_a() const;
    std::vector<double> values_b() const;
};

/// Sample value of one outcome: soft tokens used, or cap + 1 when it failed.
double sample_value(const AttackOutcome& o, int cap);

/// Per-run seed shared by every model for the same (record, run), so two
/// identical checkpoints produce identical samples.
std::uint64_t run_seed(std::uint64_t seed, std::string_view record_id, int run);

/// attack_schedule for every record, runs_per_prompt times each.
/// Outcomes are ordered record-major, run-minor regardless of `workers`.
std::vector<AttackOutcome> attack_records(const ModelCheckpoint& ckpt, std::span<const FactRecord> records,
                                          const AttackBudget& budget, std::uint64_t seed, int workers = 1);

/// Builds the Welch comparison of two outcome sets (sample a vs sample b).
AuditReport build_report(const std::string& model_a, std::span<const AttackOutcome> outcomes_a,
                         const std::string& model_b, std::span<const AttackOutcome> outcomes_b, int cap,
                         double alpha = 0.05, Alternative alternative = Alternative::two_sided);

/// A_STA: relative difficulty of eliciting the forget completions from
/// `unlearned` versus `fine_tuned`. Throws IncompatibleModels.
AuditReport sta_audit(const ModelCheckpoint& unlearned, const ModelCheckpoint& fine_tuned,
                      std::span<const FactRecord> forget, const AttackBudget& budget, std::uint64_t seed,
                      double alpha = 0.05, int workers = 1);

/// Same comparison against the base model f_∅.
AuditReport audit_vs_base(const ModelCheckpoint& unlearned, const ModelCheckpoint& base,
                          std::span<const FactRecord> records, const AttackBudget& budget, std::uint64_t seed,
                          double alpha = 0.05, int workers = 1);

struct TableRow {
    std::string model_id;
    double mean = 0.0;
    double sd = 0.0;
    int n = 0;
    int failures = 0;
};

/// "mean±sd" per model, one row per model, as aligned text.
std::string render_table_text(std::span<const TableRow> rows, const std::string& title);
std::string render_table_csv(std::span<const TableRow> rows);
/// One line per pairwise report.
std::string render_pairs_text(std::span<const AuditReport> reports);
std::string render_pairs_csv(std::span<const AuditReport> reports);

} // namespace stalab
