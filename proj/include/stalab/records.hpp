#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "stalab/audit.hpp"
#include "stalab/sta.hpp"

namespace stalab {

inline constexpr const char* kOutcomeSchema = "stalab.attack_outcome/1";
inline constexpr const char* kReportSchema = "stalab.audit_report/1";

/// Canonical form: everything except wall-clock time, so logs written by two
/// identical runs are byte-identical.
nlohmann::ordered_json to_json(const AttackOutcome& o);
AttackOutcome outcome_from_json(const nlohmann::json& j);

/// One outcome per line. Throws IoError.
void write_outcomes(std::span<const AttackOutcome> outcomes, const std::filesystem::path& path);
/// Throws MissingArtifact or CorruptArtifact (schema mismatch, bad JSON).
std::vector<AttackOutcome> read_outcomes(const std::filesystem::path& path);

/// Wall-clock seconds per outcome, kept apart from the canonical log.
void write_timings(std::span<const AttackOutcome> outcomes, const std::filesystem::path& path);

nlohmann::ordered_json to_json(const AuditReport& r);
AuditReport report_from_json(const nlohmann::json& j);

/// Writes `text` via a temporary file and rename.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

} // namespace stalab
