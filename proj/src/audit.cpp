#include "stalab/audit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "stalab/error.hpp"
#include "stalab/hash.hpp"
#include "stalab/parallel.hpp"
#include "stalab/rng.hpp"

namespace stalab {

std::vector<OracleDecision> oracle_audit(const ModelManifest& model, std::span<const std::string> candidates,
                                         const FactCorpus& corpus) {
    const std::set<std::string> trained(model.training_manifest.begin(), model.training_manifest.end());
    std::vector<OracleDecision> out;
    out.reserve(candidates.size());
    for (const auto& id : candidates) {
        (void)corpus.find(id);  // throws UnknownRecord
        out.push_back({model.model_id, id, trained.contains(id) ? 1 : 0});
    }
    return out;
}

double DecisionQuality::precision() const {
    const int predicted = true_positive + false_positive;
    return predicted == 0 ? 1.0 : static_cast<double>(true_positive) / predicted;
}

double DecisionQuality::recall() const {
    const int actual = true_positive + false_negative;
    return actual == 0 ? 1.0 : static_cast<double>(true_positive) / actual;
}

DecisionQuality score_decisions(std::span<const OracleDecision> decisions, std::span<const std::string> members) {
    const std::set<std::string> truth(members.begin(), members.end());
    DecisionQuality q;
    for (const auto& d : decisions) {
        const bool member = truth.contains(d.record_id);
        if (d.a == 1 && member) ++q.true_positive;
        else if (d.a == 1) ++q.false_positive;
        else if (member) ++q.false_negative;
        else ++q.true_negative;
    }
    return q;
}

std::string to_string(Decision d) {
    return d == Decision::distinguishable ? "distinguishable" : "indistinguishable";
}

std::vector<double> AuditReport::values_a() const {
    std::vector<double> v;
    for (const auto& s : samples_a) v.push_back(s.value);
    return v;
}

std::vector<double> AuditReport::values_b() const {
    std::vector<double> v;
    for (const auto& s : samples_b) v.push_back(s.value);
    return v;
}

double sample_value(const AttackOutcome& o, int cap) {
    return o.success ? static_cast<double>(o.soft_tokens_used) : static_cast<double>(cap + 1);
}

std::uint64_t run_seed(std::uint64_t seed, std::string_view record_id, int run) {
    const std::uint64_t key = std::stoull(sha256_hex(record_id).substr(0, 15), nullptr, 16);
    return derive_seed(derive_seed(seed, key), static_cast<std::uint64_t>(run));
}

std::vector<AttackOutcome> attack_records(const ModelCheckpoint& ckpt, std::span<const FactRecord> records,
                                          const AttackBudget& budget, std::uint64_t seed, int workers) {
    budget.validate();
    const auto model = ckpt.model<float>();
    const std::size_t runs = static_cast<std::size_t>(budget.runs_per_prompt);
    std::vector<AttackOutcome> out(records.size() * runs);
    parallel_for(out.size(), workers, [&](std::size_t i) {
        const FactRecord& rec = records[i / runs];
        const int run = static_cast<int>(i % runs);
        AttackTarget target;
        target.id = rec.id;
        target.prompt = encode(rec.prompt);
        target.completion = encode(rec.completion);
        auto o = attack_schedule(model, target, budget, run_seed(seed, rec.id, run));
        o.model_id = ckpt.id;
        o.run = run;
        out[i] = std::move(o);
    });
    return out;
}

AuditReport build_report(const std::string& model_a, std::span<const AttackOutcome> outcomes_a,
                         const std::string& model_b, std::span<const AttackOutcome> outcomes_b, int cap,
                         double alpha, Alternative alternative) {
    AuditReport r;
    r.model_a = model_a;
    r.model_b = model_b;
    r.alpha = alpha;
    r.alternative = alternative;
    for (const auto& o : outcomes_a) {
        r.samples_a.push_back({model_a, o.target_id, o.run, sample_value(o, cap), o.success});
        if (!o.success) ++r.failures_a;
    }
    for (const auto& o : outcomes_b) {
        r.samples_b.push_back({model_b, o.target_id, o.run, sample_value(o, cap), o.success});
        if (!o.success) ++r.failures_b;
    }
    const auto va = r.values_a();
    const auto vb = r.values_b();
    r.mean_a = mean(va);
    r.sd_a = sample_sd(va);
    r.mean_b = mean(vb);
    r.sd_b = sample_sd(vb);
    r.test = welch_t(va, vb, alternative);
    r.decision = r.test.p < alpha ? Decision::distinguishable : Decision::indistinguishable;
    r.score = std::clamp(1.0 - r.test.p, 1e-12, 1.0 - 1e-12);
    return r;
}

namespace {

void check_compatible(const ModelCheckpoint& a, const ModelCheckpoint& b) {
    if (!(a.config.layers == b.config.layers && a.config.heads == b.config.heads &&
          a.config.model_dim == b.config.model_dim && a.config.ffn_dim == b.config.ffn_dim &&
          a.config.context_len == b.config.context_len && a.config.vocab_size == b.config.vocab_size))
        throw IncompatibleModels("models " + a.id + " and " + b.id + " differ in architecture");
}

} // namespace

AuditReport sta_audit(const ModelCheckpoint& unlearned, const ModelCheckpoint& fine_tuned,
                      std::span<const FactRecord> forget, const AttackBudget& budget, std::uint64_t seed,
                      double alpha, int workers) {
    check_compatible(unlearned, fine_tuned);
    const auto a = attack_records(unlearned, forget, budget, seed, workers);
    const auto b = attack_records(fine_tuned, forget, budget, seed, workers);
    return build_report(unlearned.id, a, fine_tuned.id, b, budget.max_soft_tokens, alpha);
}

AuditReport audit_vs_base(const ModelCheckpoint& unlearned, const ModelCheckpoint& base,
                          std::span<const FactRecord> records, const AttackBudget& budget, std::uint64_t seed,
                          double alpha, int workers) {
    return sta_audit(unlearned, base, records, budget, seed, alpha, workers);
}

namespace {

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string pad(const std::string& s, std::size_t w) {
    return s.size() >= w ? s : s + std::string(w - s.size(), ' ');
}

} // namespace

std::string render_table_text(std::span<const TableRow> rows, const std::string& title) {
    std::size_t w = 5;
    for (const auto& r : rows) w = std::max(w, r.model_id.size());
    std::ostringstream os;
    os << title << '\n';
    os << pad("model", w) << " | soft tokens (mean±sd) | n   | failures\n";
    os << std::string(w, '-') << "-+-----------------------+-----+---------\n";
    for (const auto& r : rows) {
        // "±" is two bytes in UTF-8 but one column wide.
        os << pad(r.model_id, w) << " | " << pad(fmt("%.2f", r.mean) + "±" + fmt("%.2f", r.sd), 23) << "| "
           << pad(std::to_string(r.n), 4) << "| " << r.failures << '\n';
    }
    return os.str();
}

std::string render_table_csv(std::span<const TableRow> rows) {
    std::ostringstream os;
    os << "model,mean,sd,n,failures\n";
    for (const auto& r : rows)
        os << r.model_id << ',' << fmt("%.6f", r.mean) << ',' << fmt("%.6f", r.sd) << ',' << r.n << ','
           << r.failures << '\n';
    return os.str();
}

std::string render_pairs_text(std::span<const AuditReport> reports) {
    std::size_t w = 7;
    for (const auto& r : reports) w = std::max(w, r.model_a.size() + r.model_b.size() + 4);
    std::ostringstream os;
    os << pad("pair", w) << " | t        | dof      | p        | decision\n";
    for (const auto& r : reports) {
        os << pad(r.model_a + " vs " + r.model_b, w) << " | " << pad(fmt("%.4f", r.test.t), 9) << "| "
           << pad(fmt("%.3f", r.test.dof), 9) << "| " << pad(fmt("%.4f", r.test.p), 9) << "| "
           << to_string(r.decision) << (r.test.degenerate ? " (degenerate)" : "") << '\n';
    }
    return os.str();
}

std::string render_pairs_csv(std::span<const AuditReport> reports) {
    std::ostringstream os;
    os << "model_a,model_b,mean_a,sd_a,mean_b,sd_b,t,dof,p,alpha,decision,degenerate\n";
    for (const auto& r : reports)
        os << r.model_a << ',' << r.model_b << ',' << fmt("%.6f", r.mean_a) << ',' << fmt("%.6f", r.sd_a) << ','
           << fmt("%.6f", r.mean_b) << ',' << fmt("%.6f", r.sd_b) << ',' << fmt("%.6f", r.test.t) << ','
           << fmt("%.6f", r.test.dof) << ',' << fmt("%.6f", r.test.p) << ',' << r.alpha << ','
           << to_string(r.decision) << ',' << (r.test.degenerate ? 1 : 0) << '\n';
    return os.str();
}

} // namespace stalab
