#include <doctest.h>

#include <algorithm>
#include <set>

#include "stalab/audit.hpp"
#include "stalab/error.hpp"
#include "stalab/rng.hpp"
#include "test_util.hpp"

using namespace stalab;

namespace {

AttackOutcome outcome(const std::string& model, const std::string& record, int run, int k, bool success) {
    AttackOutcome o;
    o.model_id = model;
    o.target_id = record;
    o.run = run;
    o.soft_tokens_used = k;
    o.success = success;
    return o;
}

AttackBudget tiny_budget() {
    AttackBudget b;
    b.max_iters_per_token = 30;
    b.max_soft_tokens = 2;
    b.lr = 0.05;
    b.runs_per_prompt = 3;
    return b;
}

std::vector<FactRecord> tiny_records() {
    return {{"f0", "a", "b", Split::forget}, {"f1", "c", "de", Split::forget}};
}

} // namespace

TEST_CASE("oracle audit recovers membership exactly") {
    const auto corpus = gen_fact_corpus(CorpusParams{});
    ModelManifest ft{"fine_tuned", {ProvenanceKind::fine_tuned, ""}, {"doc-0"}};
    for (const auto& id : corpus.trained_ids()) ft.training_manifest.push_back(id);
    ModelManifest base{"base", {ProvenanceKind::base, ""}, {"doc-0"}};

    std::vector<std::string> candidates;
    for (const auto& r : corpus.records) candidates.push_back(r.id);
    Rng rng(3);
    rng.shuffle(candidates);

    const auto members = corpus.trained_ids();
    const auto d_ft = oracle_audit(ft, candidates, corpus);
    REQUIRE(d_ft.size() == candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) CHECK(d_ft[i].record_id == candidates[i]);
    const auto q_ft = score_decisions(d_ft, members);
    CHECK(q_ft.precision() == 1.0);
    CHECK(q_ft.recall() == 1.0);
    CHECK(q_ft.true_positive == static_cast<int>(members.size()));
    CHECK(q_ft.true_negative == static_cast<int>(corpus.ids(Split::holdout).size()));

    const auto q_base = score_decisions(oracle_audit(base, candidates, corpus), members);
    CHECK(q_base.true_positive == 0);
    CHECK(q_base.false_positive == 0);
    CHECK(q_base.false_negative == static_cast<int>(members.size()));
    CHECK(q_base.recall() == 0.0);

    const std::vector<std::string> bad{"nope"};
    CHECK_THROWS_AS(oracle_audit(ft, bad, corpus), UnknownRecord);
}

TEST_CASE("decision quality edge cases") {
    DecisionQuality q;
    CHECK(q.precision() == 1.0);
    CHECK(q.recall() == 1.0);
    q.true_positive = 3;
    q.false_positive = 1;
    q.false_negative = 2;
    CHECK(q.precision() == 0.75);
    CHECK(q.recall() == 0.6);
}

TEST_CASE("sample values and common seeds") {
    CHECK(sample_value(outcome("m", "r", 0, 4, true), 16) == 4.0);
    CHECK(sample_value(outcome("m", "r", 0, 16, false), 16) == 17.0);
    CHECK(run_seed(7, "fact-1", 0) == run_seed(7, "fact-1", 0));
    std::set<std::uint64_t> seeds;
    for (int run = 0; run < 5; ++run)
        for (const char* r : {"fact-1", "fact-2", "fact-3"}) seeds.insert(run_seed(7, r, run));
    CHECK(seeds.size() == 15);
    CHECK(run_seed(7, "fact-1", 0) != run_seed(8, "fact-1", 0));
}

TEST_CASE("report statistics match a direct Welch test") {
    std::vector<AttackOutcome> a, b;
    const std::vector<int> ka{1, 2, 1, 4, 16}, kb{1, 1, 2, 1, 1};
    for (int i = 0; i < 5; ++i) {
        a.push_back(outcome("u", "r" + std::to_string(i), 0, ka[i], i != 4));
        b.push_back(outcome("f", "r" + std::to_string(i), 0, kb[i], true));
    }
    const auto rep = build_report("u", a, "f", b, 16, 0.05);
    CHECK(rep.values_a() == std::vector<double>{1, 2, 1, 4, 17});
    CHECK(rep.failures_a == 1);
    CHECK(rep.failures_b == 0);
    const auto w = welch_t(rep.values_a(), rep.values_b());
    CHECK(rep.test.t == w.t);
    CHECK(rep.test.p == w.p);
    CHECK(rep.mean_a == mean(rep.values_a()));
    CHECK(rep.sd_b == sample_sd(rep.values_b()));
    CHECK(rep.score == doctest::Approx(1.0 - w.p));
    CHECK(rep.model_a == "u");
    CHECK(rep.samples_a.size() == 5);

    // The decision flips exactly at alpha = p.
    CHECK(build_report("u", a, "f", b, 16, std::nextafter(w.p, 1.0)).decision == Decision::distinguishable);
    CHECK(build_report("u", a, "f", b, 16, w.p).decision == Decision::indistinguishable);
}

TEST_CASE("decisions become distinguishable as the gap grows") {
    Rng rng(5);
    std::vector<AttackOutcome> base;
    for (int i = 0; i < 30; ++i) base.push_back(outcome("f", "r" + std::to_string(i), 0, 1 << rng.uniform_int(2), true));
    bool seen_indist = false, seen_dist = false;
    double last_p = 2.0;
    for (int shift = 0; shift <= 3; ++shift) {
        std::vector<AttackOutcome> moved;
        for (const auto& o : base) moved.push_back(outcome("u", o.target_id, 0, o.soft_tokens_used << shift, true));
        const auto rep = build_report("u", moved, "f", base, 16);
        CHECK(rep.test.p <= last_p);
        last_p = rep.test.p;
        (rep.decision == Decision::distinguishable ? seen_dist : seen_indist) = true;
    }
    CHECK(seen_dist);
    CHECK(seen_indist);
}

TEST_CASE("identical checkpoints give identical samples") {
    const auto ckpt = testutil::tiny_checkpoint(1);
    auto twin = ckpt;
    twin.id = "twin";
    const auto records = tiny_records();
    const auto rep = sta_audit(twin, ckpt, records, tiny_budget(), 9);
    CHECK(rep.values_a() == rep.values_b());
    CHECK(rep.test.p == doctest::Approx(1.0));
    CHECK(rep.decision == Decision::indistinguishable);
    CHECK(rep.samples_a.size() == 6);
    for (const auto& s : rep.samples_a) CHECK(s.model_id == "twin");
}

TEST_CASE("attack_records order does not depend on worker count") {
    const auto ckpt = testutil::tiny_checkpoint(2);
    const auto records = tiny_records();
    const auto one = attack_records(ckpt, records, tiny_budget(), 4, 1);
    const auto many = attack_records(ckpt, records, tiny_budget(), 4, 3);
    REQUIRE(one.size() == 6);
    REQUIRE(many.size() == 6);
    for (std::size_t i = 0; i < one.size(); ++i) {
        CHECK(one[i].target_id == records[i / 3].id);
        CHECK(one[i].run == static_cast<int>(i % 3));
        CHECK(one[i].target_id == many[i].target_id);
        CHECK(one[i].soft_tokens_used == many[i].soft_tokens_used);
        CHECK(one[i].soft_embeddings == many[i].soft_embeddings);
    }
}

TEST_CASE("incompatible architectures are rejected") {
    const auto a = testutil::tiny_checkpoint(3, 2);
    const auto b = testutil::tiny_checkpoint(3, 1);
    CHECK_THROWS_AS(sta_audit(a, b, tiny_records(), tiny_budget(), 1), IncompatibleModels);
}

TEST_CASE("table and pair renderings") {
    const std::vector<TableRow> rows{{"base", 1.5, 0.25, 50, 0}, {"unlearned-GA", 2.0, 1.0, 50, 2}};
    const auto text = render_table_text(rows, "Soft tokens needed");
    CHECK(text.find("Soft tokens needed") != std::string::npos);
    CHECK(text.find("1.50±0.25") != std::string::npos);
    CHECK(text.find("unlearned-GA") != std::string::npos);
    const auto csv = render_table_csv(rows);
    CHECK(csv.rfind("model,mean,sd,n,failures\n", 0) == 0);
    CHECK(csv.find("unlearned-GA,2") != std::string::npos);

    std::vector<AttackOutcome> a, b;
    for (int i = 0; i < 4; ++i) {
        a.push_back(outcome("u", "r", i, 1 + i, true));
        b.push_back(outcome("f", "r", i, 1, true));
    }
    const std::vector<AuditReport> reports{build_report("u", a, "f", b, 16)};
    CHECK(render_pairs_text(reports).find("u") != std::string::npos);
    const auto pcsv = render_pairs_csv(reports);
    CHECK(pcsv.rfind("model_a,model_b,", 0) == 0);
    CHECK(std::count(pcsv.begin(), pcsv.end(), '\n') == 2);
}
