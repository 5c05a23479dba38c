#include <doctest.h>

#include <fstream>
#include <set>

#include <json.hpp>

#include "stalab/error.hpp"
#include "stalab/records.hpp"
#include "stalab/run.hpp"
#include "test_util.hpp"

using namespace stalab;
namespace fs = std::filesystem;

namespace {

// A configuration small enough to run every stage in seconds.
RunConfig tiny_config() {
    auto j = nlohmann::json::parse(R"({
      "corpus": {"n_facts": 20, "n_holdout": 4},
      "filler": {"n_docs": 30},
      "model": {"layers": 1, "heads": 2, "model_dim": 16, "ffn_dim": 32, "context_len": 128},
      "pretrain": {"epochs": 1, "batch_size": 8},
      "finetune": {"epochs": 1, "memorization_gate": 0.0},
      "unlearn": {"methods": ["GA", "IDK"], "specs": {"GA": {"steps": 2}, "IDK": {"steps": 2}}},
      "attack": {"max_iters_per_token": 3, "max_soft_tokens": 2, "runs_per_prompt": 2, "holdout_runs": 1},
      "randstring": {"ks": [1], "max_length": 16, "strings_per_point": 2},
      "probe": {"min_per_class": 1}
    })");
    auto c = config_from_json(j);
    c.validate();
    return c;
}

} // namespace

TEST_CASE("default configuration round trips and matches the shipped file") {
    const auto d = RunConfig::defaults();
    CHECK_NOTHROW(d.validate());
    CHECK(to_json(config_from_json(to_json(d))) == to_json(d));
    std::ifstream in(fs::path(STALAB_SOURCE_DIR) / "configs" / "default.json");
    REQUIRE(in);
    CHECK(nlohmann::ordered_json::parse(in) == to_json(d));
}

TEST_CASE("configuration parsing is strict") {
    CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"sed": 3})")), InvalidConfig);
    CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"attack": {"lr": "fast"}})")), InvalidConfig);
    CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"unlearn": {"specs": {"SCRUB": {}}}})")),
                    InvalidConfig);
    CHECK_THROWS_AS(load_config(std::nullopt, {"audit.alpha=2"}, std::nullopt), InvalidConfig);
    CHECK_THROWS_AS(load_config(std::nullopt, {"noequals"}, std::nullopt), InvalidConfig);
    CHECK_THROWS_AS(load_config(fs::path("/nonexistent/config.json"), {}, std::nullopt), MissingArtifact);
}

TEST_CASE("overrides and seeds") {
    const auto c = load_config(std::nullopt, {"attack.runs_per_prompt=3", "audit.alternative=less", "seed=11"},
                               std::nullopt);
    CHECK(c.budget.runs_per_prompt == 3);
    CHECK(c.audit.alternative == Alternative::less);
    CHECK(c.seed == 11);
    CHECK(load_config(std::nullopt, {"seed=11"}, 5).seed == 5);
    const auto u = load_config(std::nullopt, {"unlearn.specs.GA.steps=7"}, std::nullopt);
    CHECK(u.unlearn.at("GA").steps == 7);

    CHECK(stage_seed(c, SeedStream::corpus) == 11);
    std::set<std::uint64_t> seeds;
    for (auto s : {SeedStream::corpus, SeedStream::filler, SeedStream::model, SeedStream::pretrain,
                   SeedStream::finetune, SeedStream::unlearn, SeedStream::attack, SeedStream::randstring,
                   SeedStream::probe})
        seeds.insert(stage_seed(c, s));
    CHECK(seeds.size() == 9);
}

TEST_CASE("L(k) is the longest fully elicited prefix of the sweep") {
    const std::vector<LengthPoint> pts{{1, 8, 5, 5}, {1, 16, 5, 5}, {1, 24, 4, 5}, {1, 32, 5, 5},
                                       {2, 8, 3, 5}, {4, 16, 5, 5}, {4, 8, 5, 5}};
    const auto l = max_elicited_length(pts);
    CHECK(l.at(1) == 16);
    CHECK(l.at(2) == 0);
    CHECK(l.at(4) == 16);
}

TEST_CASE("outcome and report records round trip") {
    const auto dir = testutil::scratch_dir("records");
    AttackOutcome o;
    o.model_id = "m";
    o.target_id = "fact-1";
    o.run = 2;
    o.soft_tokens_used = 4;
    o.ks_tried = {1, 2, 4};
    o.iterations = 123;
    o.schedule_iterations = 6123;
    o.restarts = 1;
    o.success = true;
    o.initial_loss = 3.25;
    o.final_loss = 0.125;
    o.best_loss = 0.125;
    o.seed = 99;
    o.elapsed_seconds = 1.5;
    o.init_token_ids = {3, 4, 5, 6};
    o.soft_embeddings = Mat<float>::Constant(4, 3, 0.1f);
    o.soft_embeddings(2, 1) = -7.0e-3f;
    const std::vector<AttackOutcome> outs{o, o};
    write_outcomes(outs, dir / "o.jsonl");
    const auto back = read_outcomes(dir / "o.jsonl");
    REQUIRE(back.size() == 2);
    CHECK(back[0].soft_embeddings == o.soft_embeddings);
    CHECK(back[0].ks_tried == o.ks_tried);
    CHECK(back[0].init_token_ids == o.init_token_ids);
    CHECK(back[0].iterations == o.iterations);
    CHECK(back[0].seed == o.seed);
    CHECK(back[0].elapsed_seconds == 0.0);
    CHECK(read_text(dir / "o.jsonl").find("elapsed") == std::string::npos);

    write_text_atomic(dir / "bad.jsonl", "{\"schema\":\"other\"}\n");
    CHECK_THROWS_AS(read_outcomes(dir / "bad.jsonl"), CorruptArtifact);
    write_text_atomic(dir / "bad2.jsonl", "{not json\n");
    CHECK_THROWS_AS(read_outcomes(dir / "bad2.jsonl"), CorruptArtifact);
    CHECK_THROWS_AS(read_outcomes(dir / "none.jsonl"), MissingArtifact);

    std::vector<AttackOutcome> a, b;
    for (int i = 0; i < 3; ++i) {
        auto x = o;
        x.run = i;
        x.soft_tokens_used = 1 << i;
        a.push_back(x);
        x.model_id = "n";
        x.soft_tokens_used = 1;
        b.push_back(x);
    }
    const auto rep = build_report("m", a, "n", b, 16);
    const auto rb = report_from_json(nlohmann::json::parse(to_json(rep).dump()));
    CHECK(rb.values_a() == rep.values_a());
    CHECK(rb.test.p == rep.test.p);
    CHECK(rb.decision == rep.decision);
    CHECK(to_json(rep)["score_kind"].get<std::string>().find("heuristic") != std::string::npos);
}

TEST_CASE("lab stages are idempotent and guarded") {
    const auto dir = testutil::scratch_dir("lab");
    const auto cfg = tiny_config();
    {
        Lab lab(cfg, dir);
        CHECK_THROWS_AS(lab.pretrain(), MissingArtifact);
        CHECK(lab.gen_corpus());
        CHECK_FALSE(lab.gen_corpus());
        CHECK(lab.pretrain());
        CHECK(lab.finetune());
        CHECK(lab.unlearn("all"));
        CHECK(lab.zoo_ids() == std::vector<std::string>{"base", "fine_tuned", "unlearned-GA", "unlearned-IDK"});
        CHECK(lab.attack());
        CHECK(lab.randstring());
        CHECK(lab.audit());
        CHECK_FALSE(lab.audit());
        CHECK(fs::exists(dir / "reports" / "table.txt"));
        CHECK(fs::exists(dir / "reports" / "oracle.json"));
        CHECK(fs::exists(dir / "reports" / "fig2.csv"));
        CHECK(fs::exists(dir / "zoo" / "retrain.ckpt"));
    }
    {
        // A fresh Lab over the same directory resumes without rerunning.
        Lab lab(cfg, dir);
        CHECK_FALSE(lab.gen_corpus());
        CHECK_FALSE(lab.attack());
    }
    {
        auto other = cfg;
        other.seed = 8;
        Lab lab(other, dir);
        CHECK_THROWS_AS(lab.gen_corpus(), ConfigMismatch);
    }
    {
        auto other = cfg;
        other.seed = 8;
        Lab lab(other, dir, 1, true);
        CHECK(lab.gen_corpus());
    }
    {
        Lab lab(cfg, dir, 1, true);
        CHECK(lab.gen_corpus());
        CHECK_FALSE(lab.gen_corpus());
    }
    {
        Lab lab(cfg, dir);
        const auto table = dir / "zoo" / "base.ckpt";
        std::ofstream(table, std::ios::app) << "x";
        CHECK_THROWS_AS(lab.artifact("zoo/base.ckpt"), CorruptArtifact);
        CHECK_THROWS_AS(lab.artifact("reports/none.txt"), MissingArtifact);
    }
}

TEST_CASE("probe stage records too few single-token rows instead of failing the run") {
    const auto dir = testutil::scratch_dir("lab-probe");
    auto cfg = tiny_config();
    cfg.probe.min_per_class = 100000;
    Lab lab(cfg, dir);
    lab.pipeline();
    const auto p = nlohmann::json::parse(read_text(dir / "reports" / "probe.json"));
    CHECK(p["status"] == "insufficient_data");
    CHECK(p["min_per_class"] == 100000);
    CHECK_FALSE(p.contains("eval_accuracy"));
    CHECK(read_text(dir / "reports" / "report.md").find("not fitted") != std::string::npos);
}
