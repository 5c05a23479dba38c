#include <doctest.h>

#include <array>

#include "stalab/error.hpp"
#include "stalab/rng.hpp"
#include "stalab/sta.hpp"
#include "test_util.hpp"

using namespace stalab;

namespace {

// 99th percentile of chi-square with 94 degrees of freedom (scipy.stats.chi2.ppf).
constexpr double kChi2Crit94 = 128.80324890961418;

AttackBudget small_budget() {
    AttackBudget b;
    b.max_iters_per_token = 60;
    b.max_soft_tokens = 4;
    b.lr = 0.05;
    return b;
}

AttackTarget make_target(const std::string& prompt, const std::string& completion) {
    return {"t", encode(prompt), encode(completion)};
}

} // namespace

TEST_CASE("soft prompt rows are copies of embedding rows") {
    const auto ckpt = testutil::tiny_checkpoint(1);
    const auto model = ckpt.model<float>();
    const auto sp = init_soft_prompt(model, 8, 42, PromptMode::suffix);
    REQUIRE(sp.k() == 8);
    REQUIRE(sp.init_token_ids.size() == 8);
    for (int r = 0; r < 8; ++r) {
        CHECK(Vocabulary::is_printable(sp.init_token_ids[r]));
        CHECK(sp.embeddings.row(r) == model.embed(TokenSeq(1, sp.init_token_ids[r])).row(0));
    }
    CHECK(init_soft_prompt(model, 8, 42, PromptMode::suffix).init_token_ids == sp.init_token_ids);
    CHECK_THROWS_AS(init_soft_prompt(model, 17, 1, PromptMode::suffix), KTooLarge);
    CHECK_THROWS_AS(init_soft_prompt(model, 0, 1, PromptMode::suffix), InvalidArgument);
}

TEST_CASE("initial token ids are uniform over printable ids") {
    const auto ckpt = testutil::tiny_checkpoint(2);
    const auto model = ckpt.model<float>();
    std::array<long, Vocabulary::kPrintableCount> counts{};
    const int draws = 6250, k = 16;
    for (int s = 0; s < draws; ++s)
        for (TokenId t : init_soft_prompt(model, k, static_cast<std::uint64_t>(s), PromptMode::suffix).init_token_ids)
            ++counts[t];
    const double expected = static_cast<double>(draws) * k / Vocabulary::kPrintableCount;
    double chi2 = 0.0;
    for (long c : counts) chi2 += (c - expected) * (c - expected) / expected;
    CHECK(chi2 < kChi2Crit94);
}

TEST_CASE("soft token schedule") {
    CHECK(soft_token_schedule(16) == std::vector<int>{1, 2, 4, 8, 16});
    CHECK(soft_token_schedule(5) == std::vector<int>{1, 2, 4});
    CHECK(soft_token_schedule(1) == std::vector<int>{1});
}

TEST_CASE("check_success agrees with greedy decoding and teacher forcing") {
    const auto ckpt = testutil::tiny_checkpoint(3);
    const auto model = ckpt.model<float>();
    Rng rng(8);
    int positives = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int n_prefix = 1 + static_cast<int>(rng.uniform_int(6));
        Mat<float> prefix(n_prefix, ckpt.config.model_dim);
        for (Eigen::Index i = 0; i < prefix.size(); ++i) prefix.data()[i] = static_cast<float>(rng.normal());
        const int n = 1 + static_cast<int>(rng.uniform_int(5));
        TokenSeq target = greedy_decode(model, prefix, n);
        if (rng.uniform_int(2) == 0) {
            const auto pos = rng.uniform_int(static_cast<std::uint64_t>(n));
            target[pos] = static_cast<TokenId>((target[pos] + 1 + rng.uniform_int(94)) % Vocabulary::kPrintableCount);
        }
        const bool expected = greedy_decode(model, prefix, n) == target;
        positives += expected;
        CHECK(check_success(model, prefix, target) == expected);

        Mat<float> full(n_prefix + n, ckpt.config.model_dim);
        full.topRows(n_prefix) = prefix;
        full.bottomRows(n) = model.embed(target);
        std::vector<NllTerm> terms;
        for (int i = 0; i < n; ++i) terms.push_back({n_prefix - 1 + i, target[i], 1.0});
        CHECK(argmax_matches(model.logits(full), terms) == expected);
    }
    CHECK(positives > 20);
    CHECK(positives < 80);
}

TEST_CASE("attack leaves weights untouched and records a monotone best loss") {
    const auto ckpt = testutil::tiny_checkpoint(4);
    const auto before = ckpt.weights;
    const auto model = ckpt.model<float>();
    AttackOptions opts;
    opts.record_history = true;
    const auto out = attack_fixed_k(model, make_target("ab", "xyzw"), 2, small_budget(), 9, opts);
    CHECK(ckpt.weights == before);
    REQUIRE_FALSE(out.best_loss_history.empty());
    for (std::size_t i = 1; i < out.best_loss_history.size(); ++i)
        CHECK(out.best_loss_history[i] <= out.best_loss_history[i - 1]);
    CHECK(out.best_loss <= out.initial_loss);
    CHECK(out.soft_embeddings.rows() == 2);
    CHECK(out.init_token_ids.size() == 2);
}

TEST_CASE("a one-token target is elicited with k = 1") {
    const auto ckpt = testutil::tiny_checkpoint(5);
    AttackBudget b = small_budget();
    b.max_iters_per_token = 500;
    const auto out = attack_schedule(ckpt, make_target("q", "Z"), b, 1);
    CHECK(out.success);
    CHECK(out.soft_tokens_used == 1);
    CHECK(out.ks_tried == std::vector<int>{1});
    CHECK(out.model_id == ckpt.id);
    const auto model = ckpt.model<float>();
    const auto prefix = assemble_input(model, encode("q"), out.soft_embeddings, TokenSeq{}).embeddings;
    CHECK(check_success(model, prefix, encode("Z")));
}

TEST_CASE("restart accounting when progress stalls") {
    const auto ckpt = testutil::tiny_checkpoint(6);
    AttackBudget b = small_budget();
    b.lr = 1e-12;
    b.max_iters_per_token = 40;
    b.max_restarts = 3;
    const auto out = attack_fixed_k(ckpt, make_target("ab", "qqqqqqqq"), 1, b, 2);
    REQUIRE_FALSE(out.success);
    CHECK(out.restarts == 3);
    CHECK(out.iterations == 3 * 10 + 40);

    b.max_restarts = 0;
    const auto none = attack_fixed_k(ckpt, make_target("ab", "qqqqqqqq"), 1, b, 2);
    CHECK(none.restarts == 0);
    CHECK(none.iterations == 40);
}

TEST_CASE("schedule failure walks every k and sums iterations") {
    const auto ckpt = testutil::tiny_checkpoint(7);
    AttackBudget b = small_budget();
    b.lr = 1e-12;
    b.max_iters_per_token = 8;
    b.max_restarts = 0;
    const auto out = attack_schedule(ckpt, make_target("a", "qwertyuiop"), b, 3);
    REQUIRE_FALSE(out.success);
    CHECK(out.ks_tried == std::vector<int>{1, 2, 4});
    CHECK(out.soft_tokens_used == 4);
    CHECK(out.schedule_iterations == 3 * 8);
}

TEST_CASE("random-string budget scales with k") {
    const auto ckpt = testutil::tiny_checkpoint(8);
    AttackBudget b = small_budget();
    b.lr = 1e-12;
    b.max_iters_per_token = 5;
    b.max_restarts = 0;
    const auto rs = gen_random_string(4, 6);
    const auto out = elicit_random_string(ckpt, rs, 4, b, 5);
    REQUIRE_FALSE(out.success);
    CHECK(out.iterations == 20);
}

TEST_CASE("attacks are deterministic and reject oversize k") {
    const auto ckpt = testutil::tiny_checkpoint(9);
    const auto target = make_target("hi", "there");
    const auto a = attack_schedule(ckpt, target, small_budget(), 77);
    const auto b = attack_schedule(ckpt, target, small_budget(), 77);
    CHECK(a.success == b.success);
    CHECK(a.soft_tokens_used == b.soft_tokens_used);
    CHECK(a.schedule_iterations == b.schedule_iterations);
    CHECK(a.final_loss == b.final_loss);
    CHECK(a.soft_embeddings == b.soft_embeddings);
    CHECK_THROWS_AS(attack_fixed_k(ckpt, target, 8, small_budget(), 1), KTooLarge);
    AttackBudget bad;
    bad.lr = -1;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}
