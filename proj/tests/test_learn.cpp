#include <doctest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "stalab/adamw.hpp"
#include "stalab/error.hpp"
#include "stalab/learn.hpp"
#include "stalab/rng.hpp"
#include "test_util.hpp"

using namespace stalab;

namespace {

// log π(c | x) by chaining explicit softmax probabilities, one prefix at a time.
double enum_logprob(const TransformerLM<double>& m, const TokenSeq& prompt, const TokenSeq& completion) {
    TokenSeq seq{Vocabulary::kBos};
    seq.insert(seq.end(), prompt.begin(), prompt.end());
    double lp = 0.0;
    for (TokenId c : completion) {
        const auto logits = m.logits(seq);
        const auto row = logits.row(logits.rows() - 1);
        double z = 0.0;
        for (Eigen::Index j = 0; j < row.size(); ++j) z += std::exp(row(j));
        lp += row(c) - std::log(z);
        seq.push_back(c);
    }
    return lp;
}

// KL(ref ‖ θ) summed over the completion positions of one retain example.
double enum_kl(const TransformerLM<double>& theta, const TransformerLM<double>& ref, const TokenSeq& prompt,
               const TokenSeq& completion) {
    TokenSeq seq{Vocabulary::kBos};
    seq.insert(seq.end(), prompt.begin(), prompt.end());
    double kl = 0.0;
    for (TokenId c : completion) {
        const auto lt = theta.logits(seq);
        const auto lr = ref.logits(seq);
        const auto rt = lt.row(lt.rows() - 1);
        const auto rr = lr.row(lr.rows() - 1);
        double zt = 0.0, zr = 0.0;
        for (Eigen::Index j = 0; j < rt.size(); ++j) {
            zt += std::exp(rt(j));
            zr += std::exp(rr(j));
        }
        for (Eigen::Index j = 0; j < rt.size(); ++j) {
            const double pr = std::exp(rr(j)) / zr;
            kl += pr * (std::log(pr) - (rt(j) - std::log(zt)));
        }
        seq.push_back(c);
    }
    return kl;
}

std::vector<FactRecord> toy_facts(const std::vector<std::pair<std::string, std::string>>& pairs, Split split) {
    std::vector<FactRecord> out;
    for (const auto& [p, c] : pairs) out.push_back({"r" + std::to_string(out.size()) + p, p, c, split});
    return out;
}

ModelCheckpoint perturbed(const ModelCheckpoint& ckpt, std::uint64_t seed, double scale) {
    auto out = ckpt;
    Rng rng(seed);
    out.weights.for_each([&](const std::string&, Mat<float>& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += static_cast<float>(scale * rng.normal());
    });
    return out;
}

UnlearnSpec spec_for(UnlearnMethod m) {
    UnlearnSpec s;
    s.method = m;
    s.beta = 0.7;
    s.retain_weight = 1.3;
    s.seed = 4;
    return s;
}

} // namespace

TEST_CASE("AdamW matches the closed form") {
    const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.01;
    AdamW<double> opt(1, {lr, b1, b2, eps, wd});
    std::vector<double> p{1.0};
    const double g1 = 0.5, g2 = -0.2;
    opt.step(p, std::vector<double>{g1});
    const double p1 = 1.0 * (1 - lr * wd) - lr * g1 / (std::abs(g1) + eps);
    CHECK(std::abs(p[0] - p1) < 1e-12);
    opt.step(p, std::vector<double>{g2});
    const double m = b1 * (1 - b1) * g1 + (1 - b1) * g2;
    const double v = b2 * (1 - b2) * g1 * g1 + (1 - b2) * g2 * g2;
    const double mhat = m / (1 - b1 * b1), vhat = v / (1 - b2 * b2);
    const double p2 = p1 * (1 - lr * wd) - lr * mhat / (std::sqrt(vhat) + eps);
    CHECK(std::abs(p[0] - p2) < 1e-12);
    CHECK(opt.step_count() == 2);
}

TEST_CASE("AdamW with zero gradient and no decay leaves parameters unchanged") {
    AdamW<double> opt(3, {0.1, 0.9, 0.999, 1e-8, 0.0});
    std::vector<double> p{1.0, -2.0, 3.5};
    const auto before = p;
    for (int i = 0; i < 5; ++i) opt.step(p, std::vector<double>(3, 0.0));
    CHECK(p == before);
}

TEST_CASE("training with zero epochs or zero learning rate is the identity") {
    const auto ckpt = testutil::tiny_checkpoint(1);
    const std::vector<Example> data{text_example(encode("abc")), text_example(encode("hello"))};
    TrainSpec spec;
    spec.epochs = 0;
    CHECK(train_examples(ckpt.config, ckpt.weights, data, spec, nullptr) == ckpt.weights);
    spec.epochs = 2;
    spec.lr = 0.0;
    CHECK(train_examples(ckpt.config, ckpt.weights, data, spec, nullptr) == ckpt.weights);
    spec.lr = -1.0;
    CHECK_THROWS_AS(spec.validate(), InvalidArgument);
}

TEST_CASE("training lowers the loss and is deterministic") {
    const auto ckpt = testutil::tiny_checkpoint(2);
    const std::vector<Example> data{text_example(encode("abab")), text_example(encode("cdcd")),
                                    text_example(encode("abcd"))};
    TrainSpec spec;
    spec.epochs = 30;
    spec.batch_size = 2;
    spec.lr = 1e-2;
    spec.seed = 3;
    TrainLog log;
    const auto w = train_examples(ckpt.config, ckpt.weights, data, spec, &log);
    CHECK(log.final_loss < log.initial_loss);
    CHECK(log.epoch_loss.size() == 30);
    CHECK(train_examples(ckpt.config, ckpt.weights, data, spec, nullptr) == w);
}

TEST_CASE("finetune enforces the memorization gate") {
    auto base = testutil::tiny_checkpoint(3);
    const auto facts = toy_facts({{"a", "xy"}, {"b", "zw"}}, Split::retain);
    TrainSpec spec;
    spec.epochs = 0;
    spec.loss_kind = LossKind::completion_only;
    CHECK_THROWS_AS(finetune(base, facts, spec, 1.0), MemorizationGateFailed);
    spec.epochs = 200;
    spec.batch_size = 2;
    spec.lr = 3e-2;
    const auto ft = finetune(base, facts, spec, 1.0);
    CHECK(memorization_rate(ft, facts) == 1.0);
    CHECK(ft.provenance.kind == ProvenanceKind::fine_tuned);
    CHECK(ft.training_manifest.size() == base.training_manifest.size() + 2);
}

TEST_CASE("NPO at the reference equals (2/beta) ln 2") {
    const auto ckpt = testutil::tiny_checkpoint(4);
    const auto forget = toy_facts({{"a", "xy"}, {"bc", "q!"}}, Split::forget);
    UnlearnBatch batch;
    batch.forget = fact_examples(forget);
    for (double beta : {0.1, 0.5, 2.0}) {
        auto s = spec_for(UnlearnMethod::NPO);
        s.beta = beta;
        const auto loss = unlearn_loss(s, batch, ckpt, &ckpt);
        CHECK(loss.total == doctest::Approx(2.0 / beta * std::numbers::ln2).epsilon(1e-12));
    }
}

TEST_CASE("retain terms compose as specified") {
    const auto ref = testutil::tiny_checkpoint(5);
    const auto theta = perturbed(ref, 1, 0.05);
    UnlearnBatch batch;
    batch.forget = fact_examples(toy_facts({{"a", "xy"}, {"b", "zz"}}, Split::forget));
    batch.retain = fact_examples(toy_facts({{"c", "uv"}, {"d", "st"}, {"e", "pq"}}, Split::retain));

    const auto ga = unlearn_loss(spec_for(UnlearnMethod::GA), batch, theta, &ref);
    const auto gdf = unlearn_loss(spec_for(UnlearnMethod::GDF), batch, theta, &ref);
    const auto kl = unlearn_loss(spec_for(UnlearnMethod::KL), batch, theta, &ref);
    const auto npo = unlearn_loss(spec_for(UnlearnMethod::NPO), batch, theta, &ref);
    const auto npo_gdf = unlearn_loss(spec_for(UnlearnMethod::NPO_GDF), batch, theta, &ref);
    const auto npo_kl = unlearn_loss(spec_for(UnlearnMethod::NPO_KL), batch, theta, &ref);
    CHECK(gdf.forget_term == ga.forget_term);
    CHECK(kl.forget_term == ga.forget_term);
    CHECK(npo_gdf.forget_term == npo.forget_term);
    CHECK(npo_kl.forget_term == npo.forget_term);
    CHECK(npo_gdf.retain_term == gdf.retain_term);
    CHECK(npo_kl.retain_term == kl.retain_term);
    CHECK(npo_kl.total == doctest::Approx(npo.total + 1.3 * kl.retain_term).epsilon(1e-14));
    CHECK(kl.retain_term > 0.0);

    // KL vanishes at the reference; GDF without retain data is GA.
    CHECK(std::abs(unlearn_loss(spec_for(UnlearnMethod::KL), batch, ref, &ref).retain_term) < 1e-14);
    UnlearnBatch no_retain = batch;
    no_retain.retain.clear();
    CHECK(unlearn_loss(spec_for(UnlearnMethod::GDF), no_retain, theta, &ref).total == ga.total);
    CHECK_THROWS_AS(unlearn_loss(spec_for(UnlearnMethod::NPO), batch, theta, nullptr), MissingReference);
}

TEST_CASE("unlearning losses match an enumeration oracle on two-token completions") {
    const auto ref_ckpt = testutil::tiny_checkpoint(6);
    const auto theta_ckpt = perturbed(ref_ckpt, 2, 0.1);
    const auto ref = ref_ckpt.model<double>();
    const auto theta = theta_ckpt.model<double>();
    const auto forget = toy_facts({{"a", "xy"}, {"b", "zq"}}, Split::forget);
    const auto retain = toy_facts({{"c", "uv"}, {"d", "st"}}, Split::retain);
    UnlearnBatch batch;
    batch.forget = fact_examples(forget);
    batch.retain = fact_examples(retain);
    batch.idk = refusal_examples(forget, 4);

    // The completion distribution over all two-token strings sums to one.
    {
        double total = 0.0;
        for (TokenId a = 0; a < Vocabulary::kSize; ++a)
            for (TokenId b = 0; b < Vocabulary::kSize; ++b)
                total += std::exp(enum_logprob(theta, encode("a"), TokenSeq{a, b}));
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }

    double ce_forget = 0.0, ce_retain = 0.0, npo = 0.0, kl = 0.0, idk = 0.0;
    const double beta = 0.7, w = 1.3;
    for (const auto& f : forget) {
        const double lt = enum_logprob(theta, encode(f.prompt), encode(f.completion));
        const double lr = enum_logprob(ref, encode(f.prompt), encode(f.completion));
        ce_forget += -lt / 2;
        npo += (2 / beta) * std::log1p(std::exp(beta * (lt - lr))) / 2;
        idk += -enum_logprob(theta, encode(f.prompt), encode(refusal_for(f.id, 4))) / 2;
    }
    for (const auto& r : retain) {
        ce_retain += -enum_logprob(theta, encode(r.prompt), encode(r.completion)) / 2;
        kl += enum_kl(theta, ref, encode(r.prompt), encode(r.completion)) / 2;
    }
    const std::vector<std::pair<UnlearnMethod, double>> expected{
        {UnlearnMethod::GA, -ce_forget},        {UnlearnMethod::GDF, -ce_forget + w * ce_retain},
        {UnlearnMethod::IDK, idk},              {UnlearnMethod::KL, -ce_forget + w * kl},
        {UnlearnMethod::NPO, npo},              {UnlearnMethod::NPO_GDF, npo + w * ce_retain},
        {UnlearnMethod::NPO_KL, npo + w * kl}};
    for (const auto& [m, value] : expected) {
        INFO(to_string(m));
        const auto loss = unlearn_loss<double>(spec_for(m), batch, theta, &ref, nullptr);
        CHECK(std::abs(loss.total - value) < 1e-10);
    }
}

TEST_CASE("unlearning gradients match central differences") {
    const auto ref_ckpt = testutil::tiny_checkpoint(7);
    const auto theta_ckpt = perturbed(ref_ckpt, 3, 0.1);
    const auto ref = ref_ckpt.model<double>();
    UnlearnBatch batch;
    const auto forget = toy_facts({{"a", "xy"}}, Split::forget);
    batch.forget = fact_examples(forget);
    batch.retain = fact_examples(toy_facts({{"c", "uv"}}, Split::retain));
    batch.idk = refusal_examples(forget, 1);
    Params<double> base = theta_ckpt.weights.cast<double>();
    for (auto m : kAllUnlearnMethods) {
        INFO(to_string(m));
        const auto s = spec_for(m);
        auto grads = Params<double>::zeros(theta_ckpt.config);
        unlearn_loss<double>(s, batch, TransformerLM<double>(theta_ckpt.config, base), &ref, &grads);
        Rng rng(11);
        double num = 0.0, den = 0.0;
        const double h = 1e-4;
        auto& tensor = base.layers[0].w_fc1;
        auto& g = grads.layers[0].w_fc1;
        for (int i = 0; i < 12; ++i) {
            const auto idx = static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(tensor.size())));
            const double orig = tensor.data()[idx];
            tensor.data()[idx] = orig + h;
            const double lp = unlearn_loss<double>(s, batch, TransformerLM<double>(theta_ckpt.config, base), &ref,
                                                   nullptr)
                                  .total;
            tensor.data()[idx] = orig - h;
            const double lm = unlearn_loss<double>(s, batch, TransformerLM<double>(theta_ckpt.config, base), &ref,
                                                   nullptr)
                                  .total;
            tensor.data()[idx] = orig;
            const double fd = (lp - lm) / (2 * h);
            num += (g.data()[idx] - fd) * (g.data()[idx] - fd);
            den += fd * fd;
        }
        CHECK(std::sqrt(num) < 1e-5 * std::max(1.0, std::sqrt(den)));
    }
}

TEST_CASE("unlearn driver") {
    auto ft = testutil::tiny_checkpoint(8);
    ft.provenance = {ProvenanceKind::fine_tuned, ""};
    ft.id = "fine_tuned";
    const auto forget = toy_facts({{"a", "xy"}, {"b", "zw"}}, Split::forget);
    const auto retain = toy_facts({{"c", "uv"}, {"d", "st"}, {"e", "pq"}}, Split::retain);

    auto s = spec_for(UnlearnMethod::GA);
    s.steps = 0;
    CHECK(unlearn(ft, forget, retain, s).weights == ft.weights);

    for (auto m : kAllUnlearnMethods) {
        INFO(to_string(m));
        s = spec_for(m);
        s.steps = 5;
        s.lr = 1e-3;
        s.retain_batch = 2;
        const auto u = unlearn(ft, forget, retain, s);
        CHECK(u.provenance == Provenance{ProvenanceKind::unlearned, to_string(m)});
        CHECK(u.id == "unlearned-" + to_string(m));
        CHECK(u.training_manifest == ft.training_manifest);
        CHECK(unlearn(ft, forget, retain, s).weights == u.weights);
        if (raises_forget_nll(m)) CHECK(mean_completion_nll(u, forget) > mean_completion_nll(ft, forget));
    }

    auto base = ft;
    base.provenance = {ProvenanceKind::base, ""};
    CHECK_THROWS_AS(unlearn(base, forget, retain, spec_for(UnlearnMethod::GA)), InvalidArgument);
}

TEST_CASE("method names and refusal targets") {
    for (auto m : kAllUnlearnMethods) CHECK(unlearn_method_from_string(to_string(m)) == m);
    CHECK(to_string(UnlearnMethod::NPO_KL) == "NPO-KL");
    CHECK_THROWS_AS(unlearn_method_from_string("SCRUB"), UnknownMethod);
    CHECK(refusal_pool().size() == 5);
    const auto& r = refusal_for("fact-0001", 3);
    CHECK(&r == &refusal_for("fact-0001", 3));
    CHECK(std::find(refusal_pool().begin(), refusal_pool().end(), r) != refusal_pool().end());
    std::set<std::string> seen;
    for (int i = 0; i < 50; ++i) seen.insert(refusal_for("fact-" + std::to_string(i), 3));
    CHECK(seen.size() == 5);
}
