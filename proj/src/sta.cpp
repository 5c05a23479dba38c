#include "stalab/sta.hpp"

#include <chrono>
#include <cmath>
#include <limits>

#include "stalab/adamw.hpp"
#include "stalab/error.hpp"
#include "stalab/rng.hpp"

namespace stalab {

void AttackBudget::validate() const {
    if (max_iters_per_token < 1 || max_soft_tokens < 1 || runs_per_prompt < 1 || max_restarts < 0)
        throw InvalidArgument("attack budget counts must be positive");
    if (!(lr > 0) || weight_decay < 0) throw InvalidArgument("attack lr must be positive");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw InvalidArgument("betas must lie in [0, 1)");
    if (!(plateau_fraction > 0 && plateau_fraction < 1))
        throw InvalidArgument("plateau_fraction must lie in (0, 1)");
    if (plateau_min_rel_improvement < 0) throw InvalidArgument("plateau_min_rel_improvement must be >= 0");
}

SoftPrompt init_soft_prompt(const TransformerLM<float>& model, int k, std::uint64_t seed, PromptMode mode,
                            int max_soft_tokens) {
    if (k < 1) throw InvalidArgument("k must be >= 1");
    if (k > max_soft_tokens)
        throw KTooLarge("k=" + std::to_string(k) + " exceeds max_soft_tokens=" + std::to_string(max_soft_tokens));
    Rng rng(derive_seed(seed, 0x50F7));
    SoftPrompt sp;
    sp.mode = mode;
    for (int i = 0; i < k; ++i)
        sp.init_token_ids.push_back(static_cast<TokenId>(rng.uniform_int(Vocabulary::kPrintableCount)));
    sp.embeddings = model.embed(sp.init_token_ids);
    return sp;
}

SoftPrompt init_soft_prompt(const ModelCheckpoint& ckpt, int k, std::uint64_t seed, PromptMode mode,
                            int max_soft_tokens) {
    return init_soft_prompt(ckpt.model<float>(), k, seed, mode, max_soft_tokens);
}

bool check_success(const TransformerLM<float>& model, const Mat<float>& prefix, std::span<const TokenId> target) {
    const auto out = greedy_decode(model, prefix, static_cast<int>(target.size()));
    return std::equal(out.begin(), out.end(), target.begin(), target.end());
}

bool check_success(const ModelCheckpoint& ckpt, const EmbeddedInput<double>& prefix, std::span<const TokenId> target) {
    const auto out = greedy_decode(ckpt, prefix, static_cast<int>(target.size()));
    return std::equal(out.begin(), out.end(), target.begin(), target.end());
}

bool argmax_matches(const Mat<float>& logits, std::span<const NllTerm> terms) {
    for (const auto& t : terms)
        if (argmax_row(logits, t.position) != t.target) return false;
    return true;
}

AttackOutcome attack_fixed_k(const TransformerLM<float>& model, const AttackTarget& target, int k,
                             const AttackBudget& budget, std::uint64_t seed, const AttackOptions& options) {
    budget.validate();
    if (k > budget.max_soft_tokens)
        throw KTooLarge("k=" + std::to_string(k) + " exceeds max_soft_tokens=" + std::to_string(budget.max_soft_tokens));
    const auto start_time = std::chrono::steady_clock::now();
    const TokenSeq no_prompt;
    const TokenSeq& prompt = target.prompt ? *target.prompt : no_prompt;
    const long length = 1 + static_cast<long>(prompt.size()) + k + static_cast<long>(target.completion.size());
    if (length > model.config().context_len)
        throw ShapeMismatch("attack sequence of " + std::to_string(length) + " positions exceeds the context");

    const long per_run = static_cast<long>(budget.max_iters_per_token) * (options.budget_per_token ? k : 1);
    const long plateau_iter = static_cast<long>(std::floor(budget.plateau_fraction * static_cast<double>(per_run)));
    const int d = model.config().model_dim;
    const Eigen::Index soft_start = 1 + static_cast<Eigen::Index>(prompt.size());

    auto input = assemble_input(model, prompt, Mat<float>(Mat<float>::Zero(k, d)), target.completion);
    const auto terms = completion_terms(input, target.completion);
    Mat<float>& x = input.embeddings;

    AttackOutcome out;
    out.target_id = target.id;
    out.seed = seed;
    out.soft_tokens_used = k;
    out.ks_tried = {k};

    const AdamW<float>::Options adam{budget.lr, budget.beta1, budget.beta2, 1e-8, budget.weight_decay};
    Mat<float> dlogits;
    Mat<float> dx;
    Mat<float> grad;
    for (int run = 0;; ++run) {
        SoftPrompt sp = init_soft_prompt(model, k, derive_seed(seed, static_cast<std::uint64_t>(run)), target.mode(),
                                         budget.max_soft_tokens);
        Mat<float> soft = std::move(sp.embeddings);
        AdamW<float> opt(static_cast<std::size_t>(soft.size()), adam);
        double initial = 0.0;
        double best = std::numeric_limits<double>::infinity();
        double loss = 0.0;
        bool restart = false;
        if (options.record_history) out.best_loss_history.clear();
        long it = 0;
        for (;; ++it) {
            x.middleRows(soft_start, k) = soft;
            const auto cache = model.forward(x);
            loss = weighted_nll(cache.logits, std::span<const NllTerm>(terms), &dlogits);
            if (it == 0) initial = loss;
            best = std::min(best, loss);
            if (options.record_history) out.best_loss_history.push_back(best);

            if (argmax_matches(cache.logits, terms) &&
                check_success(model, Mat<float>(x.topRows(soft_start + k)), target.completion)) {
                out.success = true;
                break;
            }
            if (it >= per_run) break;
            if (it == plateau_iter && plateau_iter > 0 && out.restarts < budget.max_restarts &&
                (initial - best) < budget.plateau_min_rel_improvement * initial) {
                restart = true;
                break;
            }
            model.backward(cache, dlogits, nullptr, &dx);
            grad = dx.middleRows(soft_start, k);
            opt.step(std::span<float>(soft.data(), static_cast<std::size_t>(soft.size())),
                     std::span<const float>(grad.data(), static_cast<std::size_t>(grad.size())));
        }
        out.iterations += it;
        if (restart) {
            ++out.restarts;
            continue;
        }
        out.initial_loss = initial;
        out.final_loss = loss;
        out.best_loss = best;
        out.init_token_ids = sp.init_token_ids;
        out.soft_embeddings = std::move(soft);
        break;
    }
    out.schedule_iterations = out.iterations;
    out.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();
    return out;
}

AttackOutcome attack_fixed_k(const ModelCheckpoint& ckpt, const AttackTarget& target, int k,
                             const AttackBudget& budget, std::uint64_t seed, const AttackOptions& options) {
    auto out = attack_fixed_k(ckpt.model<float>(), target, k, budget, seed, options);
    out.model_id = ckpt.id;
    return out;
}

std::vector<int> soft_token_schedule(int max_soft_tokens) {
    std::vector<int> ks;
    for (int k = 1; k <= max_soft_tokens; k *= 2) ks.push_back(k);
    return ks;
}

AttackOutcome attack_schedule(const TransformerLM<float>& model, const AttackTarget& target,
                              const AttackBudget& budget, std::uint64_t seed, const AttackOptions& options) {
    budget.validate();
    AttackOutcome last;
    std::vector<int> tried;
    long total = 0;
    double elapsed = 0.0;
    for (int k : soft_token_schedule(budget.max_soft_tokens)) {
        last = attack_fixed_k(model, target, k, budget, derive_seed(seed, static_cast<std::uint64_t>(k)), options);
        tried.push_back(k);
        total += last.iterations;
        elapsed += last.elapsed_seconds;
        if (last.success) break;
    }
    last.seed = seed;
    last.ks_tried = tried;
    last.schedule_iterations = total;
    last.elapsed_seconds = elapsed;
    return last;
}

AttackOutcome attack_schedule(const ModelCheckpoint& ckpt, const AttackTarget& target, const AttackBudget& budget,
                              std::uint64_t seed, const AttackOptions& options) {
    auto out = attack_schedule(ckpt.model<float>(), target, budget, seed, options);
    out.model_id = ckpt.id;
    return out;
}

AttackOutcome elicit_random_string(const TransformerLM<float>& model, const RandomString& rstring, int k,
                                   const AttackBudget& budget, std::uint64_t seed) {
    AttackTarget target;
    target.id = "random-" + std::to_string(rstring.seed) + "-" + std::to_string(rstring.length);
    target.completion = encode(rstring.text);
    AttackOptions options;
    options.budget_per_token = true;
    return attack_fixed_k(model, target, k, budget, seed, options);
}

AttackOutcome elicit_random_string(const ModelCheckpoint& ckpt, const RandomString& rstring, int k,
                                   const AttackBudget& budget, std::uint64_t seed) {
    auto out = elicit_random_string(ckpt.model<float>(), rstring, k, budget, seed);
    out.model_id = ckpt.id;
    return out;
}

} // namespace stalab
