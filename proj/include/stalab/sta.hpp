#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stalab/corpus.hpp"
#include "stalab/model.hpp"

namespace stalab {

enum class PromptMode { suffix, standalone };

/// k trainable embedding rows plus the hard tokens they were initialized from.
struct SoftPrompt {
    Mat<float> embeddings;
    TokenSeq init_token_ids;
    PromptMode mode = PromptMode::suffix;

    int k() const { return static_cast<int>(embeddings.rows()); }
};

struct AttackBudget {
    int max_iters_per_token = 3000;
    double lr = 0.005;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.0;
    int max_soft_tokens = 16;
    double plateau_fraction = 0.25;
    double plateau_min_rel_improvement = 0.01;
    int max_restarts = 10;
    int runs_per_prompt = 5;

    /// Throws InvalidArgument.
    void validate() const;
};

struct AttackOutcome {
    std::string model_id;
    std::string target_id;
    int run = 0;
    int soft_tokens_used = 0;
    std::vector<int> ks_tried;
    long iterations = 0;            ///< optimizer steps at the final k, all restarts included
    long schedule_iterations = 0;   ///< optimizer steps over every k tried
    int restarts = 0;               ///< restarts at the final k
    bool success = false;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double best_loss = 0.0;
    std::uint64_t seed = 0;
    double elapsed_seconds = 0.0;
    TokenSeq init_token_ids;
    Mat<float> soft_embeddings;            ///< final optimized rows (k × d)
    std::vector<double> best_loss_history;  ///< per iteration of the last run, when recorded
};

/// Attack inputs shared by every k: an optional prompt and the target tokens.
struct AttackTarget {
    std::string id;
    std::optional<TokenSeq> prompt;  ///< present iff suffix mode
    TokenSeq completion;

    PromptMode mode() const { return prompt ? PromptMode::suffix : PromptMode::standalone; }
};

struct AttackOptions {
    bool record_history = false;
    /// Multiply the per-run iteration budget by k (random-string mode).
    bool budget_per_token = false;
};

/// k hard tokens drawn uniformly from the printable ids; rows copied from
/// the embedding table. Throws KTooLarge.
SoftPrompt init_soft_prompt(const TransformerLM<float>& model, int k, std::uint64_t seed, PromptMode mode,
                            int max_soft_tokens = 16);
SoftPrompt init_soft_prompt(const ModelCheckpoint& ckpt, int k, std::uint64_t seed, PromptMode mode,
                            int max_soft_tokens = 16);

/// True iff greedy decoding |target| tokens after `prefix` yields `target`.
bool check_success(const TransformerLM<float>& model, const Mat<float>& prefix, std::span<const TokenId> target);
bool check_success(const ModelCheckpoint& ckpt, const EmbeddedInput<double>& prefix, std::span<const TokenId> target);

/// Teacher-forced predicate: every completion slot's preceding row argmaxes
/// to the target token.
bool argmax_matches(const Mat<float>& logits, std::span<const NllTerm> terms);

/// Optimizes k soft tokens (weights frozen) with AdamW until greedy decoding
/// reproduces the target, the budget runs out, or restarts are exhausted.
AttackOutcome attack_fixed_k(const TransformerLM<float>& model, const AttackTarget& target, int k,
                             const AttackBudget& budget, std::uint64_t seed, const AttackOptions& options = {});
AttackOutcome attack_fixed_k(const ModelCheckpoint& ckpt, const AttackTarget& target, int k,
                             const AttackBudget& budget, std::uint64_t seed, const AttackOptions& options = {});

/// The schedule k = 1, 2, 4, ... up to max_soft_tokens; returns the first
/// success or the failure at the largest k.
AttackOutcome attack_schedule(const TransformerLM<float>& model, const AttackTarget& target,
                              const AttackBudget& budget, std::uint64_t seed, const AttackOptions& options = {});
AttackOutcome attack_schedule(const ModelCheckpoint& ckpt, const AttackTarget& target, const AttackBudget& budget,
                              std::uint64_t seed, const AttackOptions& options = {});

/// Schedule values up to and including `max_soft_tokens`.
std::vector<int> soft_token_schedule(int max_soft_tokens);

/// Standalone attack (no prompt) with a k·max_iters_per_token budget.
AttackOutcome elicit_random_string(const TransformerLM<float>& model, const RandomString& rstring, int k,
                                   const AttackBudget& budget, std::uint64_t seed);
AttackOutcome elicit_random_string(const ModelCheckpoint& ckpt, const RandomString& rstring, int k,
                                   const AttackBudget& budget, std::uint64_t seed);

} // namespace stalab
