#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "stalab/corpus.hpp"
#include "stalab/model.hpp"

namespace stalab {

enum class LossKind { full_sequence, completion_only };

struct TrainSpec {
    int epochs = 1;
    int batch_size = 8;
    double lr = 1e-3;
    double min_lr_ratio = 0.1;   ///< cosine decay floor, as a fraction of lr
    double weight_decay = 0.0;
    double grad_clip = 1.0;      ///< global-norm clip; <= 0 disables
    std::uint64_t seed = 0;
    LossKind loss_kind = LossKind::full_sequence;

    void validate() const;
};

struct TrainLog {
    double initial_loss = 0.0;            ///< mean per-token loss before training
    std::vector<double> epoch_loss;       ///< mean per-token loss seen during each epoch
    double final_loss = 0.0;              ///< mean per-token loss after training
};

/// Mean per-token NLL over examples, no gradient.
double mean_token_loss(const TransformerLM<float>& model, std::span<const Example> examples);

/// Generic minibatch AdamW loop shared by pretraining and fine-tuning.
/// Throws Divergence on a non-finite loss.
Params<float> train_examples(const ModelConfig& config, Params<float> weights, std::span<const Example> examples,
                             const TrainSpec& spec, TrainLog* log);

/// f_∅: trains a fresh model on filler documents. The training manifest lists
/// the filler document ids.
ModelCheckpoint pretrain(const ModelConfig& config, const std::vector<std::string>& docs, const TrainSpec& spec,
                         TrainLog* log = nullptr);

/// Fraction of facts whose completion is reproduced exactly by greedy decoding
/// from BOS + prompt.
double memorization_rate(const ModelCheckpoint& ckpt, std::span<const FactRecord> facts);
double memorization_rate(const TransformerLM<float>& model, std::span<const FactRecord> facts);

/// f_ft: fine-tunes `base` on `facts` and enforces the memorization gate.
/// Throws MemorizationGateFailed when fewer than `gate` of the facts decode.
ModelCheckpoint finetune(const ModelCheckpoint& base, const std::vector<FactRecord>& facts, const TrainSpec& spec,
                         double gate = 0.95, TrainLog* log = nullptr);

enum class UnlearnMethod { GA, GDF, IDK, KL, NPO, NPO_GDF, NPO_KL };

inline constexpr std::array kAllUnlearnMethods{UnlearnMethod::GA,  UnlearnMethod::GDF,     UnlearnMethod::IDK,
                                               UnlearnMethod::KL,  UnlearnMethod::NPO,     UnlearnMethod::NPO_GDF,
                                               UnlearnMethod::NPO_KL};

std::string to_string(UnlearnMethod method);
/// Throws UnknownMethod.
UnlearnMethod unlearn_method_from_string(std::string_view name);

bool uses_npo(UnlearnMethod m);
bool needs_reference(UnlearnMethod m);
bool has_retain_term(UnlearnMethod m);
/// Methods whose forget term pushes the forget likelihood down directly.
bool raises_forget_nll(UnlearnMethod m);

struct UnlearnSpec {
    UnlearnMethod method = UnlearnMethod::GA;
    double beta = 0.1;
    double retain_weight = 1.0;
    int steps = 200;
    double lr = 1e-4;
    int retain_batch = 10;
    std::uint64_t seed = 0;
    std::string reference;  ///< checkpoint id of π_ref (the fine-tuned model)

    void validate() const;
};

/// The fixed refusal strings used as IDK targets.
const std::vector<std::string>& refusal_pool();
/// Seeded refusal string for one record.
const std::string& refusal_for(std::string_view record_id, std::uint64_t seed);

struct UnlearnBatch {
    std::vector<Example> forget;  ///< forget prompts → true completions
    std::vector<Example> retain;  ///< retain prompts → true completions
    std::vector<Example> idk;     ///< forget prompts → refusal strings
};

/// Completion examples without EOS, as scored by the unlearning losses.
std::vector<Example> fact_examples(std::span<const FactRecord> facts);
std::vector<Example> refusal_examples(std::span<const FactRecord> facts, std::uint64_t seed);

struct UnlearnLoss {
    double total = 0.0;
    double forget_term = 0.0;
    double retain_term = 0.0;
};

/// Unlearning objective (minimized):
///   GA      −CE(forget)
///   GDF     −CE(forget) + w·CE(retain)
///   IDK      CE(forget prompts → refusals)
///   KL      −CE(forget) + w·KL(π_ref‖π_θ) on retain completions
///   NPO     (2/β)·mean log(1 + (π_θ(c|x)/π_ref(c|x))^β) over forget
///   NPO-GDF NPO + w·CE(retain);  NPO-KL NPO + w·KL
/// CE is the mean over examples of the summed completion NLL. When `grads` is
/// non-null the gradient w.r.t. θ is accumulated into it.
/// Throws MissingReference when the method needs π_ref and `ref` is null.
template <typename T>
UnlearnLoss unlearn_loss(const UnlearnSpec& spec, const UnlearnBatch& batch, const TransformerLM<T>& theta,
                         const TransformerLM<T>* ref, Params<T>* grads);

/// Double-precision evaluation on checkpoints.
UnlearnLoss unlearn_loss(const UnlearnSpec& spec, const UnlearnBatch& batch, const ModelCheckpoint& theta,
                         const ModelCheckpoint* ref);

/// Mean summed completion NLL (no EOS) over facts.
double mean_completion_nll(const TransformerLM<float>& model, std::span<const FactRecord> facts);
double mean_completion_nll(const ModelCheckpoint& ckpt, std::span<const FactRecord> facts);

/// Fraction of facts whose greedy decode starts with some refusal string.
double refusal_rate(const ModelCheckpoint& ckpt, std::span<const FactRecord> facts);

/// f_u-method: runs `spec.steps` AdamW steps on the unlearning objective,
/// starting from and referencing `fine_tuned`. Throws InvalidArgument unless
/// `fine_tuned` has fine_tuned provenance.
ModelCheckpoint unlearn(const ModelCheckpoint& fine_tuned, const std::vector<FactRecord>& forget,
                        const std::vector<FactRecord>& retain, const UnlearnSpec& spec);

} // namespace stalab
