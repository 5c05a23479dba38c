#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stalab/corpus.hpp"

namespace stalab {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct ModelConfig {
    int layers = 4;
    int heads = 4;
    int model_dim = 128;
    int ffn_dim = 512;
    int context_len = 512;
    int vocab_size = Vocabulary::kSize;
    std::uint64_t seed = 0;

    /// Throws InvalidConfig.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

/// Closed-form parameter count of the architecture.
std::size_t parameter_count(const ModelConfig& config);

template <typename T>
struct LayerParams {
    Mat<T> ln1_g, ln1_b;
    Mat<T> w_qkv, b_qkv;
    Mat<T> w_o, b_o;
    Mat<T> ln2_g, ln2_b;
    Mat<T> w_fc1, b_fc1;
    Mat<T> w_fc2, b_fc2;
};

/// All trainable tensors. Vectors are stored as 1×n matrices.
template <typename T>
struct Params {
    Mat<T> tok_emb;  ///< vocab × d
    Mat<T> pos_emb;  ///< context × d
    std::vector<LayerParams<T>> layers;
    Mat<T> lnf_g, lnf_b;
    Mat<T> w_head;   ///< d × vocab
    Mat<T> b_head;

    /// Zero tensors with the architecture's shapes.
    static Params zeros(const ModelConfig& config);

    template <typename F>
    void for_each(F&& f) {
        f("tok_emb", tok_emb);
        f("pos_emb", pos_emb);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            auto& l = layers[i];
            const std::string p = "layers." + std::to_string(i) + ".";
            f(p + "ln1_g", l.ln1_g);
            f(p + "ln1_b", l.ln1_b);
            f(p + "w_qkv", l.w_qkv);
            f(p + "b_qkv", l.b_qkv);
            f(p + "w_o", l.w_o);
            f(p + "b_o", l.b_o);
            f(p + "ln2_g", l.ln2_g);
            f(p + "ln2_b", l.ln2_b);
            f(p + "w_fc1", l.w_fc1);
            f(p + "b_fc1", l.b_fc1);
            f(p + "w_fc2", l.w_fc2);
            f(p + "b_fc2", l.b_fc2);
        }
        f("lnf_g", lnf_g);
        f("lnf_b", lnf_b);
        f("w_head", w_head);
        f("b_head", b_head);
    }

    template <typename F>
    void for_each(F&& f) const {
        const_cast<Params*>(this)->for_each(
            [&](const std::string& name, Mat<T>& m) { f(name, static_cast<const Mat<T>&>(m)); });
    }

    template <typename U>
    Params<U> cast() const;

    std::size_t size() const;
    void set_zero();
    /// this += scale * other
    void add_scaled(const Params& other, T scale);
    bool all_finite() const;
    bool operator==(const Params& other) const;
};

/// Per-layer activations kept for the backward pass.
template <typename T>
struct LayerCache {
    Mat<T> input;
    Mat<T> xhat1;
    ColVec<T> rstd1;
    Mat<T> a;
    Mat<T> qkv;
    std::vector<Mat<T>> probs;  ///< one n×n matrix per head
    Mat<T> attn;                ///< concatenated head outputs
    Mat<T> h1;
    Mat<T> xhat2;
    ColVec<T> rstd2;
    Mat<T> m;
    Mat<T> u;
    Mat<T> g;
};

template <typename T>
struct ForwardCache {
    std::vector<LayerCache<T>> layers;
    Mat<T> xhatf;
    ColVec<T> rstdf;
    Mat<T> z;
    Mat<T> logits;  ///< n × vocab
};

/// Pre-norm decoder-only transformer with learned positional embeddings.
/// Inputs are token embeddings (positions are added internally), so prompt,
/// soft and completion slots share one code path.
template <typename T>
class TransformerLM {
public:
    TransformerLM(ModelConfig config, Params<T> params);

    const ModelConfig& config() const noexcept { return m_config; }
    const Params<T>& params() const noexcept { return m_params; }

    Mat<T> embed(std::span<const TokenId> tokens) const;

    /// Throws SequenceTooLong.
    ForwardCache<T> forward(const Mat<T>& inputs) const;
    Mat<T> logits(const Mat<T>& inputs) const { return forward(inputs).logits; }
    Mat<T> logits(std::span<const TokenId> tokens) const { return logits(embed(tokens)); }

    /// Backpropagates dL/dlogits. `weight_grads` is accumulated into (not
    /// overwritten); `input_grads` is overwritten. Either may be null.
    void backward(const ForwardCache<T>& cache, const Mat<T>& dlogits, Params<T>* weight_grads,
                  Mat<T>* input_grads) const;

private:
    ModelConfig m_config;
    Params<T> m_params;
};

enum class ProvenanceKind { uninitialized, base, fine_tuned, unlearned };

struct Provenance {
    ProvenanceKind kind = ProvenanceKind::uninitialized;
    std::string method;  ///< unlearning method when kind == unlearned

    std::string label() const;
    static Provenance parse(std::string_view label);
    bool operator==(const Provenance&) const = default;
};

struct ModelCheckpoint {
    std::string id;
    ModelConfig config;
    Params<float> weights;
    Provenance provenance;
    std::vector<std::string> training_manifest;
    std::uint64_t rng_seed = 0;

    template <typename T>
    TransformerLM<T> model() const {
        if constexpr (std::is_same_v<T, float>) return TransformerLM<float>(config, weights);
        else return TransformerLM<T>(config, weights.template cast<T>());
    }
};

/// Deterministic initialization from config.seed. Throws InvalidConfig.
ModelCheckpoint init_model(const ModelConfig& config);

enum class SlotKind : std::uint8_t { bos, prompt, soft, completion };

/// Row-per-position input embeddings plus the role of each position.
template <typename T>
struct EmbeddedInput {
    Mat<T> embeddings;
    std::vector<SlotKind> slots;

    int length() const { return static_cast<int>(slots.size()); }
    std::vector<int> positions(SlotKind kind) const;
    /// Throws ShapeMismatch unless slots are laid out as
    /// [bos] prompt* soft* completion*.
    void validate() const;
};

/// [BOS] + prompt + soft rows + completion tokens.
template <typename T>
EmbeddedInput<T> assemble_input(const TransformerLM<T>& model, std::span<const TokenId> prompt,
                                const Mat<T>& soft, std::span<const TokenId> completion);

/// One next-token prediction term: logits row `position` predicts `target`.
struct NllTerm {
    int position;
    TokenId target;
    double weight = 1.0;
};

/// Σ weight·(−log softmax(logits[position])[target]); fills dlogits when
/// non-null (same shape as logits, zero outside the listed rows).
template <typename T>
double weighted_nll(const Mat<T>& logits, std::span<const NllTerm> terms, Mat<T>* dlogits);

/// Terms that score `target` against the completion slots of `input`.
/// Throws ShapeMismatch when the completion slot count differs from |target|.
template <typename T>
std::vector<NllTerm> completion_terms(const EmbeddedInput<T>& input, std::span<const TokenId> target);

/// Row-wise softmax.
template <typename T>
Mat<T> softmax_rows(const Mat<T>& logits);

/// Index of the largest entry; ties resolve to the lowest index.
template <typename T>
TokenId argmax_row(const Mat<T>& logits, int row);

/// A token sequence with the next-token terms that score it.
struct Example {
    TokenSeq tokens;
    std::vector<NllTerm> terms;
};

/// BOS + prompt + completion (+ EOS) with terms on the completion (and EOS).
Example completion_example(std::span<const TokenId> prompt, std::span<const TokenId> completion,
                           bool with_eos = true);
/// BOS + text + EOS with terms on every position.
Example text_example(std::span<const TokenId> text);

struct LossSpec {
    double scale = 1.0;
    bool freeze_embeddings = false;  ///< omit the token-embedding gradient
};

/// Accumulates scale·Σ weighted_nll over the batch into `grads`; returns the
/// scaled loss. Token-embedding rows receive the input gradient.
template <typename T>
double accumulate_grad(const TransformerLM<T>& model, std::span<const Example> batch, const LossSpec& spec,
                       Params<T>& grads);

// Checkpoint-level operations, evaluated in double precision.

Mat<double> forward(const ModelCheckpoint& ckpt, std::span<const TokenId> tokens);
Mat<double> forward(const ModelCheckpoint& ckpt, const EmbeddedInput<double>& input);

double completion_nll(const ModelCheckpoint& ckpt, const EmbeddedInput<double>& input,
                      std::span<const TokenId> target);

/// Gradient of completion_nll w.r.t. the soft rows (k × d). Throws NoSoftSlots.
Mat<double> grad_soft(const ModelCheckpoint& ckpt, const EmbeddedInput<double>& input,
                      std::span<const TokenId> target);

/// Named weight gradients of scale·Σ batch losses.
std::vector<std::pair<std::string, Mat<double>>> grad_weights(const ModelCheckpoint& ckpt,
                                                              std::span<const Example> batch,
                                                              const LossSpec& spec);

/// Greedy continuation of `prefix` by `n_tokens`; ties to the lowest id.
template <typename T>
TokenSeq greedy_decode(const TransformerLM<T>& model, const Mat<T>& prefix, int n_tokens);
TokenSeq greedy_decode(const ModelCheckpoint& ckpt, const EmbeddedInput<double>& prefix, int n_tokens);

/// Checkpoint file: magic, JSON header (config, provenance, manifest, tensor
/// table, SHA-256 of the tensor blob), then row-major float32 tensors.
void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path);
/// Throws MissingArtifact or CorruptArtifact (bad magic or checksum).
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

} // namespace stalab
