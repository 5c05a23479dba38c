#include "stalab/learn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "stalab/adamw.hpp"
#include "stalab/error.hpp"
#include "stalab/hash.hpp"
#include "stalab/rng.hpp"

namespace stalab {

namespace {

std::size_t count_terms(std::span<const Example> examples) {
    std::size_t n = 0;
    for (const auto& e : examples) n += e.terms.size();
    return n;
}

template <typename T>
double global_norm(const Params<T>& g) {
    double sq = 0.0;
    g.for_each([&](const std::string&, const Mat<T>& m) { sq += m.template cast<double>().squaredNorm(); });
    return std::sqrt(sq);
}

template <typename T>
void clip_grads(Params<T>& g, double max_norm) {
    if (max_norm <= 0) return;
    const double norm = global_norm(g);
    if (norm > max_norm) {
        const T s = static_cast<T>(max_norm / norm);
        g.for_each([&](const std::string&, Mat<T>& m) { m *= s; });
    }
}

template <typename T>
void adam_step(AdamW<T>& opt, Params<T>& weights, const Params<T>& grads) {
    std::vector<const Mat<T>*> gs;
    grads.for_each([&](const std::string&, const Mat<T>& m) { gs.push_back(&m); });
    opt.begin_step();
    std::size_t offset = 0;
    std::size_t i = 0;
    weights.for_each([&](const std::string&, Mat<T>& m) {
        const Mat<T>& g = *gs[i++];
        opt.update(std::span<T>(m.data(), static_cast<std::size_t>(m.size())),
                   std::span<const T>(g.data(), static_cast<std::size_t>(g.size())), offset);
        offset += static_cast<std::size_t>(m.size());
    });
}

template <typename T>
void backprop_tokens(const TransformerLM<T>& model, const ForwardCache<T>& cache, const TokenSeq& tokens,
                     const Mat<T>& dlogits, Params<T>& grads) {
    Mat<T> dx;
    model.backward(cache, dlogits, &grads, &dx);
    for (std::size_t i = 0; i < tokens.size(); ++i) grads.tok_emb.row(tokens[i]) += dx.row(static_cast<Eigen::Index>(i));
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Example fact_example(const FactRecord& r, LossKind kind) {
    if (kind == LossKind::completion_only) return completion_example(encode(r.prompt), encode(r.completion), true);
    return text_example(encode(r.prompt + r.completion));
}

} // namespace

void TrainSpec::validate() const {
    if (epochs < 0) throw InvalidArgument("epochs must be >= 0");
    if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
    if (lr < 0) throw InvalidArgument("lr must be >= 0");
    if (min_lr_ratio < 0 || min_lr_ratio > 1) throw InvalidArgument("min_lr_ratio must lie in [0, 1]");
}

double mean_token_loss(const TransformerLM<float>& model, std::span<const Example> examples) {
    double total = 0.0;
    for (const auto& ex : examples) total += weighted_nll<float>(model.logits(ex.tokens), std::span<const NllTerm>(ex.terms), nullptr);
    const auto n = count_terms(examples);
    return n ? total / static_cast<double>(n) : 0.0;
}

Params<float> train_examples(const ModelConfig& config, Params<float> weights, std::span<const Example> examples,
                             const TrainSpec& spec, TrainLog* log) {
    spec.validate();
    if (log) log->initial_loss = mean_token_loss(TransformerLM<float>(config, weights), examples);
    if (spec.epochs == 0 || examples.empty()) {
        if (log) log->final_loss = log->initial_loss;
        return weights;
    }
    AdamW<float> opt(weights.size(), {spec.lr, 0.9, 0.999, 1e-8, spec.weight_decay});
    auto grads = Params<float>::zeros(config);
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(spec.seed, 0x7A1));
    const std::size_t bs = static_cast<std::size_t>(spec.batch_size);
    const std::size_t steps_per_epoch = (examples.size() + bs - 1) / bs;
    const double total_steps = static_cast<double>(steps_per_epoch) * spec.epochs;
    std::size_t step = 0;

    for (int epoch = 0; epoch < spec.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t epoch_terms = 0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            std::vector<Example> batch;
            for (std::size_t i = start; i < std::min(start + bs, order.size()); ++i) batch.push_back(examples[order[i]]);
            const auto n_terms = count_terms(batch);
            if (n_terms == 0) continue;
            grads.set_zero();
            const TransformerLM<float> model(config, weights);
            LossSpec ls;
            ls.scale = 1.0 / static_cast<double>(n_terms);
            const double loss = accumulate_grad(model, std::span<const Example>(batch), ls, grads);
            if (!std::isfinite(loss))
                throw Divergence("non-finite training loss at epoch " + std::to_string(epoch) + ", step " +
                                 std::to_string(step));
            epoch_loss += loss * static_cast<double>(n_terms);
            epoch_terms += n_terms;
            clip_grads(grads, spec.grad_clip);
            const double progress = static_cast<double>(step) / total_steps;
            opt.set_lr(spec.lr * (spec.min_lr_ratio +
                                  (1.0 - spec.min_lr_ratio) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress))));
            adam_step(opt, weights, grads);
            ++step;
        }
        if (log) log->epoch_loss.push_back(epoch_terms ? epoch_loss / static_cast<double>(epoch_terms) : 0.0);
    }
    if (!weights.all_finite()) throw Divergence("non-finite weights after training");
    if (log) log->final_loss = mean_token_loss(TransformerLM<float>(config, weights), examples);
    return weights;
}

ModelCheckpoint pretrain(const ModelConfig& config, const std::vector<std::string>& docs, const TrainSpec& spec,
                         TrainLog* log) {
    ModelCheckpoint ckpt = init_model(config);
    std::vector<Example> examples;
    examples.reserve(docs.size());
    for (const auto& d : docs) examples.push_back(text_example(encode(d)));
    ckpt.weights = train_examples(config, std::move(ckpt.weights), examples, spec, log);
    ckpt.id = "base";
    ckpt.provenance = {ProvenanceKind::base, ""};
    ckpt.rng_seed = spec.seed;
    ckpt.training_manifest.clear();
    for (std::size_t i = 0; i < docs.size(); ++i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "filler-%05zu", i);
        ckpt.training_manifest.emplace_back(buf);
    }
    return ckpt;
}

double memorization_rate(const TransformerLM<float>& model, std::span<const FactRecord> facts) {
    if (facts.empty()) return 0.0;
    std::size_t hits = 0;
    for (const auto& f : facts) {
        TokenSeq prefix{Vocabulary::kBos};
        const auto p = encode(f.prompt);
        prefix.insert(prefix.end(), p.begin(), p.end());
        const auto target = encode(f.completion);
        if (greedy_decode(model, model.embed(prefix), static_cast<int>(target.size())) == target) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(facts.size());
}

double memorization_rate(const ModelCheckpoint& ckpt, std::span<const FactRecord> facts) {
    return memorization_rate(ckpt.model<float>(), facts);
}

ModelCheckpoint finetune(const ModelCheckpoint& base, const std::vector<FactRecord>& facts, const TrainSpec& spec,
                         double gate, TrainLog* log) {
    base.config.validate();
    if (!base.weights.all_finite()) throw InvalidArgument("base checkpoint has non-finite weights");
    std::vector<Example> examples;
    for (const auto& f : facts) examples.push_back(fact_example(f, spec.loss_kind));
    ModelCheckpoint ft = base;
    ft.weights = train_examples(base.config, base.weights, examples, spec, log);
    ft.id = "fine_tuned";
    ft.provenance = {ProvenanceKind::fine_tuned, ""};
    ft.rng_seed = spec.seed;
    for (const auto& f : facts) ft.training_manifest.push_back(f.id);
    if (gate > 0) {
        const double rate = memorization_rate(ft, facts);
        if (rate < gate)
            throw MemorizationGateFailed("memorized fraction " + std::to_string(rate) + " below gate " +
                                         std::to_string(gate));
    }
    return ft;
}

// --- unlearning ---------------------------------------------------------------

std::string to_string(UnlearnMethod m) {
    switch (m) {
    case UnlearnMethod::GA: return "GA";
    case UnlearnMethod::GDF: return "GDF";
    case UnlearnMethod::IDK: return "IDK";
    case UnlearnMethod::KL: return "KL";
    case UnlearnMethod::NPO: return "NPO";
    case UnlearnMethod::NPO_GDF: return "NPO-GDF";
    case UnlearnMethod::NPO_KL: return "NPO-KL";
    }
    return "?";
}

UnlearnMethod unlearn_method_from_string(std::string_view name) {
    for (auto m : kAllUnlearnMethods)
        if (to_string(m) == name) return m;
    throw UnknownMethod("unknown unlearning method: " + std::string(name));
}

bool uses_npo(UnlearnMethod m) {
    return m == UnlearnMethod::NPO || m == UnlearnMethod::NPO_GDF || m == UnlearnMethod::NPO_KL;
}
bool needs_reference(UnlearnMethod m) { return uses_npo(m) || m == UnlearnMethod::KL; }
bool has_retain_term(UnlearnMethod m) {
    return m == UnlearnMethod::GDF || m == UnlearnMethod::KL || m == UnlearnMethod::NPO_GDF ||
           m == UnlearnMethod::NPO_KL;
}
bool raises_forget_nll(UnlearnMethod m) { return m != UnlearnMethod::IDK; }

void UnlearnSpec::validate() const {
    if (uses_npo(method) && !(beta > 0)) throw InvalidArgument("beta must be > 0 for NPO methods");
    if (steps < 0) throw InvalidArgument("steps must be >= 0");
    if (lr < 0) throw InvalidArgument("lr must be >= 0");
    if (retain_batch < 0) throw InvalidArgument("retain_batch must be >= 0");
}

const std::vector<std::string>& refusal_pool() {
    static const std::vector<std::string> pool{"I don't know.", "I do not know that.", "I'm not sure.",
                                               "I have no idea.", "I can't answer that."};
    return pool;
}

const std::string& refusal_for(std::string_view record_id, std::uint64_t seed) {
    const auto h = sha256_hex(record_id);
    const std::uint64_t key = std::stoull(h.substr(0, 15), nullptr, 16);
    const auto& pool = refusal_pool();
    return pool[derive_seed(seed, key) % pool.size()];
}

std::vector<Example> fact_examples(std::span<const FactRecord> facts) {
    std::vector<Example> out;
    for (const auto& f : facts) out.push_back(completion_example(encode(f.prompt), encode(f.completion), false));
    return out;
}

std::vector<Example> refusal_examples(std::span<const FactRecord> facts, std::uint64_t seed) {
    std::vector<Example> out;
    for (const auto& f : facts)
        out.push_back(completion_example(encode(f.prompt), encode(refusal_for(f.id, seed)), false));
    return out;
}

template <typename T>
UnlearnLoss unlearn_loss(const UnlearnSpec& spec, const UnlearnBatch& batch, const TransformerLM<T>& theta,
                         const TransformerLM<T>* ref, Params<T>* grads) {
    const UnlearnMethod method = spec.method;
    if (needs_reference(method) && ref == nullptr)
        throw MissingReference(to_string(method) + " requires a reference model");
    UnlearnLoss out;

    // Forget term.
    if (method == UnlearnMethod::IDK) {
        const double n = static_cast<double>(batch.idk.size());
        for (const auto& ex : batch.idk) {
            const auto cache = theta.forward(theta.embed(ex.tokens));
            Mat<T> dl;
            const double nll = weighted_nll(cache.logits, std::span<const NllTerm>(ex.terms), grads ? &dl : nullptr);
            out.forget_term += nll / n;
            if (grads) {
                dl *= static_cast<T>(1.0 / n);
                backprop_tokens(theta, cache, ex.tokens, dl, *grads);
            }
        }
    } else if (!batch.forget.empty()) {
        const double n = static_cast<double>(batch.forget.size());
        for (const auto& ex : batch.forget) {
            const auto cache = theta.forward(theta.embed(ex.tokens));
            Mat<T> dl;
            const double nll = weighted_nll(cache.logits, std::span<const NllTerm>(ex.terms), grads ? &dl : nullptr);
            double dterm_dnll;
            if (uses_npo(method)) {
                const double nll_ref = weighted_nll<T>(ref->logits(ex.tokens), std::span<const NllTerm>(ex.terms), nullptr);
                const double z = spec.beta * (nll_ref - nll);
                out.forget_term += (2.0 / spec.beta) * softplus(z) / n;
                dterm_dnll = -2.0 * sigmoid(z) / n;
            } else {
                out.forget_term -= nll / n;
                dterm_dnll = -1.0 / n;
            }
            if (grads) {
                dl *= static_cast<T>(dterm_dnll);
                backprop_tokens(theta, cache, ex.tokens, dl, *grads);
            }
        }
    }

    // Retain term.
    const bool retain_ce = method == UnlearnMethod::GDF || method == UnlearnMethod::NPO_GDF;
    const bool retain_kl = method == UnlearnMethod::KL || method == UnlearnMethod::NPO_KL;
    if ((retain_ce || retain_kl) && !batch.retain.empty()) {
        const double n = static_cast<double>(batch.retain.size());
        for (const auto& ex : batch.retain) {
            const auto cache = theta.forward(theta.embed(ex.tokens));
            Mat<T> dl;
            if (retain_ce) {
                const double nll = weighted_nll(cache.logits, std::span<const NllTerm>(ex.terms), grads ? &dl : nullptr);
                out.retain_term += nll / n;
                if (grads) dl *= static_cast<T>(spec.retain_weight / n);
            } else {
                const Mat<T> ref_logits = ref->logits(ex.tokens);
                if (grads) dl.setZero(cache.logits.rows(), cache.logits.cols());
                for (const auto& t : ex.terms) {
                    const Mat<T> lt = cache.logits.row(t.position);
                    const Mat<T> lr = ref_logits.row(t.position);
                    const Mat<T> pt = softmax_rows(lt);
                    const Mat<T> pr = softmax_rows(lr);
                    const T mt = lt.maxCoeff();
                    const T mr = lr.maxCoeff();
                    const double lse_t = static_cast<double>(mt) + std::log((lt.array() - mt).exp().sum());
                    const double lse_r = static_cast<double>(mr) + std::log((lr.array() - mr).exp().sum());
                    double kl = 0.0;
                    for (Eigen::Index j = 0; j < lt.cols(); ++j) {
                        const double logp_r = static_cast<double>(lr(0, j)) - lse_r;
                        const double logp_t = static_cast<double>(lt(0, j)) - lse_t;
                        kl += static_cast<double>(pr(0, j)) * (logp_r - logp_t);
                    }
                    out.retain_term += kl / n;
                    if (grads) dl.row(t.position) += (pt - pr) * static_cast<T>(spec.retain_weight / n);
                }
            }
            if (grads) backprop_tokens(theta, cache, ex.tokens, dl, *grads);
        }
    }
    out.total = out.forget_term + spec.retain_weight * out.retain_term;
    return out;
}

UnlearnLoss unlearn_loss(const UnlearnSpec& spec, const UnlearnBatch& batch, const ModelCheckpoint& theta,
                         const ModelCheckpoint* ref) {
    const auto theta_model = theta.model<double>();
    if (ref) {
        const auto ref_model = ref->model<double>();
        return unlearn_loss<double>(spec, batch, theta_model, &ref_model, nullptr);
    }
    return unlearn_loss<double>(spec, batch, theta_model, nullptr, nullptr);
}

double mean_completion_nll(const TransformerLM<float>& model, std::span<const FactRecord> facts) {
    if (facts.empty()) return 0.0;
    double total = 0.0;
    for (const auto& ex : fact_examples(facts))
        total += weighted_nll<float>(model.logits(ex.tokens), std::span<const NllTerm>(ex.terms), nullptr);
    return total / static_cast<double>(facts.size());
}

double mean_completion_nll(const ModelCheckpoint& ckpt, std::span<const FactRecord> facts) {
    return mean_completion_nll(ckpt.model<float>(), facts);
}

double refusal_rate(const ModelCheckpoint& ckpt, std::span<const FactRecord> facts) {
    if (facts.empty()) return 0.0;
    const auto model = ckpt.model<float>();
    std::size_t longest = 0;
    for (const auto& r : refusal_pool()) longest = std::max(longest, r.size());
    std::size_t hits = 0;
    for (const auto& f : facts) {
        TokenSeq prefix{Vocabulary::kBos};
        const auto p = encode(f.prompt);
        prefix.insert(prefix.end(), p.begin(), p.end());
        const auto out = decode(greedy_decode(model, model.embed(prefix), static_cast<int>(longest)));
        for (const auto& r : refusal_pool()) {
            if (out.starts_with(r)) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(facts.size());
}

ModelCheckpoint unlearn(const ModelCheckpoint& fine_tuned, const std::vector<FactRecord>& forget,
                        const std::vector<FactRecord>& retain, const UnlearnSpec& spec) {
    spec.validate();
    if (fine_tuned.provenance.kind != ProvenanceKind::fine_tuned)
        throw InvalidArgument("unlearning expects a fine_tuned checkpoint, got " + fine_tuned.provenance.label());
    const ModelConfig& config = fine_tuned.config;
    const TransformerLM<float> ref = fine_tuned.model<float>();
    Params<float> weights = fine_tuned.weights;
    AdamW<float> opt(weights.size(), {spec.lr, 0.9, 0.999, 1e-8, 0.0});
    auto grads = Params<float>::zeros(config);
    Rng rng(derive_seed(spec.seed, 0x0F0));

    UnlearnBatch batch;
    batch.forget = fact_examples(forget);
    if (spec.method == UnlearnMethod::IDK) batch.idk = refusal_examples(forget, spec.seed);
    const auto retain_all = fact_examples(retain);
    std::vector<std::size_t> order(retain_all.size());
    std::iota(order.begin(), order.end(), 0);

    for (int step = 0; step < spec.steps; ++step) {
        batch.retain.clear();
        if (has_retain_term(spec.method)) {
            rng.shuffle(order);
            const std::size_t take = std::min(order.size(), static_cast<std::size_t>(spec.retain_batch));
            for (std::size_t i = 0; i < take; ++i) batch.retain.push_back(retain_all[order[i]]);
        }
        grads.set_zero();
        const TransformerLM<float> theta(config, weights);
        const auto loss = unlearn_loss<float>(spec, batch, theta, &ref, &grads);
        if (!std::isfinite(loss.total))
            throw Divergence("non-finite unlearning loss for " + to_string(spec.method) + " at step " +
                             std::to_string(step));
        clip_grads(grads, 1.0);
        adam_step(opt, weights, grads);
    }
    if (!weights.all_finite()) throw Divergence("non-finite weights after unlearning " + to_string(spec.method));

    ModelCheckpoint out = fine_tuned;
    out.weights = std::move(weights);
    out.id = "unlearned-" + to_string(spec.method);
    out.provenance = {ProvenanceKind::unlearned, to_string(spec.method)};
    out.rng_seed = spec.seed;
    return out;
}

template UnlearnLoss unlearn_loss<float>(const UnlearnSpec&, const UnlearnBatch&, const TransformerLM<float>&,
                                         const TransformerLM<float>*, Params<float>*);
template UnlearnLoss unlearn_loss<double>(const UnlearnSpec&, const UnlearnBatch&, const TransformerLM<double>&,
                                          const TransformerLM<double>*, Params<double>*);

} // namespace stalab
