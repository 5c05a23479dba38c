#include "stalab/model.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "stalab/error.hpp"
#include "stalab/rng.hpp"

namespace stalab {

namespace {

constexpr double kLayerNormEps = 1e-5;

template <typename T>
Mat<T> zeros(int rows, int cols) {
    return Mat<T>::Zero(rows, cols);
}

template <typename T>
Mat<T> ones(int rows, int cols) {
    return Mat<T>::Ones(rows, cols);
}

/// y = xhat * g + b, xhat = (x - mean) * rstd, row-wise.
template <typename T>
Mat<T> layer_norm(const Mat<T>& x, const Mat<T>& g, const Mat<T>& b, Mat<T>& xhat, ColVec<T>& rstd) {
    const auto n = x.rows();
    const auto d = x.cols();
    xhat.resize(n, d);
    rstd.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const T mean = x.row(i).mean();
        const auto centered = x.row(i).array() - mean;
        const T var = centered.square().mean();
        const T r = T(1) / std::sqrt(var + T(kLayerNormEps));
        rstd(i) = r;
        xhat.row(i) = centered * r;
    }
    Mat<T> y = (xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
    return y;
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& xhat, const ColVec<T>& rstd, const Mat<T>& g,
                           Mat<T>* dg, Mat<T>* db) {
    if (dg) dg->row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
    if (db) db->row(0) += dy.colwise().sum();
    const Mat<T> dxhat = dy.array().rowwise() * g.row(0).array();
    Mat<T> dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const T mean_d = dxhat.row(i).mean();
        const T mean_dx = (dxhat.row(i).array() * xhat.row(i).array()).mean();
        dx.row(i) = rstd(i) * (dxhat.row(i).array() - mean_d - xhat.row(i).array() * mean_dx);
    }
    return dx;
}

template <typename T>
constexpr T kGeluC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
template <typename T>
constexpr T kGeluA = static_cast<T>(0.044715);

template <typename T>
Mat<T> gelu(const Mat<T>& u) {
    return u.unaryExpr([](T x) {
        return T(0.5) * x * (T(1) + std::tanh(kGeluC<T> * (x + kGeluA<T> * x * x * x)));
    });
}

template <typename T>
Mat<T> gelu_grad(const Mat<T>& u) {
    return u.unaryExpr([](T x) {
        const T t = std::tanh(kGeluC<T> * (x + kGeluA<T> * x * x * x));
        return T(0.5) * (T(1) + t) +
               T(0.5) * x * (T(1) - t * t) * kGeluC<T> * (T(1) + T(3) * kGeluA<T> * x * x);
    });
}

template <typename T>
void add_bias(Mat<T>& x, const Mat<T>& b) {
    x.rowwise() += b.row(0);
}

template <typename T>
void fill_normal(Mat<T>& m, Rng& rng, double std) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal() * std);
}

} // namespace

void ModelConfig::validate() const {
    if (layers < 1 || heads < 1 || model_dim < 1 || ffn_dim < 1 || context_len < 2)
        throw InvalidConfig("model dimensions must be positive");
    if (model_dim % heads != 0)
        throw InvalidConfig("model_dim " + std::to_string(model_dim) + " not divisible by heads " +
                            std::to_string(heads));
    if (vocab_size != Vocabulary::kSize)
        throw InvalidConfig("vocab_size must equal the character vocabulary size " +
                            std::to_string(Vocabulary::kSize));
}

std::size_t parameter_count(const ModelConfig& c) {
    const std::size_t v = static_cast<std::size_t>(c.vocab_size);
    const std::size_t d = static_cast<std::size_t>(c.model_dim);
    const std::size_t f = static_cast<std::size_t>(c.ffn_dim);
    const std::size_t ctx = static_cast<std::size_t>(c.context_len);
    const std::size_t per_layer = 2 * d             // ln1
                                  + d * 3 * d + 3 * d  // qkv
                                  + d * d + d          // out proj
                                  + 2 * d              // ln2
                                  + d * f + f          // fc1
                                  + f * d + d;         // fc2
    return v * d + ctx * d + static_cast<std::size_t>(c.layers) * per_layer + 2 * d + d * v + v;
}

// --- Params -----------------------------------------------------------------

template <typename T>
Params<T> Params<T>::zeros(const ModelConfig& c) {
    const int d = c.model_dim;
    const int f = c.ffn_dim;
    Params p;
    p.tok_emb = Mat<T>::Zero(c.vocab_size, d);
    p.pos_emb = Mat<T>::Zero(c.context_len, d);
    p.layers.resize(static_cast<std::size_t>(c.layers));
    for (auto& l : p.layers) {
        l.ln1_g = Mat<T>::Zero(1, d);
        l.ln1_b = Mat<T>::Zero(1, d);
        l.w_qkv = Mat<T>::Zero(d, 3 * d);
        l.b_qkv = Mat<T>::Zero(1, 3 * d);
        l.w_o = Mat<T>::Zero(d, d);
        l.b_o = Mat<T>::Zero(1, d);
        l.ln2_g = Mat<T>::Zero(1, d);
        l.ln2_b = Mat<T>::Zero(1, d);
        l.w_fc1 = Mat<T>::Zero(d, f);
        l.b_fc1 = Mat<T>::Zero(1, f);
        l.w_fc2 = Mat<T>::Zero(f, d);
        l.b_fc2 = Mat<T>::Zero(1, d);
    }
    p.lnf_g = Mat<T>::Zero(1, d);
    p.lnf_b = Mat<T>::Zero(1, d);
    p.w_head = Mat<T>::Zero(d, c.vocab_size);
    p.b_head = Mat<T>::Zero(1, c.vocab_size);
    return p;
}

template <typename T>
template <typename U>
Params<U> Params<T>::cast() const {
    Params<U> out;
    out.tok_emb = tok_emb.template cast<U>();
    out.pos_emb = pos_emb.template cast<U>();
    out.layers.resize(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& s = layers[i];
        auto& t = out.layers[i];
        t.ln1_g = s.ln1_g.template cast<U>();
        t.ln1_b = s.ln1_b.template cast<U>();
        t.w_qkv = s.w_qkv.template cast<U>();
        t.b_qkv = s.b_qkv.template cast<U>();
        t.w_o = s.w_o.template cast<U>();
        t.b_o = s.b_o.template cast<U>();
        t.ln2_g = s.ln2_g.template cast<U>();
        t.ln2_b = s.ln2_b.template cast<U>();
        t.w_fc1 = s.w_fc1.template cast<U>();
        t.b_fc1 = s.b_fc1.template cast<U>();
        t.w_fc2 = s.w_fc2.template cast<U>();
        t.b_fc2 = s.b_fc2.template cast<U>();
    }
    out.lnf_g = lnf_g.template cast<U>();
    out.lnf_b = lnf_b.template cast<U>();
    out.w_head = w_head.template cast<U>();
    out.b_head = b_head.template cast<U>();
    return out;
}

template <typename T>
std::size_t Params<T>::size() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Mat<T>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

template <typename T>
void Params<T>::set_zero() {
    for_each([](const std::string&, Mat<T>& m) { m.setZero(); });
}

template <typename T>
void Params<T>::add_scaled(const Params& other, T scale) {
    std::vector<const Mat<T>*> src;
    other.for_each([&](const std::string&, const Mat<T>& m) { src.push_back(&m); });
    std::size_t i = 0;
    for_each([&](const std::string&, Mat<T>& m) { m += scale * *src[i++]; });
}

template <typename T>
bool Params<T>::all_finite() const {
    bool ok = true;
    for_each([&](const std::string&, const Mat<T>& m) { ok = ok && m.allFinite(); });
    return ok;
}

template <typename T>
bool Params<T>::operator==(const Params& other) const {
    std::vector<const Mat<T>*> rhs;
    other.for_each([&](const std::string&, const Mat<T>& m) { rhs.push_back(&m); });
    std::size_t i = 0;
    bool eq = true;
    for_each([&](const std::string&, const Mat<T>& m) {
        if (i >= rhs.size()) {
            eq = false;
            return;
        }
        const Mat<T>& r = *rhs[i++];
        eq = eq && m.rows() == r.rows() && m.cols() == r.cols() && m == r;
    });
    return eq && i == rhs.size();
}

// --- TransformerLM ------------------------------------------------------------

template <typename T>
TransformerLM<T>::TransformerLM(ModelConfig config, Params<T> params)
    : m_config(config), m_params(std::move(params)) {
    m_config.validate();
}

template <typename T>
Mat<T> TransformerLM<T>::embed(std::span<const TokenId> tokens) const {
    Mat<T> x(static_cast<Eigen::Index>(tokens.size()), m_config.model_dim);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || tokens[i] >= m_config.vocab_size)
            throw InvalidArgument("token id out of range: " + std::to_string(tokens[i]));
        x.row(static_cast<Eigen::Index>(i)) = m_params.tok_emb.row(tokens[i]);
    }
    return x;
}

template <typename T>
ForwardCache<T> TransformerLM<T>::forward(const Mat<T>& inputs) const {
    const int n = static_cast<int>(inputs.rows());
    const int d = m_config.model_dim;
    const int heads = m_config.heads;
    const int hd = d / heads;
    if (n > m_config.context_len)
        throw SequenceTooLong("sequence length " + std::to_string(n) + " exceeds context " +
                              std::to_string(m_config.context_len));
    if (inputs.cols() != d) throw ShapeMismatch("input width differs from model_dim");
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    ForwardCache<T> cache;
    cache.layers.resize(m_params.layers.size());
    Mat<T> h = inputs + m_params.pos_emb.topRows(n);
    for (std::size_t li = 0; li < m_params.layers.size(); ++li) {
        const auto& p = m_params.layers[li];
        auto& c = cache.layers[li];
        c.input = h;
        c.a = layer_norm(h, p.ln1_g, p.ln1_b, c.xhat1, c.rstd1);
        c.qkv.noalias() = c.a * p.w_qkv;
        add_bias(c.qkv, p.b_qkv);
        c.attn.resize(n, d);
        c.probs.resize(static_cast<std::size_t>(heads));
        for (int hh = 0; hh < heads; ++hh) {
            const auto q = c.qkv.middleCols(hh * hd, hd);
            const auto k = c.qkv.middleCols(d + hh * hd, hd);
            const auto v = c.qkv.middleCols(2 * d + hh * hd, hd);
            Mat<T>& probs = c.probs[static_cast<std::size_t>(hh)];
            probs.noalias() = (q * k.transpose()) * scale;
            for (int i = 0; i < n; ++i) {
                auto row = probs.row(i);
                const T mx = row.head(i + 1).maxCoeff();
                T sum = 0;
                for (int j = 0; j <= i; ++j) {
                    const T e = std::exp(row(j) - mx);
                    row(j) = e;
                    sum += e;
                }
                row.head(i + 1) /= sum;
                row.tail(n - i - 1).setZero();
            }
            c.attn.middleCols(hh * hd, hd).noalias() = probs * v;
        }
        Mat<T> proj;
        proj.noalias() = c.attn * p.w_o;
        add_bias(proj, p.b_o);
        c.h1 = h + proj;
        c.m = layer_norm(c.h1, p.ln2_g, p.ln2_b, c.xhat2, c.rstd2);
        c.u.noalias() = c.m * p.w_fc1;
        add_bias(c.u, p.b_fc1);
        c.g = gelu(c.u);
        Mat<T> f;
        f.noalias() = c.g * p.w_fc2;
        add_bias(f, p.b_fc2);
        h = c.h1 + f;
    }
    cache.z = layer_norm(h, m_params.lnf_g, m_params.lnf_b, cache.xhatf, cache.rstdf);
    cache.logits.noalias() = cache.z * m_params.w_head;
    add_bias(cache.logits, m_params.b_head);
    return cache;
}

template <typename T>
void TransformerLM<T>::backward(const ForwardCache<T>& cache, const Mat<T>& dlogits, Params<T>* wg,
                                Mat<T>* input_grads) const {
    const int n = static_cast<int>(dlogits.rows());
    const int d = m_config.model_dim;
    const int heads = m_config.heads;
    const int hd = d / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    if (wg) {
        wg->w_head.noalias() += cache.z.transpose() * dlogits;
        wg->b_head.row(0) += dlogits.colwise().sum();
    }
    Mat<T> dz;
    dz.noalias() = dlogits * m_params.w_head.transpose();
    Mat<T> dh = layer_norm_backward(dz, cache.xhatf, cache.rstdf, m_params.lnf_g, wg ? &wg->lnf_g : nullptr,
                                    wg ? &wg->lnf_b : nullptr);

    for (int li = static_cast<int>(m_params.layers.size()) - 1; li >= 0; --li) {
        const auto& p = m_params.layers[static_cast<std::size_t>(li)];
        const auto& c = cache.layers[static_cast<std::size_t>(li)];
        LayerParams<T>* g = wg ? &wg->layers[static_cast<std::size_t>(li)] : nullptr;

        // MLP branch: h2 = h1 + fc2(gelu(fc1(ln2(h1)))).
        if (g) {
            g->w_fc2.noalias() += c.g.transpose() * dh;
            g->b_fc2.row(0) += dh.colwise().sum();
        }
        Mat<T> du;
        du.noalias() = dh * p.w_fc2.transpose();
        du.array() *= gelu_grad(c.u).array();
        if (g) {
            g->w_fc1.noalias() += c.m.transpose() * du;
            g->b_fc1.row(0) += du.colwise().sum();
        }
        Mat<T> dm;
        dm.noalias() = du * p.w_fc1.transpose();
        Mat<T> dh1 = dh + layer_norm_backward(dm, c.xhat2, c.rstd2, p.ln2_g, g ? &g->ln2_g : nullptr,
                                              g ? &g->ln2_b : nullptr);

        // Attention branch: h1 = h + attn(ln1(h)) W_o + b_o.
        if (g) {
            g->w_o.noalias() += c.attn.transpose() * dh1;
            g->b_o.row(0) += dh1.colwise().sum();
        }
        Mat<T> dattn;
        dattn.noalias() = dh1 * p.w_o.transpose();
        Mat<T> dqkv(n, 3 * d);
        for (int hh = 0; hh < heads; ++hh) {
            const auto q = c.qkv.middleCols(hh * hd, hd);
            const auto k = c.qkv.middleCols(d + hh * hd, hd);
            const auto v = c.qkv.middleCols(2 * d + hh * hd, hd);
            const Mat<T>& probs = c.probs[static_cast<std::size_t>(hh)];
            const auto dout = dattn.middleCols(hh * hd, hd);
            Mat<T> dprobs;
            dprobs.noalias() = dout * v.transpose();
            dqkv.middleCols(2 * d + hh * hd, hd).noalias() = probs.transpose() * dout;
            const ColVec<T> row_dot = (dprobs.array() * probs.array()).rowwise().sum();
            Mat<T> dscores = probs.array() * (dprobs.colwise() - row_dot).array();
            dscores *= scale;
            dqkv.middleCols(hh * hd, hd).noalias() = dscores * k;
            dqkv.middleCols(d + hh * hd, hd).noalias() = dscores.transpose() * q;
        }
        if (g) {
            g->w_qkv.noalias() += c.a.transpose() * dqkv;
            g->b_qkv.row(0) += dqkv.colwise().sum();
        }
        Mat<T> da;
        da.noalias() = dqkv * p.w_qkv.transpose();
        dh = dh1 + layer_norm_backward(da, c.xhat1, c.rstd1, p.ln1_g, g ? &g->ln1_g : nullptr,
                                       g ? &g->ln1_b : nullptr);
    }
    if (wg) wg->pos_emb.topRows(n) += dh;
    if (input_grads) *input_grads = std::move(dh);
}

// --- Provenance & init --------------------------------------------------------

std::string Provenance::label() const {
    switch (kind) {
    case ProvenanceKind::uninitialized: return "uninitialized";
    case ProvenanceKind::base: return "base";
    case ProvenanceKind::fine_tuned: return "fine_tuned";
    case ProvenanceKind::unlearned: return "unlearned(" + method + ")";
    }
    return "?";
}

Provenance Provenance::parse(std::string_view label) {
    if (label == "uninitialized") return {ProvenanceKind::uninitialized, ""};
    if (label == "base") return {ProvenanceKind::base, ""};
    if (label == "fine_tuned") return {ProvenanceKind::fine_tuned, ""};
    if (label.starts_with("unlearned(") && label.ends_with(")"))
        return {ProvenanceKind::unlearned, std::string(label.substr(10, label.size() - 11))};
    throw CorruptArtifact("unknown provenance label " + std::string(label));
}

ModelCheckpoint init_model(const ModelConfig& config) {
    config.validate();
    Rng rng(derive_seed(config.seed, 0x1417));
    auto p = Params<float>::zeros(config);
    const double resid_std = 0.02 / std::sqrt(2.0 * config.layers);
    fill_normal(p.tok_emb, rng, 0.02);
    fill_normal(p.pos_emb, rng, 0.01);
    for (auto& l : p.layers) {
        l.ln1_g.setOnes();
        l.ln2_g.setOnes();
        fill_normal(l.w_qkv, rng, 0.02);
        fill_normal(l.w_o, rng, resid_std);
        fill_normal(l.w_fc1, rng, 0.02);
        fill_normal(l.w_fc2, rng, resid_std);
    }
    p.lnf_g.setOnes();
    fill_normal(p.w_head, rng, 0.02);

    ModelCheckpoint ckpt;
    ckpt.id = "init";
    ckpt.config = config;
    ckpt.weights = std::move(p);
    ckpt.provenance = {ProvenanceKind::uninitialized, ""};
    ckpt.rng_seed = config.seed;
    return ckpt;
}

// --- inputs and losses --------------------------------------------------------

template <typename T>
std::vector<int> EmbeddedInput<T>::positions(SlotKind kind) const {
    std::vector<int> out;
    for (int i = 0; i < length(); ++i)
        if (slots[static_cast<std::size_t>(i)] == kind) out.push_back(i);
    return out;
}

template <typename T>
void EmbeddedInput<T>::validate() const {
    if (embeddings.rows() != length()) throw ShapeMismatch("embedding rows differ from slot count");
    int stage = 0;  // 0 bos, 1 prompt, 2 soft, 3 completion
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const int s = static_cast<int>(slots[i]);
        if (s < stage || (slots[i] == SlotKind::bos && i != 0))
            throw ShapeMismatch("slots must be ordered [bos] prompt* soft* completion*");
        stage = s;
    }
}

template <typename T>
EmbeddedInput<T> assemble_input(const TransformerLM<T>& model, std::span<const TokenId> prompt,
                                const Mat<T>& soft, std::span<const TokenId> completion) {
    const int d = model.config().model_dim;
    if (soft.rows() > 0 && soft.cols() != d) throw ShapeMismatch("soft prompt width differs from model_dim");
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(prompt.size()) + soft.rows() +
                           static_cast<Eigen::Index>(completion.size());
    EmbeddedInput<T> in;
    in.embeddings.resize(n, d);
    in.slots.reserve(static_cast<std::size_t>(n));
    const TokenId bos = Vocabulary::kBos;
    in.embeddings.row(0) = model.embed(std::span(&bos, 1)).row(0);
    in.slots.push_back(SlotKind::bos);
    Eigen::Index row = 1;
    if (!prompt.empty()) {
        in.embeddings.middleRows(row, static_cast<Eigen::Index>(prompt.size())) = model.embed(prompt);
        row += static_cast<Eigen::Index>(prompt.size());
        in.slots.insert(in.slots.end(), prompt.size(), SlotKind::prompt);
    }
    if (soft.rows() > 0) {
        in.embeddings.middleRows(row, soft.rows()) = soft;
        row += soft.rows();
        in.slots.insert(in.slots.end(), static_cast<std::size_t>(soft.rows()), SlotKind::soft);
    }
    if (!completion.empty()) {
        in.embeddings.middleRows(row, static_cast<Eigen::Index>(completion.size())) = model.embed(completion);
        in.slots.insert(in.slots.end(), completion.size(), SlotKind::completion);
    }
    return in;
}

template <typename T>
Mat<T> softmax_rows(const Mat<T>& logits) {
    Mat<T> p(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const T mx = logits.row(i).maxCoeff();
        p.row(i) = (logits.row(i).array() - mx).exp();
        p.row(i) /= p.row(i).sum();
    }
    return p;
}

template <typename T>
TokenId argmax_row(const Mat<T>& logits, int row) {
    TokenId best = 0;
    T best_v = logits(row, 0);
    for (Eigen::Index j = 1; j < logits.cols(); ++j) {
        if (logits(row, j) > best_v) {
            best_v = logits(row, j);
            best = static_cast<TokenId>(j);
        }
    }
    return best;
}

template <typename T>
double weighted_nll(const Mat<T>& logits, std::span<const NllTerm> terms, Mat<T>* dlogits) {
    if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
    double loss = 0.0;
    for (const auto& t : terms) {
        if (t.position < 0 || t.position >= logits.rows() || t.target < 0 || t.target >= logits.cols())
            throw ShapeMismatch("loss term outside the logits");
        const auto row = logits.row(t.position);
        const T mx = row.maxCoeff();
        const auto e = (row.array() - mx).exp();
        const T sum = e.sum();
        const double logp = static_cast<double>(row(t.target) - mx) - std::log(static_cast<double>(sum));
        loss -= t.weight * logp;
        if (dlogits) {
            const T w = static_cast<T>(t.weight);
            dlogits->row(t.position) += (w / sum) * e.matrix();
            (*dlogits)(t.position, t.target) -= w;
        }
    }
    return loss;
}

template <typename T>
std::vector<NllTerm> completion_terms(const EmbeddedInput<T>& input, std::span<const TokenId> target) {
    const auto pos = input.positions(SlotKind::completion);
    if (pos.size() != target.size())
        throw ShapeMismatch("completion slots (" + std::to_string(pos.size()) + ") differ from target length (" +
                            std::to_string(target.size()) + ")");
    std::vector<NllTerm> terms;
    terms.reserve(pos.size());
    for (std::size_t i = 0; i < pos.size(); ++i) {
        if (pos[i] == 0) throw ShapeMismatch("completion slot at position 0 has no context");
        terms.push_back({pos[i] - 1, target[i], 1.0});
    }
    return terms;
}

Example completion_example(std::span<const TokenId> prompt, std::span<const TokenId> completion, bool with_eos) {
    Example ex;
    ex.tokens.push_back(Vocabulary::kBos);
    ex.tokens.insert(ex.tokens.end(), prompt.begin(), prompt.end());
    const int start = static_cast<int>(ex.tokens.size());
    ex.tokens.insert(ex.tokens.end(), completion.begin(), completion.end());
    if (with_eos) ex.tokens.push_back(Vocabulary::kEos);
    for (int i = start; i < static_cast<int>(ex.tokens.size()); ++i)
        ex.terms.push_back({i - 1, ex.tokens[static_cast<std::size_t>(i)], 1.0});
    return ex;
}

Example text_example(std::span<const TokenId> text) {
    return completion_example({}, text, true);
}

template <typename T>
double accumulate_grad(const TransformerLM<T>& model, std::span<const Example> batch, const LossSpec& spec,
                       Params<T>& grads) {
    double total = 0.0;
    for (const auto& ex : batch) {
        const Mat<T> x = model.embed(ex.tokens);
        const auto cache = model.forward(x);
        Mat<T> dlogits;
        total += spec.scale * weighted_nll(cache.logits, std::span<const NllTerm>(ex.terms), &dlogits);
        dlogits *= static_cast<T>(spec.scale);
        Mat<T> dx;
        model.backward(cache, dlogits, &grads, spec.freeze_embeddings ? nullptr : &dx);
        if (!spec.freeze_embeddings)
            for (std::size_t i = 0; i < ex.tokens.size(); ++i)
                grads.tok_emb.row(ex.tokens[i]) += dx.row(static_cast<Eigen::Index>(i));
    }
    return total;
}

// --- checkpoint-level API -----------------------------------------------------

Mat<double> forward(const ModelCheckpoint& ckpt, std::span<const TokenId> tokens) {
    return ckpt.model<double>().logits(tokens);
}

Mat<double> forward(const ModelCheckpoint& ckpt, const EmbeddedInput<double>& input) {
    input.validate();
    return ckpt.model<double>().logits(input.embeddings);
}

double completion_nll(const ModelCheckpoint& ckpt, const EmbeddedInput<double>& input,
                      std::span<const TokenId> target) {
    input.validate();
    const auto terms = completion_terms(input, target);
    const auto logits = ckpt.model<double>().logits(input.embeddings);
    return weighted_nll<double>(logits, terms, nullptr);
}

Mat<double> grad_soft(const ModelCheckpoint& ckpt, const EmbeddedInput<double>& input,
                      std::span<const TokenId> target) {
    input.validate();
    const auto soft = input.positions(SlotKind::soft);
    if (soft.empty()) throw NoSoftSlots("input has no soft slots");
    const auto terms = completion_terms(input, target);
    const auto model = ckpt.model<double>();
    const auto cache = model.forward(input.embeddings);
    Mat<double> dlogits;
    weighted_nll<double>(cache.logits, terms, &dlogits);
    Mat<double> dx;
    model.backward(cache, dlogits, nullptr, &dx);
    return dx.middleRows(soft.front(), static_cast<Eigen::Index>(soft.size()));
}

std::vector<std::pair<std::string, Mat<double>>> grad_weights(const ModelCheckpoint& ckpt,
                                                              std::span<const Example> batch,
                                                              const LossSpec& spec) {
    const auto model = ckpt.model<double>();
    auto grads = Params<double>::zeros(ckpt.config);
    accumulate_grad(model, batch, spec, grads);
    std::vector<std::pair<std::string, Mat<double>>> out;
    grads.for_each([&](const std::string& name, const Mat<double>& m) {
        if (spec.freeze_embeddings && name == "tok_emb") return;
        out.emplace_back(name, m);
    });
    return out;
}

template <typename T>
TokenSeq greedy_decode(const TransformerLM<T>& model, const Mat<T>& prefix, int n_tokens) {
    if (n_tokens < 0) throw InvalidArgument("n_tokens must be >= 0");
    if (prefix.rows() + n_tokens > model.config().context_len)
        throw SequenceTooLong("prefix plus decoded tokens exceed the context");
    TokenSeq out;
    if (n_tokens == 0) return out;
    if (prefix.rows() == 0) throw InvalidArgument("greedy decode needs a non-empty prefix");
    Mat<T> x(prefix.rows() + n_tokens, prefix.cols());
    x.topRows(prefix.rows()) = prefix;
    Eigen::Index len = prefix.rows();
    for (int step = 0; step < n_tokens; ++step) {
        const Mat<T> logits = model.logits(Mat<T>(x.topRows(len)));
        const TokenId next = argmax_row(logits, static_cast<int>(len - 1));
        out.push_back(next);
        x.row(len++) = model.params().tok_emb.row(next);
    }
    return out;
}

TokenSeq greedy_decode(const ModelCheckpoint& ckpt, const EmbeddedInput<double>& prefix, int n_tokens) {
    return greedy_decode(ckpt.model<double>(), prefix.embeddings, n_tokens);
}

#define STALAB_INSTANTIATE(T)                                                                            \
    template struct Params<T>;                                                                           \
    template class TransformerLM<T>;                                                                     \
    template struct EmbeddedInput<T>;                                                                    \
    template EmbeddedInput<T> assemble_input(const TransformerLM<T>&, std::span<const TokenId>,          \
                                             const Mat<T>&, std::span<const TokenId>);                   \
    template Mat<T> softmax_rows(const Mat<T>&);                                                         \
    template TokenId argmax_row(const Mat<T>&, int);                                                     \
    template double weighted_nll(const Mat<T>&, std::span<const NllTerm>, Mat<T>*);                      \
    template std::vector<NllTerm> completion_terms(const EmbeddedInput<T>&, std::span<const TokenId>);   \
    template double accumulate_grad(const TransformerLM<T>&, std::span<const Example>, const LossSpec&,  \
                                    Params<T>&);                                                         \
    template TokenSeq greedy_decode(const TransformerLM<T>&, const Mat<T>&, int);

STALAB_INSTANTIATE(float)
STALAB_INSTANTIATE(double)
template Params<double> Params<float>::cast<double>() const;
template Params<float> Params<double>::cast<float>() const;
template Params<float> Params<float>::cast<float>() const;
template Params<double> Params<double>::cast<double>() const;

} // namespace stalab
