#include "stalab/probe.hpp"

#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "stalab/error.hpp"
#include "stalab/rng.hpp"

namespace stalab {

std::size_t ProbeDataset::count(int label, bool eval) const {
    std::size_t n = 0;
    for (const auto& r : rows) n += (r.y == label && r.eval == eval) ? 1 : 0;
    return n;
}

ProbeDataset collect_probe_data(std::span<const AttackOutcome> outcomes,
                                const std::map<std::string, Provenance>& provenance, int min_per_class) {
    ProbeDataset data;
    for (const auto& o : outcomes) {
        const auto it = provenance.find(o.model_id);
        if (it == provenance.end()) throw InvalidArgument("no provenance for model " + o.model_id);
        if (!o.success || o.soft_tokens_used != 1) continue;
        const Provenance& p = it->second;
        if (p.kind == ProvenanceKind::uninitialized) continue;
        ProbeRow row;
        row.x.assign(o.soft_embeddings.data(), o.soft_embeddings.data() + o.soft_embeddings.size());
        row.y = p.kind == ProvenanceKind::base ? 0 : 1;
        row.model_id = o.model_id;
        row.provenance = p;
        row.eval = p.kind == ProvenanceKind::unlearned;
        data.rows.push_back(std::move(row));
    }
    const auto n0 = data.count(0, false);
    const auto n1 = data.count(1, false);
    if (n0 < static_cast<std::size_t>(min_per_class) || n1 < static_cast<std::size_t>(min_per_class))
        throw InsufficientData("k=1 successes per training class: base " + std::to_string(n0) +
                               ", fine-tuned " + std::to_string(n1) + " (need " +
                               std::to_string(min_per_class) + ")");
    return data;
}

double LogisticProbe::probability(std::span<const double> x) const {
    double z = bias;
    for (std::size_t i = 0; i < weights.size(); ++i) z += weights[i] * (x[i] - feature_mean[i]) / feature_scale[i];
    return 1.0 / (1.0 + std::exp(-z));
}

LogisticProbe fit_logistic(const std::vector<std::vector<double>>& xs, std::span<const int> ys,
                           const ProbeOptions& options) {
    if (xs.size() != ys.size() || xs.empty()) throw InvalidArgument("probe needs matching, non-empty xs and ys");
    bool has0 = false, has1 = false;
    for (int y : ys) {
        if (y == 0) has0 = true;
        else if (y == 1) has1 = true;
        else throw InvalidArgument("labels must be 0 or 1");
    }
    if (!has0 || !has1) throw DegenerateLabels("training labels contain a single class");

    const auto n = static_cast<Eigen::Index>(xs.size());
    const auto d = static_cast<Eigen::Index>(xs[0].size());
    LogisticProbe probe;
    probe.feature_mean.assign(static_cast<std::size_t>(d), 0.0);
    probe.feature_scale.assign(static_cast<std::size_t>(d), 1.0);
    for (const auto& x : xs) {
        if (static_cast<Eigen::Index>(x.size()) != d) throw ShapeMismatch("ragged probe features");
        for (Eigen::Index j = 0; j < d; ++j) probe.feature_mean[j] += x[j] / static_cast<double>(n);
    }
    for (Eigen::Index j = 0; j < d; ++j) {
        double v = 0.0;
        for (const auto& x : xs) v += (x[j] - probe.feature_mean[j]) * (x[j] - probe.feature_mean[j]);
        const double sd = std::sqrt(v / static_cast<double>(n));
        probe.feature_scale[j] = sd > 1e-12 ? sd : 1.0;
    }

    // Column d is the intercept.
    Eigen::MatrixXd X(n, d + 1);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < d; ++j) X(i, j) = (xs[i][j] - probe.feature_mean[j]) / probe.feature_scale[j];
        X(i, d) = 1.0;
        y(i) = ys[i];
    }
    Eigen::VectorXd w = Eigen::VectorXd::Zero(d + 1);
    Eigen::VectorXd penalty = Eigen::VectorXd::Constant(d + 1, options.l2);
    penalty(d) = 0.0;
    for (int it = 0; it < options.max_iterations; ++it) {
        const Eigen::VectorXd z = X * w;
        Eigen::VectorXd p(n), s(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            p(i) = 1.0 / (1.0 + std::exp(-z(i)));
            s(i) = std::max(p(i) * (1.0 - p(i)), 1e-12);
        }
        const Eigen::VectorXd grad = X.transpose() * (p - y) + penalty.cwiseProduct(w);
        Eigen::MatrixXd hess = X.transpose() * s.asDiagonal() * X;
        hess.diagonal() += penalty;
        hess.diagonal().array() += 1e-10;
        const Eigen::VectorXd step = hess.ldlt().solve(grad);
        w -= step;
        if (step.lpNorm<Eigen::Infinity>() < options.tolerance) break;
    }
    probe.weights.assign(w.data(), w.data() + d);
    probe.bias = w(d);
    return probe;
}

namespace {

double accuracy(const LogisticProbe& probe, const std::vector<const ProbeRow*>& rows) {
    if (rows.empty()) return std::numeric_limits<double>::quiet_NaN();
    int correct = 0;
    for (const auto* r : rows) correct += probe.predict(r->x) == r->y ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(rows.size());
}

} // namespace

ProbeResult train_probe(const ProbeDataset& data, const ProbeOptions& options) {
    std::vector<const ProbeRow*> train, eval;
    std::vector<std::vector<double>> xs;
    std::vector<int> ys;
    for (const auto& r : data.rows) {
        if (r.eval) {
            eval.push_back(&r);
        } else {
            train.push_back(&r);
            xs.push_back(r.x);
            ys.push_back(r.y);
        }
    }
    if (xs.empty()) throw DegenerateLabels("no training rows");
    ProbeResult result;
    result.probe = fit_logistic(xs, ys, options);
    result.train_accuracy = accuracy(result.probe, train);
    result.eval_accuracy = accuracy(result.probe, eval);
    result.n_train = static_cast<int>(train.size());
    result.n_eval = static_cast<int>(eval.size());
    return result;
}

ProbeDataset permute_labels(const ProbeDataset& data, std::uint64_t seed) {
    ProbeDataset out = data;
    std::vector<int> labels(out.rows.size());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 2);
    Rng rng(seed);
    rng.shuffle(labels);
    for (std::size_t i = 0; i < labels.size(); ++i) out.rows[i].y = labels[i];
    return out;
}

} // namespace stalab
