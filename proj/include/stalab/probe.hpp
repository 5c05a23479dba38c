#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "stalab/model.hpp"
#include "stalab/sta.hpp"

namespace stalab {

struct ProbeRow {
    std::vector<double> x;  ///< the optimized single soft token
    int y = 0;              ///< 0 for the base model, 1 otherwise
    std::string model_id;
    Provenance provenance;
    bool eval = false;      ///< unlearned-model rows are eval-only
};

struct ProbeDataset {
    std::vector<ProbeRow> rows;

    std::size_t count(int label, bool eval) const;
};

/// Keeps successful k=1 outcomes of base, fine-tuned and unlearned models.
/// Throws InvalidArgument for outcomes of a model missing from `provenance`,
/// InsufficientData when either training class has fewer than `min_per_class`
/// rows.
ProbeDataset collect_probe_data(std::span<const AttackOutcome> outcomes,
                                const std::map<std::string, Provenance>& provenance, int min_per_class = 20);

struct ProbeOptions {
    double l2 = 1.0;          ///< ridge penalty on the weights (not the bias)
    int max_iterations = 100;
    double tolerance = 1e-10;
};

struct LogisticProbe {
    std::vector<double> feature_mean;
    std::vector<double> feature_scale;
    std::vector<double> weights;
    double bias = 0.0;

    double probability(std::span<const double> x) const;
    int predict(std::span<const double> x) const { return probability(x) >= 0.5 ? 1 : 0; }
};

/// L2-regularized logistic regression fit by Newton's method on
/// standardized features. Throws DegenerateLabels unless both labels occur.
LogisticProbe fit_logistic(const std::vector<std::vector<double>>& xs, std::span<const int> ys,
                           const ProbeOptions& options = {});

struct ProbeResult {
    LogisticProbe probe;
    double train_accuracy = 0.0;
    double eval_accuracy = 0.0;  ///< NaN when there are no eval rows
    int n_train = 0;
    int n_eval = 0;
};

/// Fits on the training rows (base vs fine-tuned) and scores the
/// unlearned-model rows against their labels.
ProbeResult train_probe(const ProbeDataset& data, const ProbeOptions& options = {});

/// Replaces every label by a seeded shuffle of a balanced 0/1 vector, so
/// labels carry no information about the vectors.
ProbeDataset permute_labels(const ProbeDataset& data, std::uint64_t seed);

} // namespace stalab
