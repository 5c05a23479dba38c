#pragma once

#include <span>

namespace stalab {

double mean(std::span<const double> xs);
/// Unbiased (n − 1) sample variance.
double sample_variance(std::span<const double> xs);
double sample_sd(std::span<const double> xs);

/// Regularized incomplete beta I_x(a, b), continued-fraction evaluation.
double incomplete_beta(double a, double b, double x);

/// Student-t CDF with `dof` degrees of freedom (dof may be fractional).
double student_t_cdf(double t, double dof);

enum class Alternative { two_sided, less, greater };

struct WelchResult {
    double t = 0.0;
    double dof = 0.0;
    double p = 1.0;
    bool degenerate = false;  ///< both samples had zero variance
};

/// Unequal-variance two-sample t-test of mean(a) − mean(b).
/// Throws InvalidArgument when either sample has fewer than two values.
/// When both variances are zero the result is flagged degenerate with
/// p = 1 for equal means and 0 otherwise.
WelchResult welch_t(std::span<const double> a, std::span<const double> b,
                    Alternative alternative = Alternative::two_sided);

} // namespace stalab
