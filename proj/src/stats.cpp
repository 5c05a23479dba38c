#include "stalab/stats.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "stalab/error.hpp"

namespace stalab {

namespace {

// Modified Lentz evaluation of the incomplete beta continued fraction.
double beta_continued_fraction(double a, double b, double x) {
    constexpr int kMaxTerms = 10000;
    constexpr double kEps = 1e-16;
    constexpr double kTiny = 1e-300;
    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxTerms; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) break;
    }
    return h;
}

} // namespace

double mean(std::span<const double> xs) {
    if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
    return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double sample_variance(std::span<const double> xs) {
    if (xs.size() < 2) return 0.0;
    const double m = mean(xs);
    double ss = 0.0;
    for (double x : xs) ss += (x - m) * (x - m);
    return ss / static_cast<double>(xs.size() - 1);
}

double sample_sd(std::span<const double> xs) { return std::sqrt(sample_variance(xs)); }

double incomplete_beta(double a, double b, double x) {
    if (!(a > 0) || !(b > 0)) throw InvalidArgument("incomplete_beta needs a, b > 0");
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                             b * std::log1p(-x);
    const double front = std::exp(log_front);
    // The fraction converges fast for x < (a + 1)/(a + b + 2); use symmetry otherwise.
    if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
    return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double dof) {
    if (!(dof > 0)) throw InvalidArgument("student_t_cdf needs dof > 0");
    if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
    const double x = dof / (dof + t * t);
    const double tail = 0.5 * incomplete_beta(0.5 * dof, 0.5, x);  // P(T > |t|)
    return t > 0 ? 1.0 - tail : tail;
}

WelchResult welch_t(std::span<const double> a, std::span<const double> b, Alternative alternative) {
    if (a.size() < 2 || b.size() < 2) throw InvalidArgument("welch_t needs at least two values per sample");
    const double na = static_cast<double>(a.size());
    const double nb = static_cast<double>(b.size());
    const double ma = mean(a);
    const double mb = mean(b);
    const double va = sample_variance(a) / na;
    const double vb = sample_variance(b) / nb;
    WelchResult r;
    if (va == 0.0 && vb == 0.0) {
        r.degenerate = true;
        r.dof = na + nb - 2.0;
        if (ma == mb) {
            r.t = 0.0;
            r.p = 1.0;
        } else {
            r.t = ma > mb ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
            const bool supports = alternative == Alternative::two_sided ||
                                  (alternative == Alternative::greater && ma > mb) ||
                                  (alternative == Alternative::less && ma < mb);
            r.p = supports ? 0.0 : 1.0;
        }
        return r;
    }
    const double se2 = va + vb;
    r.t = (ma - mb) / std::sqrt(se2);
    r.dof = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    switch (alternative) {
    case Alternative::two_sided: {
        const double x = r.dof / (r.dof + r.t * r.t);
        r.p = incomplete_beta(0.5 * r.dof, 0.5, x);
        break;
    }
    case Alternative::greater: r.p = 1.0 - student_t_cdf(r.t, r.dof); break;
    case Alternative::less: r.p = student_t_cdf(r.t, r.dof); break;
    }
    r.p = std::min(1.0, std::max(0.0, r.p));
    return r;
}

} // namespace stalab
