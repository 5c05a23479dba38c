#include <doctest.h>

#include <cmath>
#include <vector>

#include "stalab/error.hpp"
#include "stalab/rng.hpp"
#include "stalab/stats.hpp"

using namespace stalab;

namespace {
#include "welch_oracle.inc"
}

TEST_CASE("welch_t matches the reference on the worked example") {
    const auto r = welch_t(kWelchExample.a, kWelchExample.b);
    CHECK(r.t == doctest::Approx(kWelchExample.t).epsilon(1e-12));
    CHECK(std::abs(r.dof - kWelchExample.dof) < 1e-9);
    CHECK(std::abs(r.p - kWelchExample.p) < 1e-9);
    CHECK_FALSE(r.degenerate);
}

TEST_CASE("welch_t matches the reference on randomized pairs") {
    REQUIRE(kWelchCases.size() == 20);
    for (const auto& c : kWelchCases) {
        const auto r = welch_t(c.a, c.b);
        CHECK(std::abs(r.t - c.t) < 1e-9);
        CHECK(std::abs(r.dof - c.dof) < 1e-9);
        CHECK(std::abs(r.p - c.p) < 1e-9);
    }
}

TEST_CASE("one-sided alternatives") {
    CHECK(std::abs(welch_t(kWelchExample.a, kWelchExample.b, Alternative::less).p - kWelchExampleLess) < 1e-9);
    CHECK(std::abs(welch_t(kWelchExample.a, kWelchExample.b, Alternative::greater).p - kWelchExampleGreater) <
          1e-9);
}

TEST_CASE("identical samples give t = 0 and p = 1") {
    const std::vector<double> a{1.0, 2.0, 4.0, 8.0};
    const auto r = welch_t(a, a);
    CHECK(r.t == 0.0);
    CHECK(r.p == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("swapping samples negates t and keeps p") {
    for (const auto& c : kWelchCases) {
        const auto ab = welch_t(c.a, c.b);
        const auto ba = welch_t(c.b, c.a);
        CHECK(ab.t == -ba.t);
        CHECK(ab.p == doctest::Approx(ba.p).epsilon(1e-14));
        CHECK(ab.dof == doctest::Approx(ba.dof).epsilon(1e-14));
    }
}

TEST_CASE("degenerate samples") {
    const std::vector<double> ones{1.0, 1.0, 1.0};
    const std::vector<double> twos{2.0, 2.0};
    const auto same = welch_t(ones, ones);
    CHECK(same.degenerate);
    CHECK(same.p == 1.0);
    const auto diff = welch_t(ones, twos);
    CHECK(diff.degenerate);
    CHECK(diff.p == 0.0);
    const std::vector<double> one{1.0};
    CHECK_THROWS_AS(welch_t(one, ones), InvalidArgument);
}

TEST_CASE("p-values stay in [0, 1] and dof is positive") {
    Rng rng(99);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> a(2 + rng.uniform_int(20)), b(2 + rng.uniform_int(20));
        for (auto& x : a) x = rng.normal() * 3.0;
        for (auto& x : b) x = rng.normal() + 1.0;
        const auto r = welch_t(a, b);
        CHECK(r.p >= 0.0);
        CHECK(r.p <= 1.0);
        CHECK(r.dof > 0.0);
    }
}

TEST_CASE("incomplete beta and t CDF reference points") {
    CHECK(incomplete_beta(2.0, 3.0, 0.0) == 0.0);
    CHECK(incomplete_beta(2.0, 3.0, 1.0) == 1.0);
    // I_x(1, 1) = x and I_x(a, 1) = x^a.
    CHECK(incomplete_beta(1.0, 1.0, 0.37) == doctest::Approx(0.37).epsilon(1e-14));
    CHECK(incomplete_beta(3.5, 1.0, 0.6) == doctest::Approx(std::pow(0.6, 3.5)).epsilon(1e-13));
    CHECK(student_t_cdf(0.0, 7.3) == doctest::Approx(0.5).epsilon(1e-15));
    // With one degree of freedom the t distribution is Cauchy.
    CHECK(student_t_cdf(1.7, 1.0) == doctest::Approx(0.5 + std::atan(1.7) / M_PI).epsilon(1e-13));
    CHECK(student_t_cdf(-2.0, 5.0) + student_t_cdf(2.0, 5.0) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("sample moments") {
    const std::vector<double> x{1.0, 2.0, 3.0, 4.0};
    CHECK(mean(x) == 2.5);
    CHECK(sample_variance(x) == doctest::Approx(5.0 / 3.0).epsilon(1e-15));
    CHECK(sample_sd(x) == doctest::Approx(std::sqrt(5.0 / 3.0)).epsilon(1e-15));
}
