// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "doctest.h"
#include "ricl/risk.hpp"

using namespace ricl;

namespace {

PredictiveOutput pred(std::vector<double> mu, std::vector<double> sigma) {
    return PredictiveOutput{std::move(mu), std::move(sigma)};
}

// Sort-everything oracle for the tail rule.
std::vector<std::size_t> sorted_prefix(const std::vector<double>& v, std::size_t k) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
    idx.resize(k);
    return idx;
}

}  // namespace

TEST_SUITE("risk") {

TEST_CASE("gaussian nll closed forms") {
    const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
    const std::vector<double> y{0.3, -1.2, 2.0};
    CHECK(std::abs(gaussian_nll_risk(y, pred(y, {1, 1, 1})) - half_log_2pi) < 1e-12);
    CHECK(std::abs(gaussian_nll_risk(y, pred(y, {1, 1, 1})) - 0.918939) < 1e-6);
    CHECK(std::abs(gaussian_nll_risk(y, pred({-0.7, -2.2, 1.0}, {1, 1, 1})) - (half_log_2pi + 0.5)) < 1e-12);
    CHECK(std::abs(gaussian_nll_risk(y, pred(y, {2, 2, 2})) - (std::log(2.0) + half_log_2pi)) < 1e-12);
    CHECK(std::abs(gaussian_nll_risk(y, pred(y, {2, 2, 2})) - 1.612086) < 1e-6);
}

TEST_CASE("gaussian nll rejects non-positive sigma and length mismatch") {
    const std::vector<double> y{1.0, 2.0};
    CHECK_THROWS_AS(gaussian_nll_risk(y, pred(y, {1.0, 0.0})), ArgumentError);
    CHECK_THROWS_AS(gaussian_nll_risk(y, pred(y, {1.0, -1.0})), ArgumentError);
    CHECK_THROWS_AS(gaussian_nll_risk(y, pred({1.0}, {1.0})), ArgumentError);
}

TEST_CASE("gaussian nll partial derivatives match finite differences") {
    const std::vector<double> y{0.4, -0.1, 1.3};
    auto p = pred({0.1, 0.2, 0.9}, {0.8, 1.4, 0.6});
    const auto r = gaussian_nll_risk_grad(y, p);
    for (std::size_t k = 0; k < y.size(); ++k) {
        auto up = p, dn = p;
        up.mu[k] += 1e-6;
        dn.mu[k] -= 1e-6;
        CHECK(r.d_mu[k] == doctest::Approx((gaussian_nll_risk(y, up) - gaussian_nll_risk(y, dn)) / 2e-6).epsilon(1e-6));
        up = p;
        dn = p;
        up.sigma[k] += 1e-6;
        dn.sigma[k] -= 1e-6;
        CHECK(r.d_sigma[k] ==
              doctest::Approx((gaussian_nll_risk(y, up) - gaussian_nll_risk(y, dn)) / 2e-6).epsilon(1e-6));
    }
}

TEST_CASE("rmse closed forms and homogeneity") {
    const std::vector<double> y{1.0, 2.0};
    CHECK(rmse_risk(y, pred(y, {5, 5})) == 0.0);
    CHECK(rmse_risk(y, pred({-2.0, -2.0}, {1, 1})) == std::sqrt(12.5));
    CHECK(rmse_risk(y, pred({-2.0, -2.0}, {1, 1})) == doctest::Approx(3.5355).epsilon(1e-4));
    const std::vector<double> mu{0.5, 2.5};
    const double base = rmse_risk(y, pred(mu, {1, 1}));
    for (double lambda : {-3.0, 0.5, 4.0}) {
        std::vector<double> scaled{y[0] - lambda * (y[0] - mu[0]), y[1] - lambda * (y[1] - mu[1])};
        CHECK(rmse_risk(y, pred(scaled, {1, 1})) == doctest::Approx(std::abs(lambda) * base).epsilon(1e-14));
    }
    const auto g = rmse_risk_grad(y, pred(y, {1, 1}));
    CHECK(g.d_mu == std::vector<double>{0.0, 0.0});
}

TEST_CASE("make_risk and names") {
    CHECK(risk_from_string("kl") == RiskKind::kl);
    CHECK(risk_from_string("rmse") == RiskKind::rmse);
    CHECK_THROWS_AS(risk_from_string("mse"), ConfigError);
    const std::vector<double> y{0.0};
    CHECK(make_risk(RiskKind::rmse)(y, pred({2.0}, {1.0})).value == 2.0);
}

TEST_CASE("select_tail examples") {
    CHECK(select_tail(RiskVector::from_values({0.1, 5.0, 2.0, 3.0}), {0.5}) == std::vector<std::size_t>{1, 3});
    std::vector<double> eighty(80);
    std::iota(eighty.begin(), eighty.end(), 0.0);
    CHECK(select_tail(RiskVector::from_values(eighty), {0.4}).size() == 32);
    CHECK(select_tail(RiskVector::from_values({1, 1, 1, 1, 1}), {0.4}) == std::vector<std::size_t>{0, 1});
}

TEST_CASE("select_tail tie-break uses task ids") {
    RiskVector r;
    r.values = {2.0, 2.0, 2.0, 1.0};
    r.task_ids = {30, 10, 20, 0};
    CHECK(select_tail(r, {0.5}) == std::vector<std::size_t>{1, 2});
}

TEST_CASE("select_tail rejects an empty tail and bad vectors") {
    CHECK_THROWS_AS(select_tail(RiskVector::from_values({1, 2, 3}), {0.2}), ConfigError);
    CHECK_THROWS_AS(select_tail(RiskVector::from_values({1, 2, 3}), {0.0}), ConfigError);
    CHECK_THROWS_AS(select_tail(RiskVector::from_values({}), {0.5}), ArgumentError);
    CHECK_THROWS_AS(select_tail(RiskVector::from_values({1.0, NAN}), {0.5}), NumericError);
    RiskVector ragged;
    ragged.values = {1, 2};
    ragged.task_ids = {0};
    CHECK_THROWS_AS(select_tail(ragged, {0.5}), ArgumentError);
}

TEST_CASE("tail_count handles representation error") {
    CHECK(tail_count(0.4, 80) == 32);
    CHECK(tail_count(0.1, 30) == 3);
    CHECK(tail_count(0.6, 60) == 36);
    CHECK(tail_count(1.0, 7) == 7);
    CHECK(tail_count(0.3, 3) == 0);
    CHECK(tail_count(0.0, 10) == 0);
    CHECK(tail_count(1.5, 10) == 0);
}

TEST_CASE("empirical VaR and CVaR examples") {
    const auto r = RiskVector::from_values({1, 2, 3, 4, 5});
    CHECK(empirical_var(r, {0.4}) == 4.0);
    CHECK(empirical_cvar(r, {0.4}) == 4.5);
    CHECK(empirical_var(RiskVector::from_values({7.5}), {1.0}) == 7.5);
    CHECK(empirical_var(RiskVector::from_values({2, 2, 2, 2}), {0.5}) == 2.0);
    CHECK(empirical_cvar(RiskVector::from_values({2, 2, 2, 2}), {0.5}) == 2.0);
    CHECK(empirical_cvar(r, {1.0}) == 3.0);
}

TEST_CASE("CVaR is translation equivariant") {
    Rng rng(4);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> v(20);
        for (auto& x : v) {
            x = n(rng);
        }
        std::vector<double> shifted(v);
        for (auto& x : shifted) {
            x += 0.25;
        }
        CHECK(empirical_cvar(RiskVector::from_values(shifted), {0.3}) ==
              doctest::Approx(empirical_cvar(RiskVector::from_values(v), {0.3}) + 0.25).epsilon(1e-12));
    }
}

TEST_CASE("tail properties on random batches") {
    Rng rng(2024);
    std::uniform_int_distribution<int> size(1, 64);
    std::uniform_int_distribution<int> small(0, 4);
    std::lognormal_distribution<double> value(0.0, 1.0);
    for (int trial = 0; trial < 300; ++trial) {
        const auto b = static_cast<std::size_t>(size(rng));
        std::vector<double> v(b);
        for (auto& x : v) {
            // Coarse values force ties.
            x = trial % 2 == 0 ? value(rng) : static_cast<double>(small(rng));
        }
        const auto rv = RiskVector::from_values(v);
        const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(b);
        double prev = std::numeric_limits<double>::infinity();
        for (int qi = 1; qi <= 10; ++qi) {
            const double q = qi / 10.0;
            const std::size_t k = tail_count(q, b);
            if (k == 0) {
                CHECK_THROWS_AS(select_tail(rv, {q}), ConfigError);
                continue;
            }
            const auto sel = select_tail(rv, {q});
            CHECK(sel == sorted_prefix(v, k));
            const double cvar = empirical_cvar(rv, {q});
            CHECK(cvar >= mean - 1e-12);
            CHECK(cvar <= prev + 1e-12);
            prev = cvar;
            // Strictly increasing transforms keep the selection.
            std::vector<double> t(v);
            for (auto& x : t) {
                x = std::exp(3.0 * x) + 1.0;
            }
            CHECK(select_tail(RiskVector::from_values(t), {q}) == sel);
        }
    }
}

}  // TEST_SUITE
