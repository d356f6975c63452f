// SPDX-License-Identifier: Apache-2.0
//
// Per-task risks, empirical VaR / CVaR and tail selection.
//
// The tail parameter is the retained fraction q of a batch: a batch of b
// tasks keeps the floor(q * b) riskiest ones (q = 0.4 keeps 32 of 80).

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ricl/metamodel.hpp"

namespace ricl {

enum class RiskKind { kl, rmse };

std::string to_string(RiskKind kind);
RiskKind risk_from_string(const std::string& name);

/// Per-step mean Gaussian negative log density (the KL risk up to a constant):
/// mean_k [ log sigma_k + 0.5 log(2 pi) + 0.5 ((y_k - mu_k) / sigma_k)^2 ].
double gaussian_nll_risk(std::span<const double> target, const PredictiveOutput& pred);
RiskEvaluation gaussian_nll_risk_grad(std::span<const double> target, const PredictiveOutput& pred);

/// sqrt(mean_k (y_k - mu_k)^2); sigma is ignored.
double rmse_risk(std::span<const double> target, const PredictiveOutput& pred);
RiskEvaluation rmse_risk_grad(std::span<const double> target, const PredictiveOutput& pred);
double rmse(std::span<const double> a, std::span<const double> b);

RiskFn make_risk(RiskKind kind);

struct RiskVector {
    std::vector<double> values;
    std::vector<std::int64_t> task_ids;

    /// task_ids = 0..n-1.
    static RiskVector from_values(std::vector<double> values);
};

struct TailSpec {
    double tail_fraction = 0.4;
};

/// floor(q * b), tolerant of representation error in q.
std::size_t tail_count(double tail_fraction, std::size_t batch_size);

/// Positions of the `count` largest values, ordered by descending value then
/// ascending task id.
std::vector<std::size_t> select_top(const RiskVector& risks, std::size_t count);

/// select_top with count = floor(q * b); throws ConfigError when that is 0.
std::vector<std::size_t> select_tail(const RiskVector& risks, const TailSpec& spec);

/// Smallest retained risk: the Monte Carlo VaR estimate.
double empirical_var(const RiskVector& risks, const TailSpec& spec);

/// Mean of the retained risks: the Monte Carlo CVaR estimate.
double empirical_cvar(const RiskVector& risks, const TailSpec& spec);

}  // namespace ricl
