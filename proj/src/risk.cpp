// SPDX-License-Identifier: Apache-2.0

#include "ricl/risk.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace ricl {
namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * log(2 pi)

void check_lengths(std::span<const double> target, const PredictiveOutput& pred, const char* who) {
    if (target.size() != pred.mu.size() || pred.sigma.size() != pred.mu.size()) {
        throw ArgumentError(std::string(who) + ": target and prediction lengths differ");
    }
    if (target.empty()) {
        throw ArgumentError(std::string(who) + ": empty horizon");
    }
}

}  // namespace

std::string to_string(RiskKind kind) {
    return kind == RiskKind::kl ? "kl" : "rmse";
}

RiskKind risk_from_string(const std::string& name) {
    if (name == "kl") {
        return RiskKind::kl;
    }
    if (name == "rmse") {
        return RiskKind::rmse;
    }
    throw ConfigError("unknown risk '" + name + "' (expected kl|rmse)");
}

RiskEvaluation gaussian_nll_risk_grad(std::span<const double> target, const PredictiveOutput& pred) {
    check_lengths(target, pred, "gaussian_nll_risk");
    const std::size_t h = target.size();
    const double inv_h = 1.0 / static_cast<double>(h);
    RiskEvaluation r;
    r.d_mu.resize(h);
    r.d_sigma.resize(h);
    double total = 0.0;
    for (std::size_t k = 0; k < h; ++k) {
        const double s = pred.sigma[k];
        if (!(s > 0.0)) {
            throw ArgumentError("gaussian_nll_risk: sigma must be strictly positive");
        }
        const double z = (target[k] - pred.mu[k]) / s;
        total += std::log(s) + kHalfLog2Pi + 0.5 * z * z;
        r.d_mu[k] = -z / s * inv_h;
        r.d_sigma[k] = (1.0 - z * z) / s * inv_h;
    }
    r.value = total * inv_h;
    return r;
}

double gaussian_nll_risk(std::span<const double> target, const PredictiveOutput& pred) {
    return gaussian_nll_risk_grad(target, pred).value;
}

double rmse(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.empty()) {
        throw ArgumentError("rmse: sequences must be nonempty and of equal length");
    }
    double ss = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        const double e = a[k] - b[k];
        ss += e * e;
    }
    return std::sqrt(ss / static_cast<double>(a.size()));
}

RiskEvaluation rmse_risk_grad(std::span<const double> target, const PredictiveOutput& pred) {
    check_lengths(target, pred, "rmse_risk");
    const std::size_t h = target.size();
    RiskEvaluation r;
    r.value = rmse(target, pred.mu);
    r.d_mu.assign(h, 0.0);
    r.d_sigma.assign(h, 0.0);
    if (r.value > 0.0) {
        const double scale = 1.0 / (static_cast<double>(h) * r.value);
        for (std::size_t k = 0; k < h; ++k) {
            r.d_mu[k] = -(target[k] - pred.mu[k]) * scale;
        }
    }
    return r;
}

double rmse_risk(std::span<const double> target, const PredictiveOutput& pred) {
    check_lengths(target, pred, "rmse_risk");
    return rmse(target, pred.mu);
}

RiskFn make_risk(RiskKind kind) {
    if (kind == RiskKind::kl) {
        return gaussian_nll_risk_grad;
    }
    return rmse_risk_grad;
}

RiskVector RiskVector::from_values(std::vector<double> values) {
    RiskVector r;
    r.task_ids.resize(values.size());
    std::iota(r.task_ids.begin(), r.task_ids.end(), std::int64_t{0});
    r.values = std::move(values);
    return r;
}

std::size_t tail_count(double tail_fraction, std::size_t batch_size) {
    if (!(tail_fraction > 0.0 && tail_fraction <= 1.0)) {
        return 0;
    }
    const double raw = tail_fraction * static_cast<double>(batch_size);
    return std::min(batch_size, static_cast<std::size_t>(std::floor(raw + 1e-9)));
}

std::vector<std::size_t> select_top(const RiskVector& risks, std::size_t count) {
    if (risks.values.size() != risks.task_ids.size()) {
        throw ArgumentError("RiskVector: values and task_ids differ in length");
    }
    for (double v : risks.values) {
        if (!std::isfinite(v)) {
            throw NumericError("RiskVector: non-finite risk");
        }
    }
    count = std::min(count, risks.values.size());
    std::vector<std::size_t> idx(risks.values.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const auto before = [&](std::size_t a, std::size_t b) {
        if (risks.values[a] != risks.values[b]) {
            return risks.values[a] > risks.values[b];
        }
        if (risks.task_ids[a] != risks.task_ids[b]) {
            return risks.task_ids[a] < risks.task_ids[b];
        }
        return a < b;
    };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count), idx.end(), before);
    idx.resize(count);
    return idx;
}

std::vector<std::size_t> select_tail(const RiskVector& risks, const TailSpec& spec) {
    if (risks.values.empty()) {
        throw ArgumentError("select_tail: empty risk vector");
    }
    const std::size_t k = tail_count(spec.tail_fraction, risks.values.size());
    if (k == 0) {
        throw ConfigError("tail_fraction " + std::to_string(spec.tail_fraction) + " retains no task out of " +
                          std::to_string(risks.values.size()));
    }
    return select_top(risks, k);
}

double empirical_var(const RiskVector& risks, const TailSpec& spec) {
    const auto idx = select_tail(risks, spec);
    return risks.values[idx.back()];
}

double empirical_cvar(const RiskVector& risks, const TailSpec& spec) {
    const auto idx = select_tail(risks, spec);
    double s = 0.0;
    for (std::size_t i : idx) {
        s += risks.values[i];
    }
    return s / static_cast<double>(idx.size());
}

}  // namespace ricl
