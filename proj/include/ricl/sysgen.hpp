// SPDX-License-Identifier: Apache-2.0
//
// Random Wiener-Hammerstein system class, excitation signals and the
// context/query task stream.
//
// Every task is a pure function of (stream seed, task index): the stream can
// be entered at any index and disjoint index ranges can be generated on
// independent workers with identical results.

#pragma once

#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ricl/common.hpp"
#include "ricl/json_util.hpp"

namespace ricl {

struct IntRange {
    int lo = 1;
    int hi = 10;
};

/// Open interval (lo, hi) for continuous draws.
struct Interval {
    double lo = 0.0;
    double hi = 1.0;
};

/// Discrete-time state-space model x+ = A x + B u, y = C x + D u.
struct LtiSystem {
    int order = 0;
    Eigen::MatrixXd state_matrix;
    Eigen::VectorXd input_vector;
    Eigen::RowVectorXd output_vector;
    double feedthrough = 0.0;

    /// C (I - A)^-1 B + D
    double dc_gain() const;
};

/// One-hidden-layer tanh network R -> R.
struct StaticNonlinearity {
    static constexpr int kHidden = 32;
    std::vector<double> hidden_weights = std::vector<double>(kHidden, 0.0);
    std::vector<double> hidden_bias = std::vector<double>(kHidden, 0.0);
    std::vector<double> output_weights = std::vector<double>(kHidden, 0.0);
    double output_bias = 0.0;

    double operator()(double x) const;
};

/// Cascade u -> g1 -> f -> g2 -> (raw - out_mean) / out_std.
struct WhSystem {
    LtiSystem g1;
    LtiSystem g2;
    StaticNonlinearity f;
    double out_mean = 0.0;
    double out_std = 1.0;
    /// Seed of the white-noise calibration input that produced out_mean/out_std.
    std::uint64_t calibration_seed = 0;
};

enum class ExcitationKind { white_noise, rbs, multisine };

std::string to_string(ExcitationKind kind);
ExcitationKind excitation_from_string(const std::string& name);

struct ExcitationSpec {
    ExcitationKind kind = ExcitationKind::white_noise;
    int length = 0;
    double rbs_switch_prob = 0.1;
    int n_harmonics = 20;
    /// Highest multisine frequency in rad/sample; harmonics are k * max / n.
    double multisine_max_freq = std::numbers::pi / 2.0;
};

struct TaskDataset {
    std::vector<double> context_u;
    std::vector<double> context_y;
    std::vector<double> query_u;
    std::vector<double> query_y;
    int init_len = 0;

    int context_len() const { return static_cast<int>(context_u.size()); }
    int query_len() const { return static_cast<int>(query_u.size()); }
    int horizon() const { return query_len() - init_len; }
    /// query_y[c..n): the values a predictor is scored against.
    std::span<const double> target() const {
        return std::span<const double>(query_y).subspan(static_cast<std::size_t>(init_len));
    }
};

struct TaskStreamConfig {
    std::uint64_t seed = 0;
    int context_len = 400;
    int query_len = 130;
    int init_len = 30;
    IntRange order_range{1, 10};
    Interval pole_mag_range{0.5, 0.97};
    Interval pole_phase_range{0.0, std::numbers::pi / 2.0};
    double noise_std = 0.01;
    ExcitationSpec excitation{};
    int washout = 200;
    int calibration_len = 2000;

    /// Throws ConfigError on an invalid field or combination.
    void validate() const;
};

/// Serializes every field; `include_seed=false` omits the seed (used when the
/// seed is derived from a master seed elsewhere).
json to_json(const TaskStreamConfig& cfg, bool include_seed = true);
/// Strict parse over defaults; unknown keys are rejected.
TaskStreamConfig stream_config_from_json(const json& j, const std::string& path = "",
                                         bool allow_seed = true);
void read_stream_config(StrictObject& obj, TaskStreamConfig& cfg, bool allow_seed);

LtiSystem sample_lti(Rng& rng, IntRange order_range, Interval mag_range, Interval phase_range);

/// y_k = C x_k + D u_k, then x_{k+1} = A x_k + B u_k.
std::vector<double> simulate_lti(const LtiSystem& sys, std::span<const double> input,
                                 std::optional<Eigen::VectorXd> initial_state = std::nullopt);

StaticNonlinearity sample_nonlinearity(Rng& rng);

WhSystem sample_wh_system(Rng& rng, const TaskStreamConfig& config);

/// Unstandardized cascade output from zero state.
std::vector<double> simulate_wh_raw(const WhSystem& sys, std::span<const double> input);

/// Standardized, noiseless cascade output from zero state.
std::vector<double> simulate_wh(const WhSystem& sys, std::span<const double> input);

/// Regenerates the white-noise input (washout included) used to calibrate `sys`.
std::vector<double> calibration_input(const WhSystem& sys, const TaskStreamConfig& config);

std::vector<double> gen_signal(Rng& rng, const ExcitationSpec& spec);

TaskDataset sample_task(Rng& rng, const TaskStreamConfig& config);

/// Task realization together with the system that produced it.
struct SampledTask {
    WhSystem system;
    TaskDataset task;
};

SampledTask sample_task_with_system(Rng& rng, const TaskStreamConfig& config);

/// Anything that yields tasks by absolute index ranges.
class TaskSource {
public:
    virtual ~TaskSource() = default;
    virtual std::vector<TaskDataset> batch(std::uint64_t first, std::size_t count, int threads = 1) const = 0;
};

class TaskStream : public TaskSource {
public:
    explicit TaskStream(TaskStreamConfig config, std::uint64_t start_index = 0);

    const TaskStreamConfig& config() const { return config_; }
    std::uint64_t position() const { return next_; }

    /// Task at an absolute index; independent of the stream position.
    TaskDataset at(std::uint64_t index) const;
    SampledTask sampled_at(std::uint64_t index) const;

    TaskDataset next();
    void skip(std::uint64_t count) { next_ += count; }

    /// Tasks [first, first + count), generated on up to `threads` workers.
    std::vector<TaskDataset> batch(std::uint64_t first, std::size_t count, int threads = 1) const override;

private:
    TaskStreamConfig config_;
    std::uint64_t next_;
};

TaskStream task_stream(const TaskStreamConfig& config);

}  // namespace ricl
