// SPDX-License-Identifier: Apache-2.0
//
// Standard (batch mean) and robust (tail mean) meta-training with AdamW, the
// two-stage standard -> robust schedule, validation and JSONL logs.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ricl/json_util.hpp"
#include "ricl/metamodel.hpp"
#include "ricl/risk.hpp"
#include "ricl/sysgen.hpp"

namespace ricl {

enum class TrainMode { standard, robust };

std::string to_string(TrainMode mode);
TrainMode train_mode_from_string(const std::string& name);

struct TrainConfig {
    TrainMode mode = TrainMode::robust;
    /// Tasks per standard step.
    int batch_size = 32;
    /// Tasks drawn per robust step; floor(tail_fraction * robust_batch_size) enter the gradient.
    int robust_batch_size = 80;
    double tail_fraction = 0.4;
    double learning_rate = 1e-4;
    double weight_decay = 1e-2;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::int64_t max_iter = 10000;
    std::int64_t stage1_iters = 5000;
    std::uint64_t seed = 0;
    /// 0 disables validation.
    std::int64_t validation_every = 2000;
    int validation_tasks = 256;
    /// 0 disables periodic checkpoints (the final one is always written).
    std::int64_t checkpoint_every = 1000;
    RiskKind risk = RiskKind::kl;

    void validate() const;
};

json to_json(const TrainConfig& cfg, bool include_seed = true);
void read_train_config(StrictObject& obj, TrainConfig& cfg, bool allow_seed);

template <typename T>
struct OptimizerState {
    std::vector<T> first_moment;
    std::vector<T> second_moment;
    std::int64_t step_count = 0;

    static OptimizerState zeros(std::size_t n) { return {std::vector<T>(n, T(0)), std::vector<T>(n, T(0)), 0}; }
};

struct AdamWSettings {
    double learning_rate = 1e-4;
    double weight_decay = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    static AdamWSettings from(const TrainConfig& cfg);
};

/// p <- p (1 - lr wd); p <- p - lr m_hat / (sqrt(v_hat) + eps).
/// Throws NumericError (leaving everything untouched) on a non-finite gradient.
template <typename T>
void adamw_update(std::span<T> params, std::span<const T> grads, OptimizerState<T>& state, const AdamWSettings& hp);

struct IterationRecord {
    std::int64_t iteration = 0;
    std::string stage;  // "standard" | "robust"
    int batch_size = 0;
    int n_selected = 0;
    double batch_mean_risk = 0.0;
    double tail_mean_risk = 0.0;
    /// Smallest selected risk. For standard steps this is the batch minimum.
    double var_estimate = 0.0;
    double grad_norm = 0.0;
    double wall_seconds = 0.0;
};

struct ValidationRecord {
    std::int64_t iteration = 0;
    double mean_rmse = 0.0;
    double tail_rmse = 0.0;
};

/// Append-only; iterations must strictly increase within each record kind.
class TrainLog {
public:
    void append(const IterationRecord& r);
    void append(const ValidationRecord& r);

    const std::vector<IterationRecord>& iterations() const { return iterations_; }
    const std::vector<ValidationRecord>& validations() const { return validations_; }

    /// One JSON object per line, in the order records were appended. Wall
    /// clock is excluded so that the text is a deterministic function of the run.
    std::string to_jsonl() const;
    /// Wall-clock times, one {"iteration", "wall_seconds"} object per line.
    std::string timing_jsonl() const;
    static TrainLog from_jsonl(const std::string& text);

    /// Drops records after `iteration` (used when resuming).
    void truncate(std::int64_t iteration);

private:
    std::vector<IterationRecord> iterations_;
    std::vector<ValidationRecord> validations_;
    std::vector<std::pair<char, std::size_t>> order_;
};

json to_json(const IterationRecord& r);
json to_json(const ValidationRecord& r);

struct TrainState {
    ModelParams<float> params;
    OptimizerState<float> optimizer;
    std::int64_t iteration = 0;
    /// Index of the next task to draw from the training stream.
    std::uint64_t tasks_consumed = 0;
    /// Content hash chaining every checkpoint this state descends from.
    std::string lineage;
};

TrainState initial_state(const ModelConfig& model_config, const TrainConfig& config);

/// Draws batch_size tasks, one AdamW step on the batch mean risk.
IterationRecord standard_step(TrainState& state, const TaskSource& source, const TrainConfig& config,
                              const RiskFn& risk, int threads = 1);

/// Draws robust_batch_size tasks, ranks them by a forward-only risk pass, and
/// takes one AdamW step on the mean risk of the floor(q b) riskiest.
IterationRecord robust_step(TrainState& state, const TaskSource& source, const TrainConfig& config,
                            const RiskFn& risk, int threads = 1);

struct TrainOptions {
    /// Checkpoints and logs go here; empty means nothing is written.
    std::filesystem::path out_dir;
    std::optional<std::filesystem::path> resume_from;
    int threads = 1;
    /// Stop after this iteration as if interrupted (final checkpoint still written).
    std::optional<std::int64_t> stop_after;
    std::function<void(const IterationRecord&)> on_iteration;
    std::function<void(const ValidationRecord&)> on_validation;
};

struct TrainResult {
    TrainState state;
    TrainLog log;
    std::filesystem::path final_checkpoint;
};

/// Raised when training hits a non-finite value; the last finite state has
/// been written to `checkpoint()` (empty when there is no output directory).
class DivergenceError : public NumericError {
public:
    DivergenceError(const std::string& what, std::filesystem::path checkpoint)
        : NumericError(what), checkpoint_(std::move(checkpoint)) {}
    const std::filesystem::path& checkpoint() const { return checkpoint_; }

private:
    std::filesystem::path checkpoint_;
};

/// Two-stage schedule: iterations 1..stage1_iters are standard steps, the
/// rest follow `config.mode`. The training stream is `stream_config` as given
/// (including its seed); validation tasks come from a stream seeded with
/// derive_seed(config.seed, "validation").
TrainResult run_training(const TrainConfig& config, const ModelConfig& model_config,
                         const TaskStreamConfig& stream_config, const TrainOptions& options = {});

/// Writes params plus optimizer state; returns the checkpoint checksum.
std::string save_train_state(const TrainState& state, const std::filesystem::path& path, const json& extra = {});
TrainState load_train_state(const std::filesystem::path& path);

inline constexpr const char* kTrainLogFile = "train_log.jsonl";
inline constexpr const char* kTimingLogFile = "timing.jsonl";
inline constexpr const char* kFinalCheckpoint = "final.ckpt";
inline constexpr const char* kLastCheckpoint = "last.ckpt";
inline constexpr const char* kLastFiniteCheckpoint = "last_finite.ckpt";

/// Writes `text` to `path` through a temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace ricl
