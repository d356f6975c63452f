// SPDX-License-Identifier: Apache-2.0
//
// Encoder-decoder Transformer meta model. The encoder reads the context
// (u, y) pairs; the decoder reads the c initial-condition (u, y) pairs followed
// by the remaining query inputs, attends causally to itself and fully to the
// encoder memory, and emits a Gaussian (mu, sigma) per predicted step.
//
// Parameters live in one flat array described by a ModelLayout. The reverse
// pass is hand-written per layer; it is exact, and checked against finite
// differences in the test suite.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ricl/common.hpp"
#include "ricl/json_util.hpp"
#include "ricl/sysgen.hpp"

namespace ricl {

struct ModelConfig {
    int d_model = 64;
    int n_heads = 4;
    int n_encoder_layers = 3;
    int n_decoder_layers = 3;
    int d_ff = 128;
    int max_context_len = 512;
    int max_query_len = 256;
    double layernorm_epsilon = 1e-5;
    std::string positional_encoding = "sinusoidal";

    void validate() const;

    /// Reference configuration at roughly 5.5M parameters.
    static ModelConfig full_scale();

    bool operator==(const ModelConfig&) const = default;
};

json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const json& j, const std::string& path = "");
void read_model_config(StrictObject& obj, ModelConfig& cfg);

/// Closed-form parameter count of the architecture.
std::int64_t param_count(const ModelConfig& cfg);

enum class InitKind { fan_in_normal, small_fan_in_normal, zeros, ones };

struct ArrayInfo {
    std::string name;
    std::vector<std::int64_t> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
    InitKind init = InitKind::zeros;
};

struct LinearSlot {
    std::size_t weight = 0;  // [in, out], row-major
    std::size_t bias = 0;    // [out]
    int in = 0;
    int out = 0;
};

struct NormSlot {
    std::size_t gain = 0;
    std::size_t bias = 0;
    int dim = 0;
};

struct AttentionSlots {
    LinearSlot query, key, value, output;
};

struct EncoderLayerSlots {
    NormSlot norm1;
    AttentionSlots attn;
    NormSlot norm2;
    LinearSlot ff1, ff2;
};

struct DecoderLayerSlots {
    NormSlot norm1;
    AttentionSlots self_attn;
    NormSlot norm2;
    AttentionSlots cross_attn;
    NormSlot norm3;
    LinearSlot ff1, ff2;
};

class ModelLayout {
public:
    explicit ModelLayout(const ModelConfig& cfg);

    const ModelConfig& config() const { return config_; }
    const std::vector<ArrayInfo>& arrays() const { return arrays_; }
    std::size_t total() const { return total_; }
    const ArrayInfo* find(std::string_view name) const;

    LinearSlot encoder_embed;
    std::vector<EncoderLayerSlots> encoder;
    NormSlot encoder_norm;
    LinearSlot decoder_init_embed;   // (u, y) initial-condition pairs
    LinearSlot decoder_query_embed;  // query inputs u
    std::vector<DecoderLayerSlots> decoder;
    NormSlot decoder_norm;
    LinearSlot mu_head;
    LinearSlot log_std_head;

    /// Sinusoidal table, positional_rows x d_model, row-major.
    std::vector<double> positional;
    int positional_rows = 0;

private:
    LinearSlot add_linear(const std::string& name, int in, int out, InitKind init);
    NormSlot add_norm(const std::string& name, int dim);
    AttentionSlots add_attention(const std::string& name, int dim);
    std::size_t add_array(const std::string& name, std::vector<std::int64_t> shape, InitKind init);

    ModelConfig config_;
    std::vector<ArrayInfo> arrays_;
    std::size_t total_ = 0;
};

/// Flat parameter vector phi together with its layout.
template <typename T>
struct ModelParams {
    ModelConfig config;
    std::shared_ptr<const ModelLayout> layout;
    AlignedVector<T> values;

    std::size_t size() const { return values.size(); }
    std::span<T> array(std::string_view name);
    std::span<const T> array(std::string_view name) const;
};

/// Gradient w.r.t. a ModelParams; same layout, same shapes.
template <typename T>
struct GradientBundle {
    std::shared_ptr<const ModelLayout> layout;
    AlignedVector<T> values;

    std::span<const T> array(std::string_view name) const;
};

/// Builds a zero-valued parameter vector for `cfg`.
template <typename T>
ModelParams<T> zero_params(const ModelConfig& cfg);

template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, Rng& rng);

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& p) {
    ModelParams<To> out{p.config, p.layout, AlignedVector<To>(p.values.size())};
    for (std::size_t i = 0; i < p.values.size(); ++i) {
        out.values[i] = static_cast<To>(p.values[i]);
    }
    return out;
}

/// Predicted query distribution over steps c+1..n.
struct PredictiveOutput {
    std::vector<double> mu;
    std::vector<double> sigma;
};

/// The log-std head output is clamped to this range before exponentiation.
inline constexpr double kLogStdClamp = 10.0;

/// Per-task risk value with its partial derivatives w.r.t. mu and sigma.
struct RiskEvaluation {
    double value = 0.0;
    std::vector<double> d_mu;
    std::vector<double> d_sigma;
};

using RiskFn = std::function<RiskEvaluation(std::span<const double> target, const PredictiveOutput& pred)>;

/// Throws ArgumentError when the task does not fit the configured lengths.
void check_task_shape(const ModelConfig& cfg, const TaskDataset& task);

template <typename T>
PredictiveOutput forward(const ModelParams<T>& params, const TaskDataset& task);

template <typename T>
struct LossAndGrad {
    double loss = 0.0;
    std::vector<double> risks;  // per task, batch order
    GradientBundle<T> grad;
};

/// Mean risk over `batch` and its exact gradient. Tasks are processed in
/// waves of `threads`; per-task gradients are summed in batch order, so the
/// result does not depend on the thread count.
template <typename T>
LossAndGrad<T> loss_and_grad(const ModelParams<T>& params, std::span<const TaskDataset> batch,
                             const RiskFn& risk, int threads = 1);

/// Forward-only per-task risks (no gradient bookkeeping).
template <typename T>
std::vector<double> evaluate_risks(const ModelParams<T>& params, std::span<const TaskDataset> batch,
                                   const RiskFn& risk, int threads = 1);

/// Anything that maps a task's inputs to a predictive distribution.
class Predictor {
public:
    virtual ~Predictor() = default;
    virtual PredictiveOutput predict(const TaskDataset& task) const = 0;
};

template <typename T>
class ModelPredictor : public Predictor {
public:
    explicit ModelPredictor(const ModelParams<T>& params) : params_(params) {}
    PredictiveOutput predict(const TaskDataset& task) const override { return forward(params_, task); }

private:
    const ModelParams<T>& params_;
};

}  // namespace ricl
