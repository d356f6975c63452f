// SPDX-License-Identifier: Apache-2.0

#include "ricl/sysgen.hpp"

#include <cmath>
#include <numeric>

namespace ricl {
namespace {

constexpr int kMaxLtiOrder = 64;
constexpr int kDcGainAttempts = 100;
// |dc gain| must be at least this fraction of the impulse response l1 norm;
// otherwise unit-DC normalization would blow up the other frequencies.
constexpr double kMinDcFraction = 0.05;
constexpr int kImpulseHorizon = 1000;
constexpr int kCalibrationAttempts = 10;
constexpr double kMinOutputStd = 1e-8;

double draw_open(Rng& rng, Interval iv) {
    std::uniform_real_distribution<double> dist(iv.lo, iv.hi);
    for (;;) {
        const double v = dist(rng);
        if (v > iv.lo && v < iv.hi) {
            return v;
        }
    }
}

void validate_lti_ranges(IntRange order, Interval mag, Interval phase) {
    if (order.lo < 1 || order.hi < order.lo || order.hi > kMaxLtiOrder) {
        throw ConfigError("order_range must satisfy 1 <= lo <= hi <= 64");
    }
    if (!(mag.lo >= 0.0 && mag.lo < mag.hi && mag.hi < 1.0)) {
        throw ConfigError("pole_mag_range must satisfy 0 <= lo < hi < 1");
    }
    if (!(phase.lo >= 0.0 && phase.lo < phase.hi && phase.hi <= std::numbers::pi)) {
        throw ConfigError("pole_phase_range must satisfy 0 <= lo < hi <= pi");
    }
}

double impulse_l1(const LtiSystem& sys) {
    std::vector<double> impulse(kImpulseHorizon, 0.0);
    impulse[0] = 1.0;
    const auto h = simulate_lti(sys, impulse);
    double s = 0.0;
    for (double v : h) {
        s += std::abs(v);
    }
    return s;
}

std::pair<double, double> mean_and_std(std::span<const double> x) {
    const double n = static_cast<double>(x.size());
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : x) {
        ss += (v - mean) * (v - mean);
    }
    return {mean, std::sqrt(ss / n)};
}

Interval read_interval(StrictObject& obj, const std::string& key, Interval def) {
    if (!obj.has(key)) {
        return def;
    }
    const json& v = obj.raw(key);
    if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
        throw ConfigError(obj.child(key) + ": expected an array of two numbers [lo, hi]");
    }
    return Interval{v[0].get<double>(), v[1].get<double>()};
}

IntRange read_int_range(StrictObject& obj, const std::string& key, IntRange def) {
    if (!obj.has(key)) {
        return def;
    }
    const json& v = obj.raw(key);
    if (!v.is_array() || v.size() != 2 || !v[0].is_number_integer() || !v[1].is_number_integer()) {
        throw ConfigError(obj.child(key) + ": expected an array of two integers [lo, hi]");
    }
    return IntRange{v[0].get<int>(), v[1].get<int>()};
}

}  // namespace

double LtiSystem::dc_gain() const {
    const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(order, order);
    const Eigen::VectorXd x = (eye - state_matrix).partialPivLu().solve(input_vector);
    return output_vector.dot(x) + feedthrough;
}

double StaticNonlinearity::operator()(double x) const {
    double y = output_bias;
    for (int j = 0; j < kHidden; ++j) {
        y += output_weights[j] * std::tanh(hidden_weights[j] * x + hidden_bias[j]);
    }
    return y;
}

std::string to_string(ExcitationKind kind) {
    switch (kind) {
        case ExcitationKind::white_noise:
            return "white_noise";
        case ExcitationKind::rbs:
            return "rbs";
        case ExcitationKind::multisine:
            return "multisine";
    }
    return "white_noise";
}

ExcitationKind excitation_from_string(const std::string& name) {
    if (name == "white_noise" || name == "wn") {
        return ExcitationKind::white_noise;
    }
    if (name == "rbs") {
        return ExcitationKind::rbs;
    }
    if (name == "multisine") {
        return ExcitationKind::multisine;
    }
    throw ConfigError("unknown excitation kind '" + name + "' (expected white_noise|rbs|multisine)");
}

void TaskStreamConfig::validate() const {
    if (context_len < 1) {
        throw ConfigError("context_len must be >= 1");
    }
    if (!(init_len > 0 && init_len < query_len)) {
        throw ConfigError("init_len must satisfy 0 < init_len < query_len");
    }
    validate_lti_ranges(order_range, pole_mag_range, pole_phase_range);
    if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) {
        throw ConfigError("noise_std must be a finite value >= 0");
    }
    if (washout < 0) {
        throw ConfigError("washout must be >= 0");
    }
    if (calibration_len < 2) {
        throw ConfigError("calibration_len must be >= 2");
    }
    if (!(excitation.rbs_switch_prob > 0.0 && excitation.rbs_switch_prob <= 1.0)) {
        throw ConfigError("excitation.rbs_switch_prob must lie in (0, 1]");
    }
    if (excitation.n_harmonics < 1) {
        throw ConfigError("excitation.n_harmonics must be >= 1");
    }
    if (!(excitation.multisine_max_freq > 0.0 && excitation.multisine_max_freq < std::numbers::pi)) {
        throw ConfigError("excitation.multisine_max_freq must lie in (0, pi)");
    }
}

json to_json(const TaskStreamConfig& cfg, bool include_seed) {
    json j;
    if (include_seed) {
        j["seed"] = cfg.seed;
    }
    j["context_len"] = cfg.context_len;
    j["query_len"] = cfg.query_len;
    j["init_len"] = cfg.init_len;
    j["order_range"] = {cfg.order_range.lo, cfg.order_range.hi};
    j["pole_mag_range"] = {cfg.pole_mag_range.lo, cfg.pole_mag_range.hi};
    j["pole_phase_range"] = {cfg.pole_phase_range.lo, cfg.pole_phase_range.hi};
    j["noise_std"] = cfg.noise_std;
    j["washout"] = cfg.washout;
    j["calibration_len"] = cfg.calibration_len;
    j["excitation"] = {
        {"kind", to_string(cfg.excitation.kind)},
        {"rbs_switch_prob", cfg.excitation.rbs_switch_prob},
        {"n_harmonics", cfg.excitation.n_harmonics},
        {"multisine_max_freq", cfg.excitation.multisine_max_freq},
    };
    return j;
}

void read_stream_config(StrictObject& obj, TaskStreamConfig& cfg, bool allow_seed) {
    if (allow_seed) {
        obj.get("seed", cfg.seed);
    } else if (obj.has("seed")) {
        throw ConfigError(obj.child("seed") + ": the stream seed is derived from the top-level seed");
    }
    obj.get("context_len", cfg.context_len);
    obj.get("query_len", cfg.query_len);
    obj.get("init_len", cfg.init_len);
    cfg.order_range = read_int_range(obj, "order_range", cfg.order_range);
    cfg.pole_mag_range = read_interval(obj, "pole_mag_range", cfg.pole_mag_range);
    cfg.pole_phase_range = read_interval(obj, "pole_phase_range", cfg.pole_phase_range);
    obj.get("noise_std", cfg.noise_std);
    obj.get("washout", cfg.washout);
    obj.get("calibration_len", cfg.calibration_len);
    if (obj.has("excitation")) {
        StrictObject ex = obj.object("excitation");
        std::string kind = to_string(cfg.excitation.kind);
        ex.get("kind", kind);
        cfg.excitation.kind = excitation_from_string(kind);
        ex.get("rbs_switch_prob", cfg.excitation.rbs_switch_prob);
        ex.get("n_harmonics", cfg.excitation.n_harmonics);
        ex.get("multisine_max_freq", cfg.excitation.multisine_max_freq);
        ex.finish();
    }
    obj.finish();
    cfg.validate();
}

TaskStreamConfig stream_config_from_json(const json& j, const std::string& path, bool allow_seed) {
    TaskStreamConfig cfg;
    StrictObject obj(j, path);
    read_stream_config(obj, cfg, allow_seed);
    return cfg;
}

LtiSystem sample_lti(Rng& rng, IntRange order_range, Interval mag_range, Interval phase_range) {
    validate_lti_ranges(order_range, mag_range, phase_range);
    std::uniform_int_distribution<int> order_dist(order_range.lo, order_range.hi);
    std::normal_distribution<double> normal(0.0, 1.0);

    LtiSystem sys;
    sys.order = order_dist(rng);
    const int n = sys.order;
    sys.state_matrix = Eigen::MatrixXd::Zero(n, n);
    int k = 0;
    for (; k + 1 < n; k += 2) {
        const double r = draw_open(rng, mag_range);
        const double theta = draw_open(rng, phase_range);
        const double re = r * std::cos(theta);
        const double im = r * std::sin(theta);
        sys.state_matrix(k, k) = re;
        sys.state_matrix(k, k + 1) = im;
        sys.state_matrix(k + 1, k) = -im;
        sys.state_matrix(k + 1, k + 1) = re;
    }
    if (k < n) {
        sys.state_matrix(k, k) = draw_open(rng, mag_range);
    }

    sys.feedthrough = 0.0;
    sys.input_vector.resize(n);
    sys.output_vector.resize(n);
    for (int attempt = 0; attempt < kDcGainAttempts; ++attempt) {
        for (int i = 0; i < n; ++i) {
            sys.input_vector(i) = normal(rng);
        }
        for (int i = 0; i < n; ++i) {
            sys.output_vector(i) = normal(rng);
        }
        const double dc = sys.dc_gain();
        if (std::abs(dc) >= kMinDcFraction * impulse_l1(sys) || attempt + 1 == kDcGainAttempts) {
            sys.output_vector /= dc;
            break;
        }
    }
    return sys;
}

std::vector<double> simulate_lti(const LtiSystem& sys, std::span<const double> input,
                                 std::optional<Eigen::VectorXd> initial_state) {
    const int n = sys.order;
    if (sys.state_matrix.rows() != n || sys.state_matrix.cols() != n || sys.input_vector.size() != n ||
        sys.output_vector.size() != n) {
        throw ArgumentError("simulate_lti: system matrices do not match the declared order");
    }
    Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
    if (initial_state) {
        if (initial_state->size() != n) {
            throw ArgumentError("simulate_lti: initial state has dimension " +
                                std::to_string(initial_state->size()) + ", expected " + std::to_string(n));
        }
        x = *initial_state;
    }
    Eigen::VectorXd next(n);
    std::vector<double> y(input.size());
    for (std::size_t k = 0; k < input.size(); ++k) {
        y[k] = sys.output_vector.dot(x) + sys.feedthrough * input[k];
        next.noalias() = sys.state_matrix * x;
        next += sys.input_vector * input[k];
        x.swap(next);
    }
    return y;
}

StaticNonlinearity sample_nonlinearity(Rng& rng) {
    StaticNonlinearity f;
    // Kaiming-normal: std = sqrt(2 / fan_in).
    std::normal_distribution<double> hidden(0.0, std::sqrt(2.0 / 1.0));
    std::normal_distribution<double> output(0.0, std::sqrt(2.0 / StaticNonlinearity::kHidden));
    for (auto& w : f.hidden_weights) {
        w = hidden(rng);
    }
    for (auto& w : f.output_weights) {
        w = output(rng);
    }
    return f;
}

std::vector<double> simulate_wh_raw(const WhSystem& sys, std::span<const double> input) {
    std::vector<double> v = simulate_lti(sys.g1, input);
    for (double& x : v) {
        x = sys.f(x);
    }
    return simulate_lti(sys.g2, v);
}

std::vector<double> simulate_wh(const WhSystem& sys, std::span<const double> input) {
    std::vector<double> y = simulate_wh_raw(sys, input);
    for (double& v : y) {
        v = (v - sys.out_mean) / sys.out_std;
    }
    return y;
}

std::vector<double> calibration_input(const WhSystem& sys, const TaskStreamConfig& config) {
    Rng rng(sys.calibration_seed);
    ExcitationSpec spec;
    spec.kind = ExcitationKind::white_noise;
    spec.length = config.washout + config.calibration_len;
    return gen_signal(rng, spec);
}

WhSystem sample_wh_system(Rng& rng, const TaskStreamConfig& config) {
    config.validate();
    for (int attempt = 0; attempt < kCalibrationAttempts; ++attempt) {
        WhSystem sys;
        sys.g1 = sample_lti(rng, config.order_range, config.pole_mag_range, config.pole_phase_range);
        sys.f = sample_nonlinearity(rng);
        sys.g2 = sample_lti(rng, config.order_range, config.pole_mag_range, config.pole_phase_range);
        sys.calibration_seed = rng();

        const auto u = calibration_input(sys, config);
        const auto raw = simulate_wh_raw(sys, u);
        const auto kept = std::span<const double>(raw).subspan(static_cast<std::size_t>(config.washout));
        const auto [mean, sd] = mean_and_std(kept);
        if (std::isfinite(mean) && std::isfinite(sd) && sd >= kMinOutputStd) {
            sys.out_mean = mean;
            sys.out_std = sd;
            return sys;
        }
    }
    throw NumericError("sample_wh_system: degenerate calibration output after 10 attempts");
}

std::vector<double> gen_signal(Rng& rng, const ExcitationSpec& spec) {
    if (spec.length < 0) {
        throw ArgumentError("gen_signal: negative length");
    }
    const auto len = static_cast<std::size_t>(spec.length);
    std::vector<double> x(len);
    switch (spec.kind) {
        case ExcitationKind::white_noise: {
            std::normal_distribution<double> normal(0.0, 1.0);
            for (auto& v : x) {
                v = normal(rng);
            }
            break;
        }
        case ExcitationKind::rbs: {
            std::bernoulli_distribution flip(spec.rbs_switch_prob);
            std::bernoulli_distribution start(0.5);
            double level = start(rng) ? 1.0 : -1.0;
            for (std::size_t k = 0; k < len; ++k) {
                if (k > 0 && flip(rng)) {
                    level = -level;
                }
                x[k] = level;
            }
            break;
        }
        case ExcitationKind::multisine: {
            std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
            const double step = spec.multisine_max_freq / spec.n_harmonics;
            std::vector<double> phases(static_cast<std::size_t>(spec.n_harmonics));
            for (auto& p : phases) {
                p = phase(rng);
            }
            for (std::size_t k = 0; k < len; ++k) {
                double s = 0.0;
                for (int h = 0; h < spec.n_harmonics; ++h) {
                    s += std::cos(step * (h + 1) * static_cast<double>(k) + phases[h]);
                }
                x[k] = s;
            }
            if (len > 1) {
                const auto [mean, sd] = mean_and_std(x);
                (void)mean;
                if (sd > 0.0) {
                    for (auto& v : x) {
                        v /= sd;
                    }
                }
            }
            break;
        }
    }
    return x;
}

SampledTask sample_task_with_system(Rng& rng, const TaskStreamConfig& config) {
    SampledTask out;
    out.system = sample_wh_system(rng, config);

    ExcitationSpec ctx_spec = config.excitation;
    ctx_spec.length = config.washout + config.context_len;
    ExcitationSpec qry_spec = config.excitation;
    qry_spec.length = config.washout + config.query_len;
    const auto ctx_u = gen_signal(rng, ctx_spec);
    const auto qry_u = gen_signal(rng, qry_spec);
    const auto ctx_y = simulate_wh(out.system, ctx_u);
    const auto qry_y = simulate_wh(out.system, qry_u);

    const auto w = static_cast<std::ptrdiff_t>(config.washout);
    TaskDataset& t = out.task;
    t.context_u.assign(ctx_u.begin() + w, ctx_u.end());
    t.context_y.assign(ctx_y.begin() + w, ctx_y.end());
    t.query_u.assign(qry_u.begin() + w, qry_u.end());
    t.query_y.assign(qry_y.begin() + w, qry_y.end());
    t.init_len = config.init_len;

    // Noise draws happen unconditionally so that noise_std = 0 regenerates the
    // same system and inputs.
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& v : t.context_y) {
        v += config.noise_std * normal(rng);
    }
    for (auto& v : t.query_y) {
        v += config.noise_std * normal(rng);
    }
    return out;
}

TaskDataset sample_task(Rng& rng, const TaskStreamConfig& config) {
    return sample_task_with_system(rng, config).task;
}

TaskStream::TaskStream(TaskStreamConfig config, std::uint64_t start_index)
    : config_(std::move(config)), next_(start_index) {
    config_.validate();
}

SampledTask TaskStream::sampled_at(std::uint64_t index) const {
    Rng rng(derive_seed(config_.seed, index));
    return sample_task_with_system(rng, config_);
}

TaskDataset TaskStream::at(std::uint64_t index) const {
    return sampled_at(index).task;
}

TaskDataset TaskStream::next() {
    return at(next_++);
}

std::vector<TaskDataset> TaskStream::batch(std::uint64_t first, std::size_t count, int threads) const {
    std::vector<TaskDataset> out(count);
    parallel_for(count, threads, [&](std::size_t i) { out[i] = at(first + i); });
    return out;
}

TaskStream task_stream(const TaskStreamConfig& config) {
    return TaskStream(config);
}

}  // namespace ricl
