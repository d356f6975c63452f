// SPDX-License-Identifier: Apache-2.0

#include "ricl/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ricl/checkpoint.hpp"
#include "ricl/eval.hpp"

namespace ricl {
namespace {

constexpr const char* kFirstMoment = "optimizer.first_moment";
constexpr const char* kSecondMoment = "optimizer.second_moment";

double grad_norm(std::span<const float> g) {
    double ss = 0.0;
    for (float v : g) {
        ss += static_cast<double>(v) * static_cast<double>(v);
    }
    return std::sqrt(ss);
}

std::string lineage_step(const std::string& parent, const std::string& checksum) {
    const std::string text = parent + "\n" + checksum;
    return sha256_hex({reinterpret_cast<const unsigned char*>(text.data()), text.size()});
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

}  // namespace

std::string to_string(TrainMode mode) {
    return mode == TrainMode::standard ? "standard" : "robust";
}

TrainMode train_mode_from_string(const std::string& name) {
    if (name == "standard") {
        return TrainMode::standard;
    }
    if (name == "robust") {
        return TrainMode::robust;
    }
    throw ConfigError("unknown training mode '" + name + "' (expected standard|robust)");
}

void TrainConfig::validate() const {
    const auto fail = [](const std::string& msg) { throw ConfigError("train." + msg); };
    if (batch_size < 1) {
        fail("batch_size must be >= 1");
    }
    if (robust_batch_size < 1) {
        fail("robust_batch_size must be >= 1");
    }
    if (!(tail_fraction > 0.0 && tail_fraction <= 1.0)) {
        fail("tail_fraction must lie in (0, 1]");
    }
    if (mode == TrainMode::robust && tail_count(tail_fraction, static_cast<std::size_t>(robust_batch_size)) < 1) {
        fail("tail_fraction * robust_batch_size rounds down to 0 tasks");
    }
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        fail("learning_rate must be > 0");
    }
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
        fail("weight_decay must be >= 0");
    }
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
        fail("adam betas must lie in [0, 1)");
    }
    if (!(adam_epsilon >= 0.0) || !std::isfinite(adam_epsilon)) {
        fail("adam_epsilon must be >= 0");
    }
    if (max_iter < 0) {
        fail("max_iter must be >= 0");
    }
    if (stage1_iters < 0 || stage1_iters > max_iter) {
        fail("stage1_iters must lie in [0, max_iter]");
    }
    if (validation_every < 0) {
        fail("validation_every must be >= 0");
    }
    if (validation_tasks < 1) {
        fail("validation_tasks must be >= 1");
    }
    if (checkpoint_every < 0) {
        fail("checkpoint_every must be >= 0");
    }
}

json to_json(const TrainConfig& cfg, bool include_seed) {
    json j{
        {"mode", to_string(cfg.mode)},
        {"batch_size", cfg.batch_size},
        {"robust_batch_size", cfg.robust_batch_size},
        {"tail_fraction", cfg.tail_fraction},
        {"learning_rate", cfg.learning_rate},
        {"weight_decay", cfg.weight_decay},
        {"adam_beta1", cfg.adam_beta1},
        {"adam_beta2", cfg.adam_beta2},
        {"adam_epsilon", cfg.adam_epsilon},
        {"max_iter", cfg.max_iter},
        {"stage1_iters", cfg.stage1_iters},
        {"validation_every", cfg.validation_every},
        {"validation_tasks", cfg.validation_tasks},
        {"checkpoint_every", cfg.checkpoint_every},
        {"risk", to_string(cfg.risk)},
    };
    if (include_seed) {
        j["seed"] = cfg.seed;
    }
    return j;
}

void read_train_config(StrictObject& obj, TrainConfig& cfg, bool allow_seed) {
    if (allow_seed) {
        obj.get("seed", cfg.seed);
    } else if (obj.has("seed")) {
        throw ConfigError(obj.child("seed") + ": the training seed is derived from the top-level seed");
    }
    std::string mode = to_string(cfg.mode);
    obj.get("mode", mode);
    cfg.mode = train_mode_from_string(mode);
    obj.get("batch_size", cfg.batch_size);
    obj.get("robust_batch_size", cfg.robust_batch_size);
    obj.get("tail_fraction", cfg.tail_fraction);
    obj.get("learning_rate", cfg.learning_rate);
    obj.get("weight_decay", cfg.weight_decay);
    obj.get("adam_beta1", cfg.adam_beta1);
    obj.get("adam_beta2", cfg.adam_beta2);
    obj.get("adam_epsilon", cfg.adam_epsilon);
    obj.get("max_iter", cfg.max_iter);
    obj.get("stage1_iters", cfg.stage1_iters);
    obj.get("validation_every", cfg.validation_every);
    obj.get("validation_tasks", cfg.validation_tasks);
    obj.get("checkpoint_every", cfg.checkpoint_every);
    std::string risk = to_string(cfg.risk);
    obj.get("risk", risk);
    cfg.risk = risk_from_string(risk);
    obj.finish();
    cfg.validate();
}

AdamWSettings AdamWSettings::from(const TrainConfig& cfg) {
    return {cfg.learning_rate, cfg.weight_decay, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon};
}

template <typename T>
void adamw_update(std::span<T> params, std::span<const T> grads, OptimizerState<T>& state, const AdamWSettings& hp) {
    if (grads.size() != params.size() || state.first_moment.size() != params.size() ||
        state.second_moment.size() != params.size()) {
        throw ArgumentError("adamw_update: parameter, gradient and moment sizes differ");
    }
    for (T g : grads) {
        if (!std::isfinite(g)) {
            throw NumericError("adamw_update: non-finite gradient");
        }
    }
    ++state.step_count;
    const double t = static_cast<double>(state.step_count);
    const T bc1 = static_cast<T>(1.0 - std::pow(hp.beta1, t));
    const T bc2 = static_cast<T>(1.0 - std::pow(hp.beta2, t));
    const T lr = static_cast<T>(hp.learning_rate);
    const T decay = static_cast<T>(1.0 - hp.learning_rate * hp.weight_decay);
    const T b1 = static_cast<T>(hp.beta1);
    const T b2 = static_cast<T>(hp.beta2);
    const T eps = static_cast<T>(hp.epsilon);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const T g = grads[i];
        T& m = state.first_moment[i];
        T& v = state.second_moment[i];
        m = b1 * m + (T(1) - b1) * g;
        v = b2 * v + (T(1) - b2) * g * g;
        const T m_hat = m / bc1;
        const T denom = std::sqrt(v / bc2) + eps;
        T p = params[i] * decay;
        if (denom > T(0)) {
            p -= lr * m_hat / denom;
        }
        params[i] = p;
    }
}

template void adamw_update<float>(std::span<float>, std::span<const float>, OptimizerState<float>&,
                                  const AdamWSettings&);
template void adamw_update<double>(std::span<double>, std::span<const double>, OptimizerState<double>&,
                                   const AdamWSettings&);

json to_json(const IterationRecord& r) {
    return json{
        {"kind", "iteration"},
        {"iteration", r.iteration},
        {"stage", r.stage},
        {"batch_size", r.batch_size},
        {"n_selected", r.n_selected},
        {"batch_mean_risk", r.batch_mean_risk},
        {"tail_mean_risk", r.tail_mean_risk},
        {"var_estimate", r.var_estimate},
        {"grad_norm", r.grad_norm},
    };
}

json to_json(const ValidationRecord& r) {
    return json{
        {"kind", "validation"},
        {"iteration", r.iteration},
        {"mean_rmse", r.mean_rmse},
        {"tail_rmse", r.tail_rmse},
    };
}

void TrainLog::append(const IterationRecord& r) {
    if (!iterations_.empty() && r.iteration <= iterations_.back().iteration) {
        throw ArgumentError("TrainLog: iteration " + std::to_string(r.iteration) + " does not follow " +
                            std::to_string(iterations_.back().iteration));
    }
    order_.emplace_back('i', iterations_.size());
    iterations_.push_back(r);
}

void TrainLog::append(const ValidationRecord& r) {
    if (!validations_.empty() && r.iteration <= validations_.back().iteration) {
        throw ArgumentError("TrainLog: validation at " + std::to_string(r.iteration) + " does not follow " +
                            std::to_string(validations_.back().iteration));
    }
    order_.emplace_back('v', validations_.size());
    validations_.push_back(r);
}

std::string TrainLog::to_jsonl() const {
    std::string out;
    for (const auto& [kind, idx] : order_) {
        out += (kind == 'i' ? to_json(iterations_[idx]) : to_json(validations_[idx])).dump();
        out += '\n';
    }
    return out;
}

std::string TrainLog::timing_jsonl() const {
    std::string out;
    for (const auto& r : iterations_) {
        out += json{{"iteration", r.iteration}, {"wall_seconds", r.wall_seconds}}.dump();
        out += '\n';
    }
    return out;
}

TrainLog TrainLog::from_jsonl(const std::string& text) {
    TrainLog log;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            const json j = json::parse(line);
            if (j.at("kind") == "iteration") {
                IterationRecord r;
                r.iteration = j.at("iteration").get<std::int64_t>();
                r.stage = j.at("stage").get<std::string>();
                r.batch_size = j.at("batch_size").get<int>();
                r.n_selected = j.at("n_selected").get<int>();
                r.batch_mean_risk = j.at("batch_mean_risk").get<double>();
                r.tail_mean_risk = j.at("tail_mean_risk").get<double>();
                r.var_estimate = j.at("var_estimate").get<double>();
                r.grad_norm = j.at("grad_norm").get<double>();
                log.append(r);
            } else {
                log.append(ValidationRecord{j.at("iteration").get<std::int64_t>(), j.at("mean_rmse").get<double>(),
                                            j.at("tail_rmse").get<double>()});
            }
        } catch (const json::exception& e) {
            throw ConfigError("train log line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return log;
}

void TrainLog::truncate(std::int64_t iteration) {
    TrainLog kept;
    for (const auto& [kind, idx] : order_) {
        if (kind == 'i' && iterations_[idx].iteration <= iteration) {
            kept.append(iterations_[idx]);
        } else if (kind == 'v' && validations_[idx].iteration <= iteration) {
            kept.append(validations_[idx]);
        }
    }
    *this = std::move(kept);
}

TrainState initial_state(const ModelConfig& model_config, const TrainConfig& config) {
    Rng rng(derive_seed(config.seed, "init"));
    TrainState s;
    s.params = init_params<float>(model_config, rng);
    s.optimizer = OptimizerState<float>::zeros(s.params.size());
    const std::string origin = "init\n" + to_json(model_config).dump() + "\n" + std::to_string(config.seed);
    s.lineage = sha256_hex({reinterpret_cast<const unsigned char*>(origin.data()), origin.size()});
    return s;
}

IterationRecord standard_step(TrainState& state, const TaskSource& source, const TrainConfig& config,
                              const RiskFn& risk, int threads) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto b = static_cast<std::size_t>(config.batch_size);
    const auto tasks = source.batch(state.tasks_consumed, b, threads);
    auto lg = loss_and_grad(state.params, std::span<const TaskDataset>(tasks), risk, threads);
    adamw_update<float>(state.params.values, lg.grad.values, state.optimizer, AdamWSettings::from(config));
    state.tasks_consumed += b;

    IterationRecord r;
    r.iteration = ++state.iteration;
    r.stage = "standard";
    r.batch_size = config.batch_size;
    r.n_selected = config.batch_size;
    r.batch_mean_risk = lg.loss;
    r.tail_mean_risk = lg.loss;
    r.var_estimate = *std::min_element(lg.risks.begin(), lg.risks.end());
    r.grad_norm = grad_norm(lg.grad.values);
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

IterationRecord robust_step(TrainState& state, const TaskSource& source, const TrainConfig& config,
                            const RiskFn& risk, int threads) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto b = static_cast<std::size_t>(config.robust_batch_size);
    const auto tasks = source.batch(state.tasks_consumed, b, threads);
    const auto risks = evaluate_risks(state.params, std::span<const TaskDataset>(tasks), risk, threads);
    const auto rv = RiskVector::from_values(risks);
    auto selected = select_tail(rv, TailSpec{config.tail_fraction});
    const double var = risks[selected.back()];
    // Batch order for the gradient pass, so q = 1 reproduces a standard step exactly.
    std::sort(selected.begin(), selected.end());
    std::vector<TaskDataset> subset;
    subset.reserve(selected.size());
    for (std::size_t i : selected) {
        subset.push_back(tasks[i]);
    }
    auto lg = loss_and_grad(state.params, std::span<const TaskDataset>(subset), risk, threads);
    adamw_update<float>(state.params.values, lg.grad.values, state.optimizer, AdamWSettings::from(config));
    state.tasks_consumed += b;

    double batch_sum = 0.0;
    for (double v : risks) {
        batch_sum += v;
    }
    IterationRecord r;
    r.iteration = ++state.iteration;
    r.stage = "robust";
    r.batch_size = config.robust_batch_size;
    r.n_selected = static_cast<int>(selected.size());
    r.batch_mean_risk = batch_sum / static_cast<double>(b);
    r.tail_mean_risk = lg.loss;
    r.var_estimate = var;
    r.grad_norm = grad_norm(lg.grad.values);
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot open for writing: " + tmp.string());
        }
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!out) {
            throw IoError("failed writing: " + tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        throw IoError("cannot move into place: " + path.string() + ": " + ec.message());
    }
}

std::string save_train_state(const TrainState& state, const std::filesystem::path& path, const json& extra) {
    const std::vector<AuxArray> aux{{kFirstMoment, state.optimizer.first_moment},
                                    {kSecondMoment, state.optimizer.second_moment}};
    json st = extra.is_object() ? extra : json::object();
    st["iteration"] = state.iteration;
    st["tasks_consumed"] = state.tasks_consumed;
    st["step_count"] = state.optimizer.step_count;
    st["parent_lineage"] = state.lineage;
    return save_checkpoint(state.params, path, aux, st);
}

TrainState load_train_state(const std::filesystem::path& path) {
    Checkpoint ck = read_checkpoint(path);
    TrainState s;
    s.params = std::move(ck.params);
    const auto* m = ck.find_aux(kFirstMoment);
    const auto* v = ck.find_aux(kSecondMoment);
    if (m == nullptr || v == nullptr) {
        throw CheckpointError(path.string() + ": checkpoint has no optimizer state and cannot be resumed");
    }
    if (m->data.size() != s.params.size() || v->data.size() != s.params.size()) {
        throw ShapeError(m->data.size() != s.params.size() ? kFirstMoment : kSecondMoment,
                         path.string() + ": optimizer moments do not match the parameter count");
    }
    s.optimizer.first_moment = m->data;
    s.optimizer.second_moment = v->data;
    try {
        s.optimizer.step_count = ck.state.at("step_count").get<std::int64_t>();
        s.iteration = ck.state.at("iteration").get<std::int64_t>();
        s.tasks_consumed = ck.state.at("tasks_consumed").get<std::uint64_t>();
        s.lineage = lineage_step(ck.state.at("parent_lineage").get<std::string>(), ck.checksum);
    } catch (const json::exception& e) {
        throw CheckpointError(path.string() + ": incomplete training state: " + e.what());
    }
    return s;
}

TrainResult run_training(const TrainConfig& config, const ModelConfig& model_config,
                         const TaskStreamConfig& stream_config, const TrainOptions& options) {
    config.validate();
    model_config.validate();
    stream_config.validate();
    const bool write = !options.out_dir.empty();
    if (write) {
        std::error_code ec;
        std::filesystem::create_directories(options.out_dir, ec);
        if (ec || !std::filesystem::is_directory(options.out_dir)) {
            throw IoError("cannot create output directory: " + options.out_dir.string());
        }
    }

    TrainResult result;
    if (options.resume_from) {
        result.state = load_train_state(*options.resume_from);
        if (!(result.state.params.config == model_config)) {
            throw ConfigError("resume: checkpoint model config differs from the configured model");
        }
        const auto log_path = options.resume_from->parent_path() / kTrainLogFile;
        if (std::filesystem::exists(log_path)) {
            result.log = TrainLog::from_jsonl(read_text(log_path));
            result.log.truncate(result.state.iteration);
        }
    } else {
        result.state = initial_state(model_config, config);
    }

    const TaskStream stream(stream_config);
    TaskStreamConfig val_cfg = stream_config;
    val_cfg.seed = derive_seed(config.seed, "validation");
    std::vector<TaskDataset> validation;
    if (config.validation_every > 0 && config.validation_every <= config.max_iter) {
        validation = TaskStream(val_cfg).batch(0, static_cast<std::size_t>(config.validation_tasks), options.threads);
    }
    const RiskFn risk = make_risk(config.risk);
    const json extra{{"train", to_json(config)}, {"stream", to_json(stream_config)}};

    const auto flush_logs = [&] {
        if (write) {
            write_file_atomic(options.out_dir / kTrainLogFile, result.log.to_jsonl());
            write_file_atomic(options.out_dir / kTimingLogFile, result.log.timing_jsonl());
        }
    };
    const auto checkpoint = [&](const char* name) {
        const auto path = options.out_dir / name;
        const std::string parent = result.state.lineage;
        const std::string checksum = save_train_state(result.state, path, extra);
        result.state.lineage = lineage_step(parent, checksum);
        return path;
    };

    std::int64_t last = config.max_iter;
    if (options.stop_after) {
        last = std::min(last, *options.stop_after);
    }
    while (result.state.iteration < last) {
        const bool robust = config.mode == TrainMode::robust && result.state.iteration >= config.stage1_iters;
        IterationRecord rec;
        try {
            rec = robust ? robust_step(result.state, stream, config, risk, options.threads)
                         : standard_step(result.state, stream, config, risk, options.threads);
        } catch (const NumericError& e) {
            std::filesystem::path saved;
            if (write) {
                flush_logs();
                saved = checkpoint(kLastFiniteCheckpoint);
            }
            throw DivergenceError(std::string("training diverged at iteration ") +
                                      std::to_string(result.state.iteration + 1) + ": " + e.what(),
                                  saved);
        }
        result.log.append(rec);
        if (options.on_iteration) {
            options.on_iteration(rec);
        }
        const std::int64_t j = rec.iteration;
        if (!validation.empty() && j % config.validation_every == 0) {
            const ModelPredictor<float> model(result.state.params);
            const auto report = evaluate_batch(model, validation, config.tail_fraction, {}, options.threads);
            const ValidationRecord v{j, report.mean_rmse, report.tail_mean_rmse};
            result.log.append(v);
            if (options.on_validation) {
                options.on_validation(v);
            }
        }
        if (write && config.checkpoint_every > 0 && j % config.checkpoint_every == 0 && j < last) {
            checkpoint(kLastCheckpoint);
            flush_logs();
        }
    }
    if (write) {
        result.final_checkpoint = checkpoint(kFinalCheckpoint);
        flush_logs();
    }
    return result;
}

}  // namespace ricl
