// SPDX-License-Identifier: Apache-2.0

#include <atomic>
#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "ricl/checkpoint.hpp"
#include "ricl/trainer.hpp"

using namespace ricl;

namespace {

ModelConfig tiny_model() {
    ModelConfig c;
    c.d_model = 8;
    c.n_heads = 2;
    c.n_encoder_layers = 1;
    c.n_decoder_layers = 1;
    c.d_ff = 16;
    c.max_context_len = 32;
    c.max_query_len = 16;
    return c;
}

TaskStreamConfig tiny_stream(std::uint64_t seed) {
    TaskStreamConfig t;
    t.seed = seed;
    t.context_len = 16;
    t.query_len = 10;
    t.init_len = 3;
    t.order_range = {1, 2};
    t.calibration_len = 200;
    t.washout = 50;
    return t;
}

TrainConfig tiny_train() {
    TrainConfig c;
    c.batch_size = 4;
    c.robust_batch_size = 10;
    c.tail_fraction = 0.4;
    c.learning_rate = 1e-3;
    c.max_iter = 20;
    c.stage1_iters = 10;
    c.validation_every = 0;
    c.checkpoint_every = 0;
    c.seed = 3;
    return c;
}

class FixedSource : public TaskSource {
public:
    explicit FixedSource(TaskDataset t) : task_(std::move(t)) {}
    std::vector<TaskDataset> batch(std::uint64_t, std::size_t count, int) const override {
        return std::vector<TaskDataset>(count, task_);
    }

private:
    TaskDataset task_;
};

std::filesystem::path fresh_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "ricl_unit" / name;
    std::filesystem::remove_all(dir);
    return dir;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("adamw zero gradient without decay leaves params unchanged") {
    std::vector<double> p{1.0, -2.0, 0.5};
    const std::vector<double> g(3, 0.0);
    auto st = OptimizerState<double>::zeros(3);
    adamw_update<double>(p, g, st, AdamWSettings{0.1, 0.0, 0.9, 0.999, 1e-8});
    CHECK(p == std::vector<double>{1.0, -2.0, 0.5});
    CHECK(st.step_count == 1);
}

TEST_CASE("adamw degenerate update p=1 g=1") {
    std::vector<double> p{1.0};
    const std::vector<double> g{1.0};
    auto st = OptimizerState<double>::zeros(1);
    adamw_update<double>(p, g, st, AdamWSettings{0.1, 0.0, 0.0, 0.0, 0.0});
    CHECK(p[0] == doctest::Approx(0.9).epsilon(1e-15));
}

TEST_CASE("adamw decoupled decay shrinks params by (1 - lr wd)") {
    std::vector<double> p{2.0, -4.0};
    const std::vector<double> g(2, 0.0);
    auto st = OptimizerState<double>::zeros(2);
    adamw_update<double>(p, g, st, AdamWSettings{0.1, 0.5, 0.9, 0.999, 1e-8});
    CHECK(p[0] == doctest::Approx(2.0 * (1.0 - 0.05)).epsilon(1e-15));
    CHECK(p[1] == doctest::Approx(-4.0 * (1.0 - 0.05)).epsilon(1e-15));
}

TEST_CASE("adamw bias correction against a hand-rolled reference") {
    std::vector<double> p{0.3};
    auto st = OptimizerState<double>::zeros(1);
    const AdamWSettings hp{0.01, 0.1, 0.9, 0.99, 1e-8};
    double ref = 0.3, m = 0.0, v = 0.0;
    const double grads[] = {0.5, -1.0, 2.0, 0.25};
    for (int t = 1; t <= 4; ++t) {
        const std::vector<double> g{grads[t - 1]};
        adamw_update<double>(p, g, st, hp);
        ref *= 1.0 - 0.01 * 0.1;
        m = 0.9 * m + 0.1 * grads[t - 1];
        v = 0.99 * v + 0.01 * grads[t - 1] * grads[t - 1];
        ref -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.99, t))) + 1e-8);
        CHECK(p[0] == doctest::Approx(ref).epsilon(1e-14));
    }
}

TEST_CASE("adamw rejects non-finite gradients without side effects") {
    std::vector<float> p{1.0f, 2.0f};
    const std::vector<float> g{0.1f, std::numeric_limits<float>::infinity()};
    auto st = OptimizerState<float>::zeros(2);
    CHECK_THROWS_AS(adamw_update<float>(p, g, st, AdamWSettings{}), NumericError);
    CHECK(p == std::vector<float>{1.0f, 2.0f});
    CHECK(st.step_count == 0);
    CHECK(st.first_moment == std::vector<float>{0.0f, 0.0f});
}

TEST_CASE("train config validation") {
    TrainConfig c = tiny_train();
    c.tail_fraction = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_train();
    c.robust_batch_size = 2;
    c.tail_fraction = 0.4;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.mode = TrainMode::standard;
    CHECK_NOTHROW(c.validate());
    c = tiny_train();
    c.learning_rate = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_train();
    c.stage1_iters = c.max_iter + 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_train();
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);

    json j = to_json(tiny_train());
    j["tail_fractoin"] = 0.3;
    StrictObject obj(j, "train");
    TrainConfig out;
    CHECK_THROWS_WITH_AS(read_train_config(obj, out, true), "unknown configuration key 'train.tail_fractoin'",
                         ConfigError);
}

TEST_CASE("standard step with b=1 on a fixed task records that task's risk") {
    auto st = initial_state(tiny_model(), tiny_train());
    const auto task = TaskStream(tiny_stream(1)).at(0);
    const FixedSource source(task);
    TrainConfig cfg = tiny_train();
    cfg.batch_size = 1;
    const auto risk = make_risk(RiskKind::kl);
    const double expected = risk(task.target(), forward(st.params, task)).value;
    const auto rec = standard_step(st, source, cfg, risk);
    CHECK(rec.batch_mean_risk == expected);
    CHECK(rec.iteration == 1);
    CHECK(st.tasks_consumed == 1);
}

TEST_CASE("standard step with zero learning rate leaves params unchanged") {
    auto st = initial_state(tiny_model(), tiny_train());
    const auto before = st.params.values;
    TrainConfig cfg = tiny_train();
    cfg.learning_rate = 0.0;
    const TaskStream stream(tiny_stream(2));
    const auto rec = standard_step(st, stream, cfg, make_risk(RiskKind::kl));
    CHECK(st.params.values == before);
    CHECK(std::isfinite(rec.batch_mean_risk));
    CHECK(rec.batch_mean_risk > 0.0);
}

TEST_CASE("robust step with q=1 matches a standard step bit for bit") {
    const TaskStream stream(tiny_stream(4));
    TrainConfig cfg = tiny_train();
    cfg.batch_size = 6;
    cfg.robust_batch_size = 6;
    cfg.tail_fraction = 1.0;
    auto a = initial_state(tiny_model(), cfg);
    auto b = a;
    const auto risk = make_risk(RiskKind::kl);
    for (int i = 0; i < 3; ++i) {
        const auto ra = standard_step(a, stream, cfg, risk);
        const auto rb = robust_step(b, stream, cfg, risk);
        CHECK(ra.tail_mean_risk == rb.tail_mean_risk);
    }
    CHECK(a.params.values == b.params.values);
    CHECK(a.optimizer.first_moment == b.optimizer.first_moment);
    CHECK(a.optimizer.second_moment == b.optimizer.second_moment);
}

TEST_CASE("robust step backpropagates through exactly floor(q b) tasks") {
    const TaskStream stream(tiny_stream(5));
    TrainConfig cfg = tiny_train();
    cfg.robust_batch_size = 80;
    cfg.tail_fraction = 0.4;
    auto st = initial_state(tiny_model(), cfg);
    std::atomic<int> calls{0};
    const auto base = make_risk(RiskKind::kl);
    const RiskFn counting = [&](std::span<const double> t, const PredictiveOutput& p) {
        ++calls;
        return base(t, p);
    };
    const auto rec = robust_step(st, stream, cfg, counting);
    CHECK(rec.n_selected == 32);
    CHECK(rec.batch_size == 80);
    // 80 ranking evaluations plus 32 gradient evaluations.
    CHECK(calls.load() == 112);
    CHECK(rec.tail_mean_risk >= rec.batch_mean_risk);
    CHECK(rec.var_estimate <= rec.tail_mean_risk);
}

TEST_CASE("train log ordering and jsonl round trip") {
    TrainLog log;
    IterationRecord r;
    r.iteration = 1;
    r.stage = "standard";
    r.batch_mean_risk = 0.1 + 0.2;
    log.append(r);
    log.append(ValidationRecord{1, 0.5, 0.75});
    r.iteration = 2;
    log.append(r);
    r.iteration = 2;
    CHECK_THROWS_AS(log.append(r), ArgumentError);
    const auto back = TrainLog::from_jsonl(log.to_jsonl());
    CHECK(back.to_jsonl() == log.to_jsonl());
    CHECK(back.iterations()[0].batch_mean_risk == 0.1 + 0.2);
    auto cut = back;
    cut.truncate(1);
    CHECK(cut.iterations().size() == 1);
    CHECK(cut.validations().size() == 1);
}

TEST_CASE("same seed gives identical training logs") {
    TrainConfig cfg = tiny_train();
    cfg.max_iter = 100;
    cfg.stage1_iters = 60;
    const auto a = run_training(cfg, tiny_model(), tiny_stream(7));
    const auto b = run_training(cfg, tiny_model(), tiny_stream(7));
    CHECK(a.log.to_jsonl() == b.log.to_jsonl());
    CHECK(a.state.params.values == b.state.params.values);
    REQUIRE(a.log.iterations().size() == 100);
    CHECK(a.log.iterations()[59].stage == "standard");
    CHECK(a.log.iterations()[60].stage == "robust");
    for (const auto& r : a.log.iterations()) {
        CHECK(r.tail_mean_risk >= r.batch_mean_risk);
    }
    TrainConfig other = cfg;
    other.seed = 8;
    const auto c = run_training(other, tiny_model(), tiny_stream(7));
    CHECK(c.log.to_jsonl() != a.log.to_jsonl());
}

TEST_CASE("thread count does not change training") {
    TrainConfig cfg = tiny_train();
    TrainOptions one, three;
    three.threads = 3;
    const auto a = run_training(cfg, tiny_model(), tiny_stream(9), one);
    const auto b = run_training(cfg, tiny_model(), tiny_stream(9), three);
    CHECK(a.log.to_jsonl() == b.log.to_jsonl());
    CHECK(a.state.params.values == b.state.params.values);
}

TEST_CASE("stage boundaries") {
    TrainConfig cfg = tiny_train();
    cfg.stage1_iters = cfg.max_iter;
    const auto all_standard = run_training(cfg, tiny_model(), tiny_stream(1));
    for (const auto& r : all_standard.log.iterations()) {
        CHECK(r.stage == "standard");
    }
    cfg.stage1_iters = 0;
    const auto all_robust = run_training(cfg, tiny_model(), tiny_stream(1));
    for (const auto& r : all_robust.log.iterations()) {
        CHECK(r.stage == "robust");
        CHECK(r.n_selected == 4);
    }
    cfg.mode = TrainMode::standard;
    const auto standard_only = run_training(cfg, tiny_model(), tiny_stream(1));
    for (const auto& r : standard_only.log.iterations()) {
        CHECK(r.stage == "standard");
    }
}

TEST_CASE("validation cadence") {
    TrainConfig cfg = tiny_train();
    cfg.validation_every = 5;
    cfg.validation_tasks = 8;
    const auto r = run_training(cfg, tiny_model(), tiny_stream(2));
    REQUIRE(r.log.validations().size() == 4);
    CHECK(r.log.validations()[0].iteration == 5);
    for (const auto& v : r.log.validations()) {
        CHECK(v.tail_rmse >= v.mean_rmse);
    }
    cfg.validation_every = 500;
    CHECK(run_training(cfg, tiny_model(), tiny_stream(2)).log.validations().empty());
}

TEST_CASE("resume after interruption continues bit for bit") {
    TrainConfig cfg = tiny_train();
    cfg.max_iter = 30;
    cfg.stage1_iters = 12;
    cfg.validation_every = 7;
    cfg.validation_tasks = 4;
    cfg.checkpoint_every = 10;
    const auto full_dir = fresh_dir("resume_full");
    const auto part_dir = fresh_dir("resume_part");
    const auto rest_dir = fresh_dir("resume_rest");
    TrainOptions full;
    full.out_dir = full_dir;
    const auto a = run_training(cfg, tiny_model(), tiny_stream(3), full);

    TrainOptions part;
    part.out_dir = part_dir;
    part.stop_after = 15;
    const auto p = run_training(cfg, tiny_model(), tiny_stream(3), part);
    CHECK(p.state.iteration == 15);

    TrainOptions rest;
    rest.out_dir = rest_dir;
    rest.resume_from = part_dir / kFinalCheckpoint;
    const auto b = run_training(cfg, tiny_model(), tiny_stream(3), rest);
    CHECK(b.state.params.values == a.state.params.values);
    CHECK(b.state.optimizer.first_moment == a.state.optimizer.first_moment);
    CHECK(b.log.to_jsonl() == a.log.to_jsonl());
    CHECK(slurp(rest_dir / kTrainLogFile) == slurp(full_dir / kTrainLogFile));
    CHECK(read_checkpoint(rest_dir / kFinalCheckpoint).checksum == read_checkpoint(full_dir / kFinalCheckpoint).checksum);

    // Resuming from the periodic checkpoint works the same way.
    TrainOptions mid;
    mid.out_dir = fresh_dir("resume_mid");
    mid.resume_from = full_dir / kLastCheckpoint;
    const auto c = run_training(cfg, tiny_model(), tiny_stream(3), mid);
    CHECK(c.state.params.values == a.state.params.values);
}

TEST_CASE("resume rejects a different model") {
    TrainConfig cfg = tiny_train();
    TrainOptions o;
    o.out_dir = fresh_dir("resume_model");
    run_training(cfg, tiny_model(), tiny_stream(3), o);
    ModelConfig other = tiny_model();
    other.d_ff = 8;
    TrainOptions r;
    r.resume_from = o.out_dir / kFinalCheckpoint;
    CHECK_THROWS_AS(run_training(cfg, other, tiny_stream(3), r), ConfigError);
    const auto ck = read_checkpoint(o.out_dir / kFinalCheckpoint);
    CHECK(ck.find_aux("optimizer.first_moment") != nullptr);
    const auto model_only = o.out_dir / "model_only.ckpt";
    save_checkpoint(ck.params, model_only);
    CHECK_THROWS_AS(load_train_state(model_only), CheckpointError);
}

TEST_CASE("divergence aborts with a last finite checkpoint") {
    TrainConfig cfg = tiny_train();
    cfg.learning_rate = 1e30;
    cfg.weight_decay = 0.0;
    TrainOptions o;
    o.out_dir = fresh_dir("diverge");
    try {
        run_training(cfg, tiny_model(), tiny_stream(3), o);
        FAIL("expected divergence");
    } catch (const DivergenceError& e) {
        CHECK(e.checkpoint() == o.out_dir / kLastFiniteCheckpoint);
        const auto st = load_train_state(e.checkpoint());
        for (float v : st.params.values) {
            CHECK(std::isfinite(v));
        }
    }
}

TEST_CASE("output files are written atomically and deterministically") {
    TrainConfig cfg = tiny_train();
    cfg.checkpoint_every = 5;
    TrainOptions a, b;
    a.out_dir = fresh_dir("files_a");
    b.out_dir = fresh_dir("files_b");
    run_training(cfg, tiny_model(), tiny_stream(6), a);
    run_training(cfg, tiny_model(), tiny_stream(6), b);
    CHECK(slurp(a.out_dir / kTrainLogFile) == slurp(b.out_dir / kTrainLogFile));
    CHECK(slurp(a.out_dir / kFinalCheckpoint) == slurp(b.out_dir / kFinalCheckpoint));
    CHECK(std::filesystem::exists(a.out_dir / kTimingLogFile));
    CHECK(std::filesystem::exists(a.out_dir / kLastCheckpoint));
    for (const auto& e : std::filesystem::directory_iterator(a.out_dir)) {
        CHECK(e.path().extension() != ".tmp");
    }
}

}  // TEST_SUITE
