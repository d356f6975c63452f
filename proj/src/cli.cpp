// SPDX-License-Identifier: Apache-2.0

#include "ricl/cli.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <sys/utsname.h>
#include <unistd.h>

#include "CLI11.hpp"
#include "ricl/checkpoint.hpp"
#include "ricl/eval.hpp"

namespace ricl {
namespace {

std::string utc_now() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

json host_description() {
    char name[256] = {0};
    gethostname(name, sizeof(name) - 1);
    utsname u{};
    uname(&u);
    return json{{"hostname", name},
                {"os", std::string(u.sysname) + " " + u.release},
                {"machine", u.machine},
                {"hardware_threads", std::thread::hardware_concurrency()},
                {"compiler", __VERSION__}};
}

json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open config file: " + path.string());
    }
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": not valid JSON: " + e.what());
    }
}

void ensure_out_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec || !std::filesystem::is_directory(dir)) {
        throw IoError("cannot create output directory: " + dir.string());
    }
}

void require_file(const std::filesystem::path& path, const char* what) {
    if (!std::filesystem::is_regular_file(path)) {
        throw IoError(std::string(what) + " not found: " + path.string());
    }
}

void append_task_rows(std::string& out, std::uint64_t index, const TaskDataset& t) {
    const auto rows = [&](const char* segment, const std::vector<double>& u, const std::vector<double>& y) {
        for (std::size_t k = 0; k < u.size(); ++k) {
            out += std::to_string(index) + "," + segment + "," + std::to_string(k) + "," + format_real(u[k]) + "," +
                   format_real(y[k]) + "\n";
        }
    };
    rows("context", t.context_u, t.context_y);
    rows("query", t.query_u, t.query_y);
}

ExcitationKind input_class(const std::string& name) {
    try {
        return excitation_from_string(name);
    } catch (const ConfigError&) {
        throw ConfigError("--input-class: unknown excitation '" + name + "' (expected wn|rbs|multisine)");
    }
}

struct Common {
    std::string config_path;
    int threads = 0;
};

ConfigBundle load_bundle(const Common& c) {
    ConfigBundle b = c.config_path.empty() ? parse_config_json(json::object()) : parse_config(c.config_path);
    if (c.threads > 0) {
        b.threads = c.threads;
    }
    return b;
}

std::vector<std::string> argv_copy(const std::vector<std::string>& args) {
    std::vector<std::string> a{"ricl"};
    a.insert(a.end(), args.begin(), args.end());
    return a;
}

int cmd_generate(const Common& common, const std::string& out_dir, std::int64_t n_tasks, std::uint64_t first,
                 const std::string& input, const std::vector<std::string>& args, std::ostream& out) {
    ConfigBundle b = load_bundle(common);
    if (!input.empty()) {
        b.stream.excitation.kind = input_class(input);
    }
    if (n_tasks < 1) {
        throw ConfigError("--n-tasks must be >= 1");
    }
    ensure_out_dir(out_dir);
    RunManifest manifest("generate", argv_copy(args), b.to_json(), b.seeds());
    manifest.set("generate", {{"n_tasks", n_tasks}, {"first_index", first}, {"stream", to_json(b.stream)}});
    manifest.begin(out_dir);
    const TaskStream stream(b.stream);
    const auto tasks = stream.batch(first, static_cast<std::size_t>(n_tasks), b.threads);
    std::string text = "task_id,segment,k,u,y\n";
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        append_task_rows(text, first + i, tasks[i]);
    }
    const std::filesystem::path dir(out_dir);
    write_file_atomic(dir / "tasks.csv", text);
    json sidecar = to_json(b.stream);
    sidecar["first_index"] = first;
    sidecar["n_tasks"] = n_tasks;
    write_file_atomic(dir / "tasks.json", sidecar.dump(2) + "\n");
    manifest.complete("ok");
    out << "wrote " << tasks.size() << " tasks to " << (dir / "tasks.csv").string() << "\n";
    return kExitOk;
}

int cmd_train(const Common& common, const std::string& out_dir, const std::string& mode, const std::string& resume,
              std::int64_t log_every, const std::vector<std::string>& args, std::ostream& out) {
    ConfigBundle b = load_bundle(common);
    if (!mode.empty()) {
        b.train.mode = train_mode_from_string(mode);
        b.finalize();
    }
    if (!resume.empty()) {
        require_file(resume, "checkpoint");
    }
    ensure_out_dir(out_dir);
    RunManifest manifest("train", argv_copy(args), b.to_json(), b.seeds());
    if (!resume.empty()) {
        manifest.set("resumed_from", resume);
    }
    manifest.begin(out_dir);

    TrainOptions opt;
    opt.out_dir = out_dir;
    opt.threads = b.threads;
    if (!resume.empty()) {
        opt.resume_from = resume;
    }
    opt.on_iteration = [&](const IterationRecord& r) {
        if (log_every > 0 && r.iteration % log_every == 0) {
            out << "iter " << r.iteration << " " << r.stage << " batch_mean " << format_real(r.batch_mean_risk)
                << " tail_mean " << format_real(r.tail_mean_risk) << " var " << format_real(r.var_estimate)
                << " grad_norm " << format_real(r.grad_norm) << "\n";
        }
    };
    opt.on_validation = [&](const ValidationRecord& v) {
        out << "validation " << v.iteration << " mean_rmse " << format_real(v.mean_rmse) << " tail_rmse "
            << format_real(v.tail_rmse) << "\n";
    };
    try {
        const auto result = run_training(b.train, b.model, b.stream, opt);
        manifest.set("lineage", result.state.lineage);
        manifest.set("final_checkpoint", result.final_checkpoint.string());
        manifest.set("iterations", result.state.iteration);
        manifest.complete("ok");
        out << "final checkpoint " << result.final_checkpoint.string() << "\n";
        return kExitOk;
    } catch (const DivergenceError& e) {
        manifest.set("last_finite_checkpoint", e.checkpoint().string());
        manifest.complete("diverged");
        throw;
    }
}

ConfigBundle eval_bundle(const Common& common, const Checkpoint& ck, std::optional<std::uint64_t> seed) {
    ConfigBundle b = load_bundle(common);
    if (common.config_path.empty() && ck.state.contains("stream")) {
        b.stream = stream_config_from_json(ck.state.at("stream"), "checkpoint.state.stream");
    }
    if (seed) {
        b.seed = *seed;
    }
    return b;
}

int cmd_eval(const Common& common, const std::string& checkpoint, const std::string& out_dir,
             const std::string& input, std::int64_t n_tasks, double tail_fraction, std::optional<std::uint64_t> seed,
             const std::vector<std::string>& args, std::ostream& out) {
    require_file(checkpoint, "checkpoint");
    const Checkpoint ck = read_checkpoint(checkpoint);
    ConfigBundle b = eval_bundle(common, ck, seed);
    if (!input.empty()) {
        b.stream.excitation.kind = input_class(input);
    }
    if (n_tasks > 0) {
        b.eval.n_tasks = static_cast<int>(n_tasks);
    }
    if (tail_fraction >= 0.0) {
        b.eval.tail_fraction = tail_fraction;
    }
    b.eval.validate();
    TaskStreamConfig test_cfg = b.stream;
    test_cfg.seed = derive_seed(b.seed, "test");
    test_cfg.validate();

    ensure_out_dir(out_dir);
    RunManifest manifest("eval", argv_copy(args), b.to_json(), b.seeds());
    manifest.set("checkpoint", {{"path", checkpoint}, {"checksum", ck.checksum}});
    manifest.set("test_stream", to_json(test_cfg));
    manifest.begin(out_dir);

    const auto tasks = TaskStream(test_cfg).batch(0, static_cast<std::size_t>(b.eval.n_tasks), b.threads);
    const ModelPredictor<float> model(ck.params);
    const auto report = evaluate_batch(model, tasks, b.eval.tail_fraction, HistogramSpec{b.eval.histogram_bins, {}},
                                       b.threads);
    emit_report(report, out_dir);
    manifest.complete("ok");
    out << "n_tasks " << report.n_tasks << " mean_rmse " << format_real(report.mean_rmse) << " median_rmse "
        << format_real(report.median_rmse) << " tail_mean_rmse " << format_real(report.tail_mean_rmse) << "\n";
    return kExitOk;
}

ColumnRef column_ref(const std::string& s) {
    if (!s.empty() && std::all_of(s.begin(), s.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) {
        return static_cast<std::size_t>(std::stoull(s));
    }
    return s;
}

int cmd_benchmark(const Common& common, const std::string& checkpoint, const std::string& out_dir,
                  const std::string& train_csv, const std::vector<std::string>& test_csvs, BenchmarkOptions bopt,
                  const std::string& u_col, const std::string& y_col, const std::string& delimiter,
                  const std::vector<std::string>& args, std::ostream& out) {
    require_file(checkpoint, "checkpoint");
    if (delimiter.size() != 1) {
        throw ConfigError("--delimiter must be a single character");
    }
    const Checkpoint ck = read_checkpoint(checkpoint);
    const ConfigBundle b = load_bundle(common);
    const auto train = load_two_column_csv(train_csv, column_ref(u_col), column_ref(y_col), delimiter[0]);
    std::vector<BenchmarkSeries> tests;
    for (const auto& p : test_csvs) {
        tests.push_back(load_two_column_csv(p, column_ref(u_col), column_ref(y_col), delimiter[0]));
    }
    ensure_out_dir(out_dir);
    RunManifest manifest("benchmark", argv_copy(args), b.to_json(), b.seeds());
    manifest.set("checkpoint", {{"path", checkpoint}, {"checksum", ck.checksum}});
    json inputs{{"train", {{"path", train_csv}, {"rows", train.sample_count()}}}, {"test", json::array()}};
    for (std::size_t i = 0; i < tests.size(); ++i) {
        inputs["test"].push_back({{"path", test_csvs[i]}, {"rows", tests[i].sample_count()}});
    }
    manifest.set("inputs", inputs);
    manifest.begin(out_dir);

    const ModelPredictor<float> model(ck.params);
    const auto report = run_benchmark(model, train, tests, bopt, b.threads);
    emit_benchmark_report(report, out_dir);
    manifest.complete("ok");
    out << "contexts " << report.n_contexts << "\n";
    for (const auto& s : report.series) {
        out << s.name << " rmse " << format_real(s.rmse) << " chunks " << s.n_chunks << "\n";
    }
    return kExitOk;
}

int cmd_inspect(const std::string& checkpoint, std::ostream& out) {
    require_file(checkpoint, "checkpoint");
    const Checkpoint ck = read_checkpoint(checkpoint);
    out << "param_count " << param_count(ck.params.config) << "\n";
    out << "checksum " << ck.checksum << "\n";
    out << "config " << to_json(ck.params.config).dump() << "\n";
    if (ck.state.contains("iteration")) {
        out << "iteration " << ck.state.at("iteration").dump() << "\n";
    }
    if (ck.state.contains("parent_lineage")) {
        out << "parent_lineage " << ck.state.at("parent_lineage").get<std::string>() << "\n";
    }
    return kExitOk;
}

}  // namespace

void EvalConfig::validate() const {
    if (n_tasks < 1) {
        throw ConfigError("eval.n_tasks must be >= 1");
    }
    if (!(tail_fraction > 0.0 && tail_fraction <= 1.0)) {
        throw ConfigError("eval.tail_fraction must lie in (0, 1]");
    }
    if (histogram_bins < 1) {
        throw ConfigError("eval.histogram_bins must be >= 1");
    }
}

void ConfigBundle::finalize() {
    if (threads < 1) {
        throw ConfigError("threads must be >= 1");
    }
    stream.seed = derive_seed(seed, "train-stream");
    train.seed = seed;
    stream.validate();
    model.validate();
    train.validate();
    eval.validate();
    if (stream.context_len > model.max_context_len) {
        throw ConfigError("stream.context_len exceeds model.max_context_len");
    }
    if (stream.query_len > model.max_query_len) {
        throw ConfigError("stream.query_len exceeds model.max_query_len");
    }
}

json ConfigBundle::to_json() const {
    return json{{"seed", seed},
                {"threads", threads},
                {"stream", ricl::to_json(stream, false)},
                {"model", ricl::to_json(model)},
                {"train", ricl::to_json(train, false)},
                {"eval",
                 {{"n_tasks", eval.n_tasks},
                  {"tail_fraction", eval.tail_fraction},
                  {"histogram_bins", eval.histogram_bins}}}};
}

json ConfigBundle::seeds() const {
    return json{{"master", seed},
                {"train-stream", derive_seed(seed, "train-stream")},
                {"init", derive_seed(seed, "init")},
                {"validation", derive_seed(seed, "validation")},
                {"test", derive_seed(seed, "test")}};
}

ConfigBundle parse_config_json(const json& input) {
    const json* j = &input;
    if (input.is_object() && input.contains("manifest_version")) {
        if (!input.contains("config")) {
            throw ConfigError("manifest has no 'config' member");
        }
        j = &input.at("config");
    }
    ConfigBundle b;
    StrictObject root(*j, "");
    root.get("seed", b.seed);
    root.get("threads", b.threads);
    if (root.has("stream")) {
        StrictObject s = root.object("stream");
        read_stream_config(s, b.stream, false);
    }
    if (root.has("model")) {
        StrictObject m = root.object("model");
        read_model_config(m, b.model);
    }
    if (root.has("train")) {
        StrictObject t = root.object("train");
        read_train_config(t, b.train, false);
    }
    if (root.has("eval")) {
        StrictObject e = root.object("eval");
        e.get("n_tasks", b.eval.n_tasks);
        e.get("tail_fraction", b.eval.tail_fraction);
        e.get("histogram_bins", b.eval.histogram_bins);
        e.finish();
    }
    root.finish();
    b.finalize();
    return b;
}

ConfigBundle parse_config(const std::filesystem::path& path) {
    return parse_config_json(read_json_file(path));
}

RunManifest::RunManifest(std::string command, std::vector<std::string> argv, json config, json seeds)
    : command_(std::move(command)), argv_(std::move(argv)), config_(std::move(config)), seeds_(std::move(seeds)) {}

json RunManifest::to_json() const {
    json j{{"manifest_version", kManifestVersion},
           {"artifact", "ricl"},
           {"artifact_version", kArtifactVersion},
           {"command", command_},
           {"argv", argv_},
           {"config", config_},
           {"seeds", seeds_},
           {"started_at", started_},
           {"finished_at", finished_.empty() ? json(nullptr) : json(finished_)},
           {"status", status_},
           {"host", host_description()}};
    for (auto it = extra_.begin(); it != extra_.end(); ++it) {
        j[it.key()] = it.value();
    }
    return j;
}

void RunManifest::begin(const std::filesystem::path& out_dir) {
    dir_ = out_dir;
    started_ = utc_now();
    write_file_atomic(dir_ / kManifestFile, to_json().dump(2) + "\n");
}

void RunManifest::complete(const std::string& status) {
    finished_ = utc_now();
    status_ = status;
    write_file_atomic(dir_ / kManifestFile, to_json().dump(2) + "\n");
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Robust in-context meta-learning for Wiener-Hammerstein system simulation", "ricl"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kArtifactVersion);

    Common common;
    const auto add_common = [&](CLI::App* sub, bool with_config) {
        if (with_config) {
            sub->add_option("--config", common.config_path, "JSON configuration file (or a run manifest)")
                ->check(CLI::ExistingFile);
        }
        sub->add_option("--threads", common.threads, "Worker threads; results do not depend on it")
            ->check(CLI::PositiveNumber);
    };

    std::string out_dir, checkpoint, input, mode, resume, train_csv, u_col = "0", y_col = "1", delimiter = ",";
    std::int64_t n_tasks = 0, log_every = 100;
    std::uint64_t first_index = 0, seed = 0;
    double tail_fraction = -1.0;
    std::vector<std::string> test_csvs;
    BenchmarkOptions bopt;
    bool no_standardize = false;

    auto* gen = app.add_subcommand("generate", "Write sampled tasks as CSV rows (task_id,segment,k,u,y)");
    add_common(gen, true);
    gen->add_option("--out", out_dir, "Output directory")->required();
    gen->add_option("--n-tasks", n_tasks, "Number of tasks")->required();
    gen->add_option("--first-index", first_index, "Index of the first task in the stream");
    gen->add_option("--input-class", input, "Excitation: wn|rbs|multisine");

    auto* train = app.add_subcommand("train", "Meta-train a model");
    add_common(train, true);
    train->add_option("--out", out_dir, "Output directory")->required();
    train->add_option("--mode", mode, "standard|robust (overrides train.mode)");
    train->add_option("--resume", resume, "Checkpoint to resume from");
    train->add_option("--log-every", log_every, "Print a progress line every N iterations (0: never)");

    auto* ev = app.add_subcommand("eval", "Zero-shot evaluation on a fresh test batch");
    add_common(ev, true);
    auto* seed_opt = ev->add_option("--seed", seed, "Master seed for the test stream (overrides the config)");
    ev->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
    ev->add_option("--out", out_dir, "Output directory")->required();
    ev->add_option("--input-class", input, "Excitation: wn|rbs|multisine");
    ev->add_option("--n-tasks", n_tasks, "Number of test tasks (default eval.n_tasks)");
    ev->add_option("--tail-fraction", tail_fraction, "Tail fraction q (default eval.tail_fraction)");

    auto* bench = app.add_subcommand("benchmark", "Iterative inference on two-column CSV series");
    add_common(bench, true);
    bench->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
    bench->add_option("--train-csv", train_csv, "Series providing the context windows")->required();
    bench->add_option("--test-csv", test_csvs, "Test series (repeatable)")->required();
    bench->add_option("--out", out_dir, "Output directory")->required();
    bench->add_option("--m", bopt.context_len, "Context length")->capture_default_str();
    bench->add_option("--c", bopt.init_len, "Initial-condition length")->capture_default_str();
    bench->add_option("--chunk", bopt.chunk, "Chunk length")->capture_default_str();
    bench->add_option("--u-column", u_col, "Input column: index or header name")->capture_default_str();
    bench->add_option("--y-column", y_col, "Output column: index or header name")->capture_default_str();
    bench->add_option("--delimiter", delimiter, "Field delimiter")->capture_default_str();
    bench->add_flag("--no-standardize", no_standardize, "Feed raw values to the model");

    auto* inspect = app.add_subcommand("inspect", "Print a checkpoint's config, size and checksum");
    inspect->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::Success& e) {
        app.exit(e, out, err);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kExitInvalid;
    }

    try {
        if (gen->parsed()) {
            return cmd_generate(common, out_dir, n_tasks, first_index, input, args, out);
        }
        if (train->parsed()) {
            return cmd_train(common, out_dir, mode, resume, log_every, args, out);
        }
        if (ev->parsed()) {
            std::optional<std::uint64_t> s;
            if (seed_opt->count() > 0) {
                s = seed;
            }
            return cmd_eval(common, checkpoint, out_dir, input, n_tasks, tail_fraction, s, args, out);
        }
        if (bench->parsed()) {
            bopt.standardize = !no_standardize;
            return cmd_benchmark(common, checkpoint, out_dir, train_csv, test_csvs, bopt, u_col, y_col, delimiter,
                                 args, out);
        }
        return cmd_inspect(checkpoint, out);
    } catch (const DivergenceError& e) {
        err << "error: " << e.what() << "\n";
        if (!e.checkpoint().empty()) {
            err << "last finite checkpoint: " << e.checkpoint().string() << "\n";
        }
        return kExitDiverged;
    } catch (const NumericError& e) {
        err << "error: " << e.what() << "\n";
        return kExitDiverged;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitInvalid;
    }
}

}  // namespace ricl
