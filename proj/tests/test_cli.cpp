// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <sstream>

#include "doctest.h"
#include "ricl/checkpoint.hpp"
#include "ricl/cli.hpp"

using namespace ricl;
namespace fs = std::filesystem;

namespace {

struct CliRun {
    int code = 0;
    std::string out;
    std::string err;
};

CliRun cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "ricl_unit" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

fs::path write_json(const fs::path& p, const json& j) {
    std::ofstream(p) << j.dump(2);
    return p;
}

json small_config() {
    return json::parse(R"({
      "seed": 1,
      "stream": {"context_len": 30, "query_len": 16, "init_len": 4, "order_range": [1, 3]},
      "model": {"d_model": 8, "n_heads": 2, "n_encoder_layers": 1, "n_decoder_layers": 1, "d_ff": 16},
      "train": {"max_iter": 24, "stage1_iters": 12, "batch_size": 4, "robust_batch_size": 10,
                "validation_every": 8, "validation_tasks": 6, "checkpoint_every": 10, "learning_rate": 0.001},
      "eval": {"n_tasks": 20}
    })");
}

std::vector<std::string> list_dir(const fs::path& dir) {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir)) {
        names.push_back(e.path().filename().string());
    }
    std::sort(names.begin(), names.end());
    return names;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("minimal config applies every default and the manifest lists them") {
    const auto b = parse_config_json(json{{"seed", 1}});
    CHECK(b.seed == 1);
    CHECK(b.stream.context_len == 400);
    CHECK(b.stream.query_len == 130);
    CHECK(b.stream.init_len == 30);
    CHECK(b.model.d_model == 64);
    CHECK(b.train.tail_fraction == 0.4);
    CHECK(b.train.robust_batch_size == 80);
    CHECK(b.train.seed == 1);
    CHECK(b.stream.seed == derive_seed(1, "train-stream"));
    const json j = b.to_json();
    for (const char* section : {"stream", "model", "train", "eval"}) {
        CHECK(j.contains(section));
    }
    CHECK(j.at("train").contains("learning_rate"));
    CHECK(j.at("stream").contains("noise_std"));
    CHECK(j.at("model").contains("d_ff"));
    // The echoed config parses back to the same bundle.
    CHECK(parse_config_json(j).to_json() == j);

    const auto dir = fresh_dir("cli_minimal");
    const auto cfg = write_json(dir / "c.json", json{{"seed", 1}});
    ConfigBundle small = parse_config_json(small_config());
    const auto out = dir / "gen";
    const auto r = cli({"generate", "--config", cfg.string(), "--out", out.string(), "--n-tasks", "2"});
    REQUIRE(r.code == kExitOk);
    const auto manifest = json::parse(slurp(out / kManifestFile));
    CHECK(manifest.at("config") == b.to_json());
    CHECK(manifest.at("status") == "ok");
    CHECK(manifest.at("artifact_version") == kArtifactVersion);
    CHECK(manifest.contains("seeds"));
    CHECK(manifest.contains("host"));
    (void)small;
}

TEST_CASE("misspelled key is rejected with its path") {
    json j = small_config();
    j["train"]["tail_fractoin"] = 0.3;
    CHECK_THROWS_WITH_AS(parse_config_json(j), "unknown configuration key 'train.tail_fractoin'", ConfigError);
    json top = small_config();
    top["sede"] = 1;
    CHECK_THROWS_AS(parse_config_json(top), ConfigError);
    json typed = small_config();
    typed["train"]["batch_size"] = "many";
    CHECK_THROWS_AS(parse_config_json(typed), ConfigError);

    const auto dir = fresh_dir("cli_misspelled");
    const auto r = cli({"train", "--config", write_json(dir / "c.json", j).string(), "--out", (dir / "o").string()});
    CHECK(r.code == kExitInvalid);
    CHECK(r.err.find("train.tail_fractoin") != std::string::npos);
}

TEST_CASE("tail fraction 0 with b=32 is rejected") {
    json j = small_config();
    j["train"]["tail_fraction"] = 0.0;
    j["train"]["robust_batch_size"] = 32;
    CHECK_THROWS_AS(parse_config_json(j), ConfigError);
    j["train"]["tail_fraction"] = 0.02;  // floor(0.64) = 0
    CHECK_THROWS_AS(parse_config_json(j), ConfigError);
    j["train"]["tail_fraction"] = 1.0 / 32.0;
    CHECK_NOTHROW(parse_config_json(j));
}

TEST_CASE("sections may not set their own seed") {
    json j = small_config();
    j["stream"]["seed"] = 4;
    CHECK_THROWS_AS(parse_config_json(j), ConfigError);
    json t = small_config();
    t["train"]["seed"] = 4;
    CHECK_THROWS_AS(parse_config_json(t), ConfigError);
}

TEST_CASE("config lengths must fit the model") {
    json j = small_config();
    j["model"]["max_context_len"] = 20;
    CHECK_THROWS_AS(parse_config_json(j), ConfigError);
}

TEST_CASE("train twice gives identical logs and the manifest reproduces the run") {
    const auto dir = fresh_dir("cli_train");
    const auto cfg = write_json(dir / "c.json", small_config());
    const auto a = cli({"train", "--config", cfg.string(), "--out", (dir / "a").string(), "--log-every", "0"});
    REQUIRE(a.code == kExitOk);
    const auto b = cli({"train", "--config", cfg.string(), "--out", (dir / "b").string(), "--threads", "2"});
    REQUIRE(b.code == kExitOk);
    CHECK(slurp(dir / "a" / kTrainLogFile) == slurp(dir / "b" / kTrainLogFile));
    CHECK(slurp(dir / "a" / kFinalCheckpoint) == slurp(dir / "b" / kFinalCheckpoint));
    CHECK(a.out.find("validation 8") != std::string::npos);

    const auto c = cli({"train", "--config", (dir / "a" / kManifestFile).string(), "--out", (dir / "c").string()});
    REQUIRE(c.code == kExitOk);
    CHECK(slurp(dir / "c" / kTrainLogFile) == slurp(dir / "a" / kTrainLogFile));

    const auto manifest = json::parse(slurp(dir / "a" / kManifestFile));
    CHECK(manifest.at("status") == "ok");
    CHECK(manifest.contains("started_at"));
    CHECK(manifest.contains("finished_at"));
    CHECK(manifest.at("lineage").get<std::string>().size() == 64);
    CHECK(list_dir(dir / "a") == std::vector<std::string>{"final.ckpt", "last.ckpt", "manifest.json",
                                                           "timing.jsonl", "train_log.jsonl"});
}

TEST_CASE("train resume and mode override") {
    const auto dir = fresh_dir("cli_resume");
    json j = small_config();
    const auto cfg = write_json(dir / "c.json", j);
    REQUIRE(cli({"train", "--config", cfg.string(), "--out", (dir / "full").string()}).code == kExitOk);
    const auto r = cli({"train", "--config", cfg.string(), "--out", (dir / "resumed").string(), "--resume",
                        (dir / "full" / kLastCheckpoint).string()});
    REQUIRE(r.code == kExitOk);
    CHECK(slurp(dir / "resumed" / kTrainLogFile) == slurp(dir / "full" / kTrainLogFile));
    const auto std_run = cli({"train", "--config", cfg.string(), "--out", (dir / "std").string(), "--mode", "standard"});
    REQUIRE(std_run.code == kExitOk);
    CHECK(slurp(dir / "std" / kTrainLogFile).find("\"robust\"") == std::string::npos);
    CHECK(cli({"train", "--config", cfg.string(), "--out", (dir / "bad").string(), "--mode", "cvar"}).code ==
          kExitInvalid);
}

TEST_CASE("exit codes") {
    const auto dir = fresh_dir("cli_exit");
    const auto missing = (dir / "nope.ckpt").string();
    const auto r = cli({"eval", "--checkpoint", missing, "--out", (dir / "e").string()});
    CHECK(r.code == kExitInvalid);
    CHECK(r.err.find(missing) != std::string::npos);
    CHECK(cli({"frobnicate"}).code == kExitInvalid);
    CHECK(cli({}).code == kExitInvalid);
    CHECK(cli({"train", "--out", (dir / "t").string(), "--config", (dir / "absent.json").string()}).code ==
          kExitInvalid);

    json j = small_config();
    j["train"]["learning_rate"] = 1e30;
    j["train"]["weight_decay"] = 0.0;
    const auto cfg = write_json(dir / "diverge.json", j);
    const auto d = cli({"train", "--config", cfg.string(), "--out", (dir / "d").string()});
    CHECK(d.code == kExitDiverged);
    CHECK(d.err.find(kLastFiniteCheckpoint) != std::string::npos);
    CHECK(fs::exists(dir / "d" / kLastFiniteCheckpoint));
    CHECK(json::parse(slurp(dir / "d" / kManifestFile)).at("status") == "diverged");
}

TEST_CASE("help documents every subcommand flag") {
    const auto top = cli({"--help"});
    CHECK(top.code == kExitOk);
    for (const char* sub : {"generate", "train", "eval", "benchmark", "inspect"}) {
        CHECK(top.out.find(sub) != std::string::npos);
    }
    const auto bench = cli({"benchmark", "--help"});
    CHECK(bench.code == kExitOk);
    for (const char* flag : {"--checkpoint", "--train-csv", "--test-csv", "--m", "--c", "--chunk", "--out"}) {
        CHECK(bench.out.find(flag) != std::string::npos);
    }
    const auto ev = cli({"eval", "--help"});
    for (const char* flag : {"--input-class", "--n-tasks", "--tail-fraction", "--seed"}) {
        CHECK(ev.out.find(flag) != std::string::npos);
    }
    CHECK(cli({"--version"}).out.find(kArtifactVersion) != std::string::npos);
}

TEST_CASE("inspect, eval and benchmark on a trained checkpoint") {
    const auto dir = fresh_dir("cli_pipeline");
    const auto cfg = write_json(dir / "c.json", small_config());
    REQUIRE(cli({"train", "--config", cfg.string(), "--out", (dir / "run").string()}).code == kExitOk);
    const auto ckpt = (dir / "run" / kFinalCheckpoint).string();

    const auto ins = cli({"inspect", "--checkpoint", ckpt});
    REQUIRE(ins.code == kExitOk);
    const ModelConfig mc = parse_config_json(small_config()).model;
    CHECK(ins.out.find("param_count " + std::to_string(param_count(mc))) != std::string::npos);
    CHECK(ins.out.find("checksum sha256:") != std::string::npos);
    CHECK(ins.out.find("config {") != std::string::npos);
    CHECK(ins.out.find("iteration 24") != std::string::npos);

    const auto e1 = cli({"eval", "--checkpoint", ckpt, "--out", (dir / "e1").string(), "--n-tasks", "12"});
    REQUIRE(e1.code == kExitOk);
    const auto e2 = cli({"eval", "--checkpoint", ckpt, "--out", (dir / "e2").string(), "--n-tasks", "12", "--threads",
                         "3"});
    REQUIRE(e2.code == kExitOk);
    CHECK(slurp(dir / "e1" / "per_task.csv") == slurp(dir / "e2" / "per_task.csv"));
    CHECK(slurp(dir / "e1" / "report.json") == slurp(dir / "e2" / "report.json"));
    const auto rep = json::parse(slurp(dir / "e1" / "report.json"));
    CHECK(rep.at("n_tasks") == 12);
    CHECK(rep.at("tail_mean_rmse").get<double>() >= rep.at("mean_rmse").get<double>());
    const auto e3 = cli({"eval", "--checkpoint", ckpt, "--out", (dir / "e3").string(), "--n-tasks", "12",
                         "--input-class", "rbs", "--seed", "9"});
    REQUIRE(e3.code == kExitOk);
    CHECK(slurp(dir / "e3" / "per_task.csv") != slurp(dir / "e1" / "per_task.csv"));
    CHECK(cli({"eval", "--checkpoint", ckpt, "--out", (dir / "e4").string(), "--input-class", "square"}).code ==
          kExitInvalid);
    CHECK(cli({"eval", "--checkpoint", ckpt, "--out", (dir / "e5").string(), "--tail-fraction", "0"}).code ==
          kExitInvalid);

    std::string train_csv = "u,y\n", test_csv = "u,y\n";
    for (int k = 0; k < 120; ++k) {
        train_csv += std::to_string(std::sin(0.1 * k)) + "," + std::to_string(std::cos(0.1 * k)) + "\n";
    }
    for (int k = 0; k < 50; ++k) {
        test_csv += std::to_string(std::sin(0.2 * k)) + "," + std::to_string(std::cos(0.2 * k)) + "\n";
    }
    std::ofstream(dir / "train.csv") << train_csv;
    std::ofstream(dir / "test.csv") << test_csv;
    const auto bench = cli({"benchmark", "--checkpoint", ckpt, "--train-csv", (dir / "train.csv").string(),
                            "--test-csv", (dir / "test.csv").string(), "--test-csv", (dir / "test.csv").string(),
                            "--out", (dir / "bench").string(), "--m", "30", "--c", "4", "--chunk", "12",
                            "--u-column", "u", "--y-column", "y"});
    REQUIRE(bench.code == kExitOk);
    CHECK(bench.out.find("contexts 4") != std::string::npos);
    const auto per_step = slurp(dir / "bench" / "per_step_rmse.csv");
    CHECK(std::count(per_step.begin(), per_step.end(), '\n') == 1 + 46);
    CHECK(list_dir(dir / "bench") == std::vector<std::string>{"benchmark.json", "manifest.json", "per_step_rmse.csv"});
}

TEST_CASE("generate writes CSV rows and a sidecar inside --out only") {
    const auto dir = fresh_dir("cli_generate");
    const auto cfg = write_json(dir / "c.json", small_config());
    const auto out = dir / "tasks";
    const auto r = cli({"generate", "--config", cfg.string(), "--out", out.string(), "--n-tasks", "3",
                        "--first-index", "5", "--input-class", "multisine"});
    REQUIRE(r.code == kExitOk);
    CHECK(list_dir(dir) == std::vector<std::string>{"c.json", "tasks"});
    CHECK(list_dir(out) == std::vector<std::string>{"manifest.json", "tasks.csv", "tasks.json"});
    const auto csv = slurp(out / "tasks.csv");
    CHECK(csv.rfind("task_id,segment,k,u,y\n5,context,0,", 0) == 0);
    // 3 tasks x (30 context + 16 query) rows plus the header.
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 3 * 46);
    const auto sidecar = json::parse(slurp(out / "tasks.json"));
    CHECK(sidecar.at("excitation").at("kind") == "multisine");
    CHECK(sidecar.at("first_index") == 5);

    // The same indices from a larger range are identical rows.
    const auto wide = dir / "wide";
    REQUIRE(cli({"generate", "--config", cfg.string(), "--out", wide.string(), "--n-tasks", "8", "--input-class",
                 "multisine"})
                .code == kExitOk);
    const auto all = slurp(wide / "tasks.csv");
    const auto pos = all.find("\n5,context,0,");
    REQUIRE(pos != std::string::npos);
    const std::size_t header = std::string("task_id,segment,k,u,y\n").size();
    CHECK(all.substr(pos + 1, csv.size() - header) == csv.substr(header));
}

TEST_CASE("run manifest round trip through parse_config_json") {
    const auto b = parse_config_json(small_config());
    RunManifest m("train", {"ricl", "train"}, b.to_json(), b.seeds());
    const auto dir = fresh_dir("cli_manifest");
    m.begin(dir);
    CHECK(json::parse(slurp(dir / kManifestFile)).at("status") == "running");
    m.complete("ok");
    const auto back = parse_config_json(json::parse(slurp(dir / kManifestFile)));
    CHECK(back.to_json() == b.to_json());
    CHECK(b.seeds().at("init") == derive_seed(1, "init"));
}

}  // TEST_SUITE

TEST_SUITE("cli") {

TEST_CASE("schema file lists exactly the keys and defaults of the config") {
    const json schema = json::parse(slurp(fs::path(RICL_SOURCE_DIR) / "docs" / "config.schema.json"));
    const json defaults = ConfigBundle{}.to_json();
    const auto& props = schema.at("properties");
    CHECK(props.size() == defaults.size());
    for (auto it = defaults.begin(); it != defaults.end(); ++it) {
        REQUIRE_MESSAGE(props.contains(it.key()), it.key());
        if (!it.value().is_object()) {
            CHECK(props.at(it.key()).at("default") == it.value());
            continue;
        }
        const auto& section = props.at(it.key()).at("properties");
        CHECK_MESSAGE(section.size() == it.value().size(), it.key());
        for (auto kv = it.value().begin(); kv != it.value().end(); ++kv) {
            const std::string where = it.key() + "." + kv.key();
            REQUIRE_MESSAGE(section.contains(kv.key()), where);
            if (kv.value().is_object()) {
                for (auto e = kv.value().begin(); e != kv.value().end(); ++e) {
                    CHECK(section.at(kv.key()).at("properties").at(e.key()).at("default") == e.value());
                }
            } else {
                CHECK_MESSAGE(section.at(kv.key()).at("default") == kv.value(), where);
            }
        }
    }
}

}  // TEST_SUITE
