// SPDX-License-Identifier: Apache-2.0
//
// Configuration bundle, run manifest and the `ricl` command-line driver.
//
// A configuration file is one JSON object:
//   { "seed": 1, "threads": 1, "stream": {...}, "model": {...}, "train": {...}, "eval": {...} }
// Every section is optional and unknown keys are rejected. All randomness
// flows from "seed": the training stream, initialization, validation and test
// streams use derive_seed(seed, "<purpose>") with the purposes listed in
// kSeedPurposes.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "ricl/json_util.hpp"
#include "ricl/metamodel.hpp"
#include "ricl/sysgen.hpp"
#include "ricl/trainer.hpp"

namespace ricl {

inline constexpr const char* kArtifactVersion = "1.0.0";
inline constexpr int kManifestVersion = 1;
inline constexpr const char* kManifestFile = "manifest.json";

enum ExitCode : int { kExitOk = 0, kExitInvalid = 1, kExitDiverged = 2 };

struct EvalConfig {
    int n_tasks = 2000;
    double tail_fraction = 0.4;
    int histogram_bins = 100;

    void validate() const;
};

struct ConfigBundle {
    std::uint64_t seed = 0;
    int threads = 1;
    /// `stream.seed` is always derive_seed(seed, "train-stream").
    TaskStreamConfig stream;
    ModelConfig model;
    /// `train.seed` is always `seed`.
    TrainConfig train;
    EvalConfig eval;

    /// Fills derived seeds and validates every section.
    void finalize();
    /// Every effective value, suitable for parse_config_json.
    json to_json() const;
    /// Seeds of every random stream, by purpose.
    json seeds() const;
};

/// Strict parse; an object carrying "manifest_version" is read through its
/// "config" member so that a run manifest can be fed back in.
ConfigBundle parse_config_json(const json& j);
ConfigBundle parse_config(const std::filesystem::path& path);

/// Creates `out_dir`/manifest.json with status "running"; complete() rewrites
/// it once with the end time and result and it is not touched afterwards.
class RunManifest {
public:
    RunManifest(std::string command, std::vector<std::string> argv, json config, json seeds);

    void set(const std::string& key, json value) { extra_[key] = std::move(value); }
    void begin(const std::filesystem::path& out_dir);
    void complete(const std::string& status);

    json to_json() const;

private:
    std::string command_;
    std::vector<std::string> argv_;
    json config_;
    json seeds_;
    json extra_ = json::object();
    std::string started_;
    std::string finished_;
    std::string status_ = "running";
    std::filesystem::path dir_;
};

/// Runs the CLI with `args` (program name excluded). Never throws; returns an
/// ExitCode and writes diagnostics to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ricl
