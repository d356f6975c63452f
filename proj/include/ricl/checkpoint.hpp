// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file format (version 1):
//
//   bytes 0..7    magic "RICLCKPT"
//   bytes 8..15   manifest length L, little-endian uint64
//   next L bytes  UTF-8 JSON manifest
//   remainder     payload: little-endian IEEE-754 float32 values
//
// The manifest holds the model config, the ordered array table (name, shape,
// byte offset into the payload, element count), auxiliary arrays (optimizer
// moments), a free-form "state" object, and "sha256:<hex>" of the payload.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ricl/json_util.hpp"
#include "ricl/metamodel.hpp"

namespace ricl {

inline constexpr int kCheckpointFormatVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Payload does not match the recorded checksum, or the file is truncated.
class ChecksumError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

class VersionError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

/// A manifest array disagrees with the shape implied by the config.
class ShapeError : public CheckpointError {
public:
    ShapeError(std::string array, const std::string& what) : CheckpointError(what), array_(std::move(array)) {}
    const std::string& array() const { return array_; }

private:
    std::string array_;
};

struct AuxArray {
    std::string name;
    std::vector<float> data;
};

struct Checkpoint {
    ModelParams<float> params;
    std::vector<AuxArray> aux;
    json state = json::object();
    std::string checksum;  // "sha256:<hex>"

    const AuxArray* find_aux(const std::string& name) const;
};

std::string sha256_hex(std::span<const unsigned char> bytes);

/// Writes atomically (temp file + rename). Returns the payload checksum.
std::string save_checkpoint(const ModelParams<float>& params, const std::filesystem::path& path,
                            std::span<const AuxArray> aux = {}, const json& state = json::object());

Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Model-only convenience wrapper around read_checkpoint.
ModelParams<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace ricl
