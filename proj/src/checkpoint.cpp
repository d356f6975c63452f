// SPDX-License-Identifier: Apache-2.0

#include "ricl/checkpoint.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include <openssl/evp.h>

namespace ricl {
namespace {

constexpr std::array<char, 8> kMagic{'R', 'I', 'C', 'L', 'C', 'K', 'P', 'T'};
constexpr std::size_t kHeaderBytes = 16;

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
    }
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
    }
    return v;
}

void put_f32(std::string& out, float f) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffU));
    }
}

float get_f32(const unsigned char* p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) {
        bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    }
    return std::bit_cast<float>(bits);
}

std::string shape_str(const json& shape) {
    return shape.dump();
}

std::vector<float> decode(const std::string& payload, const json& entry, const std::string& name) {
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto count = entry.at("count").get<std::uint64_t>();
    if (offset + count * 4 > payload.size()) {
        throw ChecksumError("checkpoint array '" + name + "' extends past the end of the payload");
    }
    std::vector<float> out(count);
    const auto* base = reinterpret_cast<const unsigned char*>(payload.data()) + offset;
    for (std::uint64_t i = 0; i < count; ++i) {
        out[i] = get_f32(base + 4 * i);
        if (!std::isfinite(out[i])) {
            throw CheckpointError("checkpoint array '" + name + "' contains a non-finite value");
        }
    }
    return out;
}

}  // namespace

const AuxArray* Checkpoint::find_aux(const std::string& name) const {
    for (const auto& a : aux) {
        if (a.name == name) {
            return &a;
        }
    }
    return nullptr;
}

std::string sha256_hex(std::span<const unsigned char> bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw std::runtime_error("sha256 digest failed");
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(kHex[md[i] >> 4]);
        out.push_back(kHex[md[i] & 0xf]);
    }
    return out;
}

std::string save_checkpoint(const ModelParams<float>& params, const std::filesystem::path& path,
                            std::span<const AuxArray> aux, const json& state) {
    std::string payload;
    payload.reserve(4 * params.values.size());
    json arrays = json::array();
    for (const auto& a : params.layout->arrays()) {
        arrays.push_back({{"name", a.name}, {"shape", a.shape}, {"offset", payload.size()}, {"count", a.size}});
        for (std::size_t i = 0; i < a.size; ++i) {
            put_f32(payload, params.values[a.offset + i]);
        }
    }
    json aux_arrays = json::array();
    for (const auto& a : aux) {
        aux_arrays.push_back({{"name", a.name}, {"offset", payload.size()}, {"count", a.data.size()}});
        for (float v : a.data) {
            put_f32(payload, v);
        }
    }
    const std::string checksum =
        "sha256:" + sha256_hex({reinterpret_cast<const unsigned char*>(payload.data()), payload.size()});
    const json manifest{
        {"format", "ricl-checkpoint"},
        {"format_version", kCheckpointFormatVersion},
        {"config", to_json(params.config)},
        {"arrays", arrays},
        {"aux_arrays", aux_arrays},
        {"payload_bytes", payload.size()},
        {"checksum", checksum},
        {"state", state},
    };
    const std::string text = manifest.dump();

    std::string blob(kMagic.begin(), kMagic.end());
    put_u64(blob, text.size());
    blob += text;
    blob += payload;

    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot open checkpoint for writing: " + tmp.string());
        }
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        if (!out) {
            throw IoError("failed writing checkpoint: " + tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        throw IoError("cannot move checkpoint into place: " + path.string() + ": " + ec.message());
    }
    return checksum;
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open checkpoint: " + path.string());
    }
    const std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (blob.size() < kMagic.size() || std::memcmp(blob.data(), kMagic.data(), kMagic.size()) != 0) {
        throw CheckpointError(path.string() + ": not a checkpoint file (bad magic)");
    }
    if (blob.size() < kHeaderBytes) {
        throw ChecksumError(path.string() + ": truncated header");
    }
    const std::uint64_t mlen = get_u64(blob, 8);
    if (blob.size() - kHeaderBytes < mlen) {
        throw ChecksumError(path.string() + ": truncated manifest");
    }
    json manifest;
    try {
        manifest = json::parse(blob.substr(kHeaderBytes, mlen));
    } catch (const json::exception& e) {
        throw CheckpointError(path.string() + ": unreadable manifest: " + e.what());
    }
    const std::string payload = blob.substr(kHeaderBytes + mlen);

    try {
        const int version = manifest.at("format_version").get<int>();
        if (version != kCheckpointFormatVersion) {
            throw VersionError(path.string() + ": checkpoint format version " + std::to_string(version) +
                               " is not supported (expected " + std::to_string(kCheckpointFormatVersion) + ")");
        }
        Checkpoint ck;
        ck.params = zero_params<float>(model_config_from_json(manifest.at("config"), "config"));

        const json& arrays = manifest.at("arrays");
        const auto& expected = ck.params.layout->arrays();
        if (!arrays.is_array() || arrays.size() != expected.size()) {
            throw ShapeError("", path.string() + ": manifest lists " + std::to_string(arrays.size()) +
                                     " arrays, config requires " + std::to_string(expected.size()));
        }
        for (std::size_t i = 0; i < expected.size(); ++i) {
            const json& entry = arrays[i];
            const std::string name = entry.at("name").get<std::string>();
            const json want(expected[i].shape);
            if (name != expected[i].name) {
                throw ShapeError(name, path.string() + ": array #" + std::to_string(i) + " is '" + name +
                                           "', config requires '" + expected[i].name + "'");
            }
            if (entry.at("shape") != want || entry.at("count").get<std::uint64_t>() != expected[i].size) {
                throw ShapeError(name, path.string() + ": array '" + name + "' has shape " +
                                           shape_str(entry.at("shape")) + ", config requires " + shape_str(want));
            }
        }

        const auto declared = manifest.at("payload_bytes").get<std::uint64_t>();
        if (payload.size() != declared) {
            throw ChecksumError(path.string() + ": payload is " + std::to_string(payload.size()) +
                                " bytes, manifest declares " + std::to_string(declared) + " (truncated or padded)");
        }
        ck.checksum = manifest.at("checksum").get<std::string>();
        const std::string actual =
            "sha256:" + sha256_hex({reinterpret_cast<const unsigned char*>(payload.data()), payload.size()});
        if (actual != ck.checksum) {
            throw ChecksumError(path.string() + ": checksum mismatch (manifest " + ck.checksum + ", payload " +
                                actual + ")");
        }

        for (std::size_t i = 0; i < expected.size(); ++i) {
            const auto values = decode(payload, arrays[i], expected[i].name);
            std::copy(values.begin(), values.end(), ck.params.values.begin() + static_cast<std::ptrdiff_t>(expected[i].offset));
        }
        if (manifest.contains("aux_arrays")) {
            for (const json& entry : manifest.at("aux_arrays")) {
                const std::string name = entry.at("name").get<std::string>();
                ck.aux.push_back(AuxArray{name, decode(payload, entry, name)});
            }
        }
        if (manifest.contains("state")) {
            ck.state = manifest.at("state");
        }
        return ck;
    } catch (const json::exception& e) {
        throw CheckpointError(path.string() + ": malformed manifest: " + e.what());
    } catch (const ConfigError& e) {
        throw CheckpointError(path.string() + ": invalid model config in manifest: " + e.what());
    }
}

ModelParams<float> load_checkpoint(const std::filesystem::path& path) {
    return read_checkpoint(path).params;
}

}  // namespace ricl
