// SPDX-License-Identifier: Apache-2.0
//
// Strict reader for JSON configuration objects: every key must be consumed,
// type mismatches are reported with the full key path.

#pragma once

#include <set>
#include <string>
#include <utility>

#include "json.hpp"
#include "ricl/common.hpp"

namespace ricl {

using json = nlohmann::json;

class StrictObject {
public:
    StrictObject(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
        if (!obj_.is_object()) {
            throw ConfigError(where() + ": expected an object");
        }
    }

    bool has(const std::string& key) const { return obj_.contains(key); }

    /// Reads `key` into `out` when present; leaves the default otherwise.
    template <typename T>
    void get(const std::string& key, T& out) {
        if (!obj_.contains(key)) {
            return;
        }
        seen_.insert(key);
        const json& v = obj_.at(key);
        try {
            check_kind<T>(v, key);
            out = v.get<T>();
        } catch (const json::exception&) {
            throw ConfigError(child(key) + ": expected " + type_name<T>());
        }
    }

    /// Returns a nested strict reader; the key is marked consumed.
    StrictObject object(const std::string& key) {
        seen_.insert(key);
        return StrictObject(obj_.at(key), child(key));
    }

    const json& raw(const std::string& key) {
        seen_.insert(key);
        return obj_.at(key);
    }

    /// Rejects any key that was never read.
    void finish() const {
        for (auto it = obj_.begin(); it != obj_.end(); ++it) {
            if (!seen_.count(it.key())) {
                throw ConfigError("unknown configuration key '" + child(it.key()) + "'");
            }
        }
    }

    std::string child(const std::string& key) const {
        return path_.empty() ? key : path_ + "." + key;
    }

    std::string where() const { return path_.empty() ? "<root>" : path_; }

private:
    template <typename T>
    void check_kind(const json& v, const std::string& key) const {
        bool ok = true;
        if constexpr (std::is_same_v<T, bool>) {
            ok = v.is_boolean();
        } else if constexpr (std::is_integral_v<T>) {
            ok = v.is_number_integer();
            if (ok && std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() &&
                v.get<long long>() < 0) {
                ok = false;
            }
        } else if constexpr (std::is_floating_point_v<T>) {
            ok = v.is_number();
        } else if constexpr (std::is_same_v<T, std::string>) {
            ok = v.is_string();
        }
        if (!ok) {
            throw ConfigError(child(key) + ": expected " + type_name<T>());
        }
    }

    template <typename T>
    static std::string type_name() {
        if constexpr (std::is_same_v<T, bool>) {
            return "a boolean";
        } else if constexpr (std::is_integral_v<T>) {
            return std::is_unsigned_v<T> ? "a non-negative integer" : "an integer";
        } else if constexpr (std::is_floating_point_v<T>) {
            return "a number";
        } else if constexpr (std::is_same_v<T, std::string>) {
            return "a string";
        } else {
            return "a value of the documented shape";
        }
    }

    const json& obj_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace ricl
