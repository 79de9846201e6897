#pragma once

// Small helpers for strict JSON configs.

#include <algorithm>
#include <initializer_list>
#include <string>
#include <string_view>

#include "json.hpp"
#include "pulseforge/error.hpp"

namespace pulseforge::config {

using json = nlohmann::json;

inline void require_object(const json& j, std::string_view what)
{
    if (!j.is_object())
        throw ConfigError(std::string(what) + ": expected a JSON object");
}

/// Rejects any key outside `allowed`, naming it.
inline void check_keys(const json& j, std::initializer_list<std::string_view> allowed, std::string_view what)
{
    require_object(j, what);
    for (const auto& [k, v] : j.items())
        if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
            throw ConfigError(std::string(what) + ": unknown key '" + k + "'");
}

template <class T>
void read(const json& j, std::string_view key, T& out, std::string_view what)
{
    const auto it = j.find(key);
    if (it == j.end())
        return;
    try {
        out = it->template get<T>();
    } catch (const json::exception&) {
        throw ConfigError(std::string(what) + "." + std::string(key) + ": wrong type (got " +
                          it->type_name() + ")");
    }
}

} // namespace pulseforge::config
