#pragma once

#include <initializer_list>
#include <string>
#include <vector>

#include <json.hpp>

#include "csrd/errors.hpp"
#include "csrd/grid.hpp"

namespace csrd {

/// Collects every violated field before throwing, so a bad config reports
/// all of its problems at once.
class ConfigIssues {
public:
    void add(std::string msg) { issues_.push_back(std::move(msg)); }
    bool empty() const noexcept { return issues_.empty(); }
    void throw_if_any(const std::string& context) const {
        if (issues_.empty()) return;
        std::string msg = context + ":";
        for (const auto& i : issues_) msg += "\n  - " + i;
        throw ConfigError(msg);
    }

private:
    std::vector<std::string> issues_;
};

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                                const std::string& section, ConfigIssues& issues) {
    if (!j.is_object()) {
        issues.add(section + " must be a JSON object");
        return;
    }
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) issues.add("unknown key '" + section + "." + key + "'");
    }
}

/// Reads `key` into `out` when present, recording a type error otherwise.
template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out, const std::string& section,
                ConfigIssues& issues) {
    if (!j.is_object() || !j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        issues.add("field '" + section + "." + key + "' has the wrong type");
    }
}

inline nlohmann::json vec_json(const Vec3i& v) { return {v[0], v[1], v[2]}; }

} // namespace csrd
