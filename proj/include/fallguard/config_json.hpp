#pragma once
// Strict JSON section reading: every key must be known, every value well-typed.

#include <set>
#include <string>

#include "fallguard/error.hpp"
#include "json.hpp"

namespace fallguard {

using Json = nlohmann::json;

class JsonSection {
public:
    JsonSection(const Json& j, std::string name) : j_(j), name_(std::move(name)) {
        if (!j_.is_object()) throw UsageError("config section '" + name_ + "' must be an object");
    }

    template <class T>
    void read(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const Json::exception& e) {
            throw UsageError("config key '" + name_ + "." + key + "': " + e.what());
        }
    }

    bool has(const char* key) const { return j_.contains(key); }
    const Json& raw(const char* key) {
        seen_.insert(key);
        return j_.at(key);
    }

    /// Rejects any key that was never asked for.
    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw UsageError("unknown config key '" + name_ + "." + it.key() + "'");
    }

private:
    const Json& j_;
    std::string name_;
    std::set<std::string> seen_;
};

}  // namespace fallguard
