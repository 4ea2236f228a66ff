#pragma once

// Flat `key = value` configuration files. `#` starts a comment; blank lines are
// ignored. Later assignments override earlier ones.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "uplm/errors.hpp"

namespace uplm {

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string{s.substr(b, e - b + 1)};
}

inline std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        out.push_back(std::string{s.substr(start, pos - start)});
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

}  // namespace detail

class KeyValueConfig {
public:
    static KeyValueConfig parse(std::string_view text, std::string_view origin = "<string>") {
        KeyValueConfig cfg;
        std::istringstream in{std::string{text}};
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            const auto body = detail::trim(line);
            if (body.empty()) continue;
            const auto eq = body.find('=');
            if (eq == std::string::npos) {
                throw ConfigError(std::string{origin} + ":" + std::to_string(lineno) +
                                  ": expected 'key = value'");
            }
            auto key = detail::trim(std::string_view{body}.substr(0, eq));
            if (key.empty()) {
                throw ConfigError(std::string{origin} + ":" + std::to_string(lineno) + ": empty key");
            }
            cfg.set(std::move(key), detail::trim(std::string_view{body}.substr(eq + 1)));
        }
        return cfg;
    }

    static KeyValueConfig load(const std::string& path) {
        std::ifstream in{path, std::ios::binary};
        if (!in) throw ConfigError("cannot open config file " + path);
        std::ostringstream os;
        os << in.rdbuf();
        return parse(os.str(), path);
    }

    void set(std::string key, std::string value) { values_[std::move(key)] = std::move(value); }
    void merge(const KeyValueConfig& other) {
        for (const auto& [k, v] : other.values_) values_[k] = v;
    }

    [[nodiscard]] bool has(const std::string& key) const { return values_.count(key) != 0; }

    /// `key = value` lines in key order; parse() reads it back.
    [[nodiscard]] std::string to_text() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
        return out;
    }

    [[nodiscard]] std::string get_string(const std::string& key, const std::string& fallback) const {
        const auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    [[nodiscard]] std::string require_string(const std::string& key) const {
        const auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("missing required config key '" + key + "'");
        return it->second;
    }

    [[nodiscard]] double get_double(const std::string& key, double fallback) const {
        const auto it = values_.find(key);
        return it == values_.end() ? fallback : to_double(key, it->second);
    }

    [[nodiscard]] std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
        const auto it = values_.find(key);
        return it == values_.end() ? fallback : to_int(key, it->second);
    }

    [[nodiscard]] bool get_bool(const std::string& key, bool fallback) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        const auto& v = it->second;
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError("config key '" + key + "': expected a boolean, got '" + v + "'");
    }

    [[nodiscard]] std::vector<std::string> get_list(const std::string& key) const {
        std::vector<std::string> out;
        const auto it = values_.find(key);
        if (it == values_.end() || it->second.empty()) return out;
        for (auto& item : detail::split(it->second, ',')) {
            auto t = detail::trim(item);
            if (!t.empty()) out.push_back(std::move(t));
        }
        return out;
    }

    [[nodiscard]] std::vector<double> get_double_list(const std::string& key) const {
        std::vector<double> out;
        for (const auto& item : get_list(key)) out.push_back(to_double(key, item));
        return out;
    }

    [[nodiscard]] const std::map<std::string, std::string>& entries() const { return values_; }

    static double to_double(const std::string& key, const std::string& text) {
        try {
            std::size_t used = 0;
            const double v = std::stod(text, &used);
            if (used != text.size()) throw std::invalid_argument(text);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': expected a number, got '" + text + "'");
        }
    }

    static std::int64_t to_int(const std::string& key, const std::string& text) {
        std::int64_t v = 0;
        const auto* end = text.data() + text.size();
        const auto [ptr, ec] = std::from_chars(text.data(), end, v);
        if (ec != std::errc{} || ptr != end) {
            throw ConfigError("config key '" + key + "': expected an integer, got '" + text + "'");
        }
        return v;
    }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace uplm
