#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "common.hpp"

namespace uimm {

// Key=value run-configuration files. One `key = value` pair per line, '#'
// starts a full-line comment, keys use kebab-case (underscores are accepted
// and normalized), values may optionally be wrapped in double quotes to keep
// leading/trailing whitespace. There are no sections and no inline comments —
// a '#' inside a value is part of the value.

inline std::string trim_ws(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

inline std::string normalize_config_key(const std::string& key) {
    std::string out = key;
    for (auto& c : out) {
        if (c == '_') c = '-';
    }
    return out;
}

struct ConfigMap {
    std::vector<std::pair<std::string, std::string>> entries;  // file order

    bool has(const std::string& key) const {
        for (const auto& kv : entries) {
            if (kv.first == key) return true;
        }
        return false;
    }

    const std::string& get(const std::string& key) const {
        for (const auto& kv : entries) {
            if (kv.first == key) return kv.second;
        }
        throw ConfigError("config: no value for key '" + key + "'");
    }
};

inline ConfigMap parse_config_text(const std::string& text, const std::string& origin = "<config>") {
    ConfigMap cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const std::string stripped = trim_ws(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        const auto where = origin + ":" + std::to_string(lineno);
        const size_t eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(where + ": expected 'key = value', got '" + stripped + "'");
        }
        std::string key = normalize_config_key(trim_ws(stripped.substr(0, eq)));
        if (key.empty()) throw ConfigError(where + ": empty key");
        for (char c : key) {
            const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-';
            if (!ok) throw ConfigError(where + ": invalid character '" + std::string(1, c) + "' in key '" + key + "'");
        }
        std::string value = trim_ws(stripped.substr(eq + 1));
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
            value = value.substr(1, value.size() - 2);
        }
        if (cfg.has(key)) throw ConfigError(where + ": duplicate key '" + key + "'");
        cfg.entries.emplace_back(std::move(key), std::move(value));
    }
    return cfg;
}

inline ConfigMap load_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("config: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), path);
}

// -- typed value parsing (shared by config files and CLI flag strings) -------

inline long long config_to_int(const std::string& value, const std::string& key) {
    try {
        size_t pos = 0;
        const long long v = std::stoll(trim_ws(value), &pos);
        if (pos != trim_ws(value).size()) throw std::invalid_argument("trailing junk");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: expected an integer for '" + key + "', got '" + value + "'");
    }
}

inline double config_to_double(const std::string& value, const std::string& key) {
    try {
        size_t pos = 0;
        const double v = std::stod(trim_ws(value), &pos);
        if (pos != trim_ws(value).size()) throw std::invalid_argument("trailing junk");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: expected a number for '" + key + "', got '" + value + "'");
    }
}

inline uint64_t config_to_u64(const std::string& value, const std::string& key) {
    try {
        size_t pos = 0;
        const unsigned long long v = std::stoull(trim_ws(value), &pos);
        if (pos != trim_ws(value).size()) throw std::invalid_argument("trailing junk");
        return static_cast<uint64_t>(v);
    } catch (const std::exception&) {
        throw ConfigError("config: expected a non-negative integer for '" + key + "', got '" + value + "'");
    }
}

inline bool config_to_bool(const std::string& value, const std::string& key) {
    std::string v = trim_ws(value);
    for (auto& c : v) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw ConfigError("config: expected a boolean for '" + key + "', got '" + value + "'");
}

template <class T, class Fn>
std::vector<T> config_to_list(const std::string& value, const std::string& key, Fn parse_one) {
    std::vector<T> out;
    const std::string v = trim_ws(value);
    if (v.empty()) return out;
    size_t start = 0;
    while (start <= v.size()) {
        const size_t comma = v.find(',', start);
        const std::string piece = v.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        out.push_back(parse_one(trim_ws(piece), key));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

inline std::vector<int> config_to_int_list(const std::string& value, const std::string& key) {
    return config_to_list<int>(value, key, [](const std::string& p, const std::string& k) {
        const long long v = config_to_int(p, k);
        if (v < INT32_MIN || v > INT32_MAX) throw ConfigError("config: value out of range for '" + k + "'");
        return static_cast<int>(v);
    });
}

inline std::vector<uint64_t> config_to_u64_list(const std::string& value, const std::string& key) {
    return config_to_list<uint64_t>(value, key,
                                    [](const std::string& p, const std::string& k) { return config_to_u64(p, k); });
}

}  // namespace uimm
