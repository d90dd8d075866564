#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace uimm {

// Error taxonomy. Every throwing path uses one of these so callers (and the
// CLI) can map failures onto stable exit codes without string matching.
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

struct UsageError : std::invalid_argument {
    explicit UsageError(const std::string& msg) : std::invalid_argument(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

// --- logging -----------------------------------------------------------

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

inline LogLevel& log_level() {
    static LogLevel level = [] {
        const char* env = std::getenv("IMMUNO_LOG");
        if (!env) return LogLevel::Info;
        if (std::strcmp(env, "error") == 0) return LogLevel::Error;
        if (std::strcmp(env, "debug") == 0) return LogLevel::Debug;
        return LogLevel::Info;
    }();
    return level;
}

inline void log_line(LogLevel level, const std::string& msg) {
    if (static_cast<int>(level) > static_cast<int>(log_level())) return;
    const char* tag = level == LogLevel::Error ? "error" : level == LogLevel::Info ? "info" : "debug";
    std::fprintf(stderr, "[%s] %s\n", tag, msg.c_str());
}

inline void log_info(const std::string& msg) { log_line(LogLevel::Info, msg); }
inline void log_debug(const std::string& msg) { log_line(LogLevel::Debug, msg); }
inline void log_error(const std::string& msg) { log_line(LogLevel::Error, msg); }

// --- rng ---------------------------------------------------------------

// All stochastic code draws from an explicitly seeded engine; nothing reads
// global entropy, so identical seeds give bit-identical runs.
using Rng = std::mt19937_64;

template <class T>
T uniform(Rng& rng, T lo, T hi) {
    std::uniform_real_distribution<T> dist(lo, hi);
    return dist(rng);
}

template <class T>
T normal(Rng& rng, T mean = 0, T stddev = 1) {
    std::normal_distribution<T> dist(mean, stddev);
    return dist(rng);
}

inline uint64_t mix_seed(uint64_t base, uint64_t salt) {
    // splitmix64 finalizer; decorrelates derived streams.
    uint64_t z = base + 0x9e3779b97f4a7c15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// --- hashing -----------------------------------------------------------

struct Fnv1a64 {
    uint64_t state = 0xcbf29ce484222325ull;

    void update(const void* bytes, size_t n) {
        const unsigned char* p = static_cast<const unsigned char*>(bytes);
        for (size_t i = 0; i < n; ++i) {
            state ^= p[i];
            state *= 0x100000001b3ull;
        }
    }

    std::string hex() const {
        char buf[17];
        std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(state));
        return std::string(buf);
    }
};

}  // namespace uimm
