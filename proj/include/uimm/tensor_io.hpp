#pragma once

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tensor.hpp"

namespace uimm {

// Binary tensor format: magic "UIT1", u32 rank, rank x u32 dims, then
// little-endian f32 payload in row-major order. Checkpoints wrap a JSON
// manifest plus a sequence of these records. Doubles are narrowed to f32 on
// save and widened on load; on-disk payloads are always f32.

namespace ioutil {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!os) throw IoError("write failed after " + std::to_string(n) + " bytes");
}

inline void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    write_bytes(os, b, 4);
}

struct Reader {
    std::istream& is;
    std::string context;
    uint64_t offset = 0;

    void read(void* p, size_t n) {
        is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<size_t>(is.gcount()) != n) {
            throw IoError(context + ": truncated read of " + std::to_string(n) + " bytes at byte offset " +
                          std::to_string(offset));
        }
        offset += n;
    }

    uint32_t read_u32() {
        unsigned char b[4];
        read(b, 4);
        return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) | (static_cast<uint32_t>(b[2]) << 16) |
               (static_cast<uint32_t>(b[3]) << 24);
    }
};

}  // namespace ioutil

template <class T>
void save_uit1(std::ostream& os, const TensorT<T>& t) {
    ioutil::write_bytes(os, "UIT1", 4);
    ioutil::write_u32(os, static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) ioutil::write_u32(os, static_cast<uint32_t>(t.dim(i)));
    const int64_t n = t.numel();
    std::vector<float> buf(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) buf[static_cast<size_t>(i)] = static_cast<float>(t.data()[i]);
    ioutil::write_bytes(os, buf.data(), buf.size() * sizeof(float));
}

template <class T = float>
TensorT<T> load_uit1(ioutil::Reader& r) {
    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, "UIT1", 4) != 0) {
        throw IoError(r.context + ": bad tensor magic '" + std::string(magic, 4) + "' at byte offset " +
                      std::to_string(r.offset - 4));
    }
    const uint32_t rank = r.read_u32();
    if (rank < 1 || rank > 8) {
        throw IoError(r.context + ": implausible tensor rank " + std::to_string(rank));
    }
    std::vector<int> shape(rank);
    int64_t n = 1;
    for (uint32_t i = 0; i < rank; ++i) {
        const uint32_t d = r.read_u32();
        if (d < 1 || d > (1u << 24)) throw IoError(r.context + ": implausible dimension " + std::to_string(d));
        shape[i] = static_cast<int>(d);
        n *= d;
        if (n > (int64_t(1) << 28)) throw IoError(r.context + ": tensor too large");
    }
    std::vector<float> buf(static_cast<size_t>(n));
    r.read(buf.data(), buf.size() * sizeof(float));
    std::vector<T> data(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) data[static_cast<size_t>(i)] = static_cast<T>(buf[static_cast<size_t>(i)]);
    return TensorT<T>::from_data(std::move(shape), std::move(data));
}

template <class T>
void save_uit1_file(const std::string& path, const TensorT<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    save_uit1(os, t);
}

template <class T = float>
TensorT<T> load_uit1_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    ioutil::Reader r{is, path};
    return load_uit1<T>(r);
}

// --- checkpoint container -------------------------------------------------
// Layout: magic "UIM1", u32 manifest length, manifest JSON bytes, then one
// UIT1 record per name in manifest["names"] order.

template <class T>
void save_checkpoint(const std::string& path, nlohmann::json manifest,
                     const std::vector<std::pair<std::string, TensorT<T>>>& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    nlohmann::json names = nlohmann::json::array();
    for (const auto& [name, t] : tensors) names.push_back(name);
    manifest["names"] = names;
    const std::string mtxt = manifest.dump();
    ioutil::write_bytes(os, "UIM1", 4);
    ioutil::write_u32(os, static_cast<uint32_t>(mtxt.size()));
    ioutil::write_bytes(os, mtxt.data(), mtxt.size());
    for (const auto& [name, t] : tensors) save_uit1(os, t);
}

template <class T = float>
std::pair<nlohmann::json, std::vector<std::pair<std::string, TensorT<T>>>> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    ioutil::Reader r{is, path};
    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, "UIM1", 4) != 0) {
        throw IoError(path + ": bad checkpoint magic '" + std::string(magic, 4) + "'");
    }
    const uint32_t mlen = r.read_u32();
    if (mlen > (1u << 24)) throw IoError(path + ": implausible manifest length " + std::to_string(mlen));
    std::string mtxt(mlen, '\0');
    r.read(mtxt.data(), mlen);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mtxt);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": manifest parse failure: " + e.what());
    }
    if (!manifest.contains("names") || !manifest["names"].is_array()) {
        throw IoError(path + ": manifest missing names array");
    }
    std::vector<std::pair<std::string, TensorT<T>>> tensors;
    for (const auto& name : manifest["names"]) {
        tensors.emplace_back(name.get<std::string>(), load_uit1<T>(r));
    }
    return {manifest, tensors};
}

}  // namespace uimm
