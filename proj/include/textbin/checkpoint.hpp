#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "textbin/nn.hpp"

namespace textbin {

/// One named float array as stored on disk.
struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

/// In-memory image of a TBCK file.
///
/// Layout (all integers u32 little-endian, floats IEEE-754 binary32 LE):
///   "TBCK" version
///   nparams   { name_len name rank dims... data... }
///   nmoments  { same record shape, names "adam.m/<param>" and "adam.v/<param>" }
///   nmeta     { key_len key value_len value }
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::vector<NamedArray> params;
    std::vector<NamedArray> moments;
    std::map<std::string, std::string> meta;

    const NamedArray* find_param(const std::string& name) const {
        for (const auto& p : params)
            if (p.name == name) return &p;
        return nullptr;
    }

    const std::string& meta_at(const std::string& key) const {
        auto it = meta.find(key);
        if (it == meta.end()) throw ConfigError("checkpoint is missing metadata key: " + key);
        return it->second;
    }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_string(std::string& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out += s;
}

inline void put_array(std::string& out, const NamedArray& a) {
    if (shape_numel(a.shape) != a.data.size()) throw DimensionError("checkpoint array " + a.name + " has inconsistent shape");
    put_string(out, a.name);
    put_u32(out, static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : a.data) put_u32(out, std::bit_cast<std::uint32_t>(v));
}

class Reader {
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    NamedArray array() {
        NamedArray a;
        a.name = str();
        const std::uint32_t rank = u32();
        if (rank == 0 || rank > 8) throw IoError("checkpoint: bad rank for " + a.name);
        for (std::uint32_t i = 0; i < rank; ++i) a.shape.push_back(u32());
        const std::size_t n = shape_numel(a.shape);
        need(4 * n);
        a.data.resize(n);
        for (auto& v : a.data) v = std::bit_cast<float>(u32());
        return a;
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw IoError("checkpoint: truncated file");
    }

    const std::string& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
    std::string out = "TBCK";
    detail::put_u32(out, Checkpoint::kVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(ck.params.size()));
    for (const auto& p : ck.params) detail::put_array(out, p);
    detail::put_u32(out, static_cast<std::uint32_t>(ck.moments.size()));
    for (const auto& m : ck.moments) detail::put_array(out, m);
    detail::put_u32(out, static_cast<std::uint32_t>(ck.meta.size()));
    for (const auto& [k, v] : ck.meta) {
        detail::put_string(out, k);
        detail::put_string(out, v);
    }
    return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
    if (bytes.size() < 8 || bytes.compare(0, 4, "TBCK") != 0) throw IoError("not a TBCK checkpoint");
    const std::string body = bytes.substr(4);
    detail::Reader in(body);
    if (in.u32() != Checkpoint::kVersion) throw IoError("unsupported checkpoint version");
    Checkpoint ck;
    for (std::uint32_t n = in.u32(), i = 0; i < n; ++i) ck.params.push_back(in.array());
    for (std::uint32_t n = in.u32(), i = 0; i < n; ++i) ck.moments.push_back(in.array());
    for (std::uint32_t n = in.u32(), i = 0; i < n; ++i) {
        std::string k = in.str();
        ck.meta[k] = in.str();
    }
    if (!in.done()) throw IoError("checkpoint: trailing bytes");
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    const std::string bytes = serialize_checkpoint(ck);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

/// Copies parameters (and optimizer moments, when given) into a checkpoint.
inline void capture(Checkpoint& ck, const ParameterSet& params, const AdamW* opt = nullptr) {
    for (const auto& p : params.items()) ck.params.push_back({p.name, p.tensor.shape(), p.tensor.values()});
    if (!opt) return;
    for (const auto& p : params.items()) {
        auto it = opt->moments().find(p.name);
        if (it == opt->moments().end()) continue;
        ck.moments.push_back({"adam.m/" + p.name, p.tensor.shape(), it->second.m});
        ck.moments.push_back({"adam.v/" + p.name, p.tensor.shape(), it->second.v});
    }
}

/// Writes checkpoint values back into an already-constructed parameter set.
/// Every parameter must be present with a matching shape.
inline void restore(const Checkpoint& ck, ParameterSet& params, AdamW* opt = nullptr) {
    for (auto& p : params.items()) {
        const NamedArray* a = ck.find_param(p.name);
        if (!a) throw ConfigError("checkpoint has no parameter " + p.name);
        if (a->shape != p.tensor.shape()) {
            throw ConfigError("checkpoint shape " + shape_str(a->shape) + " for " + p.name + " does not match " +
                              shape_str(p.tensor.shape()));
        }
        std::copy(a->data.begin(), a->data.end(), p.tensor.data().begin());
        p.tensor.zero_grad();
    }
    if (ck.params.size() != params.size()) throw ConfigError("checkpoint parameter count does not match model");
    if (!opt) return;
    opt->moments().clear();
    for (const auto& m : ck.moments) {
        const bool first = m.name.rfind("adam.m/", 0) == 0;
        if (!first && m.name.rfind("adam.v/", 0) != 0) throw ConfigError("unknown moment record " + m.name);
        const std::string name = m.name.substr(7);
        if (!params.contains(name)) throw ConfigError("moment for unknown parameter " + name);
        auto& slot = opt->moments()[name];
        (first ? slot.m : slot.v) = m.data;
    }
}

}  // namespace textbin
