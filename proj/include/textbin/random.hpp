#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "textbin/errors.hpp"

namespace textbin {

/// Seeded random source shared by initialization, batching, routing and
/// dropout. The engine state round-trips through text so training can resume
/// bit-exactly from a checkpoint.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    float uniform() { return std::uniform_real_distribution<float>(0.0f, 1.0f)(engine_); }

    float normal(float mean = 0.0f, float stddev = 1.0f) {
        return std::normal_distribution<float>(mean, stddev)(engine_);
    }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
    }

    bool bernoulli(double p) { return std::bernoulli_distribution(p)(engine_); }

    std::uint64_t next() { return engine_(); }

    std::string serialize() const {
        std::ostringstream out;
        out << engine_;
        return out.str();
    }

    static Rng deserialize(const std::string& text) {
        Rng rng;
        std::istringstream in(text);
        in >> rng.engine_;
        if (in.fail()) throw ConfigError("corrupt rng state");
        return rng;
    }

    bool operator==(const Rng& other) const { return engine_ == other.engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace textbin
