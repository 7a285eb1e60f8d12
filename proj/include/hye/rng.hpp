#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "hye/errors.hpp"

namespace hye {

// Seeded random source. The full state (engine plus the normal
// distribution's cached variate) round-trips through serialize/restore, which
// is what makes checkpoint-and-resume bit-identical.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }

    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
    }

    // Gamma(shape, 1) variate.
    double gamma(double shape) { return std::gamma_distribution<double>(shape, 1.0)(engine_); }

    std::uint64_t next_u64() { return engine_(); }

    // Independent child stream; advances this stream by one draw.
    Rng split() { return Rng(engine_() ^ 0x9E3779B97F4A7C15ull); }

    std::mt19937_64& engine() { return engine_; }

    std::string serialize() const {
        std::ostringstream os;
        os << engine_ << ' ' << normal_ << ' ' << uniform_;
        return os.str();
    }

    static Rng restore(const std::string& state) {
        Rng rng;
        std::istringstream is(state);
        is >> rng.engine_ >> rng.normal_ >> rng.uniform_;
        if (!is) throw FormatError("corrupt random-state string");
        return rng;
    }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

} // namespace hye
