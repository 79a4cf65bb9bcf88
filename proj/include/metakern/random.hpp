#pragma once

// Seed streams. Every random quantity is drawn from a std::mt19937_64 seeded by
// stream_seed(base, domain, index), so tasks, test tasks and runs never share state.

#include <cstdint>
#include <random>

namespace metakern {

enum class StreamDomain : std::uint64_t {
    TrainTask = 1,
    TestTask = 2,
    Run = 3,
    NetworkInit = 4,
    HeadInit = 5,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t stream_seed(std::uint64_t base, StreamDomain domain, std::uint64_t index) {
    std::uint64_t h = splitmix64(base);
    h = splitmix64(h ^ static_cast<std::uint64_t>(domain));
    return splitmix64(h ^ index);
}

inline std::mt19937_64 make_stream(std::uint64_t base, StreamDomain domain, std::uint64_t index) {
    return std::mt19937_64(stream_seed(base, domain, index));
}

}  // namespace metakern
