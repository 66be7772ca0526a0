#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace poselift::rng {

// splitmix64 finalizer; good avalanche for seed derivation.
inline std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t hash_name(std::string_view name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Every random stream in the project is derived from one base seed plus a
// stream name and up to two indices, so reruns are reproducible and
// per-sample / per-hypothesis streams are independent of iteration order.
inline std::uint64_t derive(std::uint64_t base, std::string_view stream,
                            std::uint64_t i = 0, std::uint64_t j = 0) {
    std::uint64_t s = mix(base ^ hash_name(stream));
    s = mix(s ^ (0x9e3779b97f4a7c15ULL * (i + 1)));
    s = mix(s ^ (0xc2b2ae3d27d4eb4fULL * (j + 1)));
    return s;
}

inline std::mt19937_64 engine(std::uint64_t base, std::string_view stream,
                              std::uint64_t i = 0, std::uint64_t j = 0) {
    return std::mt19937_64(derive(base, stream, i, j));
}

inline std::vector<double> gaussian(std::mt19937_64& eng, std::size_t n, double stddev = 1.0) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> out(n);
    for (auto& v : out) v = dist(eng);
    return out;
}

}  // namespace poselift::rng
