#pragma once

// Flat binary parameter file:
//   magic "CHMP" | version u32 | param count u64 |
//   per record: name length u32 | UTF-8 name | rank u32 | dims u64[rank] | f64 data
// All integers and floats little-endian.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "poselift/ndgrad.hpp"

namespace poselift::checkpoint {

constexpr std::uint32_t kVersion = 1;

struct NamedArray {
    std::string name;
    ndgrad::Shape shape;
    std::vector<double> data;
};

namespace detail {

template <typename T>
void write_raw(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

}  // namespace detail

inline void save(const std::string& path, const std::vector<NamedArray>& arrays) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
    os.write("CHMP", 4);
    detail::write_raw<std::uint32_t>(os, kVersion);
    detail::write_raw<std::uint64_t>(os, arrays.size());
    for (const auto& a : arrays) {
        detail::write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(a.name.size()));
        os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
        detail::write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(a.shape.size()));
        for (long d : a.shape) detail::write_raw<std::uint64_t>(os, static_cast<std::uint64_t>(d));
        if (static_cast<long>(a.data.size()) != ndgrad::numel(a.shape))
            throw std::invalid_argument("checkpoint: data/shape mismatch for " + a.name);
        os.write(reinterpret_cast<const char*>(a.data.data()),
                 static_cast<std::streamsize>(a.data.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline std::vector<NamedArray> load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "CHMP", 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const auto version = detail::read_raw<std::uint32_t>(is);
    if (version != kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const auto count = detail::read_raw<std::uint64_t>(is);
    std::vector<NamedArray> arrays;
    arrays.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        NamedArray a;
        const auto name_len = detail::read_raw<std::uint32_t>(is);
        a.name.resize(name_len);
        is.read(a.name.data(), name_len);
        const auto rank = detail::read_raw<std::uint32_t>(is);
        a.shape.resize(rank);
        for (auto& d : a.shape) d = static_cast<long>(detail::read_raw<std::uint64_t>(is));
        a.data.resize(static_cast<std::size_t>(ndgrad::numel(a.shape)));
        is.read(reinterpret_cast<char*>(a.data.data()),
                static_cast<std::streamsize>(a.data.size() * sizeof(double)));
        if (!is) throw std::runtime_error("checkpoint: truncated record in " + path);
        arrays.push_back(std::move(a));
    }
    return arrays;
}

}  // namespace poselift::checkpoint
