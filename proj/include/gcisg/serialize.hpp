#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "gcisg/tensor.hpp"

namespace gcisg {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

// All on-disk integers and floats are little-endian regardless of host order.
template <typename T>
void write_le(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
        std::reverse(buf, buf + sizeof(T));
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw IoError("unexpected end of file");
    if constexpr (std::endian::native == std::endian::big)
        std::reverse(buf, buf + sizeof(T));
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

inline void write_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char (&magic)[5], const std::string& what) {
    char buf[4];
    is.read(buf, 4);
    if (!is || std::memcmp(buf, magic, 4) != 0)
        throw IoError("not a " + what + " stream: bad magic");
}

}  // namespace detail

// ============================================================================
// GTSR: single-tensor stream
// magic "GTSR" | u32 version=1 | u32 rank | u64 extents[rank] | f64 payload
// ============================================================================

inline void write_tensor(std::ostream& os, const Tensor& t) {
    detail::write_magic(os, "GTSR");
    detail::write_le<std::uint32_t>(os, 1);
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) detail::write_le<std::uint64_t>(os, e);
    for (double v : t.data()) detail::write_le<double>(os, v);
    if (!os) throw IoError("tensor write failed");
}

inline Tensor read_tensor(std::istream& is) {
    detail::expect_magic(is, "GTSR", "tensor");
    const auto version = detail::read_le<std::uint32_t>(is);
    if (version != 1) throw IoError("unsupported tensor version " + std::to_string(version));
    const auto rank = detail::read_le<std::uint32_t>(is);
    if (rank > 8) throw IoError("implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(detail::read_le<std::uint64_t>(is));
    const std::size_t n = shape_numel(shape);
    if (n > (1ull << 32)) throw IoError("implausible tensor size");
    std::vector<double> data(n);
    for (auto& v : data) v = detail::read_le<double>(is);
    return Tensor::from_data(std::move(shape), std::move(data));
}

inline void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    write_tensor(os, t);
}

inline Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    return read_tensor(is);
}

// ============================================================================
// GCKP: named-tensor table
// magic "GCKP" | u32 version=1 | u32 count | count * (u32 len | name | GTSR)
// Entries are written in lexicographic name order so files are reproducible.
// ============================================================================

using TensorTable = std::map<std::string, Tensor>;

inline void write_checkpoint(std::ostream& os, const TensorTable& table) {
    detail::write_magic(os, "GCKP");
    detail::write_le<std::uint32_t>(os, 1);
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(table.size()));
    for (const auto& [name, tensor] : table) {
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_tensor(os, tensor);
    }
    if (!os) throw IoError("checkpoint write failed");
}

inline TensorTable read_checkpoint(std::istream& is) {
    detail::expect_magic(is, "GCKP", "checkpoint");
    const auto version = detail::read_le<std::uint32_t>(is);
    if (version != 1) throw IoError("unsupported checkpoint version " + std::to_string(version));
    const auto count = detail::read_le<std::uint32_t>(is);
    TensorTable table;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = detail::read_le<std::uint32_t>(is);
        if (len > 4096) throw IoError("implausible entry name length");
        std::string name(len, '\0');
        is.read(name.data(), len);
        if (!is) throw IoError("unexpected end of file in checkpoint entry name");
        table.emplace(std::move(name), read_tensor(is));
    }
    return table;
}

inline void save_checkpoint(const std::string& path, const TensorTable& table) {
    // write-then-rename so an interrupted save never leaves a torn file
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw IoError("cannot open for writing: " + tmp);
        write_checkpoint(os, table);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("cannot rename " + tmp + " to " + path);
}

inline TensorTable load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    return read_checkpoint(is);
}

}  // namespace gcisg
