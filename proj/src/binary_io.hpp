#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>

namespace snnconv::detail {

template <typename T>
T byteswap_value(T value) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) {
        std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    }
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

template <typename T>
void write_le(std::ostream& out, T value) {
    if constexpr (std::endian::native == std::endian::big) {
        value = byteswap_value(value);
    }
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
bool read_le(std::istream& in, T& value) {
    if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
        return false;
    }
    if constexpr (std::endian::native == std::endian::big) {
        value = byteswap_value(value);
    }
    return true;
}

inline void write_floats_le(std::ostream& out, std::span<const float> values) {
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(values.data()),
                  static_cast<std::streamsize>(values.size_bytes()));
    } else {
        for (float v : values) write_le(out, v);
    }
}

inline bool read_floats_le(std::istream& in, std::span<float> values) {
    if (!in.read(reinterpret_cast<char*>(values.data()),
                 static_cast<std::streamsize>(values.size_bytes()))) {
        return false;
    }
    if constexpr (std::endian::native == std::endian::big) {
        for (float& v : values) v = byteswap_value(v);
    }
    return true;
}

} // namespace snnconv::detail
