#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "hye/errors.hpp"

namespace hye {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    while (size > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
        crc = ::crc32(crc, data, chunk);
        data += chunk;
        size -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

// Little-endian append-only byte buffer.
class ByteWriter {
public:
    template <class T>
    void put(T value) {
        static_assert(std::is_trivially_copyable_v<T>);
        const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
        bytes_.insert(bytes_.end(), p, p + sizeof(T));
    }

    void put_bytes(const void* data, std::size_t size) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        bytes_.insert(bytes_.end(), p, p + size);
    }

    void put_string16(const std::string& s) {
        if (s.size() > 0xFFFF) throw FormatError("string too long for a 16-bit length prefix");
        put<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
        put_bytes(s.data(), s.size());
    }

    void put_floats(const std::vector<float>& v) { put_bytes(v.data(), v.size() * sizeof(float)); }

    // Appends CRC32 of everything written so far.
    void seal() { put<std::uint32_t>(crc32_of(bytes_.data(), bytes_.size())); }

    std::size_t size() const { return bytes_.size(); }
    std::vector<std::uint8_t>& bytes() { return bytes_; }

private:
    std::vector<std::uint8_t> bytes_;
};

// Bounds-checked reader; running past the end raises TruncatedError.
class ByteReader {
public:
    ByteReader(const std::uint8_t* data, std::size_t size, std::string what)
        : data_(data), size_(size), what_(std::move(what)) {}

    template <class T>
    T get() {
        T value;
        std::memcpy(&value, take(sizeof(T)), sizeof(T));
        return value;
    }

    std::string get_string16() {
        const auto n = get<std::uint16_t>();
        const auto* p = take(n);
        return std::string(reinterpret_cast<const char*>(p), n);
    }

    std::vector<float> get_floats(std::size_t count) {
        if (count > (size_ - pos_) / sizeof(float)) throw TruncatedError(what_ + ": truncated payload");
        std::vector<float> v(count);
        std::memcpy(v.data(), take(count * sizeof(float)), count * sizeof(float));
        return v;
    }

    const std::uint8_t* take(std::size_t n) {
        if (n > size_ - pos_) throw TruncatedError(what_ + ": unexpected end of data");
        const auto* p = data_ + pos_;
        pos_ += n;
        return p;
    }

    std::size_t position() const { return pos_; }
    std::size_t remaining() const { return size_ - pos_; }

private:
    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
    std::string what_;
};

// Verifies and strips a trailing CRC32. Files too short to hold one count as
// truncated.
inline std::size_t verify_crc_trailer(const std::vector<std::uint8_t>& bytes, const std::string& what) {
    if (bytes.size() < sizeof(std::uint32_t)) throw TruncatedError(what + ": file too short");
    const std::size_t body = bytes.size() - sizeof(std::uint32_t);
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + body, sizeof(stored));
    if (crc32_of(bytes.data(), body) != stored) throw ChecksumError(what + ": checksum mismatch");
    return body;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed for '" + path.string() + "'");
    return bytes;
}

/// Writes to a sibling temporary file and renames it over `path`, so readers
/// never observe a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t size) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
        if (ec) throw IoError("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
        out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
        out.flush();
        if (!out) throw IoError("write failed for '" + tmp.string() + "'");
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw IoError("cannot move '" + tmp.string() + "' to '" + path.string() + "'");
    }
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
    write_file_atomic(path, text.data(), text.size());
}

} // namespace hye
