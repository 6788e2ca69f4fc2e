#ifndef NEXTGUARD_DETAIL_BINARY_IO_HPP
#define NEXTGUARD_DETAIL_BINARY_IO_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nextguard/error.hpp>

namespace nextguard::detail {

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; big-endian hosts need byte swapping");

// Appends little-endian scalars to a byte buffer.
class ByteWriter {
public:
    void bytes(std::string_view raw) { buf_.append(raw); }

    template <typename T>
    void scalar(T value)
    {
        char tmp[sizeof(T)];
        std::memcpy(tmp, &value, sizeof(T));
        buf_.append(tmp, sizeof(T));
    }

    void floats(std::span<const float> values)
    {
        buf_.append(reinterpret_cast<const char *>(values.data()), values.size_bytes());
    }

    std::string &buffer() noexcept { return buf_; }
    std::string take() noexcept { return std::move(buf_); }

private:
    std::string buf_;
};

// Bounds-checked cursor over a byte buffer; running past the end is a Malformed error.
class ByteReader {
public:
    ByteReader(std::string_view data, std::string context)
        : data_(data), context_(std::move(context))
    {
    }

    std::string_view bytes(std::size_t n)
    {
        ensure(n);
        auto out = data_.substr(pos_, n);
        pos_ += n;
        return out;
    }

    template <typename T>
    T scalar()
    {
        ensure(sizeof(T));
        T value;
        std::memcpy(&value, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return value;
    }

    std::vector<float> floats(std::size_t n)
    {
        if (n > remaining() / sizeof(float)) {
            fail(ErrorCode::Malformed, context_ + ": truncated payload");
        }
        std::vector<float> out(n);
        std::memcpy(out.data(), data_.data() + pos_, n * sizeof(float));
        pos_ += n * sizeof(float);
        return out;
    }

    std::size_t remaining() const noexcept { return data_.size() - pos_; }

private:
    void ensure(std::size_t n) const
    {
        if (n > remaining()) {
            fail(ErrorCode::Malformed, context_ + ": truncated header");
        }
    }

    std::string_view data_;
    std::size_t pos_ = 0;
    std::string context_;
};

inline std::string read_file(const std::filesystem::path &path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(ErrorCode::Io, "cannot open " + path.string());
    }
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return data;
}

inline void write_file(const std::filesystem::path &path, std::string_view data)
{
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        fail(ErrorCode::Io, "cannot write " + path.string());
    }
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) {
        fail(ErrorCode::Io, "short write to " + path.string());
    }
}

// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(std::string_view data) noexcept
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v)
{
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

} // namespace nextguard::detail

#endif
