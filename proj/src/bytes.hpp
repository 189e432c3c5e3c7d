#pragma once

// Little-endian byte encoding shared by the binary file formats.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <string>

#include "mtseg/domain.hpp"

namespace mtseg::bytes {

class Writer {
public:
    void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) {
        for (int b = 0; b < 4; ++b) out_.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
    }
    void u64(std::uint64_t v) {
        for (int b = 0; b < 8; ++b) out_.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
    }
    void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void raw(const std::string& s) { out_ += s; }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        out_ += s;
    }
    void reserve(std::size_t n) { out_.reserve(n); }

    [[nodiscard]] const std::string& data() const { return out_; }
    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

// Reads from a borrowed buffer; every accessor throws FormatError (or the
// error type given at construction) when the buffer runs out.
template <typename ErrorT = FormatError>
class Reader {
public:
    Reader(const std::string& bytes, std::string what, std::size_t end = std::string::npos)
        : bytes_(bytes), what_(std::move(what)), end_(std::min(end, bytes.size())) {}

    void need(std::size_t n) const {
        if (pos_ + n > end_) throw ErrorT(what_ + ": truncated data");
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(bytes_[pos_++]);
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int b = 0; b < 4; ++b) {
            v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * b);
        }
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int b = 0; b < 8; ++b) {
            v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * b);
        }
        return v;
    }
    std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string raw(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::string str() { return raw(u32()); }

    [[nodiscard]] std::size_t remaining() const { return end_ - pos_; }
    [[nodiscard]] const std::string& what() const { return what_; }

private:
    const std::string& bytes_;
    std::string what_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

}  // namespace mtseg::bytes
