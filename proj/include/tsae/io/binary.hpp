#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tsae::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

void write_u8(std::ostream& os, std::uint8_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
void write_f64s(std::ostream& os, std::span<const double> v);
void write_string(std::ostream& os, std::string_view s);  // u32 length + bytes
void write_magic(std::ostream& os, std::string_view magic);

std::uint8_t read_u8(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
void read_f64s(std::istream& is, std::span<double> out);
std::string read_string(std::istream& is, std::size_t max_len = 1u << 26);
/// Throws "bad magic" when the next bytes differ from `magic`.
void expect_magic(std::istream& is, std::string_view magic, std::string_view what);

/// 64-bit FNV-1a, used for parameter and file checksums.
class Fnv1a {
public:
    void update(const void* data, std::size_t n);
    void update(std::string_view s) { update(s.data(), s.size()); }
    std::uint64_t digest() const noexcept { return h_; }

private:
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t v);
std::uint64_t file_checksum(const std::string& path);
std::string read_file(const std::string& path);
/// Writes via a temporary sibling and rename so readers never see partial files.
void write_file_atomic(const std::string& path, std::string_view bytes);

}  // namespace tsae::io
