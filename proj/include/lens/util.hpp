#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace lens {

// ---- small string/file helpers shared across modules ----

std::vector<std::string> split(const std::string& s, char delim);
std::string join(std::span<const std::string> parts, const std::string& sep);

std::string read_file(const std::filesystem::path& p);
void write_file(const std::filesystem::path& p, const std::string& content);
std::vector<std::string> read_lines(const std::filesystem::path& p);

// FNV-1a over bytes; used for config hashes and stage input fingerprints.
uint64_t fnv1a(std::string_view bytes, uint64_t h = 0xcbf29ce484222325ULL);
std::string hex64(uint64_t v);

// base64 of raw little-endian doubles (checkpoint payloads).
std::string base64_encode(const void* data, size_t n_bytes);
std::vector<uint8_t> base64_decode(const std::string& text);
std::string encode_f64(std::span<const double> v);
std::vector<double> decode_f64(const std::string& text);

// Fixed-format float for CSV/SVG output: shortest round-trip form, locale free.
std::string fmt_double(double v);

}  // namespace lens
