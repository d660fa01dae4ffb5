#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace diablo::io {

/// Writes to `<path>.tmp` and renames over `path`, so readers never observe a partial file.
void write_file_atomic(const std::string& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::string& path, std::string_view text);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
std::string read_file_text(const std::string& path);

void append_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v);
std::uint64_t read_u64_le(std::span<const std::uint8_t> bytes, std::size_t offset);

}  // namespace diablo::io
