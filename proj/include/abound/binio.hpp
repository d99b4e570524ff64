#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace abound::binio {

// Little-endian float32 encoding of double data, independent of host order.
void append_f32(std::vector<std::uint8_t>& out, std::span<const double> values);
std::vector<double> decode_f32(std::span<const std::uint8_t> bytes);

void append_u64(std::vector<std::uint8_t>& out, std::uint64_t v);
std::uint64_t decode_u64(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace abound::binio
