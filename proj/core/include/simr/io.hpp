#pragma once

// Small binary/text file helpers shared by the dataset and checkpoint code.
// Raw tensor files are flat little-endian f32 with no header.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace simr {

std::vector<char> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const char> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

/// Writes through a temporary sibling and renames, so a crash mid-write never
/// leaves a partial file at `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const char> bytes);

void write_f32(const std::filesystem::path& path, std::span<const float> values);
/// Throws FormatError when the file does not hold exactly `expected` floats.
std::vector<float> read_f32(const std::filesystem::path& path, std::size_t expected);

void ensure_directory(const std::filesystem::path& dir);

}  // namespace simr
