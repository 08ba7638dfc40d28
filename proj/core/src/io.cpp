#include "simr/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "simr/error.hpp"

namespace simr {

static_assert(std::endian::native == std::endian::little, "raw tensor files assume a little-endian host");

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

std::string read_text(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return {bytes.begin(), bytes.end()};
}

void write_file(const std::filesystem::path& path, std::span<const char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span<const char>(text.data(), text.size()));
}

void write_file_atomic(const std::filesystem::path& path, std::span<const char> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  write_file(tmp, bytes);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void write_f32(const std::filesystem::path& path, std::span<const float> values) {
  write_file(path, std::span<const char>(reinterpret_cast<const char*>(values.data()), values.size_bytes()));
}

std::vector<float> read_f32(const std::filesystem::path& path, std::size_t expected) {
  auto bytes = read_file(path);
  if (bytes.size() != expected * sizeof(float)) {
    throw FormatError(path.filename().string() + ": expected " + std::to_string(expected * sizeof(float)) +
                          " bytes, found " + std::to_string(bytes.size()),
                      std::min<std::uint64_t>(bytes.size(), expected * sizeof(float)));
  }
  std::vector<float> values(expected);
  std::memcpy(values.data(), bytes.data(), bytes.size());
  return values;
}

void ensure_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw IoError("cannot create directory " + dir.string() + (ec ? ": " + ec.message() : ""));
  }
}

}  // namespace simr
