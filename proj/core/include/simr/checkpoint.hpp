#pragma once

// Named-tensor checkpoints.
//
//   "CARZCKPT" | u32 version | u32 count |
//   count x ( u16 name_len | name | u8 ndim | ndim x u64 dim | f32 payload )
//
// All integers and floats little-endian.

#include <filesystem>
#include <span>
#include <vector>

#include "simr/params.hpp"

namespace simr {

inline constexpr std::uint32_t checkpoint_version = 1;

std::vector<char> encode_checkpoint(const ParamStore<float>& params);
/// Throws FormatError (with byte offset) on bad magic, version or truncation.
std::vector<NamedTensor<float>> decode_checkpoint(std::span<const char> bytes);

/// Atomic write: the previous file survives a failed save.
void save_checkpoint(const ParamStore<float>& params, const std::filesystem::path& path);
std::vector<NamedTensor<float>> read_checkpoint(const std::filesystem::path& path);
/// Copies every tensor into `params`. Names and shapes must match exactly.
void load_checkpoint(ParamStore<float>& params, const std::filesystem::path& path);

}  // namespace simr
