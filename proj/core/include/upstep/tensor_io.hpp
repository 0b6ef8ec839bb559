#pragma once

#include <cstdint>
#include <filesystem>

#include "upstep/tensor.hpp"

namespace upstep {

// On-disk tensor container:
//   magic 'U' 'P' 'T' 'N', u8 version (1), u8 dtype (0 = f32, 1 = f64),
//   u8 ndim, u8 reserved (0), ndim x u64 little-endian dims,
//   then the row-major payload.
enum class Dtype : std::uint8_t { F32 = 0, F64 = 1 };

void save_tensor(const std::filesystem::path& path, const Tensor& t, Dtype dtype = Dtype::F64);

// Loads into a float64 tensor regardless of stored dtype. Malformed files
// (bad magic, unknown version/dtype, truncated or oversized payload) raise
// FormatError naming the path.
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace upstep
