#pragma once

#include <string>

#include "mdsep/tensor.hpp"

namespace mdsep {

// DTB binary tensor container, bit-exact:
//   magic "DTB1" | u8 dtype (0 = f32, 1 = f64) | u8 rank |
//   rank x little-endian u64 dims | row-major little-endian IEEE-754 payload.

void dtb_save(const Tensor<float>& t, const std::string& path);
void dtb_save(const Tensor<double>& t, const std::string& path);

// Loads a DTB file of either dtype into the requested element type.
// Throws DataError on missing file, bad magic, or truncated payload.
Tensor<float> dtb_load_f32(const std::string& path);
Tensor<double> dtb_load_f64(const std::string& path);

// Dtype stored in the file (0 = f32, 1 = f64) without reading the payload.
int dtb_peek_dtype(const std::string& path);

}  // namespace mdsep
