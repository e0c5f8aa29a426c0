#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bcm/types.hpp"

namespace bcm {

/// Error amplification of the inverse single-level 3D CDF 5/3 transform:
/// detail coefficients perturbed by up to q/2 move reconstructed values by
/// at most kLossyAmplification * q. The exact constant is half the largest
/// row sum of |inverse weights| over the detail bands, which is 7/2 for
/// this filter regardless of block size.
inline constexpr double kLossyAmplification = 3.5;

/// Single-level separable CDF 5/3 lifting on an ext^3 block (ext even),
/// in place, per axis x then y then z. Each 1D pass rearranges a line into
/// [approx | detail]; after all passes the (ext/2)^3 corner block holds the
/// approximation band. Symmetric boundary extension.
void dwt53_forward(std::span<double> block, int ext);
void dwt53_inverse(std::span<double> block, int ext);

/// Reversible integer lifting of the same filter on bit-reinterpreted
/// values; exact round trip for any input, used by the lossless mode.
void dwt53_forward_i64(std::span<int64_t> block, int ext);
void dwt53_inverse_i64(std::span<int64_t> block, int ext);

/// DEFLATE (zlib) wrappers.
std::vector<uint8_t> deflate_bytes(std::span<const uint8_t> raw, int level = 6);
std::vector<uint8_t> inflate_bytes(std::span<const uint8_t> compressed, size_t raw_size);

}  // namespace bcm
