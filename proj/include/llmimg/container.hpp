#pragma once

// LLMIMG container: the on-disk image format, bit-exact.
//
//   offset 0   magic "LLMIMG01" (8 bytes)
//   offset 8   u32 little-endian header length H
//   offset 12  UTF-8 JSON header, H bytes:
//              {version, v, m, d_estimate, tolerance, source_id,
//               created_at, prompts_digest, space:"clr"}
//   offset 12+H raw IEEE-754 binary64 little-endian values, column-major,
//              m*v of them
//
// prompts_digest is FNV-1a 64 over each prompt followed by a NUL byte,
// rendered as 16 lowercase hex digits. The file stores the digest instead of
// the prompts, so images loaded from a container have an empty prompt list.

#include <string>

#include "llmimg/image.hpp"

namespace llmimg {

inline constexpr char kImageMagic[8] = {'L', 'L', 'M', 'I',
                                        'M', 'G', '0', '1'};
inline constexpr uint32_t kImageVersion = 1;

std::string prompts_digest_hex(const std::vector<std::string>& prompts);

void write_image(const std::string& path, const ModelImage& image);

// Reads matrix and header; prompts stay empty (only their digest is stored).
// The spectrum is recomputed at the stored tolerance and verified against
// the stored d_estimate.
ModelImage read_image(const std::string& path);

}  // namespace llmimg
