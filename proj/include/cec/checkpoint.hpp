#pragma once

#include <cstdint>
#include <string>

#include "cec/arch.hpp"

namespace cec {

// Checkpoint = three files sharing a prefix:
//   <prefix>.manifest  text: spec hash, then ordered entries with shapes and
//                      byte offsets into the blob
//   <prefix>.bin       raw little-endian float32 data, params then buffers
//   <prefix>.spec      the architecture document
// Round-trips are bit-exact.
void save_checkpoint(Model<float>& model, const std::string& prefix);

Model<float> load_checkpoint(const std::string& prefix);

// Fails with std::runtime_error when the stored spec hash differs from
// expected_hash.
Model<float> load_checkpoint_checked(const std::string& prefix,
                                     std::uint64_t expected_hash);

std::uint64_t checkpoint_spec_hash(const std::string& prefix);

}  // namespace cec
