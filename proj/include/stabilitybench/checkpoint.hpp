#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stabilitybench/learner.hpp"

namespace sb {

// Versioned binary checkpoint: magic "SBCK", format version, learner kind
// tag, little-endian 64-bit floats, trailing content checksum. Round-trips
// bitwise, including RNG stream positions.
std::vector<std::uint8_t> serialize_state(const LearnerState& state);
LearnerState restore_state(const std::vector<std::uint8_t>& bytes);

void write_checkpoint(const std::string& path, const LearnerState& state);
LearnerState read_checkpoint(const std::string& path);

}  // namespace sb
