#pragma once

#include <string>
#include <vector>

#include "rfl/layers.hpp"

namespace rfl {

// Checkpoint file: one plain-text JSON index line
//   {"format":"rfl-checkpoint","version":1,"entries":[{"name","offset","length"},...]}
// followed by '\n' and the concatenated tensor blobs. Offsets are relative to
// the first byte after the newline.
void write_checkpoint(const std::string& path,
                      const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> read_checkpoint(const std::string& path);

}  // namespace rfl
