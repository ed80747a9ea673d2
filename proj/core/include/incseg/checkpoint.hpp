#pragma once

#include <memory>
#include <string>

#include "incseg/model.hpp"
#include "incseg/protocol.hpp"

namespace incseg {

struct Checkpoint {
  int step = 0;
  protocol::ClassPartition partition;
  std::unique_ptr<Model> model;
};

// Versioned binary container: magic, version, step, class partition, model
// configuration and registry, named weight blobs, crc32 trailer. Round-trips
// doubles bit-exactly.
void write_checkpoint(const std::string& path, const Model& model, int step,
                      const protocol::ClassPartition& partition);

// Throws std::runtime_error with a byte offset on malformed input; a checksum
// mismatch is rejected before any field is trusted.
Checkpoint read_checkpoint(const std::string& path);

}  // namespace incseg
