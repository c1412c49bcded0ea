#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace hmerge {

enum class ErrorKind {
    Format,         // malformed archive or index
    MissingShard,   // index lists a shard that does not exist
    Conflict,       // duplicate tensor name across shards
    Io,             // filesystem read/write failure
    DType,          // unsupported or mismatched element type
    Compatibility,  // key-set or shape mismatch between checkpoints
    Parameter,      // hyperparameter out of range
    Layout,         // head layout does not fit a tensor
    Recipe,         // recipe file syntax or content
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string & what) : std::runtime_error(what), kind_(kind) {}

    Error(ErrorKind kind, const std::string & what, std::uint64_t byte_offset)
        : std::runtime_error(what + " (at byte offset " + std::to_string(byte_offset) + ")"),
          kind_(kind), byte_offset_(byte_offset) {}

    ErrorKind kind() const noexcept { return kind_; }

    /// Offset into the archive where a format problem was detected, if known.
    std::optional<std::uint64_t> byte_offset() const noexcept { return byte_offset_; }

private:
    ErrorKind kind_;
    std::optional<std::uint64_t> byte_offset_;
};

} // namespace hmerge
