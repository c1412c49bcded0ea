#pragma once

#include "hmerge/dtype.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace hmerge {

using Shape = std::vector<std::uint64_t>;

std::uint64_t shape_numel(const Shape & shape) noexcept;
std::string shape_to_string(const Shape & shape);

/// One named weight tensor stored row-major in its archive dtype.
struct TensorRecord {
    std::string name;
    DType dtype = DType::F32;
    Shape shape;
    std::vector<std::byte> data;

    std::uint64_t numel() const noexcept { return shape_numel(shape); }

    bool operator==(const TensorRecord &) const = default;
};

/// Builds a record of the requested dtype from F32 values, rounding to nearest even when narrowing.
TensorRecord encode_tensor(std::string name, Shape shape, std::span<const float> values, DType dtype);

/// Element values widened to F32. BF16 and F16 widen exactly.
std::vector<float> decode_values(const TensorRecord & t);

/// Same as decode_values but writes into a caller buffer of numel() elements.
void decode_values_into(const TensorRecord & t, std::span<float> out);

TensorRecord to_f32(const TensorRecord & t);
TensorRecord to_bf16(const TensorRecord & t);

struct Checkpoint {
    std::map<std::string, TensorRecord> tensors;
    std::map<std::string, std::string> metadata;

    /// Inserts a tensor, throwing a conflict error if the name already exists.
    void add(TensorRecord t);

    const TensorRecord & at(const std::string & name) const;

    bool operator==(const Checkpoint &) const = default;
};

/// Location of one tensor's bytes inside an archive on disk.
struct TensorInfo {
    std::string name;
    DType dtype = DType::F32;
    Shape shape;
    std::filesystem::path file;
    std::uint64_t begin = 0;  // absolute file offset
    std::uint64_t end   = 0;

    std::uint64_t numel() const noexcept { return shape_numel(shape); }
};

/// Lazily reads tensors from a single archive or a sharded model.
///
/// Accepts a single archive file, a shard index JSON file, or a directory
/// containing either one index file or exactly one archive. Only headers are
/// parsed at construction; tensor bytes are read on demand, so a reader can
/// stream a model much larger than memory. read() is safe to call from
/// several threads.
class ArchiveReader {
public:
    explicit ArchiveReader(const std::filesystem::path & path);

    const std::map<std::string, TensorInfo> & tensors() const noexcept { return tensors_; }
    const std::map<std::string, std::string> & metadata() const noexcept { return metadata_; }

    bool contains(const std::string & name) const { return tensors_.count(name) != 0; }
    const TensorInfo & info(const std::string & name) const;

    TensorRecord read(const std::string & name) const;

private:
    void add_file(const std::filesystem::path & file, const std::map<std::string, std::string> * expected);
    void load_index(const std::filesystem::path & index);

    std::map<std::string, TensorInfo> tensors_;
    std::map<std::string, std::string> metadata_;
};

/// Writes a single-file archive tensor by tensor.
///
/// The header is fixed up front from the entry list, so tensors must be
/// written in lexicographic name order. Output goes to a temporary sibling
/// file that commit() renames over the destination; an uncommitted writer
/// removes its temporary on destruction.
class ArchiveWriter {
public:
    struct Entry {
        std::string name;
        DType dtype = DType::F32;
        Shape shape;
    };

    ArchiveWriter(std::filesystem::path path, std::vector<Entry> entries,
                  const std::map<std::string, std::string> & metadata);
    ~ArchiveWriter();

    ArchiveWriter(const ArchiveWriter &) = delete;
    ArchiveWriter & operator=(const ArchiveWriter &) = delete;

    void write(const TensorRecord & t);
    void commit();

private:
    std::filesystem::path path_;
    std::filesystem::path tmp_path_;
    std::vector<Entry> entries_;
    std::size_t next_ = 0;
    std::ofstream out_;
    bool committed_ = false;
};

/// Serialized header bytes (length prefix excluded) for the given layout.
std::string archive_header(const std::vector<ArchiveWriter::Entry> & entries,
                           const std::map<std::string, std::string> & metadata);

Checkpoint load_checkpoint(const std::filesystem::path & path);
void save_checkpoint(const Checkpoint & cp, const std::filesystem::path & path);

} // namespace hmerge
