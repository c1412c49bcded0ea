#include "hmerge/checkpoint.hpp"

#include "hmerge/error.hpp"

#include <fmt/core.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <limits>
#include <set>

namespace hmerge {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

namespace fs = std::filesystem;
using json   = nlohmann::json;

std::uint64_t shape_numel(const Shape & shape) noexcept {
    std::uint64_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_to_string(const Shape & shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        s += (i ? ", " : "") + std::to_string(shape[i]);
    }
    return s + "]";
}

TensorRecord encode_tensor(std::string name, Shape shape, std::span<const float> values, DType dtype) {
    TensorRecord t;
    t.name  = std::move(name);
    t.dtype = dtype;
    t.shape = std::move(shape);
    if (t.numel() != values.size()) {
        throw Error(ErrorKind::Compatibility,
                    fmt::format("tensor '{}': {} values do not fill shape {}", t.name, values.size(),
                                shape_to_string(t.shape)));
    }
    t.data.resize(values.size() * dtype_size(dtype));
    switch (dtype) {
        case DType::F32:
            std::memcpy(t.data.data(), values.data(), t.data.size());
            break;
        case DType::BF16:
            for (std::size_t i = 0; i < values.size(); ++i) {
                const std::uint16_t b = f32_to_bf16_bits(values[i]);
                std::memcpy(t.data.data() + 2 * i, &b, 2);
            }
            break;
        case DType::F16:
            for (std::size_t i = 0; i < values.size(); ++i) {
                const std::uint16_t b = f32_to_f16_bits(values[i]);
                std::memcpy(t.data.data() + 2 * i, &b, 2);
            }
            break;
    }
    return t;
}

void decode_values_into(const TensorRecord & t, std::span<float> out) {
    const std::uint64_t n = t.numel();
    if (out.size() != n || t.data.size() != n * dtype_size(t.dtype)) {
        throw Error(ErrorKind::Compatibility, fmt::format("tensor '{}': buffer size mismatch", t.name));
    }
    switch (t.dtype) {
        case DType::F32:
            std::memcpy(out.data(), t.data.data(), t.data.size());
            break;
        case DType::BF16:
            for (std::size_t i = 0; i < n; ++i) {
                std::uint16_t b;
                std::memcpy(&b, t.data.data() + 2 * i, 2);
                out[i] = bf16_bits_to_f32(b);
            }
            break;
        case DType::F16:
            for (std::size_t i = 0; i < n; ++i) {
                std::uint16_t b;
                std::memcpy(&b, t.data.data() + 2 * i, 2);
                out[i] = f16_bits_to_f32(b);
            }
            break;
    }
}

std::vector<float> decode_values(const TensorRecord & t) {
    std::vector<float> out(t.numel());
    decode_values_into(t, out);
    return out;
}

TensorRecord to_f32(const TensorRecord & t) {
    if (t.dtype == DType::F32) {
        return t;
    }
    const auto values = decode_values(t);
    return encode_tensor(t.name, t.shape, values, DType::F32);
}

TensorRecord to_bf16(const TensorRecord & t) {
    if (t.dtype != DType::F32) {
        throw Error(ErrorKind::DType, fmt::format("tensor '{}': to_bf16 expects F32, got {}", t.name,
                                                  dtype_name(t.dtype)));
    }
    const auto values = decode_values(t);
    return encode_tensor(t.name, t.shape, values, DType::BF16);
}

void Checkpoint::add(TensorRecord t) {
    const std::string name = t.name;
    if (!tensors.emplace(name, std::move(t)).second) {
        throw Error(ErrorKind::Conflict, fmt::format("duplicate tensor name '{}'", name));
    }
}

const TensorRecord & Checkpoint::at(const std::string & name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
        throw Error(ErrorKind::Compatibility, fmt::format("tensor '{}' not found", name));
    }
    return it->second;
}

// ---------------------------------------------------------------------------
// reading

namespace {

struct ParsedHeader {
    std::uint64_t data_start = 0;
    std::vector<TensorInfo> tensors;
    std::map<std::string, std::string> metadata;
};

std::uint64_t as_u64(const json & j, const std::string & what, std::uint64_t at) {
    if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<std::int64_t>() >= 0)) {
        throw Error(ErrorKind::Format, what + " must be a non-negative integer", at);
    }
    return j.get<std::uint64_t>();
}

ParsedHeader parse_archive_header(const fs::path & file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) {
        throw Error(ErrorKind::Io, fmt::format("cannot open '{}'", file.string()));
    }
    std::error_code ec;
    const std::uint64_t file_size = fs::file_size(file, ec);
    if (ec) {
        throw Error(ErrorKind::Io, fmt::format("cannot stat '{}': {}", file.string(), ec.message()));
    }
    if (file_size < 8) {
        throw Error(ErrorKind::Format, fmt::format("'{}': file too short for header length", file.string()), 0);
    }
    std::uint64_t header_len = 0;
    in.read(reinterpret_cast<char *>(&header_len), 8);
    if (header_len > file_size - 8) {
        throw Error(ErrorKind::Format,
                    fmt::format("'{}': header length {} exceeds file size {}", file.string(), header_len, file_size),
                    0);
    }
    std::string text(header_len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(header_len));
    if (!in) {
        throw Error(ErrorKind::Io, fmt::format("'{}': short read of header", file.string()));
    }

    json header;
    try {
        header = json::parse(text);
    } catch (const json::parse_error & e) {
        const std::uint64_t pos = e.byte > 0 ? e.byte - 1 : 0;
        throw Error(ErrorKind::Format, fmt::format("'{}': malformed JSON header", file.string()), 8 + pos);
    }
    if (!header.is_object()) {
        throw Error(ErrorKind::Format, fmt::format("'{}': header is not a JSON object", file.string()), 8);
    }

    ParsedHeader out;
    out.data_start                 = 8 + header_len;
    const std::uint64_t data_size  = file_size - out.data_start;

    for (const auto & [key, value] : header.items()) {
        if (key == "__metadata__") {
            if (!value.is_object()) {
                throw Error(ErrorKind::Format, "__metadata__ must be an object", 8);
            }
            for (const auto & [mk, mv] : value.items()) {
                if (!mv.is_string()) {
                    throw Error(ErrorKind::Format, fmt::format("metadata value for '{}' must be a string", mk), 8);
                }
                out.metadata[mk] = mv.get<std::string>();
            }
            continue;
        }
        if (!value.is_object() || !value.contains("dtype") || !value.contains("shape") ||
            !value.contains("data_offsets")) {
            throw Error(ErrorKind::Format, fmt::format("tensor '{}': entry needs dtype, shape, data_offsets", key),
                        8);
        }
        if (!value["dtype"].is_string()) {
            throw Error(ErrorKind::Format, fmt::format("tensor '{}': dtype must be a string", key), 8);
        }
        TensorInfo info;
        info.name  = key;
        info.dtype = parse_dtype(value["dtype"].get<std::string>());
        info.file  = file;
        const json & shape = value["shape"];
        if (!shape.is_array() || shape.empty()) {
            throw Error(ErrorKind::Format, fmt::format("tensor '{}': shape must be a non-empty array", key), 8);
        }
        for (const auto & d : shape) {
            info.shape.push_back(as_u64(d, "tensor '" + key + "': shape extent", 8));
        }
        const json & offs = value["data_offsets"];
        if (!offs.is_array() || offs.size() != 2) {
            throw Error(ErrorKind::Format, fmt::format("tensor '{}': data_offsets must be [begin, end]", key), 8);
        }
        const std::uint64_t begin = as_u64(offs[0], "data_offsets", 8);
        const std::uint64_t end   = as_u64(offs[1], "data_offsets", 8);
        if (begin > end || end > data_size) {
            throw Error(ErrorKind::Format,
                        fmt::format("tensor '{}': data_offsets [{}, {}) outside data region of {} bytes", key, begin,
                                    end, data_size),
                        out.data_start + std::min(begin, data_size));
        }
        const std::uint64_t numel = info.numel();
        if (numel > std::numeric_limits<std::uint64_t>::max() / 4 || end - begin != numel * dtype_size(info.dtype)) {
            throw Error(ErrorKind::Format,
                        fmt::format("tensor '{}': {} bytes do not match shape {} of {}", key, end - begin,
                                    shape_to_string(info.shape), dtype_name(info.dtype)),
                        out.data_start + begin);
        }
        info.begin = out.data_start + begin;
        info.end   = out.data_start + end;
        out.tensors.push_back(std::move(info));
    }

    std::vector<const TensorInfo *> by_offset;
    for (const auto & t : out.tensors) {
        by_offset.push_back(&t);
    }
    std::sort(by_offset.begin(), by_offset.end(), [](auto * a, auto * b) {
        return a->begin != b->begin ? a->begin < b->begin : a->end < b->end;
    });
    for (std::size_t i = 1; i < by_offset.size(); ++i) {
        if (by_offset[i]->begin < by_offset[i - 1]->end) {
            throw Error(ErrorKind::Format,
                        fmt::format("tensors '{}' and '{}' overlap", by_offset[i - 1]->name, by_offset[i]->name),
                        by_offset[i]->begin);
        }
    }
    return out;
}

} // namespace

ArchiveReader::ArchiveReader(const fs::path & path) {
    std::error_code ec;
    if (fs::is_directory(path, ec)) {
        std::vector<fs::path> indexes;
        std::vector<fs::path> archives;
        for (const auto & entry : fs::directory_iterator(path)) {
            const std::string fname = entry.path().filename().string();
            if (fname.size() > 11 && fname.ends_with(".index.json")) {
                indexes.push_back(entry.path());
            } else if (fname.ends_with(".safetensors")) {
                archives.push_back(entry.path());
            }
        }
        if (indexes.size() == 1) {
            load_index(indexes.front());
        } else if (indexes.empty() && archives.size() == 1) {
            add_file(archives.front(), nullptr);
        } else {
            throw Error(ErrorKind::Format,
                        fmt::format("'{}': expected one shard index or one archive, found {} index files and {} archives",
                                    path.string(), indexes.size(), archives.size()));
        }
    } else if (path.string().ends_with(".json")) {
        load_index(path);
    } else {
        if (!fs::exists(path, ec)) {
            throw Error(ErrorKind::Io, fmt::format("'{}' does not exist", path.string()));
        }
        add_file(path, nullptr);
    }
}

void ArchiveReader::load_index(const fs::path & index) {
    std::ifstream in(index);
    if (!in) {
        throw Error(ErrorKind::Io, fmt::format("cannot open shard index '{}'", index.string()));
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error & e) {
        throw Error(ErrorKind::Format, fmt::format("'{}': malformed shard index", index.string()),
                    e.byte > 0 ? e.byte - 1 : 0);
    }
    if (!j.is_object() || !j.contains("weight_map") || !j["weight_map"].is_object()) {
        throw Error(ErrorKind::Format, fmt::format("'{}': shard index lacks a weight_map object", index.string()));
    }
    std::map<std::string, std::map<std::string, std::string>> by_shard;
    for (const auto & [name, shard] : j["weight_map"].items()) {
        if (!shard.is_string()) {
            throw Error(ErrorKind::Format, fmt::format("'{}': shard for '{}' must be a string", index.string(), name));
        }
        by_shard[shard.get<std::string>()][name] = shard.get<std::string>();
    }
    const fs::path dir = index.parent_path();
    for (const auto & [shard, names] : by_shard) {
        const fs::path file = dir / shard;
        std::error_code ec;
        if (!fs::is_regular_file(file, ec)) {
            throw Error(ErrorKind::MissingShard,
                        fmt::format("shard '{}' listed in '{}' is missing", shard, index.string()));
        }
        add_file(file, &names);
    }
}

void ArchiveReader::add_file(const fs::path & file, const std::map<std::string, std::string> * expected) {
    ParsedHeader parsed = parse_archive_header(file);
    for (auto & t : parsed.tensors) {
        auto it = tensors_.find(t.name);
        if (it != tensors_.end()) {
            throw Error(ErrorKind::Conflict, fmt::format("tensor '{}' appears in both '{}' and '{}'", t.name,
                                                         it->second.file.filename().string(),
                                                         file.filename().string()));
        }
        tensors_.emplace(t.name, std::move(t));
    }
    if (expected) {
        for (const auto & [name, shard] : *expected) {
            auto it = tensors_.find(name);
            if (it == tensors_.end() || it->second.file != file) {
                throw Error(ErrorKind::Format,
                            fmt::format("tensor '{}' is mapped to shard '{}' but not stored there", name, shard));
            }
        }
    }
    // first shard (in name order) wins on metadata key collisions
    for (auto & [k, v] : parsed.metadata) {
        metadata_.emplace(k, std::move(v));
    }
}

const TensorInfo & ArchiveReader::info(const std::string & name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) {
        throw Error(ErrorKind::Compatibility, fmt::format("tensor '{}' not found", name));
    }
    return it->second;
}

TensorRecord ArchiveReader::read(const std::string & name) const {
    const TensorInfo & ti = info(name);
    TensorRecord t;
    t.name  = ti.name;
    t.dtype = ti.dtype;
    t.shape = ti.shape;
    t.data.resize(ti.end - ti.begin);
    std::ifstream in(ti.file, std::ios::binary);
    if (!in) {
        throw Error(ErrorKind::Io, fmt::format("cannot open '{}'", ti.file.string()));
    }
    in.seekg(static_cast<std::streamoff>(ti.begin));
    in.read(reinterpret_cast<char *>(t.data.data()), static_cast<std::streamsize>(t.data.size()));
    if (!in) {
        throw Error(ErrorKind::Io, fmt::format("'{}': short read of tensor '{}'", ti.file.string(), name));
    }
    return t;
}

Checkpoint load_checkpoint(const fs::path & path) {
    ArchiveReader reader(path);
    Checkpoint cp;
    cp.metadata = reader.metadata();
    for (const auto & [name, info] : reader.tensors()) {
        cp.tensors.emplace(name, reader.read(name));
    }
    return cp;
}

// ---------------------------------------------------------------------------
// writing

std::string archive_header(const std::vector<ArchiveWriter::Entry> & entries,
                           const std::map<std::string, std::string> & metadata) {
    json header = json::object();
    std::uint64_t offset = 0;
    for (const auto & e : entries) {
        const std::uint64_t bytes = shape_numel(e.shape) * dtype_size(e.dtype);
        header[e.name] = {
            {"dtype", std::string(dtype_name(e.dtype))},
            {"shape", e.shape},
            {"data_offsets", {offset, offset + bytes}},
        };
        offset += bytes;
    }
    if (!metadata.empty()) {
        header["__metadata__"] = metadata;
    }
    std::string text = header.dump();
    // pad so the data region starts 8-byte aligned
    while ((text.size() + 8) % 8 != 0) {
        text.push_back(' ');
    }
    return text;
}

ArchiveWriter::ArchiveWriter(fs::path path, std::vector<Entry> entries,
                             const std::map<std::string, std::string> & metadata)
    : path_(std::move(path)), entries_(std::move(entries)) {
    std::sort(entries_.begin(), entries_.end(), [](const Entry & a, const Entry & b) { return a.name < b.name; });
    for (std::size_t i = 1; i < entries_.size(); ++i) {
        if (entries_[i].name == entries_[i - 1].name) {
            throw Error(ErrorKind::Conflict, fmt::format("duplicate tensor name '{}'", entries_[i].name));
        }
    }
    const std::string header = archive_header(entries_, metadata);

    tmp_path_ = path_;
    tmp_path_ += ".partial";
    out_.open(tmp_path_, std::ios::binary | std::ios::trunc);
    if (!out_) {
        throw Error(ErrorKind::Io, fmt::format("cannot create '{}'", tmp_path_.string()));
    }
    const std::uint64_t len = header.size();
    out_.write(reinterpret_cast<const char *>(&len), 8);
    out_.write(header.data(), static_cast<std::streamsize>(header.size()));
}

ArchiveWriter::~ArchiveWriter() {
    if (!committed_) {
        out_.close();
        std::error_code ec;
        fs::remove(tmp_path_, ec);
    }
}

void ArchiveWriter::write(const TensorRecord & t) {
    if (next_ >= entries_.size()) {
        throw Error(ErrorKind::Io, fmt::format("unexpected tensor '{}': all entries already written", t.name));
    }
    const Entry & e = entries_[next_];
    if (t.name != e.name || t.dtype != e.dtype || t.shape != e.shape) {
        throw Error(ErrorKind::Io, fmt::format("tensor '{}' written out of order or with a different layout "
                                               "(expected '{}')", t.name, e.name));
    }
    if (t.data.size() != t.numel() * dtype_size(t.dtype)) {
        throw Error(ErrorKind::Format, fmt::format("tensor '{}': data length does not match shape", t.name));
    }
    out_.write(reinterpret_cast<const char *>(t.data.data()), static_cast<std::streamsize>(t.data.size()));
    if (!out_) {
        throw Error(ErrorKind::Io, fmt::format("write to '{}' failed", tmp_path_.string()));
    }
    ++next_;
}

void ArchiveWriter::commit() {
    if (next_ != entries_.size()) {
        throw Error(ErrorKind::Io, fmt::format("'{}': only {} of {} tensors written", path_.string(), next_,
                                               entries_.size()));
    }
    out_.close();
    if (!out_) {
        throw Error(ErrorKind::Io, fmt::format("closing '{}' failed", tmp_path_.string()));
    }
    std::error_code ec;
    fs::rename(tmp_path_, path_, ec);
    if (ec) {
        throw Error(ErrorKind::Io, fmt::format("cannot move output into place at '{}': {}", path_.string(),
                                               ec.message()));
    }
    committed_ = true;
}

void save_checkpoint(const Checkpoint & cp, const fs::path & path) {
    std::vector<ArchiveWriter::Entry> entries;
    entries.reserve(cp.tensors.size());
    for (const auto & [name, t] : cp.tensors) {
        if (name != t.name) {
            throw Error(ErrorKind::Conflict, fmt::format("tensor keyed '{}' is named '{}'", name, t.name));
        }
        entries.push_back({t.name, t.dtype, t.shape});
    }
    ArchiveWriter writer(path, std::move(entries), cp.metadata);
    for (const auto & [name, t] : cp.tensors) {
        writer.write(t);
    }
    writer.commit();
}

} // namespace hmerge
