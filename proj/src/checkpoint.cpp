#include "paramdelta/checkpoint.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>

#include <nlohmann/json.hpp>

namespace paramdelta {

using ordered_json = nlohmann::ordered_json;

namespace {

constexpr uint64_t kMaxElements = uint64_t(1) << 62;

std::string errno_message(const std::string& what, const std::filesystem::path& path) {
    return what + " '" + path.string() + "': " + std::strerror(errno);
}

std::string shape_to_string(const std::vector<uint64_t>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// Top-level keys of a JSON object, in document order, without a full parse.
// nlohmann silently keeps the last of duplicate keys, so duplicate tensor
// names must be caught before the manifest is built from the parsed object.
std::vector<std::string> top_level_keys(std::string_view text) {
    std::vector<std::string> keys;
    size_t i = 0;
    auto skip_ws = [&] {
        while (i < text.size() && (text[i] == ' ' || text[i] == '\t' || text[i] == '\n' || text[i] == '\r')) ++i;
    };
    auto bad = [&]() -> std::vector<std::string> {
        // leave detailed diagnostics to the real parser
        return keys;
    };
    skip_ws();
    if (i >= text.size() || text[i] != '{') return bad();
    ++i;
    skip_ws();
    if (i < text.size() && text[i] == '}') return keys;
    while (i < text.size()) {
        skip_ws();
        if (i >= text.size() || text[i] != '"') return bad();
        // raw key token, including quotes; unescaped via the JSON parser below
        size_t start = i++;
        while (i < text.size() && text[i] != '"') {
            if (text[i] == '\\') ++i;
            ++i;
        }
        if (i >= text.size()) return bad();
        ++i; // closing quote
        std::string raw(text.substr(start, i - start));
        auto parsed = nlohmann::json::parse(raw, nullptr, false);
        if (parsed.is_discarded() || !parsed.is_string()) return bad();
        keys.push_back(parsed.get<std::string>());

        skip_ws();
        if (i >= text.size() || text[i] != ':') return bad();
        ++i;
        // skip the value: track nesting, honor strings
        int depth = 0;
        bool in_string = false;
        for (; i < text.size(); ++i) {
            char c = text[i];
            if (in_string) {
                if (c == '\\') ++i;
                else if (c == '"') in_string = false;
                continue;
            }
            if (c == '"') in_string = true;
            else if (c == '{' || c == '[') ++depth;
            else if (c == '}' || c == ']') {
                if (depth == 0) break; // closing the top-level object
                --depth;
            } else if (c == ',' && depth == 0) {
                break;
            }
        }
        if (i >= text.size()) return bad();
        if (text[i] == '}') return keys;
        ++i; // comma
    }
    return bad();
}

uint64_t checked_num_elements(const std::vector<uint64_t>& shape, const std::string& name) {
    uint64_t n = 1;
    for (uint64_t d : shape) {
        if (d != 0 && n > kMaxElements / std::max<uint64_t>(d, 1)) {
            fail(ErrorClass::MalformedHeader, "tensor '" + name + "' shape overflows");
        }
        n *= d;
    }
    return n;
}

} // namespace

uint64_t TensorMeta::num_elements() const {
    uint64_t n = 1;
    for (uint64_t d : shape) n *= d;
    return n;
}

std::string_view kind_name(CheckpointKind k) {
    switch (k) {
    case CheckpointKind::Base: return "base";
    case CheckpointKind::Post: return "post";
    case CheckpointKind::Delta: return "delta";
    case CheckpointKind::Fused: return "fused";
    }
    return "base";
}

CheckpointKind parse_kind(std::string_view s) {
    if (s == "post") return CheckpointKind::Post;
    if (s == "delta") return CheckpointKind::Delta;
    if (s == "fused") return CheckpointKind::Fused;
    return CheckpointKind::Base;
}

// ---------------------------------------------------------------------------
// reading

class Checkpoint::File {
public:
    explicit File(const std::filesystem::path& path) {
        fd_ = ::open(path.c_str(), O_RDONLY);
        if (fd_ < 0) fail(ErrorClass::IoFailure, errno_message("cannot open", path));
        struct stat st {};
        if (::fstat(fd_, &st) != 0) {
            int saved = errno;
            ::close(fd_);
            errno = saved;
            fail(ErrorClass::IoFailure, errno_message("cannot stat", path));
        }
        size_ = static_cast<uint64_t>(st.st_size);
    }

    ~File() {
        if (fd_ >= 0) ::close(fd_);
    }

    File(const File&) = delete;
    File& operator=(const File&) = delete;

    uint64_t size() const { return size_; }

    // thread-safe positional read
    void read_at(uint64_t offset, uint8_t* dst, size_t count, const std::filesystem::path& path) const {
        size_t done = 0;
        while (done < count) {
            ssize_t n = ::pread(fd_, dst + done, count - done, static_cast<off_t>(offset + done));
            if (n < 0) {
                if (errno == EINTR) continue;
                fail(ErrorClass::IoFailure, errno_message("read failed on", path));
            }
            if (n == 0) fail(ErrorClass::IoFailure, "unexpected end of file in '" + path.string() + "'");
            done += static_cast<size_t>(n);
        }
    }

private:
    int fd_ = -1;
    uint64_t size_ = 0;
};

Checkpoint Checkpoint::open(const std::filesystem::path& path) {
    Checkpoint ck;
    ck.path_ = path;
    ck.file_ = std::make_shared<File>(path);
    ck.file_size_ = ck.file_->size();

    if (ck.file_size_ < 8) {
        fail(ErrorClass::MalformedHeader, "'" + path.string() + "' is shorter than the 8-byte length prefix");
    }
    uint8_t prefix[8];
    ck.file_->read_at(0, prefix, 8, path);
    uint64_t header_len = 0;
    for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | prefix[i];

    if (header_len == 0 || header_len > ck.file_size_ - 8) {
        fail(ErrorClass::MalformedHeader,
             "header length " + std::to_string(header_len) + " exceeds file size " +
                 std::to_string(ck.file_size_) + " in '" + path.string() + "'");
    }
    ck.data_begin_ = 8 + header_len;

    std::string header_text(header_len, '\0');
    ck.file_->read_at(8, reinterpret_cast<uint8_t*>(header_text.data()), header_len, path);

    ordered_json header = ordered_json::parse(header_text, nullptr, false);
    if (header.is_discarded() || !header.is_object()) {
        fail(ErrorClass::MalformedHeader, "header of '" + path.string() + "' is not a JSON object");
    }

    // duplicate keys first: the parsed object silently collapses them
    {
        auto keys = top_level_keys(header_text);
        std::map<std::string, int> seen;
        for (const auto& k : keys) {
            if (++seen[k] == 2) {
                if (k == "__metadata__") {
                    fail(ErrorClass::MalformedHeader, "duplicate __metadata__ object");
                }
                fail(ErrorClass::DuplicateTensorName, "tensor '" + k + "' appears twice in the header");
            }
        }
    }

    for (auto it = header.begin(); it != header.end(); ++it) {
        const std::string& key = it.key();
        const ordered_json& value = it.value();
        if (key == "__metadata__") {
            if (!value.is_object()) fail(ErrorClass::MalformedHeader, "__metadata__ is not an object");
            for (auto m = value.begin(); m != value.end(); ++m) {
                if (!m.value().is_string()) {
                    fail(ErrorClass::MalformedHeader, "__metadata__ value for '" + m.key() + "' is not a string");
                }
                ck.metadata_[m.key()] = m.value().get<std::string>();
            }
            continue;
        }
        if (key.empty()) fail(ErrorClass::MalformedHeader, "empty tensor name");
        if (!value.is_object()) fail(ErrorClass::MalformedHeader, "entry '" + key + "' is not an object");

        TensorMeta meta;
        meta.name = key;

        if (!value.contains("dtype") || !value["dtype"].is_string()) {
            fail(ErrorClass::MalformedHeader, "tensor '" + key + "' lacks a dtype string");
        }
        meta.dtype = parse_dtype(value["dtype"].get<std::string>());

        if (!value.contains("shape") || !value["shape"].is_array()) {
            fail(ErrorClass::MalformedHeader, "tensor '" + key + "' lacks a shape array");
        }
        for (const auto& d : value["shape"]) {
            if (!d.is_number_unsigned()) {
                fail(ErrorClass::MalformedHeader, "tensor '" + key + "' has a negative or non-integer dimension");
            }
            meta.shape.push_back(d.get<uint64_t>());
        }

        if (!value.contains("data_offsets") || !value["data_offsets"].is_array() ||
            value["data_offsets"].size() != 2 || !value["data_offsets"][0].is_number_unsigned() ||
            !value["data_offsets"][1].is_number_unsigned()) {
            fail(ErrorClass::MalformedHeader, "tensor '" + key + "' lacks valid data_offsets");
        }
        meta.begin = value["data_offsets"][0].get<uint64_t>();
        meta.end = value["data_offsets"][1].get<uint64_t>();
        if (meta.end < meta.begin) {
            fail(ErrorClass::MalformedHeader, "tensor '" + key + "' has end offset before begin");
        }
        uint64_t expected = checked_num_elements(meta.shape, key) * byte_width(meta.dtype);
        if (meta.end - meta.begin != expected) {
            fail(ErrorClass::MalformedHeader,
                 "tensor '" + key + "' data size " + std::to_string(meta.end - meta.begin) +
                     " does not match shape " + shape_to_string(meta.shape) + " (" +
                     std::to_string(expected) + " bytes)");
        }
        ck.manifest_.emplace(key, std::move(meta));
    }

    // non-overlap of nonempty regions
    std::vector<const TensorMeta*> by_offset;
    by_offset.reserve(ck.manifest_.size());
    for (const auto& [_, m] : ck.manifest_) {
        if (m.num_bytes() > 0) by_offset.push_back(&m);
    }
    std::sort(by_offset.begin(), by_offset.end(),
              [](const TensorMeta* a, const TensorMeta* b) { return a->begin < b->begin; });
    for (size_t i = 1; i < by_offset.size(); ++i) {
        if (by_offset[i]->begin < by_offset[i - 1]->end) {
            fail(ErrorClass::OverlappingRegions,
                 "tensors '" + by_offset[i - 1]->name + "' and '" + by_offset[i]->name +
                     "' overlap in the data section");
        }
    }

    uint64_t data_size = ck.file_size_ - ck.data_begin_;
    for (const auto& [_, m] : ck.manifest_) {
        if (m.end > data_size) {
            fail(ErrorClass::TruncatedFile,
                 "data section holds " + std::to_string(data_size) + " bytes but tensor '" + m.name +
                     "' ends at " + std::to_string(m.end));
        }
    }

    ck.names_.reserve(ck.manifest_.size());
    for (const auto& [name, _] : ck.manifest_) ck.names_.push_back(name); // map order: sorted

    auto kind_it = ck.metadata_.find(std::string(kKindKey));
    ck.kind_ = kind_it == ck.metadata_.end() ? CheckpointKind::Base : parse_kind(kind_it->second);
    return ck;
}

bool Checkpoint::contains(std::string_view name) const {
    return manifest_.find(std::string(name)) != manifest_.end();
}

const TensorMeta& Checkpoint::meta(std::string_view name) const {
    auto it = manifest_.find(std::string(name));
    if (it == manifest_.end()) {
        fail(ErrorClass::UnknownTensor, "no tensor '" + std::string(name) + "' in '" + path_.string() + "'");
    }
    return it->second;
}

uint64_t Checkpoint::largest_tensor_bytes() const {
    uint64_t best = 0;
    for (const auto& [_, m] : manifest_) best = std::max(best, m.num_bytes());
    return best;
}

uint64_t Checkpoint::total_tensor_bytes() const {
    uint64_t total = 0;
    for (const auto& [_, m] : manifest_) total += m.num_bytes();
    return total;
}

void Checkpoint::read_elements(const TensorMeta& meta, uint64_t elem_begin, uint64_t elem_end,
                               float* dst) const {
    if (elem_begin > elem_end || elem_end > meta.num_elements()) {
        fail(ErrorClass::IoFailure, "element range out of bounds for '" + meta.name + "'");
    }
    size_t count = static_cast<size_t>(elem_end - elem_begin);
    if (count == 0) return;
    size_t width = byte_width(meta.dtype);
    uint64_t offset = data_begin_ + meta.begin + elem_begin * width;
    if (meta.dtype == DType::F32) {
        // f32 payloads are already the working representation
        file_->read_at(offset, reinterpret_cast<uint8_t*>(dst), count * 4, path_);
    } else {
        mem::Buffer<uint8_t> raw(count * width);
        file_->read_at(offset, raw.data(), count * width, path_);
        decode_to_f32(meta.dtype, raw.data(), count, dst);
    }
}

Tensor Checkpoint::read_tensor(std::string_view name) const {
    const TensorMeta& m = meta(name);
    Tensor t;
    t.shape = m.shape;
    t.stored_dtype = m.dtype;
    t.values.resize(static_cast<size_t>(m.num_elements()));
    read_elements(m, 0, m.num_elements(), t.values.data());
    return t;
}

void Checkpoint::read_raw(const TensorMeta& meta, uint64_t byte_begin, uint64_t byte_end,
                          uint8_t* dst) const {
    if (byte_begin > byte_end || byte_end > meta.num_bytes()) {
        fail(ErrorClass::IoFailure, "byte range out of bounds for '" + meta.name + "'");
    }
    if (byte_end == byte_begin) return;
    file_->read_at(data_begin_ + meta.begin + byte_begin, dst,
                   static_cast<size_t>(byte_end - byte_begin), path_);
}

std::vector<uint8_t> Checkpoint::read_raw(std::string_view name) const {
    const TensorMeta& m = meta(name);
    std::vector<uint8_t> bytes(static_cast<size_t>(m.num_bytes()));
    read_raw(m, 0, m.num_bytes(), bytes.data());
    return bytes;
}

// ---------------------------------------------------------------------------
// homology

CompatReport validate_homologous(const Checkpoint& a, const Checkpoint& b) {
    CompatReport report;
    const auto& na = a.names();
    const auto& nb = b.names();
    std::set_intersection(na.begin(), na.end(), nb.begin(), nb.end(), std::back_inserter(report.shared));
    std::set_difference(na.begin(), na.end(), nb.begin(), nb.end(), std::back_inserter(report.only_in_a));
    std::set_difference(nb.begin(), nb.end(), na.begin(), na.end(), std::back_inserter(report.only_in_b));

    for (const auto& name : report.shared) {
        const TensorMeta& ma = a.meta(name);
        const TensorMeta& mb = b.meta(name);
        if (ma.shape != mb.shape) {
            report.shape_mismatches.push_back({name, ma.shape, mb.shape});
        }
        if (ma.dtype != mb.dtype) {
            report.dtype_mismatches.push_back({name, ma.dtype, mb.dtype});
        }
    }
    report.homologous = report.only_in_a.empty() && report.only_in_b.empty() &&
                        report.shape_mismatches.empty();
    return report;
}

// ---------------------------------------------------------------------------
// writing

FileLayout plan_layout(const std::vector<TensorDecl>& decls,
                       const std::map<std::string, std::string>& metadata) {
    FileLayout layout;
    ordered_json header = ordered_json::object();
    if (!metadata.empty()) {
        ordered_json meta = ordered_json::object();
        for (const auto& [k, v] : metadata) meta[k] = v; // map order: sorted keys
        header["__metadata__"] = std::move(meta);
    }

    uint64_t offset = 0;
    std::map<std::string, bool> seen;
    for (const auto& decl : decls) {
        if (decl.name.empty()) fail(ErrorClass::InvalidSpec, "empty tensor name in layout");
        if (seen.count(decl.name)) {
            fail(ErrorClass::DuplicateTensorName, "tensor '" + decl.name + "' declared twice");
        }
        seen[decl.name] = true;

        TensorMeta meta;
        meta.name = decl.name;
        meta.dtype = decl.dtype;
        meta.shape = decl.shape;
        uint64_t bytes = checked_num_elements(decl.shape, decl.name) * byte_width(decl.dtype);
        meta.begin = offset;
        meta.end = offset + bytes;
        offset = meta.end;

        ordered_json entry = ordered_json::object();
        entry["dtype"] = std::string(dtype_name(decl.dtype));
        entry["shape"] = decl.shape;
        entry["data_offsets"] = {meta.begin, meta.end};
        header[decl.name] = std::move(entry);
        layout.tensors.push_back(std::move(meta));
    }

    layout.header_json = header.dump();
    layout.data_begin = 8 + layout.header_json.size();
    layout.total_size = layout.data_begin + offset;
    return layout;
}

PositionalWriter::PositionalWriter(const std::filesystem::path& path, const FileLayout& layout)
    : path_(path) {
    fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd_ < 0) fail(ErrorClass::IoFailure, errno_message("cannot create", path));
    if (::ftruncate(fd_, static_cast<off_t>(layout.total_size)) != 0) {
        fail(ErrorClass::IoFailure, errno_message("cannot size", path));
    }
    uint8_t prefix[8];
    uint64_t n = layout.header_json.size();
    for (int i = 0; i < 8; ++i) prefix[i] = static_cast<uint8_t>(n >> (8 * i));
    write_at(0, prefix, 8);
    write_at(8, reinterpret_cast<const uint8_t*>(layout.header_json.data()), layout.header_json.size());
}

PositionalWriter::~PositionalWriter() {
    if (fd_ >= 0) ::close(fd_);
}

void PositionalWriter::write_at(uint64_t offset, const uint8_t* data, size_t size) {
    size_t done = 0;
    while (done < size) {
        ssize_t n = ::pwrite(fd_, data + done, size - done, static_cast<off_t>(offset + done));
        if (n < 0) {
            if (errno == EINTR) continue;
            fail(ErrorClass::IoFailure, errno_message("write failed on", path_));
        }
        done += static_cast<size_t>(n);
    }
}

void PositionalWriter::finish() {
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
}

Checkpoint write_checkpoint(const std::filesystem::path& path, const std::vector<TensorDecl>& decls,
                            const std::map<std::string, std::string>& metadata,
                            const TensorProducer& producer) {
    FileLayout layout = plan_layout(decls, metadata);
    PositionalWriter writer(path, layout);

    mem::Buffer<uint8_t> encoded;
    for (size_t i = 0; i < decls.size(); ++i) {
        const TensorMeta& meta = layout.tensors[i];
        uint64_t expected = meta.num_elements();
        uint64_t produced = 0;
        size_t width = byte_width(meta.dtype);

        ValueSink emit = [&](std::span<const float> values) {
            if (produced + values.size() > expected) {
                fail(ErrorClass::ShapeMismatch,
                     "producer emitted more than " + std::to_string(expected) + " elements for '" +
                         meta.name + "'");
            }
            if (values.empty()) return;
            if (encoded.size() < values.size() * width) encoded.resize(values.size() * width);
            encode_from_f32(meta.dtype, values.data(), values.size(), encoded.data());
            writer.write_at(layout.data_begin + meta.begin + produced * width, encoded.data(),
                            values.size() * width);
            produced += values.size();
        };
        producer(i, decls[i], emit);
        if (produced != expected) {
            fail(ErrorClass::ShapeMismatch,
                 "producer emitted " + std::to_string(produced) + " of " + std::to_string(expected) +
                     " elements for '" + meta.name + "'");
        }
    }
    writer.finish();
    return Checkpoint::open(path);
}

} // namespace paramdelta
