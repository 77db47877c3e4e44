#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "paramdelta/dtype.hpp"
#include "paramdelta/errors.hpp"
#include "paramdelta/membudget.hpp"

namespace paramdelta {

// Metadata keys owned by this toolkit are namespaced "paramdelta.".
inline constexpr std::string_view kKindKey = "paramdelta.kind";
inline constexpr std::string_view kRecipeKey = "paramdelta.recipe";
inline constexpr std::string_view kMinuendKey = "paramdelta.minuend";
inline constexpr std::string_view kSubtrahendKey = "paramdelta.subtrahend";
inline constexpr std::string_view kScenarioKey = "paramdelta.scenario";
inline constexpr std::string_view kGeneratorKey = "paramdelta.generator";

enum class CheckpointKind { Base, Post, Delta, Fused };

std::string_view kind_name(CheckpointKind k);
CheckpointKind parse_kind(std::string_view s); // unknown spellings fall back to Base

struct TensorMeta {
    std::string name;
    DType dtype = DType::F32;
    std::vector<uint64_t> shape;
    // data_offsets, in bytes relative to the start of the data section
    uint64_t begin = 0;
    uint64_t end = 0;

    uint64_t num_elements() const;
    uint64_t num_bytes() const { return end - begin; }
};

struct TensorDecl {
    std::string name;
    DType dtype = DType::F32;
    std::vector<uint64_t> shape;
};

/// A tensor decoded to working precision. Element order is flat row-major.
struct Tensor {
    std::vector<uint64_t> shape;
    DType stored_dtype = DType::F32;
    mem::Buffer<float> values;
};

/// Immutable handle to a single-file tensor checkpoint. Opening parses and
/// validates the manifest only; tensor data is read on demand. Handles are
/// safe to share across threads and reads of distinct tensors (or distinct
/// element ranges) may proceed in parallel.
class Checkpoint {
public:
    Checkpoint() = default;

    static Checkpoint open(const std::filesystem::path& path);

    const std::filesystem::path& path() const { return path_; }
    CheckpointKind kind() const { return kind_; }
    const std::map<std::string, std::string>& metadata() const { return metadata_; }

    /// Tensor names in lexicographic order; repeated calls return the same list.
    const std::vector<std::string>& names() const { return names_; }
    bool contains(std::string_view name) const;
    const TensorMeta& meta(std::string_view name) const; // UnknownTensor

    uint64_t data_begin() const { return data_begin_; } // absolute file offset
    uint64_t file_size() const { return file_size_; }
    uint64_t largest_tensor_bytes() const;
    uint64_t total_tensor_bytes() const;

    Tensor read_tensor(std::string_view name) const;

    /// Decodes elements [elem_begin, elem_end) of a tensor into dst.
    void read_elements(const TensorMeta& meta, uint64_t elem_begin, uint64_t elem_end,
                       float* dst) const;

    /// Raw stored bytes [byte_begin, byte_end) of a tensor, no decoding.
    void read_raw(const TensorMeta& meta, uint64_t byte_begin, uint64_t byte_end,
                  uint8_t* dst) const;
    std::vector<uint8_t> read_raw(std::string_view name) const;

private:
    class File;

    std::filesystem::path path_;
    std::shared_ptr<File> file_;
    std::map<std::string, TensorMeta> manifest_;
    std::vector<std::string> names_;
    std::map<std::string, std::string> metadata_;
    CheckpointKind kind_ = CheckpointKind::Base;
    uint64_t data_begin_ = 0;
    uint64_t file_size_ = 0;
};

struct ShapeMismatchEntry {
    std::string name;
    std::vector<uint64_t> shape_a;
    std::vector<uint64_t> shape_b;
};

struct DTypeMismatchEntry {
    std::string name;
    DType dtype_a;
    DType dtype_b;
};

/// Structural comparison of two manifests. Metadata only; no tensor data is
/// read. Differing dtypes are reported but do not break homology (arithmetic
/// runs in working precision either way).
struct CompatReport {
    bool homologous = false;
    std::vector<std::string> shared;
    std::vector<std::string> only_in_a;
    std::vector<std::string> only_in_b;
    std::vector<ShapeMismatchEntry> shape_mismatches;
    std::vector<DTypeMismatchEntry> dtype_mismatches;
};

CompatReport validate_homologous(const Checkpoint& a, const Checkpoint& b);

/// Precomputed file layout: header bytes plus absolute tensor offsets.
/// Tensors are laid out contiguously in declaration order.
struct FileLayout {
    std::string header_json;
    uint64_t data_begin = 0; // 8 + header_json.size()
    std::vector<TensorMeta> tensors;
    uint64_t total_size = 0;
};

FileLayout plan_layout(const std::vector<TensorDecl>& decls,
                       const std::map<std::string, std::string>& metadata);

/// Producer-driven streaming write. The producer is invoked once per declared
/// tensor, in declaration order, and emits that tensor's working-precision
/// values through one or more `emit` calls; the total element count must
/// match the declared shape (ShapeMismatch otherwise). Values are rounded to
/// the declared dtype (nearest-even) as they stream; the writer is exclusive
/// and single-streamed.
using ValueSink = std::function<void(std::span<const float>)>;
using TensorProducer = std::function<void(size_t index, const TensorDecl& decl, const ValueSink& emit)>;

Checkpoint write_checkpoint(const std::filesystem::path& path,
                            const std::vector<TensorDecl>& decls,
                            const std::map<std::string, std::string>& metadata,
                            const TensorProducer& producer);

/// Positional writer used by the combine engine: the file is sized up front
/// and encoded chunks land at absolute offsets, so chunks may be produced in
/// any order (and concurrently) while the final bytes stay deterministic.
class PositionalWriter {
public:
    PositionalWriter(const std::filesystem::path& path, const FileLayout& layout);
    ~PositionalWriter();
    PositionalWriter(const PositionalWriter&) = delete;
    PositionalWriter& operator=(const PositionalWriter&) = delete;

    void write_at(uint64_t offset, const uint8_t* data, size_t size);
    void finish(); // flushes and closes; no further writes

private:
    int fd_ = -1;
    std::filesystem::path path_;
};

} // namespace paramdelta
