#pragma once

// Shared helpers for the test suites: ulp distance, scratch directories,
// small checkpoint builders, byte-level file comparison.

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "paramdelta/checkpoint.hpp"

namespace testsupport {

// Ordered-integer distance between two f32 values; 0 means bit-identical
// (±0 counted equal). Returns a large sentinel for NaN involvement.
inline uint64_t ulp_distance(float a, float b) {
    if (std::isnan(a) || std::isnan(b)) return uint64_t(1) << 60;
    auto ordered = [](float f) -> int64_t {
        int32_t i = std::bit_cast<int32_t>(f);
        return i >= 0 ? i : int64_t(0x80000000u) - i;
    };
    int64_t d = ordered(a) - ordered(b);
    return static_cast<uint64_t>(d < 0 ? -d : d);
}

// Spacing of f32 values at the given magnitude. "Within k ULP of working
// precision" bounds compare |x − y| against k·ulp_at(scale of the operands);
// under cancellation the operand scale, not the near-zero result, sets how
// much rounding the routes may accumulate.
inline float ulp_at(float magnitude) {
    float m = std::fabs(magnitude);
    return std::nextafterf(m, std::numeric_limits<float>::infinity()) - m;
}

class ScratchDir {
public:
    explicit ScratchDir(const std::string& tag) {
        dir_ = std::filesystem::temp_directory_path() /
               ("paramdelta_" + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(dir_);
        std::filesystem::create_directories(dir_);
    }
    ~ScratchDir() { std::filesystem::remove_all(dir_); }
    std::filesystem::path operator/(const std::string& name) const { return dir_ / name; }
    const std::filesystem::path& path() const { return dir_; }

private:
    std::filesystem::path dir_;
};

inline std::vector<uint8_t> read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& p, const std::vector<uint8_t>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

// One-shot checkpoint from in-memory tensors, f32 by default.
struct NamedTensor {
    std::string name;
    std::vector<uint64_t> shape;
    std::vector<float> values;
    paramdelta::DType dtype = paramdelta::DType::F32;
};

inline paramdelta::Checkpoint make_checkpoint(const std::filesystem::path& path,
                                              const std::vector<NamedTensor>& tensors,
                                              std::map<std::string, std::string> metadata = {}) {
    std::vector<paramdelta::TensorDecl> decls;
    for (const auto& t : tensors) decls.push_back({t.name, t.dtype, t.shape});
    return paramdelta::write_checkpoint(
        path, decls, metadata,
        [&](size_t i, const paramdelta::TensorDecl&, const paramdelta::ValueSink& emit) {
            emit(tensors[i].values);
        });
}

inline std::vector<float> tensor_values(const paramdelta::Checkpoint& ck, const std::string& name) {
    paramdelta::Tensor t = ck.read_tensor(name);
    return {t.values.data(), t.values.data() + t.values.size()};
}

} // namespace testsupport
