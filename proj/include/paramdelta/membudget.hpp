#pragma once

#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <new>
#include <span>
#include <utility>

namespace paramdelta::mem {

namespace detail {
inline std::atomic<size_t>& live_counter() {
    static std::atomic<size_t> v{0};
    return v;
}
inline std::atomic<size_t>& peak_counter() {
    static std::atomic<size_t> v{0};
    return v;
}
} // namespace detail

inline void add(size_t bytes) {
    size_t now = detail::live_counter().fetch_add(bytes) + bytes;
    auto& peak = detail::peak_counter();
    size_t seen = peak.load();
    while (seen < now && !peak.compare_exchange_weak(seen, now)) {
    }
}

inline void sub(size_t bytes) { detail::live_counter().fetch_sub(bytes); }

inline size_t live_bytes() { return detail::live_counter().load(); }
inline size_t peak_bytes() { return detail::peak_counter().load(); }
inline void reset_peak() { detail::peak_counter().store(detail::live_counter().load()); }

/// Accounted scratch buffer. Every per-tensor and per-chunk working buffer
/// in the toolkit goes through this; peak_bytes() is the quantity the
/// bounded-memory tests assert on.
template <class T>
class Buffer {
public:
    Buffer() = default;
    explicit Buffer(size_t n) { resize(n); }
    Buffer(Buffer&& other) noexcept { swap(other); }
    Buffer& operator=(Buffer&& other) noexcept {
        if (this != &other) {
            release();
            swap(other);
        }
        return *this;
    }
    Buffer(const Buffer&) = delete;
    Buffer& operator=(const Buffer&) = delete;
    ~Buffer() { release(); }

    void resize(size_t n) {
        if (n == size_) return;
        release();
        if (n > 0) {
            data_ = static_cast<T*>(std::malloc(n * sizeof(T)));
            if (!data_) throw std::bad_alloc();
            size_ = n;
            add(n * sizeof(T));
        }
    }

    void release() {
        if (data_) {
            sub(size_ * sizeof(T));
            std::free(data_);
            data_ = nullptr;
            size_ = 0;
        }
    }

    T* data() { return data_; }
    const T* data() const { return data_; }
    size_t size() const { return size_; }
    T& operator[](size_t i) { return data_[i]; }
    const T& operator[](size_t i) const { return data_[i]; }
    std::span<T> span() { return {data_, size_}; }
    std::span<const T> span() const { return {data_, size_}; }

private:
    void swap(Buffer& other) noexcept {
        std::swap(data_, other.data_);
        std::swap(size_, other.size_);
    }

    T* data_ = nullptr;
    size_t size_ = 0;
};

} // namespace paramdelta::mem
