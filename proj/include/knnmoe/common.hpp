#pragma once

#include <cstdint>
#include <cstring>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace knnmoe {

// All recoverable failures surface as Error with a message naming the
// offending operation or file section.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

// ---------------------------------------------------------------------------
// Hashing / seeding
// ---------------------------------------------------------------------------

inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t fnv1a(std::string_view s, uint64_t h = 1469598103934665603ull) {
  return fnv1a(s.data(), s.size(), h);
}

std::string hex64(uint64_t v);

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

// Storage precision for checkpoint and memory files. Compute stays in 64-bit.
inline double to_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

// ---------------------------------------------------------------------------
// Worker parallelism. MOE_MEMROUTER_THREADS caps the worker count; work units
// write to disjoint slots so results are independent of the thread count.
// ---------------------------------------------------------------------------

int worker_threads();
void parallel_for(int n, const std::function<void(int)>& fn);

// ---------------------------------------------------------------------------
// Little-endian byte buffers for the binary file formats.
// ---------------------------------------------------------------------------

struct ByteWriter {
  std::vector<uint8_t> buf;

  void raw(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
  }
  void u8(uint8_t v) { buf.push_back(v); }
  void u16(uint16_t v) {
    for (int i = 0; i < 2; ++i) buf.push_back(uint8_t(v >> (8 * i)));
  }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(uint8_t(v >> (8 * i)));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(uint8_t(v >> (8 * i)));
  }
  void f32(float v) {
    uint32_t b;
    std::memcpy(&b, &v, 4);
    u32(b);
  }
  void str(std::string_view s) { raw(s.data(), s.size()); }
};

struct ByteReader {
  const uint8_t* p = nullptr;
  size_t n = 0;
  size_t pos = 0;
  std::string what;  // file description used in error messages

  ByteReader(const void* data, size_t size, std::string desc)
      : p(static_cast<const uint8_t*>(data)), n(size), what(std::move(desc)) {}

  void need(size_t k) const {
    if (pos + k > n) fail(what + ": truncated file (need " + std::to_string(k) + " bytes at offset " + std::to_string(pos) + ", have " + std::to_string(n - pos) + ")");
  }
  void raw(void* dst, size_t k) {
    need(k);
    std::memcpy(dst, p + pos, k);
    pos += k;
  }
  uint8_t u8() {
    need(1);
    return p[pos++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= uint16_t(p[pos + i]) << (8 * i);
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(p[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(p[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  float f32() {
    uint32_t b = u32();
    float v;
    std::memcpy(&v, &b, 4);
    return v;
  }
  std::string str(size_t k) {
    need(k);
    std::string s(reinterpret_cast<const char*>(p + pos), k);
    pos += k;
    return s;
  }
  bool done() const { return pos == n; }
};

std::vector<uint8_t> read_file_bytes(const std::string& path, const std::string& what);
void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes);
void write_file_text(const std::string& path, const std::string& text);
std::string read_file_text(const std::string& path, const std::string& what);

}  // namespace knnmoe
