#include "knnmoe/common.hpp"

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <thread>

namespace knnmoe {

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)v);
  return std::string(buf, 16);
}

int worker_threads() {
  unsigned hw = std::thread::hardware_concurrency();
  int n = hw == 0 ? 1 : int(hw);
  if (n > 16) n = 16;
  if (const char* env = std::getenv("MOE_MEMROUTER_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1)
      fail(std::string("MOE_MEMROUTER_THREADS: expected a positive integer, got \"") + env + "\"");
    n = int(v);
  }
  return n;
}

void parallel_for(int n, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  int workers = std::min(worker_threads(), n);
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
  std::vector<std::thread> pool;
  pool.reserve(size_t(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (;;) {
          int i = next.fetch_add(1, std::memory_order_relaxed);
          if (i >= n) break;
          fn(i);
        }
      } catch (...) {
        errors[size_t(w)] = std::current_exception();
      }
    });
  }
  for (std::thread& t : pool) t.join();
  for (std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);
}

std::vector<uint8_t> read_file_bytes(const std::string& path, const std::string& what) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(what + ": cannot open " + path);
  f.seekg(0, std::ios::end);
  std::streamoff len = f.tellg();
  f.seekg(0, std::ios::beg);
  std::vector<uint8_t> out(static_cast<size_t>(len));
  if (len > 0) f.read(reinterpret_cast<char*>(out.data()), len);
  if (!f) fail(what + ": read failed for " + path);
  return out;
}

void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail("cannot open file for writing: " + path);
  if (!bytes.empty()) f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  f.flush();
  if (!f) fail("write failed: " + path);
}

std::string read_file_text(const std::string& path, const std::string& what) {
  std::vector<uint8_t> b = read_file_bytes(path, what);
  return std::string(b.begin(), b.end());
}

void write_file_text(const std::string& path, const std::string& text) {
  write_file_bytes(path, std::vector<uint8_t>(text.begin(), text.end()));
}

}  // namespace knnmoe
