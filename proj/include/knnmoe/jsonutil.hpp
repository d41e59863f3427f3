#pragma once

#include <json.hpp>
#include <span>

#include "knnmoe/common.hpp"

namespace knnmoe {

// Ordered JSON keeps key order deterministic across serialize/parse cycles,
// which the byte-identical artifact guarantees depend on.
using ojson = nlohmann::ordered_json;

inline ojson parse_json(const std::string& text, const std::string& what) {
  ojson j = ojson::parse(text, nullptr, false);
  if (j.is_discarded()) fail(what + ": invalid JSON");
  return j;
}

inline void require_object(const ojson& j, const std::string& what) {
  if (!j.is_object()) fail(what + ": expected a JSON object");
}

// Rejects keys outside the allowed set. Typos and stale keys fail loudly
// instead of being silently ignored.
inline void check_keys(const ojson& j, std::initializer_list<const char*> allowed,
                       const std::string& what) {
  require_object(j, what);
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) {
        ok = true;
        break;
      }
    if (!ok) fail(what + ": unknown key \"" + key + "\"");
  }
}

inline const ojson& get_field(const ojson& j, const char* key, const std::string& what) {
  auto it = j.find(key);
  if (it == j.end()) fail(what + ": missing required key \"" + std::string(key) + "\"");
  return *it;
}

inline int get_int(const ojson& j, const char* key, const std::string& what) {
  const ojson& v = get_field(j, key, what);
  if (!v.is_number_integer()) fail(what + ": key \"" + key + "\" must be an integer");
  return v.get<int>();
}

inline int get_int_or(const ojson& j, const char* key, int dflt, const std::string& what) {
  return j.contains(key) ? get_int(j, key, what) : dflt;
}

inline double get_double(const ojson& j, const char* key, const std::string& what) {
  const ojson& v = get_field(j, key, what);
  if (!v.is_number()) fail(what + ": key \"" + key + "\" must be a number");
  return v.get<double>();
}

inline double get_double_or(const ojson& j, const char* key, double dflt,
                            const std::string& what) {
  return j.contains(key) ? get_double(j, key, what) : dflt;
}

inline bool get_bool(const ojson& j, const char* key, const std::string& what) {
  const ojson& v = get_field(j, key, what);
  if (!v.is_boolean()) fail(what + ": key \"" + key + "\" must be a boolean");
  return v.get<bool>();
}

inline bool get_bool_or(const ojson& j, const char* key, bool dflt, const std::string& what) {
  return j.contains(key) ? get_bool(j, key, what) : dflt;
}

inline std::string get_string(const ojson& j, const char* key, const std::string& what) {
  const ojson& v = get_field(j, key, what);
  if (!v.is_string()) fail(what + ": key \"" + key + "\" must be a string");
  return v.get<std::string>();
}

inline std::string get_string_or(const ojson& j, const char* key, const std::string& dflt,
                                 const std::string& what) {
  return j.contains(key) ? get_string(j, key, what) : dflt;
}

inline uint64_t get_u64(const ojson& j, const char* key, const std::string& what) {
  const ojson& v = get_field(j, key, what);
  if (!v.is_number_unsigned() && !v.is_number_integer())
    fail(what + ": key \"" + key + "\" must be an integer");
  return v.get<uint64_t>();
}

inline std::vector<int> get_int_array(const ojson& j, const char* key, const std::string& what) {
  const ojson& v = get_field(j, key, what);
  if (!v.is_array()) fail(what + ": key \"" + key + "\" must be an array");
  std::vector<int> out;
  for (const ojson& e : v) {
    if (!e.is_number_integer()) fail(what + ": key \"" + key + "\" must hold integers");
    out.push_back(e.get<int>());
  }
  return out;
}

inline std::vector<double> get_double_array(const ojson& j, const char* key,
                                            const std::string& what) {
  const ojson& v = get_field(j, key, what);
  if (!v.is_array()) fail(what + ": key \"" + key + "\" must be an array");
  std::vector<double> out;
  for (const ojson& e : v) {
    if (!e.is_number()) fail(what + ": key \"" + key + "\" must hold numbers");
    out.push_back(e.get<double>());
  }
  return out;
}

inline std::vector<std::string> get_string_array(const ojson& j, const char* key,
                                                 const std::string& what) {
  const ojson& v = get_field(j, key, what);
  if (!v.is_array()) fail(what + ": key \"" + key + "\" must be an array");
  std::vector<std::string> out;
  for (const ojson& e : v) {
    if (!e.is_string()) fail(what + ": key \"" + key + "\" must hold strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

}  // namespace knnmoe
