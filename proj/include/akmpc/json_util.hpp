#pragma once

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <cmath>
#include <limits>
#include <vector>
#include <string>

#include <nlohmann/json.hpp>

#include "types.hpp"

namespace akmpc {

using Json = nlohmann::json;

/// Throws ConfigError naming the first key of `j` that is not in `allowed`.
inline void check_keys(const Json & j, std::initializer_list<const char *> allowed, const std::string & where)
{
  if (!j.is_object()) { throw ConfigError(where + ": expected an object"); }
  for (const auto & [key, _] : j.items()) {
    bool ok = false;
    for (const char * a : allowed) { ok = ok || key == a; }
    if (!ok) { throw ConfigError(where + ": unknown key '" + key + "'"); }
  }
}

/// j[key] if present, else `fallback`. Type errors become ConfigError.
template <typename T>
T get_or(const Json & j, const char * key, const T & fallback)
{
  if (!j.contains(key) || j.at(key).is_null()) { return fallback; }
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception & e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

inline Vector vector_or(const Json & j, const char * key, const Vector & fallback)
{
  if (!j.contains(key)) { return fallback; }
  const auto v = get_or<std::vector<double>>(j, key, {});
  return Eigen::Map<const Vector>(v.data(), Eigen::Index(v.size()));
}

inline std::vector<double> to_std_vector(const Vector & v) { return {v.data(), v.data() + v.size()}; }

/// Infinity is written as the string "inf" since JSON has no literal for it.
inline double number_or_inf(const Json & j, const char * key, double fallback)
{
  if (!j.contains(key) || j.at(key).is_null()) { return fallback; }
  const auto & v = j.at(key);
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "inf" || s == "none") { return std::numeric_limits<double>::infinity(); }
    throw ConfigError(std::string("config key '") + key + "': expected a number or \"inf\"");
  }
  return v.get<double>();
}

inline Json number_to_json(double v)
{
  if (std::isinf(v)) { return "inf"; }
  return v;
}

inline Json read_json_file(const std::filesystem::path & path)
{
  std::ifstream in(path);
  if (!in) { throw ConfigError("cannot open " + path.string()); }
  try {
    return Json::parse(in, nullptr, true, true);
  } catch (const Json::exception & e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline void write_json_file(const Json & j, const std::filesystem::path & path)
{
  std::ofstream out(path);
  if (!out) { throw std::runtime_error("cannot write " + path.string()); }
  out << j.dump(2) << '\n';
}

}  // namespace akmpc
