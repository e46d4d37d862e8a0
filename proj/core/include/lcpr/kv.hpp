#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "lcpr/errors.hpp"

namespace lcpr::kv {

// Flat key=value text files. Keys are written in sorted order; blank lines
// and '#' comments are ignored on read.
using Map = std::map<std::string, std::string>;

inline Map parse(std::istream& is, const std::string& origin) {
  Map out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw DataError(origin + ":" + std::to_string(lineno) + ": expected key=value");
    std::string key = line.substr(0, eq);
    if (key.empty() || !out.emplace(key, line.substr(eq + 1)).second)
      throw DataError(origin + ":" + std::to_string(lineno) + ": bad or duplicate key '" + key + "'");
  }
  return out;
}

inline Map load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path);
  return parse(is, path);
}

inline void save(const Map& m, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open " + path + " for writing");
  for (const auto& [k, v] : m) os << k << "=" << v << "\n";
  if (!os) throw DataError("write failed for " + path);
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline double to_double(const Map& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) throw DataError("missing key '" + key + "'");
  try {
    size_t pos = 0;
    double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw DataError("key '" + key + "': '" + it->second + "' is not a number");
  }
}

inline long long to_int(const Map& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) throw DataError("missing key '" + key + "'");
  try {
    size_t pos = 0;
    long long v = std::stoll(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw DataError("key '" + key + "': '" + it->second + "' is not an integer");
  }
}

inline std::string to_string(const Map& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) throw DataError("missing key '" + key + "'");
  return it->second;
}

}  // namespace lcpr::kv
