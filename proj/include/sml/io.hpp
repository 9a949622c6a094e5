#pragma once

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sml::io {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

// Writes via a temp file in the same directory, then renames. Readers never
// observe a partially written file.
inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  fs::path dir = path.parent_path();
  if (!dir.empty()) fs::create_directories(dir);
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for write: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

// Flat key=value config file. '#' starts a comment, blank lines ignored.
class KvConfig {
 public:
  KvConfig() = default;

  static KvConfig parse(const std::string& text) {
    KvConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error("config line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
      std::string key = trim(line.substr(0, eq));
      std::string val = trim(line.substr(eq + 1));
      if (key.empty()) throw std::runtime_error("config line " + std::to_string(lineno) + ": empty key");
      cfg.values_[key] = val;
    }
    return cfg;
  }

  static KvConfig load(const std::filesystem::path& path) { return parse(read_file(path)); }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  void set(const std::string& key, const std::string& val) { values_[key] = val; }

  std::string get_str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw std::runtime_error("config: missing key '" + key + "'");
    return it->second;
  }
  std::string get_str(const std::string& key, const std::string& dflt) const {
    auto it = values_.find(key);
    return it == values_.end() ? dflt : it->second;
  }
  long get_int(const std::string& key) const { return std::stol(get_str(key)); }
  long get_int(const std::string& key, long dflt) const {
    return has(key) ? std::stol(get_str(key)) : dflt;
  }
  double get_real(const std::string& key) const { return std::stod(get_str(key)); }
  double get_real(const std::string& key, double dflt) const {
    return has(key) ? std::stod(get_str(key)) : dflt;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

  std::string dump() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
    return os.str();
  }

 private:
  std::map<std::string, std::string> values_;
};

inline std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

inline std::string lower_ascii(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

// UTF-8 aware split into codepoints, for character-level metrics.
inline std::vector<std::string> split_codepoints(const std::string& s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    unsigned char c = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    if ((c & 0x80u) == 0)
      len = 1;
    else if ((c & 0xE0u) == 0xC0u)
      len = 2;
    else if ((c & 0xF0u) == 0xE0u)
      len = 3;
    else if ((c & 0xF8u) == 0xF0u)
      len = 4;
    len = std::min(len, s.size() - i);
    out.push_back(s.substr(i, len));
    i += len;
  }
  return out;
}

}  // namespace sml::io
