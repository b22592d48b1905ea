// Copyright 2026 The privmarket Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Flat `key=value` configuration. A config struct exposes its fields as a
// list of named accessors; files, command-line flags and artifact headers
// all go through that one list so their spellings cannot drift apart.

#ifndef PRIVMARKET_CONFIG_H_
#define PRIVMARKET_CONFIG_H_

#include <cstdint>
#include <functional>
#include <iomanip>
#include <istream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace privmarket {

struct ConfigField {
  std::string key;
  std::string help;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

namespace internal {

inline std::string Trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T>
T ParseNumber(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  T value{};
  is >> value;
  if (!is || !(is >> std::ws).eof()) {
    throw std::invalid_argument("config: bad value '" + text + "' for " + key);
  }
  return value;
}

inline std::string FormatDouble(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace internal

inline ConfigField IntField(std::string key, int* target, std::string help) {
  const std::string k = key;
  return {std::move(key), std::move(help),
          [target] { return std::to_string(*target); },
          [target, k](const std::string& s) {
            *target = internal::ParseNumber<int>(k, s);
          }};
}

inline ConfigField U64Field(std::string key, uint64_t* target,
                            std::string help) {
  const std::string k = key;
  return {std::move(key), std::move(help),
          [target] { return std::to_string(*target); },
          [target, k](const std::string& s) {
            if (!s.empty() && s[0] == '-') {
              throw std::invalid_argument("config: " + k + " must be >= 0");
            }
            *target = internal::ParseNumber<uint64_t>(k, s);
          }};
}

inline ConfigField DoubleField(std::string key, double* target,
                               std::string help) {
  const std::string k = key;
  return {std::move(key), std::move(help),
          [target] { return internal::FormatDouble(*target); },
          [target, k](const std::string& s) {
            *target = internal::ParseNumber<double>(k, s);
          }};
}

inline ConfigField BoolField(std::string key, bool* target, std::string help) {
  const std::string k = key;
  return {std::move(key), std::move(help),
          [target] { return std::string(*target ? "true" : "false"); },
          [target, k](const std::string& s) {
            if (s == "true" || s == "1") {
              *target = true;
            } else if (s == "false" || s == "0") {
              *target = false;
            } else {
              throw std::invalid_argument("config: bad boolean '" + s +
                                          "' for " + k);
            }
          }};
}

inline ConfigField StringField(std::string key, std::string* target,
                               std::string help) {
  return {std::move(key), std::move(help), [target] { return *target; },
          [target](const std::string& s) { *target = s; }};
}

// Comma-separated list; empty items are rejected.
inline std::vector<std::string> SplitList(const std::string& text) {
  std::vector<std::string> out;
  if (internal::Trim(text).empty()) return out;
  std::string item;
  std::istringstream is(text);
  while (std::getline(is, item, ',')) {
    item = internal::Trim(item);
    if (item.empty()) throw std::invalid_argument("empty item in list '" + text + "'");
    out.push_back(item);
  }
  return out;
}

template <typename T>
std::vector<T> ParseList(const std::string& key, const std::string& text) {
  std::vector<T> out;
  for (const auto& item : SplitList(text)) {
    out.push_back(internal::ParseNumber<T>(key, item));
  }
  return out;
}

inline const ConfigField* FindField(const std::vector<ConfigField>& fields,
                                    const std::string& key) {
  for (const auto& f : fields) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

inline void SetField(const std::vector<ConfigField>& fields,
                     const std::string& key, const std::string& value) {
  const ConfigField* f = FindField(fields, key);
  if (f == nullptr) {
    throw std::invalid_argument("config: unknown key '" + key + "'");
  }
  f->set(value);
}

// Reads `key=value` lines; blank lines and `#` comments are ignored.
inline void ParseConfig(std::istream& is,
                        const std::vector<ConfigField>& fields) {
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = internal::Trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected key=value");
    }
    SetField(fields, internal::Trim(t.substr(0, eq)),
             internal::Trim(t.substr(eq + 1)));
  }
}

inline std::string FormatConfig(const std::vector<ConfigField>& fields,
                                const std::string& line_prefix = "") {
  std::string out;
  for (const auto& f : fields) {
    out += line_prefix + f.key + "=" + f.get() + "\n";
  }
  return out;
}

// FNV-1a over the canonical text, as 16 hex digits.
inline std::string HashText(const std::string& text) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace privmarket

#endif  // PRIVMARKET_CONFIG_H_
