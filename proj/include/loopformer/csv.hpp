#pragma once

// Flat CSV tables with "# key=value" metadata lines ahead of the header.
// Cells are plain (no quoting); every writer in this library emits only
// numbers and identifiers.

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "loopformer/error.hpp"

namespace loopformer {

struct CsvTable {
  std::vector<std::pair<std::string, std::string>> metadata;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i) {
      if (columns[i] == name) return i;
    }
    throw Error(ErrorKind::kFormat, "csv: no column '" + name + "'");
  }

  std::string meta(const std::string& key) const {
    for (const auto& [k, v] : metadata) {
      if (k == key) return v;
    }
    throw Error(ErrorKind::kFormat, "csv: no metadata key '" + key + "'");
  }
};

// Shortest round-trip representation.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_number(const std::string& s) {
  if (s == "nan") return std::nan("");
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  LOOPFORMER_CHECK(res.ec == std::errc() && res.ptr == s.data() + s.size(), ErrorKind::kFormat,
                   "csv: not a number: '" + s + "'");
  return v;
}

inline void write_csv(std::ostream& out, const CsvTable& t) {
  for (const auto& [k, v] : t.metadata) out << "# " << k << '=' << v << '\n';
  for (std::size_t i = 0; i < t.columns.size(); ++i) out << (i ? "," : "") << t.columns[i];
  out << '\n';
  for (const auto& row : t.rows) {
    LOOPFORMER_CHECK(row.size() == t.columns.size(), ErrorKind::kShapeMismatch,
                     "csv: row width differs from header");
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << '\n';
  }
}

inline void write_csv(const std::filesystem::path& path, const CsvTable& t) {
  std::ofstream out(path, std::ios::binary);
  LOOPFORMER_CHECK(out.good(), ErrorKind::kIo, "cannot open " + path.string());
  write_csv(out, t);
}

inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

// Reads a table and checks its header against `expected` when given.
inline CsvTable read_csv(std::istream& in, const std::vector<std::string>& expected = {}) {
  CsvTable t;
  std::string line;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (!have_header && line.rfind("# ", 0) == 0) {
      const auto eq = line.find('=');
      LOOPFORMER_CHECK(eq != std::string::npos, ErrorKind::kFormat, "csv: bad metadata line");
      t.metadata.emplace_back(line.substr(2, eq - 2), line.substr(eq + 1));
      continue;
    }
    if (!have_header) {
      t.columns = split_fields(line);
      have_header = true;
      if (!expected.empty()) {
        LOOPFORMER_CHECK(t.columns == expected, ErrorKind::kFormat, "csv: unexpected header '" + line + "'");
      }
      continue;
    }
    auto row = split_fields(line);
    LOOPFORMER_CHECK(row.size() == t.columns.size(), ErrorKind::kFormat,
                     "csv: row width differs from header: '" + line + "'");
    t.rows.push_back(std::move(row));
  }
  LOOPFORMER_CHECK(have_header, ErrorKind::kFormat, "csv: missing header");
  return t;
}

inline CsvTable read_csv(const std::filesystem::path& path, const std::vector<std::string>& expected = {}) {
  std::ifstream in(path, std::ios::binary);
  LOOPFORMER_CHECK(in.good(), ErrorKind::kIo, "cannot open " + path.string());
  return read_csv(in, expected);
}

}  // namespace loopformer
