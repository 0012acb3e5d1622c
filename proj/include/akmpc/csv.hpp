#pragma once

/// Minimal CSV reading/writing for datasets, traces and sweep tables. Doubles are written with
/// the shortest round-trip representation, so read(write(x)) == x bitwise.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "types.hpp"

namespace akmpc {

inline std::string format_double(double v)
{
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string & s)
{
  double v        = 0;
  const char * b  = s.data();
  const char * e  = s.data() + s.size();
  while (b < e && *b == ' ') { ++b; }
  if (e - b >= 3 && (std::string(b, e) == "nan" || std::string(b, e) == "-nan")) {
    return std::numeric_limits<double>::quiet_NaN();
  }
  const auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e) { throw SchemaError("csv: cannot parse number '" + s + "'"); }
  return v;
}

struct CsvTable
{
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string & name) const
  {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) { return i; }
    }
    throw SchemaError("csv: missing column '" + name + "'");
  }

  bool has_column(const std::string & name) const
  {
    for (const auto & h : header) {
      if (h == name) { return true; }
    }
    return false;
  }

  double num(std::size_t r, std::size_t c) const { return parse_double(rows.at(r).at(c)); }
};

inline std::vector<std::string> split_csv_line(const std::string & line)
{
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') { out.emplace_back(); }
  return out;
}

inline CsvTable read_csv(const std::filesystem::path & path)
{
  std::ifstream in(path);
  if (!in) { throw std::runtime_error("cannot open " + path.string()); }
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) { throw SchemaError("csv: empty file " + path.string()); }
  t.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") { continue; }
    auto row = split_csv_line(line);
    if (row.size() != t.header.size()) {
      throw SchemaError("csv: row " + std::to_string(t.rows.size() + 1) + " of " + path.string() + " has "
                        + std::to_string(row.size()) + " cells, header has " + std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

/// Streaming writer; call row() with already formatted cells.
class CsvWriter
{
public:
  CsvWriter(const std::filesystem::path & path, const std::vector<std::string> & header) : out_(path)
  {
    if (!out_) { throw std::runtime_error("cannot write " + path.string()); }
    row(header);
  }

  void row(const std::vector<std::string> & cells)
  {
    for (std::size_t i = 0; i < cells.size(); ++i) { out_ << (i ? "," : "") << cells[i]; }
    out_ << '\n';
  }

  void flush() { out_.flush(); }

private:
  std::ofstream out_;
};

}  // namespace akmpc
