#include "ibq/data/csv.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "ibq/core/errors.hpp"

namespace ibq {

CsvWriter::CsvWriter(const std::filesystem::path& path, std::vector<std::string> columns, bool append)
    : path_(path), columns_(std::move(columns)) {
  const bool existing = append && std::filesystem::exists(path);
  out_.open(path, std::ios::binary | (existing ? std::ios::app : std::ios::trunc));
  if (!out_) throw IoError("cannot write " + path.string());
  if (!existing) row(columns_);
}

void CsvWriter::row(const std::vector<std::string>& cells) {
  if (cells.size() != columns_.size()) {
    throw ContractError("csv row for " + path_.string() + " has " + std::to_string(cells.size()) +
                        " cells, header has " + std::to_string(columns_.size()));
  }
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out_ << ',';
    out_ << cells[i];
  }
  out_ << '\n';
  out_.flush();
  if (!out_) throw IoError("write failed for " + path_.string());
}

std::string fmt_num(double v) {
  if (std::isnan(v)) return "";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string fmt_int(long long v) { return std::to_string(v); }

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

void truncate_csv(const std::filesystem::path& path, std::size_t rows) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::string kept, line;
  std::size_t n = 0;
  while (n <= rows && std::getline(in, line)) {
    kept += line;
    kept += '\n';
    ++n;
  }
  in.close();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << kept;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace ibq
