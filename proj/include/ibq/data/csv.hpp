#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace ibq {

// UTF-8, header row, '\n' endings, '.' decimals. Rows are flushed as they
// are written so a crashed run keeps its history.
class CsvWriter {
 public:
  CsvWriter() = default;
  // append keeps existing rows (checkpoint resume), otherwise truncates.
  CsvWriter(const std::filesystem::path& path, std::vector<std::string> columns, bool append = false);

  void row(const std::vector<std::string>& cells);
  bool is_open() const { return out_.is_open(); }
  const std::vector<std::string>& columns() const { return columns_; }

 private:
  std::filesystem::path path_;
  std::vector<std::string> columns_;
  std::ofstream out_;
};

// Locale-independent "%.9g"; empty string for NaN so missing values stay blank.
std::string fmt_num(double v);
std::string fmt_int(long long v);

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path);

// Keeps the header and the first `rows` data rows (resume truncation).
void truncate_csv(const std::filesystem::path& path, std::size_t rows);

}  // namespace ibq
