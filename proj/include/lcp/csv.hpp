#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "lcp/common.hpp"

namespace lcp {

// Minimal CSV handling for the plain numeric tables used throughout: no
// quoting or escaping, comma separator, first row is the header.  The reader
// slurps the whole file and hands out string_views into the buffer.
class CsvReader {
 public:
  explicit CsvReader(const std::filesystem::path& path) : path_(path.string()) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::Io, "cannot open " + path_);
    buf_.assign(std::istreambuf_iterator<char>(in),
                std::istreambuf_iterator<char>());
    pos_ = 0;
    require(read_line(header_), ErrorKind::Schema, path_ + ": empty file");
    split_fields(header_, header_fields_);
    for (auto& f : header_fields_) columns_.emplace_back(f);
  }

  const std::string& path() const { return path_; }
  std::size_t column_count() const { return columns_.size(); }

  // Index of a named column, or -1 when absent.
  int column(std::string_view name) const {
    for (std::size_t i = 0; i < columns_.size(); ++i)
      if (columns_[i] == name) return static_cast<int>(i);
    return -1;
  }

  int require_column(std::string_view name) const {
    int c = column(name);
    require(c >= 0, ErrorKind::Schema,
            path_ + ": missing column '" + std::string(name) + "'");
    return c;
  }

  // Advance to the next data row; false at end of file.
  bool next_row() {
    std::string_view line;
    do {
      if (!read_line(line)) return false;
    } while (line.empty());
    split_fields(line, fields_);
    ++row_number_;
    require(fields_.size() == columns_.size(), ErrorKind::Schema,
            path_ + ": row " + std::to_string(row_number_) + " has " +
                std::to_string(fields_.size()) + " fields, expected " +
                std::to_string(columns_.size()));
    return true;
  }

  std::string_view cell(int col) const {
    return fields_[static_cast<std::size_t>(col)];
  }

  double as_double(int col) const {
    std::string_view s = cell(col);
    double v = 0.0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    require(r.ec == std::errc() && r.ptr == s.data() + s.size(),
            ErrorKind::Schema, bad_cell(col, "number"));
    return v;
  }

  long long as_int(int col) const {
    std::string_view s = cell(col);
    long long v = 0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    require(r.ec == std::errc() && r.ptr == s.data() + s.size(),
            ErrorKind::Schema, bad_cell(col, "integer"));
    return v;
  }

 private:
  std::string bad_cell(int col, const char* kind) const {
    return path_ + ": row " + std::to_string(row_number_) + " column '" +
           columns_[static_cast<std::size_t>(col)] + "': expected " + kind +
           ", got '" + std::string(cell(col)) + "'";
  }

  bool read_line(std::string_view& out) {
    if (pos_ >= buf_.size()) return false;
    std::size_t end = buf_.find('\n', pos_);
    if (end == std::string::npos) end = buf_.size();
    std::size_t len = end - pos_;
    if (len > 0 && buf_[pos_ + len - 1] == '\r') --len;
    out = std::string_view(buf_).substr(pos_, len);
    pos_ = end + 1;
    return true;
  }

  static void split_fields(std::string_view line,
                           std::vector<std::string_view>& out) {
    out.clear();
    std::size_t start = 0;
    while (true) {
      std::size_t comma = line.find(',', start);
      if (comma == std::string_view::npos) {
        out.push_back(line.substr(start));
        return;
      }
      out.push_back(line.substr(start, comma - start));
      start = comma + 1;
    }
  }

  std::string path_;
  std::string buf_;
  std::size_t pos_ = 0;
  std::string_view header_;
  std::vector<std::string_view> header_fields_;
  std::vector<std::string> columns_;
  std::vector<std::string_view> fields_;
  std::size_t row_number_ = 0;
};

// Shortest decimal string that round-trips the value (std::to_chars default).
inline void append_number(std::string& out, double v) {
  char tmp[32];
  auto r = std::to_chars(tmp, tmp + sizeof(tmp), v);
  out.append(tmp, r.ptr);
}

inline void append_number(std::string& out, float v) {
  char tmp[32];
  auto r = std::to_chars(tmp, tmp + sizeof(tmp), v);
  out.append(tmp, r.ptr);
}

// Fixed significant-digit formatting for prediction records.
inline void append_number(std::string& out, double v, int sig_digits) {
  char tmp[48];
  auto r = std::to_chars(tmp, tmp + sizeof(tmp), v,
                         std::chars_format::general, sig_digits);
  out.append(tmp, r.ptr);
}

template <typename Int>
  requires std::is_integral_v<Int>
inline void append_number(std::string& out, Int v) {
  char tmp[24];
  auto r = std::to_chars(tmp, tmp + sizeof(tmp), v);
  out.append(tmp, r.ptr);
}

// Buffered CSV writer; rows are assembled in memory and flushed on close.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path,
            const std::vector<std::string_view>& header)
      : path_(path.string()), out_(path, std::ios::binary) {
    require(out_.good(), ErrorKind::Io, "cannot write " + path_);
    bool first = true;
    for (auto h : header) {
      if (!first) buf_ += ',';
      buf_ += h;
      first = false;
    }
    buf_ += '\n';
    n_cols_ = header.size();
  }

  CsvWriter(const std::filesystem::path& path,
            std::initializer_list<std::string_view> header)
      : CsvWriter(path, std::vector<std::string_view>(header)) {}

  ~CsvWriter() { flush(); }

  template <typename T>
    requires std::is_arithmetic_v<T>
  CsvWriter& field(T v) {
    if (col_ > 0) buf_ += ',';
    append_number(buf_, v);
    ++col_;
    return *this;
  }

  CsvWriter& field(std::string_view s) {
    if (col_ > 0) buf_ += ',';
    buf_ += s;
    ++col_;
    return *this;
  }

  // Empty cell (used for values that are undefined for a row).
  CsvWriter& blank() {
    if (col_ > 0) buf_ += ',';
    ++col_;
    return *this;
  }

  void end_row() {
    require(col_ == n_cols_, ErrorKind::State,
            path_ + ": row has " + std::to_string(col_) + " fields, expected " +
                std::to_string(n_cols_));
    buf_ += '\n';
    col_ = 0;
    if (buf_.size() > 1 << 20) {
      out_.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
      buf_.clear();
    }
  }

  void flush() {
    if (!buf_.empty()) {
      out_.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
      buf_.clear();
    }
    out_.flush();
    require(out_.good(), ErrorKind::Io, "write failed: " + path_);
  }

 private:
  std::string path_;
  std::ofstream out_;
  std::string buf_;
  std::size_t col_ = 0;
  std::size_t n_cols_ = 0;
};

}  // namespace lcp
