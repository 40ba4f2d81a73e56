// Copyright 2026 The sponge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "sponge/model.hpp"
#include "sponge/tensor.hpp"

#include <filesystem>
#include <initializer_list>
#include <map>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace sponge {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Named float tensors plus string metadata. On disk this is a text
/// manifest next to a flat little-endian float32 payload (`<stem>.bin`).
struct TensorBundle {
  std::map<std::string, std::string> metadata;
  std::vector<std::pair<std::string, Matrix<float>>> tensors;

  const Matrix<float> &tensor(std::string_view name) const;
};

inline constexpr int kBundleFormatVersion = 1;

void save_bundle(const std::filesystem::path &manifest, const TensorBundle &bundle);
TensorBundle load_bundle(const std::filesystem::path &manifest);

/// Payload path paired with a manifest path.
std::filesystem::path payload_path(const std::filesystem::path &manifest);

void save_checkpoint(const std::filesystem::path &manifest, const ModelParams<float> &params);
ModelParams<float> load_checkpoint(const std::filesystem::path &manifest);

/// Hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path &path);
std::string sha256_hex(std::string_view bytes);

/// Writes to `path.tmp` then renames, so readers never see a partial file.
void write_file_atomic(const std::filesystem::path &path, std::string_view contents);
std::string read_file(const std::filesystem::path &path);

/// RFC 4180 CSV: fields containing comma, quote, CR or LF are quoted, and
/// embedded quotes doubled. Rows end with CRLF.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);

  template <typename... Fields>
  void row(const Fields &...fields) {
    std::vector<std::string> cells{cell(fields)...};
    add_row(std::move(cells));
  }
  void add_row(std::vector<std::string> cells);

  std::string str() const { return out_; }
  std::size_t columns() const { return columns_; }

  static std::string quote(std::string_view field);
  /// Shortest round-trip decimal form of a double ("%.17g" trimmed).
  static std::string number(double v);

 private:
  static std::string cell(const std::string &s) { return s; }
  static std::string cell(const char *s) { return s; }
  static std::string cell(std::string_view s) { return std::string(s); }
  static std::string cell(double v) { return number(v); }
  static std::string cell(float v) { return number(static_cast<double>(v)); }
  static std::string cell(bool v) { return v ? "true" : "false"; }
  template <typename I>
    requires std::is_integral_v<I>
  static std::string cell(I v) {
    return std::to_string(v);
  }

  std::size_t columns_;
  std::string out_;
};

/// Parses RFC 4180 text back into rows (used by tests and `report`).
std::vector<std::vector<std::string>> parse_csv(std::string_view text);

}  // namespace sponge
