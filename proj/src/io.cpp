// Copyright 2026 The sponge Authors
// SPDX-License-Identifier: Apache-2.0

#include "sponge/io.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

namespace sponge {

namespace fs = std::filesystem;

const Matrix<float> &TensorBundle::tensor(std::string_view name) const {
  for (const auto &[n, m] : tensors) {
    if (n == name) {
      return m;
    }
  }
  throw FormatError("bundle has no tensor '" + std::string(name) + "'");
}

fs::path payload_path(const fs::path &manifest) {
  fs::path p = manifest;
  p.replace_extension(".bin");
  return p;
}

namespace {

std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
}

void check_token(const std::string &s, const char *what) {
  if (s.empty() || s.find_first_of(" \t\r\n") != std::string::npos) {
    throw FormatError(std::string("bundle ") + what + " '" + s + "' must be a non-empty token without whitespace");
  }
}

}  // namespace

void save_bundle(const fs::path &manifest, const TensorBundle &bundle) {
  std::string payload;
  std::ostringstream text;
  text << "format sponge-tensors\n";
  text << "version " << kBundleFormatVersion << "\n";
  text << "payload " << payload_path(manifest).filename().string() << "\n";
  for (const auto &[k, v] : bundle.metadata) {
    check_token(k, "metadata key");
    if (v.find('\n') != std::string::npos) {
      throw FormatError("bundle metadata value for '" + k + "' contains a newline");
    }
    text << "meta " << k << " " << v << "\n";
  }
  std::size_t offset = 0;
  for (const auto &[name, m] : bundle.tensors) {
    check_token(name, "tensor name");
    text << "tensor " << name << " " << offset << " " << m.rows() << " " << m.cols() << "\n";
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const std::uint32_t bits = to_little_endian(std::bit_cast<std::uint32_t>(m.data()[i]));
      char buf[4];
      std::memcpy(buf, &bits, 4);
      payload.append(buf, 4);
    }
    offset += static_cast<std::size_t>(m.size());
  }
  text << "floats " << offset << "\n";
  write_file_atomic(payload_path(manifest), payload);
  write_file_atomic(manifest, text.str());
}

TensorBundle load_bundle(const fs::path &manifest) {
  std::istringstream in(read_file(manifest));
  std::string line;
  TensorBundle bundle;
  struct Entry {
    std::string name;
    std::size_t offset;
    Eigen::Index rows, cols;
  };
  std::vector<Entry> entries;
  std::string payload_name;
  std::size_t total = 0;
  bool saw_format = false, saw_version = false, saw_total = false;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      continue;
    }
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    auto fail = [&](const std::string &why) {
      return FormatError(manifest.string() + ":" + std::to_string(line_no) + ": " + why);
    };
    if (key == "format") {
      std::string f;
      ls >> f;
      if (f != "sponge-tensors") {
        throw fail("unknown format '" + f + "'");
      }
      saw_format = true;
    } else if (key == "version") {
      int v = 0;
      if (!(ls >> v) || v != kBundleFormatVersion) {
        throw fail("unsupported version");
      }
      saw_version = true;
    } else if (key == "payload") {
      ls >> payload_name;
    } else if (key == "meta") {
      std::string k;
      ls >> k;
      std::string v;
      std::getline(ls, v);
      if (!v.empty() && v.front() == ' ') {
        v.erase(0, 1);
      }
      bundle.metadata[k] = v;
    } else if (key == "tensor") {
      Entry e;
      if (!(ls >> e.name >> e.offset >> e.rows >> e.cols) || e.rows < 0 || e.cols < 0) {
        throw fail("malformed tensor line");
      }
      entries.push_back(e);
    } else if (key == "floats") {
      if (!(ls >> total)) {
        throw fail("malformed floats line");
      }
      saw_total = true;
    } else {
      throw fail("unknown key '" + key + "'");
    }
  }
  if (!saw_format || !saw_version || !saw_total) {
    throw FormatError(manifest.string() + ": missing format, version or floats line");
  }
  const fs::path bin = payload_name.empty() ? payload_path(manifest) : manifest.parent_path() / payload_name;
  const std::string payload = read_file(bin);
  if (payload.size() != total * 4) {
    throw FormatError(bin.string() + ": expected " + std::to_string(total * 4) + " bytes, found " +
                      std::to_string(payload.size()));
  }
  for (const auto &e : entries) {
    const auto count = static_cast<std::size_t>(e.rows * e.cols);
    if (e.offset + count > total) {
      throw FormatError(manifest.string() + ": tensor '" + e.name + "' exceeds payload");
    }
    Matrix<float> m(e.rows, e.cols);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, payload.data() + 4 * (e.offset + i), 4);
      m.data()[i] = std::bit_cast<float>(to_little_endian(bits));
    }
    bundle.tensors.emplace_back(e.name, std::move(m));
  }
  return bundle;
}

namespace {
const std::array<std::pair<const char *, int ModelConfig::*>, 8> kConfigFields{{
    {"num_layers", &ModelConfig::num_layers},
    {"hidden_dim", &ModelConfig::hidden_dim},
    {"num_heads", &ModelConfig::num_heads},
    {"vocab_size", &ModelConfig::vocab_size},
    {"max_context", &ModelConfig::max_context},
    {"prefix_len", &ModelConfig::prefix_len},
    {"mlp_dim", &ModelConfig::mlp_dim},
    {"eos_id", &ModelConfig::eos_id},
}};
}  // namespace

void save_checkpoint(const fs::path &manifest, const ModelParams<float> &params) {
  TensorBundle b;
  b.metadata["kind"] = "model";
  for (const auto &[name, member] : kConfigFields) {
    b.metadata[std::string("config.") + name] = std::to_string(params.config.*member);
  }
  params.for_each([&b](const std::string &name, const Matrix<float> &m) { b.tensors.emplace_back(name, m); });
  save_bundle(manifest, b);
}

ModelParams<float> load_checkpoint(const fs::path &manifest) {
  const TensorBundle b = load_bundle(manifest);
  auto kind = b.metadata.find("kind");
  if (kind == b.metadata.end() || kind->second != "model") {
    throw FormatError(manifest.string() + ": not a model checkpoint");
  }
  ModelParams<float> p;
  for (const auto &[name, member] : kConfigFields) {
    auto it = b.metadata.find(std::string("config.") + name);
    if (it == b.metadata.end()) {
      throw FormatError(manifest.string() + ": missing config." + name);
    }
    int v = 0;
    const auto *first = it->second.data();
    const auto *last = first + it->second.size();
    if (std::from_chars(first, last, v).ptr != last) {
      throw FormatError(manifest.string() + ": bad integer for config." + name);
    }
    p.config.*member = v;
  }
  p.config.validate();
  p.blocks.resize(static_cast<std::size_t>(p.config.num_layers));
  const auto reference = init_params(p.config, 0);
  auto expected = reference.map([](const Matrix<float> &m) { return std::pair{m.rows(), m.cols()}; });
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes;
  expected.for_each([&shapes](const std::string &, const auto &s) { shapes.push_back(s); });
  std::size_t k = 0;
  p.for_each([&](const std::string &name, Matrix<float> &m) {
    m = b.tensor(name);
    if (m.rows() != shapes[k].first || m.cols() != shapes[k].second) {
      throw FormatError(manifest.string() + ": tensor '" + name + "' has shape " + shape_string(m) +
                        ", config expects " + std::to_string(shapes[k].first) + "x" +
                        std::to_string(shapes[k].second));
    }
    ++k;
  });
  if (!p.all_finite()) {
    throw FormatError(manifest.string() + ": checkpoint contains non-finite weights");
  }
  return p;
}

// ---------------------------------------------------------------------------

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), md.data(), &len) != 1) {
    throw std::runtime_error("sha256: digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[md[i] >> 4];
    out += kHex[md[i] & 0xf];
  }
  return out;
}

std::string sha256_file(const fs::path &path) { return sha256_hex(read_file(path)); }

void write_file_atomic(const fs::path &path, std::string_view contents) {
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    }
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) {
      throw std::runtime_error("write failed for " + tmp.string());
    }
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

CsvWriter::CsvWriter(std::vector<std::string> header) : columns_(header.size()) {
  if (header.empty()) {
    throw std::invalid_argument("CsvWriter: empty header");
  }
  add_row(std::move(header));
}

void CsvWriter::add_row(std::vector<std::string> cells) {
  if (cells.size() != columns_) {
    throw std::invalid_argument("CsvWriter: row has " + std::to_string(cells.size()) + " fields, header has " +
                                std::to_string(columns_));
  }
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i > 0) {
      out_ += ',';
    }
    out_ += quote(cells[i]);
  }
  out_ += "\r\n";
}

std::string CsvWriter::quote(std::string_view field) {
  if (field.find_first_of(",\"\r\n") == std::string_view::npos) {
    return std::string(field);
  }
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') {
      out += '"';
    }
    out += c;
  }
  out += '"';
  return out;
}

std::string CsvWriter::number(double v) {
  char buf[32];
  for (int precision = 6; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) {
      break;
    }
  }
  return buf;
}

std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool field_started = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"' && field.empty()) {
      quoted = true;
      field_started = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      field_started = true;
    } else if (c == '\r' || c == '\n') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') {
        ++i;
      }
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      field_started = false;
    } else {
      field += c;
      field_started = true;
    }
  }
  if (field_started || !field.empty() || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace sponge
