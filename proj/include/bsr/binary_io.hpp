#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "bsr/errors.hpp"

// Little-endian helpers shared by the checkpoint and dataset formats.
namespace bsr::binio {

template <class T>
T to_le(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

class Writer {
 public:
  template <class T>
  void put(T v) {
    v = to_le(v);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void put_magic(const char (&magic)[5]) { put_bytes(magic, 4); }
  void put_doubles(const std::vector<double>& v) {
    if constexpr (std::endian::native == std::endian::little) {
      put_bytes(v.data(), v.size() * sizeof(double));
    } else {
      for (double d : v) put(d);
    }
  }
  const std::vector<char>& bytes() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(std::string file, std::vector<char> bytes) : file_(std::move(file)), buf_(std::move(bytes)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return to_le(v);
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void expect_magic(const char (&magic)[5]) {
    if (remaining() < 4 || std::memcmp(buf_.data() + pos_, magic, 4) != 0) {
      throw IoError(file_, std::string("bad magic bytes, expected \"") + magic + "\"");
    }
    pos_ += 4;
  }
  std::vector<double> get_doubles(std::size_t n) {
    if (n > remaining() / sizeof(double)) throw IoError(file_, "truncated data");
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = get<double>();
    return v;
  }
  std::size_t remaining() const { return buf_.size() - pos_; }
  bool done() const { return pos_ == buf_.size(); }
  const std::string& file() const { return file_; }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw IoError(file_, "truncated file");
  }
  std::string file_;
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open for reading");
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// Writes to a sibling temp file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, const char* data, std::size_t n) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(tmp.string(), "cannot open for writing");
    out.write(data, static_cast<std::streamsize>(n));
    if (!out) throw IoError(tmp.string(), "write failed");
  }
  std::filesystem::rename(tmp, path);
}

inline void write_file_atomic(const std::filesystem::path& path, const std::vector<char>& bytes) {
  write_file_atomic(path, bytes.data(), bytes.size());
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, text.data(), text.size());
}

}  // namespace bsr::binio
