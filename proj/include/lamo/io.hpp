#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "lamo/tensor.hpp"

namespace lamo {

// All on-disk formats are little-endian. x86/aarch64 hosts are little-endian;
// the writers below use raw memcpy of fixed-width types.

inline std::uint32_t crc32_bytes(const std::uint8_t* data, std::size_t n, std::uint32_t seed = 0) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t c = seed ^ 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

/// Append-only byte sink with a running CRC.
class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  template <class T>
  void pod(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    raw(&v, sizeof(T));
  }
  void str(const std::string& s) { raw(s.data(), s.size()); }

  std::uint32_t crc() const { return crc32_bytes(buf_.data(), buf_.size()); }
  const std::vector<std::uint8_t>& bytes() const { return buf_; }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    if (!f) throw IoError("write failed for '" + path + "'");
  }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Cursor over a loaded file; every failure reports the byte offset.
class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> bytes, std::string name = "<buffer>")
      : buf_(std::move(bytes)), name_(std::move(name)) {}

  static ByteReader from_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "' for reading");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return ByteReader(std::move(bytes), path);
  }

  std::size_t offset() const { return pos_; }
  std::size_t size() const { return buf_.size(); }
  std::size_t remaining() const { return buf_.size() - pos_; }
  const std::uint8_t* cursor() const { return buf_.data() + pos_; }
  const std::uint8_t* base() const { return buf_.data(); }

  void raw(void* out, std::size_t n) {
    if (remaining() < n)
      throw IoError(name_ + ": truncated at byte offset " + std::to_string(pos_) + " (need " + std::to_string(n) +
                    ", have " + std::to_string(remaining()) + ")");
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  template <class T>
  T pod() {
    static_assert(std::is_trivially_copyable_v<T>);
    T v;
    raw(&v, sizeof(T));
    return v;
  }
  std::string str(std::size_t n) {
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  void expect_magic(const char (&magic)[5]) {
    const std::size_t at = pos_;
    const std::string got = str(4);
    if (got != std::string(magic, 4))
      throw IoError(name_ + ": bad magic '" + got + "' (expected '" + magic + "') at byte offset " +
                    std::to_string(at));
  }
  const std::string& name() const { return name_; }

 private:
  std::vector<std::uint8_t> buf_;
  std::string name_;
  std::size_t pos_ = 0;
};

// -------------------------------------------------------------------------
// LTNS tensor blobs: "LTNS" | version u32 | dtype u8 (1=single, 2=double) |
// ndim u8 | dims ndim x u64 | row-major raw payload.
// -------------------------------------------------------------------------

template <class S>
constexpr std::uint8_t dtype_tag() {
  static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>, "LTNS supports float and double");
  return std::is_same_v<S, float> ? 1 : 2;
}

template <class S>
void write_ltns(ByteWriter& w, const Tensor<S>& t) {
  w.str("LTNS");
  w.pod<std::uint32_t>(1);
  w.pod<std::uint8_t>(dtype_tag<S>());
  w.pod<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
  for (Index d : t.shape) w.pod<std::uint64_t>(static_cast<std::uint64_t>(d));
  w.raw(t.ptr(), t.data.size() * sizeof(S));
}

/// Reads one LTNS blob. With allow_convert the payload may be stored in the
/// other precision and is cast element-wise; otherwise a dtype mismatch is an
/// error.
template <class S>
Tensor<S> read_ltns(ByteReader& r, bool allow_convert = false) {
  r.expect_magic("LTNS");
  const auto version = r.pod<std::uint32_t>();
  if (version != 1)
    throw IoError(r.name() + ": unsupported LTNS version " + std::to_string(version) + " at byte offset " +
                  std::to_string(r.offset() - 4));
  const auto dtype = r.pod<std::uint8_t>();
  const auto ndim = r.pod<std::uint8_t>();
  if (dtype != 1 && dtype != 2)
    throw IoError(r.name() + ": bad LTNS dtype tag " + std::to_string(int(dtype)) + " at byte offset " +
                  std::to_string(r.offset() - 2));
  Shape shape(ndim);
  for (auto& d : shape) d = static_cast<Index>(r.pod<std::uint64_t>());
  const Index n = numel(shape);
  auto read_payload = [&](auto scalar_witness) {
    using U = decltype(scalar_witness);
    Tensor<U> t(shape);
    r.raw(t.ptr(), static_cast<std::size_t>(n) * sizeof(U));
    return t;
  };
  if (dtype == dtype_tag<S>()) return read_payload(S{});
  if (!allow_convert)
    throw IoError(r.name() + ": LTNS dtype tag " + std::to_string(int(dtype)) + " does not match requested precision");
  if (dtype == 1) return cast_tensor<S>(read_payload(float{}));
  return cast_tensor<S>(read_payload(double{}));
}

template <class S>
void save_tensor(const std::string& path, const Tensor<S>& t) {
  ByteWriter w;
  write_ltns(w, t);
  w.save(path);
}

template <class S>
Tensor<S> load_tensor(const std::string& path, bool allow_convert = false) {
  ByteReader r = ByteReader::from_file(path);
  return read_ltns<S>(r, allow_convert);
}

}  // namespace lamo
