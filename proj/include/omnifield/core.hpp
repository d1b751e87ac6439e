#pragma once

// Shared plumbing: error type, grids, deterministic parallel loops and
// little-endian byte streams used by every on-disk format.

#include <algorithm>
#include <atomic>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <zlib.h>

namespace omnifield {

enum class ErrorKind {
  invalid_argument,
  bad_config,
  missing_file,
  format,
  numerical,
  no_surface,
  unsupported,
  not_found,
};

inline const char* error_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument: return "invalid-argument";
    case ErrorKind::bad_config: return "bad-config";
    case ErrorKind::missing_file: return "missing-file";
    case ErrorKind::format: return "format";
    case ErrorKind::numerical: return "numerical";
    case ErrorKind::no_surface: return "no-surface";
    case ErrorKind::unsupported: return "unsupported";
    case ErrorKind::not_found: return "not-found";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  const char* code() const noexcept { return error_code(kind_); }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, const std::string& message,
                    ErrorKind kind = ErrorKind::invalid_argument) {
  if (!condition) fail(kind, message);
}

// Process exit status per failure class.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::bad_config: return 2;
    case ErrorKind::missing_file: return 3;
    case ErrorKind::numerical: return 4;
    default: return 1;
  }
}

// ---------------------------------------------------------------------------
// Threading

namespace detail {
inline std::atomic<unsigned>& thread_setting() {
  static std::atomic<unsigned> value{0};
  return value;
}
}  // namespace detail

/// Caps internal parallelism. Zero restores the default (available cores).
inline void set_thread_count(unsigned n) { detail::thread_setting() = n; }

inline unsigned thread_count() {
  unsigned n = detail::thread_setting();
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return n;
}

/// Splits [0, n) into at most thread_count() contiguous chunks and calls
/// body(begin, end, chunk) for each. Chunk boundaries depend only on n and
/// the chunk count, so per-chunk reductions merged in chunk order are
/// deterministic for a given thread setting.
template <class Body>
void parallel_chunks(std::size_t n, Body&& body, unsigned max_chunks = 0) {
  unsigned chunks = max_chunks ? max_chunks : thread_count();
  chunks = static_cast<unsigned>(std::min<std::size_t>(chunks, std::max<std::size_t>(n, 1)));
  if (chunks <= 1) {
    body(std::size_t{0}, n, 0u);
    return;
  }
  std::vector<std::thread> workers;
  workers.reserve(chunks - 1);
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  auto run = [&](unsigned c) {
    const std::size_t begin = n * c / chunks;
    const std::size_t end = n * (c + 1) / chunks;
    try {
      body(begin, end, c);
    } catch (...) {
      if (!failed.exchange(true)) error = std::current_exception();
    }
  };
  for (unsigned c = 1; c < chunks; ++c) workers.emplace_back(run, c);
  run(0);
  for (auto& w : workers) w.join();
  if (error) std::rethrow_exception(error);
}

template <class Body>
void parallel_for(std::size_t n, Body&& body) {
  parallel_chunks(n, [&](std::size_t begin, std::size_t end, unsigned) {
    for (std::size_t i = begin; i < end; ++i) body(i);
  });
}

// ---------------------------------------------------------------------------
// Dense row-major 2D grid

template <class T>
struct Grid {
  int width = 0;
  int height = 0;
  std::vector<T> values;

  Grid() = default;
  Grid(int w, int h, T fill = T{}) : width(w), height(h), values(static_cast<std::size_t>(w) * h, fill) {}

  std::size_t size() const { return values.size(); }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
  T& operator()(int x, int y) { return values[index(x, y)]; }
  const T& operator()(int x, int y) const { return values[index(x, y)]; }

  friend bool operator==(const Grid&, const Grid&) = default;
};

using Mask = Grid<std::uint8_t>;

inline std::size_t count_set(const Mask& m) {
  return static_cast<std::size_t>(std::count_if(m.values.begin(), m.values.end(), [](auto v) { return v != 0; }));
}

inline double mask_iou(const Mask& a, const Mask& b) {
  require(a.width == b.width && a.height == b.height, "mask_iou: size mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a.values[i] != 0, y = b.values[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// Little-endian byte streams

inline constexpr std::uint32_t kEndianTag = 0x01020304u;

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f32(double v) { f32(static_cast<float>(v)); }
  void bytes(std::string_view s) { buf_.append(s.data(), s.size()); }
  void magic(const char (&tag)[5]) { bytes(std::string_view(tag, 4)); }

  /// Appends the CRC-32 of everything written so far.
  void seal() { u32(static_cast<std::uint32_t>(::crc32(0L, reinterpret_cast<const Bytef*>(buf_.data()), static_cast<uInt>(buf_.size())))); }

  const std::string& str() const { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  void expect_magic(const char (&tag)[5], const char* what) {
    if (bytes(4) != std::string_view(tag, 4)) fail(ErrorKind::format, std::string(what) + ": bad magic");
  }
  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

  /// Verifies the trailing CRC-32 written by ByteWriter::seal().
  static void verify_seal(std::string_view data, const char* what) {
    if (data.size() < 4) fail(ErrorKind::format, std::string(what) + ": truncated");
    ByteReader tail(data.substr(data.size() - 4));
    const std::uint32_t stored = tail.u32();
    const auto body = data.substr(0, data.size() - 4);
    const auto actual = static_cast<std::uint32_t>(::crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));
    if (stored != actual) fail(ErrorKind::format, std::string(what) + ": checksum mismatch");
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) fail(ErrorKind::format, "unexpected end of data");
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::string_view data) {
  return static_cast<std::uint32_t>(::crc32(0L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size())));
}

/// Change detector for whole files. Our binary formats end in a CRC of their
/// body, so a CRC over the full file is the same constant for every valid
/// file; the Adler-32 half still tracks the content.
inline std::uint64_t content_digest(std::string_view data) {
  const auto adler = ::adler32(1L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size()));
  return (static_cast<std::uint64_t>(adler) << 32) | crc32_of(data);
}

// ---------------------------------------------------------------------------
// Files

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::missing_file, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partially written file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::missing_file, "cannot write " + tmp.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) fail(ErrorKind::missing_file, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace omnifield
