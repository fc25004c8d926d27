#include "lungct/io.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "lungct/errors.hpp"

namespace fs = std::filesystem;

namespace lungct {

void atomic_write(const fs::path& path, const std::string& content) {
  fs::path dir = path.parent_path();
  if (!dir.empty()) fs::create_directories(dir);
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ComputeError("cannot open for writing: " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw ComputeError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw ComputeError("rename failed for " + path.string() + ": " + ec.message());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file: " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::uint64_t fnv1a64(const void* bytes, std::size_t n, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::string to_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

namespace {

template <typename T>
void append_pod(std::string& s, T v) {
  s.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(const std::string& s, std::size_t& off) {
  if (off + sizeof(T) > s.size()) throw DataError("tensor file truncated");
  T v;
  std::memcpy(&v, s.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace

void write_tensor_file(const fs::path& path, const char magic[4], std::uint32_t version,
                       const std::vector<TensorFileEntry>& entries) {
  std::string buf;
  buf.append(magic, 4);
  append_pod<std::uint32_t>(buf, version);
  append_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    append_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(e.name.size()));
    buf.append(e.name);
    buf.push_back(e.as_float32 ? 1 : 0);
    append_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(e.tensor.ndim()));
    for (int d : e.tensor.shape()) append_pod<std::int64_t>(buf, d);
    if (e.as_float32) {
      for (std::size_t i = 0; i < e.tensor.size(); ++i) {
        append_pod<float>(buf, static_cast<float>(e.tensor[i]));
      }
    } else {
      buf.append(reinterpret_cast<const char*>(e.tensor.data()), e.tensor.size() * sizeof(double));
    }
  }
  atomic_write(path, buf);
}

std::vector<TensorFileEntry> read_tensor_file(const fs::path& path, const char magic[4],
                                              std::uint32_t expected_version) {
  std::string buf = read_file(path);
  if (buf.size() < 12 || std::memcmp(buf.data(), magic, 4) != 0) {
    throw DataError("bad magic in " + path.string());
  }
  std::size_t off = 4;
  auto version = read_pod<std::uint32_t>(buf, off);
  if (version != expected_version) {
    throw DataError("unsupported version " + std::to_string(version) + " in " + path.string() +
                    " (expected " + std::to_string(expected_version) + ")");
  }
  auto count = read_pod<std::uint32_t>(buf, off);
  std::vector<TensorFileEntry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorFileEntry e;
    auto name_len = read_pod<std::uint32_t>(buf, off);
    if (off + name_len > buf.size()) throw DataError("tensor file truncated");
    e.name.assign(buf.data() + off, name_len);
    off += name_len;
    e.as_float32 = read_pod<char>(buf, off) != 0;
    auto ndim = read_pod<std::uint32_t>(buf, off);
    std::vector<int> shape(ndim);
    for (auto& d : shape) d = static_cast<int>(read_pod<std::int64_t>(buf, off));
    std::size_t n = shape_numel(shape);
    std::vector<double> values(n);
    if (e.as_float32) {
      for (std::size_t k = 0; k < n; ++k) values[k] = read_pod<float>(buf, off);
    } else {
      if (off + n * sizeof(double) > buf.size()) throw DataError("tensor file truncated");
      std::memcpy(values.data(), buf.data() + off, n * sizeof(double));
      off += n * sizeof(double);
    }
    e.tensor = Tensor(std::move(shape), std::move(values));
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace lungct
