#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "ffkv/numerics/matrix.hpp"

namespace ffkv {

// SHA-256 as lowercase hex.
inline std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 || EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx, md.data(), &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("sha256: digest failed");
  }
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

inline std::string sha256_hex(std::span<const float> values) {
  std::string bytes(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, &values[i], 4);
    if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
    std::memcpy(bytes.data() + 4 * i, &u, 4);
  }
  return sha256_hex(std::string_view(bytes));
}

namespace io {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t read_uint(std::istream& is, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = is.get();
    if (c == EOF) throw Error("container: truncated header");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

inline void write_f32_block(std::ostream& os, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * 4));
  } else {
    for (float f : values) {
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      write_u32(os, u);
    }
  }
}

inline void read_f32_block(std::istream& is, std::span<float> out) {
  is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size() * 4));
  if (!is) throw Error("container: truncated tensor block");
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& f : out) {
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      u = __builtin_bswap32(u);
      std::memcpy(&f, &u, 4);
    }
  }
}

}  // namespace io

// Tensor container used for model, coder and shard files.
//
//   bytes 0..7   magic (8 ASCII bytes, e.g. "FFKVCKPT")
//   u32 LE       format version
//   u64 LE       header length H
//   H bytes      UTF-8 JSON header; "tensors": [{name, rows, cols, offset}],
//                offsets in floats from the start of the blob section
//   blob         little-endian float32 data for every tensor, in header order
struct Container {
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::json header = nlohmann::json::object();
  std::map<std::string, Matrix> tensors;
  std::vector<std::string> order;

  void put(const std::string& name, Matrix m) {
    if (!tensors.contains(name)) order.push_back(name);
    tensors[name] = std::move(m);
  }

  void put(const std::string& name, std::span<const float> v) { put(name, Matrix(1, v.size(), std::vector<float>(v.begin(), v.end()))); }

  const Matrix& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw Error("container: missing tensor '" + name + "'");
    return it->second;
  }

  bool has(const std::string& name) const { return tensors.contains(name); }

  void write(std::ostream& os, std::string_view magic) const {
    if (magic.size() != 8) throw Error("container: magic must be 8 bytes");
    nlohmann::json h = header;
    nlohmann::json list = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& name : order) {
      const Matrix& m = tensors.at(name);
      list.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
      offset += m.size();
    }
    h["tensors"] = list;
    const std::string text = h.dump();
    os.write(magic.data(), 8);
    io::write_u32(os, kVersion);
    io::write_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& name : order) io::write_f32_block(os, tensors.at(name).flat());
    if (!os) throw Error("container: write failed");
  }

  void save(const std::filesystem::path& path, std::string_view magic) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("container: cannot open '" + path.string() + "' for writing");
    write(os, magic);
  }

  static Container read(std::istream& is, std::string_view magic) {
    char got[8];
    is.read(got, 8);
    if (!is || std::string_view(got, 8) != magic) throw Error("container: bad magic, expected " + std::string(magic));
    const auto version = io::read_uint(is, 4);
    if (version != kVersion) throw Error("container: unsupported version " + std::to_string(version));
    const auto hlen = io::read_uint(is, 8);
    std::string text(hlen, '\0');
    is.read(text.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw Error("container: truncated header");
    Container c;
    c.header = nlohmann::json::parse(text);
    for (const auto& t : c.header.at("tensors")) {
      Matrix m(t.at("rows").get<std::size_t>(), t.at("cols").get<std::size_t>());
      io::read_f32_block(is, m.flat());
      c.put(t.at("name").get<std::string>(), std::move(m));
    }
    c.header.erase("tensors");
    return c;
  }

  static Container load(const std::filesystem::path& path, std::string_view magic) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("container: cannot open '" + path.string() + "'");
    return read(is, magic);
  }
};

}  // namespace ffkv
