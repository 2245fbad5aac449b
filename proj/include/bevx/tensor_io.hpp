#pragma once
// Named-tensor dump: little-endian, magic "BEVX1", then per tensor
//   u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | f32 payload
// repeated until end of stream.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bevx/tensor.hpp"

namespace bevx {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

inline constexpr std::array<char, 5> kDumpMagic = {'B', 'E', 'V', 'X', '1'};

namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <class T>
bool get_le(std::istream& is, T& v) {
  v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) return false;
    v |= static_cast<T>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return true;
}

}  // namespace detail

inline void write_tensors(std::ostream& os, const std::vector<NamedTensor>& tensors) {
  os.write(kDumpMagic.data(), kDumpMagic.size());
  for (const auto& [name, t] : tensors) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw FormatError("tensor dump: name too long: " + name.substr(0, 32) + "...");
    }
    if (t.rank() > std::numeric_limits<std::uint8_t>::max()) throw FormatError("tensor dump: rank too large");
    detail::put_le(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le(os, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) {
      if (d > std::numeric_limits<std::uint32_t>::max()) throw FormatError("tensor dump: dim too large");
      detail::put_le(os, static_cast<std::uint32_t>(d));
    }
    for (double v : t.data()) {
      detail::put_le(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  if (!os) throw FormatError("tensor dump: write failed");
}

inline std::vector<NamedTensor> read_tensors(std::istream& is) {
  std::array<char, 5> magic{};
  is.read(magic.data(), magic.size());
  if (is.gcount() != static_cast<std::streamsize>(magic.size()) || magic != kDumpMagic) {
    throw FormatError("tensor dump: bad magic");
  }
  std::vector<NamedTensor> out;
  while (is.peek() != std::char_traits<char>::eof()) {
    std::uint16_t len = 0;
    std::uint8_t rank = 0;
    if (!detail::get_le(is, len)) throw FormatError("tensor dump: truncated name length");
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (is.gcount() != len) throw FormatError("tensor dump: truncated name");
    if (!detail::get_le(is, rank)) throw FormatError("tensor dump: truncated rank in " + name);
    Shape shape(rank);
    for (auto& d : shape) {
      std::uint32_t v = 0;
      if (!detail::get_le(is, v)) throw FormatError("tensor dump: truncated dims in " + name);
      d = v;
    }
    std::vector<double> data(numel(shape));
    for (double& v : data) {
      std::uint32_t bits = 0;
      if (!detail::get_le(is, bits)) throw FormatError("tensor dump: truncated payload in " + name);
      v = static_cast<double>(std::bit_cast<float>(bits));
    }
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  return out;
}

inline void save_tensors(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open for writing: " + path);
  write_tensors(f, tensors);
}

inline std::vector<NamedTensor> load_tensors(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open for reading: " + path);
  return read_tensors(f);
}

inline const Tensor& find_tensor(const std::vector<NamedTensor>& ts, const std::string& name) {
  for (const auto& t : ts) {
    if (t.name == name) return t.value;
  }
  throw FormatError("tensor dump: missing tensor '" + name + "'");
}

/// Stores bytes of a text blob as a rank-1 tensor (each byte exact in f32).
inline Tensor text_to_tensor(const std::string& s) {
  std::vector<double> d(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) d[i] = static_cast<unsigned char>(s[i]);
  return Tensor({s.size()}, std::move(d));
}

inline std::string tensor_to_text(const Tensor& t) {
  std::string s;
  s.reserve(t.size());
  for (double v : t.data()) s.push_back(static_cast<char>(static_cast<unsigned char>(v)));
  return s;
}

}  // namespace bevx
