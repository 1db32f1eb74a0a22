#include "svdnas/io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "svdnas/errors.hpp"

namespace svdnas {

namespace {

template <typename U>
U to_le(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(U)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<U>(bytes);
  }
  return v;
}

template <typename U>
void write_blob(const std::string& path, const std::vector<U>& values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write blob", path);
  for (U v : values) {
    const U le = to_le(v);
    out.write(reinterpret_cast<const char*>(&le), sizeof(U));
  }
  if (!out) throw IoError("short write", path);
}

template <typename U>
std::vector<U> read_blob(const std::string& path, std::size_t expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open blob", path);
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (raw.size() != expected * sizeof(U))
    throw IoError("blob holds " + std::to_string(raw.size()) + " bytes, expected " +
                      std::to_string(expected * sizeof(U)),
                  path);
  std::vector<U> out(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    U v;
    std::memcpy(&v, raw.data() + i * sizeof(U), sizeof(U));
    out[i] = to_le(v);
  }
  return out;
}

}  // namespace

void write_f32(const std::string& path, const std::vector<float>& values) { write_blob(path, values); }
std::vector<float> read_f32(const std::string& path, std::size_t expected) { return read_blob<float>(path, expected); }
void write_i32(const std::string& path, const std::vector<std::int32_t>& values) { write_blob(path, values); }
std::vector<std::int32_t> read_i32(const std::string& path, std::size_t expected) {
  return read_blob<std::int32_t>(path, expected);
}

Json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open", path);
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw IoError(std::string("malformed JSON (") + e.what() + ")", path);
  }
}

void write_json(const std::string& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write", path);
  out << text;
  if (!out) throw IoError("short write", path);
}

}  // namespace svdnas
