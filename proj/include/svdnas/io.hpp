#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "svdnas/ndarray.hpp"

namespace svdnas {

using Json = nlohmann::json;

// Little-endian raw blobs.
void write_f32(const std::string& path, const std::vector<float>& values);
std::vector<float> read_f32(const std::string& path, std::size_t expected);
void write_i32(const std::string& path, const std::vector<std::int32_t>& values);
std::vector<std::int32_t> read_i32(const std::string& path, std::size_t expected);

Json read_json(const std::string& path);
void write_json(const std::string& path, const Json& j);
void write_text(const std::string& path, const std::string& text);

}  // namespace svdnas
