#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace elytra {

using Json = nlohmann::json;

/// Hex SHA-256 of a byte range.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(const std::string &text);
std::string sha256_floats(std::span<const float> values);
std::string sha256_file(const std::filesystem::path &path);

/// Raw little-endian f32 blobs.
void write_f32_blob(const std::filesystem::path &path, std::span<const float> values);
std::vector<float> read_f32_blob(const std::filesystem::path &path);

Json read_json(const std::filesystem::path &path);
/// Writes pretty-printed JSON with a trailing newline. Output is byte-stable
/// for equal documents (object keys are sorted by nlohmann::json).
void write_json(const std::filesystem::path &path, const Json &doc);
void write_text(const std::filesystem::path &path, const std::string &text);
std::string read_text(const std::filesystem::path &path);

} // namespace elytra
