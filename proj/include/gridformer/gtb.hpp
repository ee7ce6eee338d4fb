#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gridformer/dataset.hpp"
#include "json.hpp"

namespace gridformer {

// GTB container layout, little-endian:
//   "GTB1" | u32 header length | UTF-8 JSON manifest | f32 payload
struct GtbContainer {
  nlohmann::json manifest;
  std::vector<float> payload;
  std::size_t payload_offset = 0;  // byte offset of the payload in the file
};

std::vector<char> encode_gtb(const nlohmann::json& manifest, std::span<const float> payload);
GtbContainer decode_gtb(std::span<const char> bytes);

void write_gtb(const std::filesystem::path& path, const nlohmann::json& manifest, std::span<const float> payload);
GtbContainer read_gtb(const std::filesystem::path& path);

nlohmann::json dataset_manifest(const Dataset& data);
Dataset dataset_from_container(const GtbContainer& container);

void write_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset read_dataset(const std::filesystem::path& path);

void to_json(nlohmann::json& j, const NormStats& stats);
void from_json(const nlohmann::json& j, NormStats& stats);

}  // namespace gridformer
