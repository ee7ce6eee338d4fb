#include "gridformer/gtb.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

#include "gridformer/error.hpp"

namespace gridformer {

namespace {

constexpr char kMagic[4] = {'G', 'T', 'B', '1'};
constexpr std::size_t kPrefix = 8;

static_assert(sizeof(float) == 4);

std::uint32_t get_u32(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

std::string at_offset(std::size_t offset) { return " at byte offset " + std::to_string(offset); }

}  // namespace

std::vector<char> encode_gtb(const nlohmann::json& manifest, std::span<const float> payload) {
  std::string header = manifest.dump();
  if (header.size() > UINT32_MAX) throw ValidationError("GTB manifest too large");
  std::vector<char> out(kPrefix + header.size());
  std::memcpy(out.data(), kMagic, 4);
  auto len = static_cast<std::uint32_t>(header.size());
  for (std::size_t b = 0; b < 4; ++b) out[4 + b] = static_cast<char>((len >> (8 * b)) & 0xffu);
  if (!header.empty()) std::memcpy(out.data() + kPrefix, header.data(), header.size());
  std::size_t base = out.size();
  out.resize(base + payload.size() * 4);
  for (std::size_t k = 0; k < payload.size(); ++k) {
    auto u = std::bit_cast<std::uint32_t>(payload[k]);
    for (std::size_t b = 0; b < 4; ++b) out[base + 4 * k + b] = static_cast<char>((u >> (8 * b)) & 0xffu);
  }
  return out;
}

GtbContainer decode_gtb(std::span<const char> bytes) {
  if (bytes.size() < 4) throw FormatError("truncated GTB file: missing magic" + at_offset(bytes.size()));
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad GTB magic" + at_offset(0));
  if (bytes.size() < kPrefix) throw FormatError("truncated GTB header length" + at_offset(4));
  std::uint32_t header_len = get_u32(bytes.data() + 4);
  if (bytes.size() < kPrefix + header_len) {
    throw FormatError("truncated GTB manifest: expected " + std::to_string(header_len) + " bytes" +
                      at_offset(kPrefix));
  }
  GtbContainer c;
  try {
    c.manifest = nlohmann::json::parse(bytes.begin() + kPrefix, bytes.begin() + kPrefix + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed GTB manifest: ") + e.what() + at_offset(kPrefix));
  }
  if (!c.manifest.is_object()) throw FormatError("GTB manifest is not an object" + at_offset(kPrefix));
  std::size_t start = kPrefix + header_len;
  std::size_t rest = bytes.size() - start;
  if (rest % 4 != 0) throw FormatError("GTB payload is not a whole number of f32 values" + at_offset(start));
  c.payload_offset = start;
  c.payload.resize(rest / 4);
  for (std::size_t i = 0; i < c.payload.size(); ++i) {
    c.payload[i] = std::bit_cast<float>(get_u32(bytes.data() + start + 4 * i));
  }
  return c;
}

void write_gtb(const std::filesystem::path& path, const nlohmann::json& manifest, std::span<const float> payload) {
  auto bytes = encode_gtb(manifest, payload);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

GtbContainer read_gtb(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_gtb(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void to_json(nlohmann::json& j, const NormStats& stats) {
  j = nlohmann::json::object();
  for (const auto& [name, s] : stats.entries()) j[name] = {{"mean", s.mean}, {"std", s.std}};
}

void from_json(const nlohmann::json& j, NormStats& stats) {
  for (const auto& [name, s] : j.items()) {
    stats.set(name, {s.at("mean").get<double>(), s.at("std").get<double>()});
  }
}

nlohmann::json dataset_manifest(const Dataset& data) {
  if (data.variables().empty()) throw ValidationError("cannot write a dataset with no variables");
  nlohmann::json m;
  m["kind"] = "dataset";
  m["dtype"] = "f32";
  m["grid"] = {{"lats", data.grid().lats()}, {"lons", data.grid().lons()}};
  m["variables"] = data.variables();
  m["static_variables"] = data.static_variables();
  m["time"] = {{"start_hours", data.start_hours()},
               {"step_hours", data.step_hours()},
               {"count", data.num_samples()}};
  m["norm_stats"] = data.norm_stats();
  if (!data.generator().is_null()) m["generator"] = data.generator();
  return m;
}

Dataset dataset_from_container(const GtbContainer& c) {
  const auto& m = c.manifest;
  try {
    if (m.value("kind", std::string("dataset")) != "dataset") throw FormatError("GTB file is not a dataset");
    if (m.value("dtype", std::string()) != "f32") throw FormatError("unsupported GTB dtype");
    GridSpec grid(m.at("grid").at("lats").get<std::vector<double>>(),
                  m.at("grid").at("lons").get<std::vector<double>>());
    auto vars = m.at("variables").get<std::vector<std::string>>();
    if (vars.empty()) throw FormatError("GTB dataset has no variables");
    auto count = m.at("time").at("count").get<std::size_t>();
    std::size_t expected = count * vars.size() * grid.cells();
    if (c.payload.size() != expected) {
      throw FormatError("GTB payload holds " + std::to_string(c.payload.size()) + " values but manifest declares " +
                        std::to_string(expected) +
                        at_offset(c.payload_offset + 4 * std::min(expected, c.payload.size())));
    }
    Dataset data(grid, vars, m.at("time").at("start_hours").get<std::int64_t>(),
                 m.at("time").at("step_hours").get<std::int64_t>(), c.payload);
    data.set_static_variables(m.value("static_variables", std::vector<std::string>{}));
    if (m.contains("norm_stats")) data.set_norm_stats(m.at("norm_stats").get<NormStats>());
    if (m.contains("generator")) data.set_generator(m.at("generator"));
    return data;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid GTB dataset manifest: ") + e.what());
  }
}

void write_dataset(const std::filesystem::path& path, const Dataset& data) {
  write_gtb(path, dataset_manifest(data), data.values());
}

Dataset read_dataset(const std::filesystem::path& path) { return dataset_from_container(read_gtb(path)); }

}  // namespace gridformer
