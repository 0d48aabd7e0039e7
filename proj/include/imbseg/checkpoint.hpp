#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "imbseg/errors.hpp"
#include "imbseg/net.hpp"
#include "json.hpp"

namespace imbseg {

static_assert(std::endian::native == std::endian::little, "checkpoint i/o assumes a little-endian host");

inline void to_json(nlohmann::json& j, const NetConfig& c) {
  j = nlohmann::json{{"in_channels", c.in_channels},
                     {"base_channels", c.base_channels},
                     {"levels", c.levels},
                     {"max_channels", c.max_channels},
                     {"leaky_slope", c.leaky_slope}};
}

inline void from_json(const nlohmann::json& j, NetConfig& c) {
  c.in_channels = j.value("in_channels", c.in_channels);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.levels = j.value("levels", c.levels);
  c.max_channels = j.value("max_channels", c.max_channels);
  c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
}

inline constexpr char kCheckpointMagic[9] = "IMBSEG01";

// Layout: 8-byte magic, uint32 little-endian JSON length, NetConfig JSON,
// parameter vector as little-endian 32-bit floats.
inline void save_checkpoint(const std::string& path, const NetConfig& cfg, const ModelParams& params) {
  detail::check_params(params, cfg);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open checkpoint for writing: " + path);
  f.write(kCheckpointMagic, 8);
  const std::string js = nlohmann::json(cfg).dump();
  const std::uint32_t len = static_cast<std::uint32_t>(js.size());
  f.write(reinterpret_cast<const char*>(&len), 4);
  f.write(js.data(), static_cast<std::streamsize>(js.size()));
  std::vector<float> buf(params.values.begin(), params.values.end());
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!f) throw io_error("short write while saving checkpoint: " + path);
}

inline std::pair<NetConfig, ModelParams> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw missing_artifact("checkpoint not found: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw io_error("bad checkpoint magic in " + path);
  std::uint32_t len = 0;
  f.read(reinterpret_cast<char*>(&len), 4);
  if (!f || len > (1u << 20)) throw io_error("corrupt checkpoint header in " + path);
  std::string js(len, '\0');
  f.read(js.data(), len);
  if (!f) throw io_error("truncated checkpoint config in " + path);

  NetConfig cfg;
  try {
    nlohmann::json::parse(js).get_to(cfg);
  } catch (const nlohmann::json::exception& e) {
    throw io_error("invalid checkpoint config in " + path + ": " + e.what());
  }
  validate(cfg);

  ModelParams p;
  p.shapes = layer_shapes(cfg);
  const std::size_t expected = param_count(p.shapes);
  std::vector<float> buf(expected);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(expected * sizeof(float)));
  if (static_cast<std::size_t>(f.gcount()) != expected * sizeof(float))
    throw io_error("checkpoint parameter count mismatch in " + path);
  char extra;
  if (f.read(&extra, 1)) throw io_error("checkpoint parameter count mismatch in " + path);
  p.values.assign(buf.begin(), buf.end());
  for (double v : p.values)
    if (!std::isfinite(v)) throw io_error("non-finite parameter in checkpoint " + path);
  return {cfg, std::move(p)};
}

}  // namespace imbseg
