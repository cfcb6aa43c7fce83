#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffseg/denoiser.hpp"
#include "diffseg/tensor.hpp"

namespace diffseg {

namespace detail {

inline void write_exact(std::ofstream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void read_exact(std::ifstream& is, void* p, size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  require_data(is.gcount() == static_cast<std::streamsize>(n),
               "checkpoint: truncated tensor file");
}

inline std::string sanitize_filename(const std::string& name) {
  std::string out = name;
  for (char& c : out)
    if (c == '/' || c == '\\' || c == ':') c = '_';
  return out;
}

}  // namespace detail

// Parameter tensor file: magic "DSP1", uint32 rank, int64 dims, then raw
// IEEE-754 float32 values. All fields little-endian.
template <typename T>
void save_tensor_file(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  require_data(os.good(), "checkpoint: cannot open ", path.string(), " for writing");
  detail::write_exact(os, "DSP1", 4);
  uint32_t rank = static_cast<uint32_t>(t.rank());
  detail::write_exact(os, &rank, sizeof(rank));
  for (int i = 0; i < static_cast<int>(rank); ++i) {
    int64_t d = t.dim(i);
    detail::write_exact(os, &d, sizeof(d));
  }
  if constexpr (std::is_same_v<T, float>) {
    detail::write_exact(os, t.data(), sizeof(float) * static_cast<size_t>(t.numel()));
  } else {
    std::vector<float> buf(static_cast<size_t>(t.numel()));
    for (int64_t i = 0; i < t.numel(); ++i) buf[static_cast<size_t>(i)] = static_cast<float>(t[i]);
    detail::write_exact(os, buf.data(), sizeof(float) * buf.size());
  }
  require_data(os.good(), "checkpoint: write failed for ", path.string());
}

template <typename T>
Tensor<T> load_tensor_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require_data(is.good(), "checkpoint: cannot open ", path.string());
  char magic[4];
  detail::read_exact(is, magic, 4);
  require_data(std::memcmp(magic, "DSP1", 4) == 0, "checkpoint: bad magic in ",
               path.string());
  uint32_t rank = 0;
  detail::read_exact(is, &rank, sizeof(rank));
  require_data(rank <= 8, "checkpoint: implausible tensor rank");
  std::vector<int64_t> shape(rank);
  for (uint32_t i = 0; i < rank; ++i) detail::read_exact(is, &shape[i], sizeof(int64_t));
  Tensor<T> t(shape);
  std::vector<float> buf(static_cast<size_t>(t.numel()));
  detail::read_exact(is, buf.data(), sizeof(float) * buf.size());
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(buf[static_cast<size_t>(i)]);
  return t;
}

inline nlohmann::json denoiser_config_to_json(const DenoiserConfig& c) {
  return nlohmann::json{{"image_channels", c.image_channels},
                        {"num_classes", c.num_classes},
                        {"base_width", c.base_width},
                        {"depth", c.depth},
                        {"time_embed_dim", c.time_embed_dim}};
}

inline DenoiserConfig denoiser_config_from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.image_channels = j.value("image_channels", c.image_channels);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.base_width = j.value("base_width", c.base_width);
  c.depth = j.value("depth", c.depth);
  c.time_embed_dim = j.value("time_embed_dim", c.time_embed_dim);
  return c;
}

// Checkpoint directory: manifest.json (config echo, step counter, rng state,
// parameter index) plus one binary file per named parameter.
template <typename T>
void save_checkpoint(const DualPathwayDenoiser<T>& model,
                     const std::filesystem::path& dir, int64_t step,
                     const std::string& rng_state) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "diffseg-checkpoint-v1";
  manifest["config"] = denoiser_config_to_json(model.config());
  manifest["step"] = step;
  manifest["rng_state"] = rng_state;
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : model.params().all()) {
    std::string file = detail::sanitize_filename(p->name) + ".bin";
    save_tensor_file(dir / file, p->value);
    params.push_back({{"name", p->name}, {"file", file}, {"shape", p->value.shape()}});
  }
  manifest["parameters"] = params;
  std::ofstream os(dir / "manifest.json");
  require_data(os.good(), "checkpoint: cannot write manifest in ", dir.string());
  os << manifest.dump(2) << "\n";
}

template <typename T>
struct LoadedCheckpoint {
  DualPathwayDenoiser<T> model;
  int64_t step = 0;
  std::string rng_state;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  require_data(is.good(), "checkpoint: no manifest in ", dir.string());
  nlohmann::json manifest = nlohmann::json::parse(is);
  require_data(manifest.value("format", "") == "diffseg-checkpoint-v1",
               "checkpoint: unknown format");
  DenoiserConfig cfg = denoiser_config_from_json(manifest.at("config"));
  Rng scratch(0);
  LoadedCheckpoint<T> out{DualPathwayDenoiser<T>(cfg, scratch),
                          manifest.value("step", int64_t(0)),
                          manifest.value("rng_state", std::string())};
  for (const auto& entry : manifest.at("parameters")) {
    std::string name = entry.at("name").get<std::string>();
    auto p = out.model.params().find(name);
    require_data(p != nullptr, "checkpoint: unexpected parameter ", name);
    Tensor<T> t = load_tensor_file<T>(dir / entry.at("file").get<std::string>());
    require_data(t.same_shape(p->value), "checkpoint: shape mismatch for ", name);
    std::memcpy(p->value.data(), t.data(), sizeof(T) * static_cast<size_t>(t.numel()));
  }
  return out;
}

}  // namespace diffseg
