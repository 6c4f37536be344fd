#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include <zlib.h>

#include "pfcr/errors.hpp"
#include "pfcr/quantizer.hpp"
#include "pfcr/serialize.hpp"
#include "pfcr/vit.hpp"

// Checkpoints are a JSON manifest next to a raw little-endian f32 blob:
//   <prefix>.manifest.json   names, shapes, byte offsets, quantizer s/z/b, CRC32
//   <prefix>.weights.bin     parameters, then quantizer scales
// Quantizer scales live in the blob as well as the manifest so loading is bit-exact.

namespace pfcr {

inline constexpr const char* kCheckpointMagic = "pfcr-checkpoint";
inline constexpr int kCheckpointVersion = 1;

namespace ckpt_detail {

inline std::string manifest_path(const std::string& prefix) { return prefix + ".manifest.json"; }
inline std::string blob_path(const std::string& prefix) { return prefix + ".weights.bin"; }

inline std::string strip_prefix(std::string path) {
  const std::string suffix = ".manifest.json";
  if (path.size() > suffix.size() && path.compare(path.size() - suffix.size(), suffix.size(), suffix) == 0)
    path.resize(path.size() - suffix.size());
  return path;
}

inline std::uint32_t crc32_of(const std::vector<unsigned char>& bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const unsigned char* p = bytes.data();
  std::size_t left = bytes.size();
  while (left > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(left, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    left -= chunk;
  }
  return std::uint32_t(crc);
}

inline void append_f32(std::vector<unsigned char>& out, std::span<const float> values) {
  const std::size_t at = out.size();
  out.resize(at + values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) out[at + 4 * i + std::size_t(b)] = (bits >> (8 * b)) & 0xffu;
  }
}

inline std::vector<float> read_f32(const std::vector<unsigned char>& blob, std::size_t offset,
                                   std::size_t count, const std::string& what) {
  if (offset + count * 4 > blob.size())
    throw ParseError("checkpoint: " + what + " at byte offset " + std::to_string(offset) +
                     " needs " + std::to_string(count * 4) + " bytes, blob has " +
                     std::to_string(blob.size()));
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= std::uint32_t(blob[offset + 4 * i + std::size_t(b)]) << (8 * b);
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

inline std::vector<unsigned char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace ckpt_detail

// Writes `<prefix>.manifest.json` and `<prefix>.weights.bin`.
inline void save_checkpoint(const ModelState<float>& model, const std::string& prefix) {
  using nlohmann::json;
  std::vector<unsigned char> blob;
  json tensors = json::array();
  for (const auto& [name, t] : model.named_parameters()) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"dtype", "f32"},
                       {"offset", blob.size()}, {"bytes", t.numel() * 4}});
    ckpt_detail::append_f32(blob, t.data());
  }
  json quantizers = json::array();
  for (const auto& [name, q] : model.quantizers) {
    const auto& p = q.params;
    json entry{{"name", name},
               {"role", to_string(q.spec.role)},
               {"scheme", to_string(p.scheme)},
               {"bits", p.bits},
               {"channel_axis", p.channel_axis ? json(*p.channel_axis) : json(nullptr)},
               {"scale_shape", p.scale.shape()},
               {"scale_offset", blob.size()},
               {"scale", std::vector<double>(p.scale.data().begin(), p.scale.data().end())},
               {"zero_point", p.zero_point}};
    quantizers.push_back(std::move(entry));
    ckpt_detail::append_f32(blob, p.scale.data());
  }
  const std::filesystem::path bin = ckpt_detail::blob_path(prefix);
  json manifest{{"magic", kCheckpointMagic},
                {"version", kCheckpointVersion},
                {"blob", bin.filename().string()},
                {"blob_bytes", blob.size()},
                {"crc32", ckpt_detail::crc32_of(blob)},
                {"config", model.config},
                {"weight_quant_enabled", model.weight_quant_enabled},
                {"act_quant_enabled", model.act_quant_enabled},
                {"tensors", std::move(tensors)},
                {"quantizers", std::move(quantizers)}};
  if (bin.has_parent_path()) std::filesystem::create_directories(bin.parent_path());
  {
    std::ofstream out(bin, std::ios::binary);
    out.write(reinterpret_cast<const char*>(blob.data()), std::streamsize(blob.size()));
    if (!out) throw std::runtime_error("cannot write '" + bin.string() + "'");
  }
  std::ofstream out(ckpt_detail::manifest_path(prefix));
  out << manifest.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write '" + ckpt_detail::manifest_path(prefix) + "'");
}

// Accepts either the prefix or the manifest path.
inline ModelState<float> load_checkpoint(const std::string& path) {
  using nlohmann::json;
  const std::string prefix = ckpt_detail::strip_prefix(path);
  const std::string mpath = ckpt_detail::manifest_path(prefix);
  json manifest;
  {
    std::ifstream in(mpath);
    if (!in) throw ParseError("cannot open checkpoint manifest '" + mpath + "'");
    try {
      manifest = json::parse(in);
    } catch (const json::exception& e) {
      throw ParseError(mpath + ": " + e.what());
    }
  }
  try {
    if (manifest.value("magic", std::string()) != kCheckpointMagic)
      throw ParseError(mpath + ": not a checkpoint manifest (bad magic)");
    if (manifest.at("version").get<int>() != kCheckpointVersion)
      throw ParseError(mpath + ": unsupported checkpoint version " +
                       manifest.at("version").dump());
    const auto bin = std::filesystem::path(mpath).parent_path() /
                     manifest.at("blob").get<std::string>();
    const auto blob = ckpt_detail::read_bytes(bin.string());
    if (blob.size() != manifest.at("blob_bytes").get<std::size_t>())
      throw ChecksumError(bin.string() + ": expected " + manifest.at("blob_bytes").dump() +
                          " bytes, found " + std::to_string(blob.size()));
    const auto crc = ckpt_detail::crc32_of(blob);
    if (crc != manifest.at("crc32").get<std::uint32_t>())
      throw ChecksumError(bin.string() + ": CRC32 mismatch (manifest " +
                          manifest.at("crc32").dump() + ", blob " + std::to_string(crc) + ")");

    ModelState<float> model = init_model<float>(manifest.at("config").get<ViTConfig>(), 0);
    model.weight_quant_enabled = manifest.at("weight_quant_enabled").get<bool>();
    model.act_quant_enabled = manifest.at("act_quant_enabled").get<bool>();
    const auto params = model.named_parameters();
    if (manifest.at("tensors").size() != params.size())
      throw ParseError(mpath + ": expected " + std::to_string(params.size()) + " tensors, manifest has " +
                       std::to_string(manifest.at("tensors").size()));
    for (const auto& entry : manifest.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      Tensor<float> t = model.find_parameter(name);
      if (!t.defined()) throw ParseError(mpath + ": unknown tensor '" + name + "'");
      if (entry.at("shape").get<Shape>() != t.shape())
        throw ParseError(mpath + ": tensor '" + name + "' has shape " + entry.at("shape").dump() +
                         ", model expects " + shape_str(t.shape()));
      const auto values = ckpt_detail::read_f32(blob, entry.at("offset").get<std::size_t>(),
                                                t.numel(), "tensor '" + name + "'");
      std::copy(values.begin(), values.end(), t.values().begin());
    }
    for (const auto& entry : manifest.at("quantizers")) {
      const auto name = entry.at("name").get<std::string>();
      Quantizer<float> q;
      q.spec.role = role_from_string(entry.at("role").get<std::string>());
      q.spec.scheme = scheme_from_string(entry.at("scheme").get<std::string>());
      q.spec.bits = entry.at("bits").get<int>();
      if (!entry.at("channel_axis").is_null())
        q.spec.channel_axis = entry.at("channel_axis").get<std::size_t>();
      q.spec.validate();
      const auto shape = entry.at("scale_shape").get<Shape>();
      auto values = ckpt_detail::read_f32(blob, entry.at("scale_offset").get<std::size_t>(),
                                          numel_of(shape), "scale of '" + name + "'");
      q.params = {Tensor<float>(shape, std::move(values)),
                  entry.at("zero_point").get<std::vector<std::int64_t>>(), q.spec.bits,
                  q.spec.scheme, q.spec.channel_axis};
      model.quantizers.emplace(name, std::move(q));
    }
    return model;
  } catch (const json::exception& e) {
    throw ParseError(mpath + ": " + e.what());
  }
}

inline bool checkpoint_exists(const std::string& path) {
  return std::filesystem::exists(ckpt_detail::manifest_path(ckpt_detail::strip_prefix(path)));
}

// CRC32 over the canonical f32 parameter bytes; used to verify that ablation
// arms share one baseline.
inline std::uint32_t parameter_checksum(const ModelState<float>& model) {
  std::vector<unsigned char> bytes;
  for (const auto& [name, t] : model.named_parameters()) ckpt_detail::append_f32(bytes, t.data());
  return ckpt_detail::crc32_of(bytes);
}

}  // namespace pfcr
