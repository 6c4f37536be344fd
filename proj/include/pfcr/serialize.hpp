#pragma once

#include <algorithm>
#include <initializer_list>
#include <string>

#include "json.hpp"

#include "pfcr/data.hpp"
#include "pfcr/errors.hpp"
#include "pfcr/pos.hpp"
#include "pfcr/recon.hpp"
#include "pfcr/train.hpp"
#include "pfcr/vit.hpp"

// JSON conversions for configuration and report types. Readers accept partial
// objects (absent keys keep their defaults) and reject unknown keys.

namespace pfcr {

using json = nlohmann::json;

namespace ser_detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed,
                       const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected a JSON object");
  for (const auto& [key, value] : j.items())
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
}

template <typename V>
void read(const json& j, const char* key, V& out) {
  if (auto it = j.find(key); it != j.end()) it->get_to(out);
}

}  // namespace ser_detail

inline void to_json(json& j, const ViTConfig& c) {
  j = {{"depth", c.depth},           {"embed_dim", c.embed_dim}, {"heads", c.heads},
       {"patch_size", c.patch_size}, {"image_size", c.image_size}, {"channels", c.channels},
       {"mlp_ratio", c.mlp_ratio},   {"num_classes", c.num_classes}, {"ln_eps", c.ln_eps}};
}

inline void from_json(const json& j, ViTConfig& c) {
  ser_detail::check_keys(j, {"depth", "embed_dim", "heads", "patch_size", "image_size",
                             "channels", "mlp_ratio", "num_classes", "ln_eps"},
                         "model");
  using ser_detail::read;
  read(j, "depth", c.depth);
  read(j, "embed_dim", c.embed_dim);
  read(j, "heads", c.heads);
  read(j, "patch_size", c.patch_size);
  read(j, "image_size", c.image_size);
  read(j, "channels", c.channels);
  read(j, "mlp_ratio", c.mlp_ratio);
  read(j, "num_classes", c.num_classes);
  read(j, "ln_eps", c.ln_eps);
}

inline void to_json(json& j, const SyntheticOptions& o) {
  j = {{"pattern_seed", o.pattern_seed}, {"blobs_per_class", o.blobs_per_class},
       {"blob_sigma", o.blob_sigma},     {"jitter", o.jitter},
       {"noise", o.noise},               {"distractors", o.distractors},
       {"distractor_amp", o.distractor_amp}};
}

inline void from_json(const json& j, SyntheticOptions& o) {
  ser_detail::check_keys(j, {"pattern_seed", "blobs_per_class", "blob_sigma", "jitter", "noise", "distractors",
                          "distractor_amp"},
                         "data.synthetic");
  using ser_detail::read;
  read(j, "pattern_seed", o.pattern_seed);
  read(j, "blobs_per_class", o.blobs_per_class);
  read(j, "blob_sigma", o.blob_sigma);
  read(j, "jitter", o.jitter);
  read(j, "noise", o.noise);
  read(j, "distractors", o.distractors);
  read(j, "distractor_amp", o.distractor_amp);
}

inline void to_json(json& j, const TrainOptions& o) {
  j = {{"epochs", o.epochs}, {"lr", o.lr}, {"batch_size", o.batch_size}, {"seed", o.seed}};
}

inline void from_json(const json& j, TrainOptions& o) {
  ser_detail::check_keys(j, {"epochs", "lr", "batch_size", "seed"}, "train");
  using ser_detail::read;
  read(j, "epochs", o.epochs);
  read(j, "lr", o.lr);
  read(j, "batch_size", o.batch_size);
  read(j, "seed", o.seed);
}

inline void to_json(json& j, const POSConfig& c) {
  j = {{"bits", c.bits},
       {"lr_0", c.lr_0},
       {"iter_0", c.iter_0},
       {"stage1_enabled", c.stage1_enabled},
       {"method", to_string(c.method)},
       {"input_policy", to_string(c.input_policy)},
       {"seed", c.seed},
       {"batch_size", c.batch_size},
       {"recalibrate_activations", c.recalibrate_activations}};
  if (c.weight_bits) j["weight_bits"] = *c.weight_bits;
  if (c.act_bits) j["act_bits"] = *c.act_bits;
}

// iter_0 falls back to the bit-width default when absent.
inline void from_json(const json& j, POSConfig& c) {
  ser_detail::check_keys(j, {"bits", "weight_bits", "act_bits", "lr_0", "iter_0",
                             "stage1_enabled", "method", "input_policy", "seed", "batch_size",
                             "recalibrate_activations"},
                         "pos");
  using ser_detail::read;
  read(j, "bits", c.bits);
  if (j.contains("weight_bits")) c.weight_bits = j.at("weight_bits").get<int>();
  if (j.contains("act_bits")) c.act_bits = j.at("act_bits").get<int>();
  read(j, "lr_0", c.lr_0);
  c.iter_0 = j.contains("iter_0") ? j.at("iter_0").get<std::int64_t>() : default_iter_0(c.bits);
  read(j, "stage1_enabled", c.stage1_enabled);
  if (j.contains("method")) c.method = method_from_string(j.at("method").get<std::string>());
  if (j.contains("input_policy")) {
    try {
      c.input_policy = input_policy_from_string(j.at("input_policy").get<std::string>());
    } catch (const ParseError& e) {
      throw ConfigError(e.what());
    }
  }
  read(j, "seed", c.seed);
  read(j, "batch_size", c.batch_size);
  read(j, "recalibrate_activations", c.recalibrate_activations);
}

inline void to_json(json& j, const UnitCurve& c) {
  j = {{"stage", c.stage}, {"level", c.level}, {"unit_index", c.unit_index},
       {"start", c.start}, {"span", c.span},   {"losses", c.losses}};
}

inline void from_json(const json& j, UnitCurve& c) {
  j.at("stage").get_to(c.stage);
  j.at("level").get_to(c.level);
  j.at("unit_index").get_to(c.unit_index);
  j.at("start").get_to(c.start);
  j.at("span").get_to(c.span);
  j.at("losses").get_to(c.losses);
}

inline void to_json(json& j, const StageReport& s) {
  j = {{"name", s.name},           {"coarsest", s.coarsest},       {"levels", s.levels},
       {"level_lr", s.level_lr},   {"level_iters", s.level_iters}, {"weight_quant", s.weight_quant},
       {"act_quant", s.act_quant}, {"seconds", s.seconds},         {"curves", s.curves}};
}

inline void from_json(const json& j, StageReport& s) {
  j.at("name").get_to(s.name);
  j.at("coarsest").get_to(s.coarsest);
  j.at("levels").get_to(s.levels);
  j.at("level_lr").get_to(s.level_lr);
  j.at("level_iters").get_to(s.level_iters);
  j.at("weight_quant").get_to(s.weight_quant);
  j.at("act_quant").get_to(s.act_quant);
  j.at("seconds").get_to(s.seconds);
  j.at("curves").get_to(s.curves);
}

}  // namespace pfcr
