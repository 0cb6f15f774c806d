#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mmctl/diffusion.hpp"
#include "mmctl/model.hpp"
#include "mmctl/synthdata.hpp"

namespace mmctl {

struct SamplingConfig {
  Index stage1_steps = 32;
  Index stage2_steps = 3;
  double sigma0 = 0.25;
  double cfg_scale = 4.0;
  double stage2_cfg = 1.0;
  double gamma_v = 1.0;
  double gamma_a = 1.0;
  Index k_default = 4;
};

// Every tunable of the pipeline. Model geometry (patch grid, latent widths)
// is derived from the world and codec settings.
struct Config {
  WorldConfig world;
  Index patch = 8;
  ModelConfig model;
  DiffusionConfig diffusion;
  double full_res_fraction = 0.25;  // share of training draws at full resolution
  double caption_dropout = 0.5;     // per-attribute word dropout in training captions
  SamplingConfig sampling;
  TrainHyper pretrain{4000, 8, 2, 1e-3, 100, 0.01, 1.0, 10, 500};
  TrainHyper control{1500, 8, 2, 1e-3, 50, 0.01, 1.0, 10, 500};
  std::size_t pretrain_size = 2048;
  std::size_t control_size = 1024;  // per task
  std::uint64_t data_seed = 1;
  std::size_t synth_count = 64;
  std::string synth_task = "mixed";
  std::size_t eval_scenes = 32;
  std::uint64_t eval_seed = 977;

  // Model config with derived geometry filled in.
  ModelConfig model_config() const;
  TwoStageConfig two_stage() const;
  CodecPair codecs() const;
  void validate() const;
};

struct ConfigKey {
  std::string key;
  std::string doc;
};

// All recognised keys in sorted order.
std::vector<ConfigKey> config_keys();

// Applies `key = value` lines ('#' starts a comment) on top of `base`.
// Unknown keys, malformed lines and unparsable values raise ConfigError.
Config parse_config(const std::string& text, Config base = {});
Config load_config(const std::filesystem::path& path, Config base = {});
void set_config_value(Config& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const Config& cfg, const std::string& key);

// Canonical text: every key, sorted, one `key = value` per line.
std::string resolved_config(const Config& cfg);
std::string config_hash(const Config& cfg);

}  // namespace mmctl
