#include "mmctl/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <type_traits>

#include "mmctl/hashing.hpp"

namespace mmctl {

namespace {

struct Entry {
  std::string key;
  std::string doc;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
};

template <typename T>
T parse_value(const std::string& key, const std::string& v) {
  if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else {
    T out{};
    const char* end = v.data() + v.size();
    auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end) throw ConfigError("config key " + key + ": cannot parse '" + v + "'");
    return out;
  }
}

template <typename T>
std::string format_value(const T& v) {
  if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
  }
}

template <typename Acc>
Entry entry(std::string key, std::string doc, Acc acc) {
  using T = std::remove_reference_t<decltype(acc(std::declval<Config&>()))>;
  Entry e;
  e.key = key;
  e.doc = std::move(doc);
  e.get = [acc](const Config& c) { return format_value(acc(const_cast<Config&>(c))); };
  e.set = [acc, key](Config& c, const std::string& v) { acc(c) = parse_value<T>(key, v); };
  return e;
}

#define MMCTL_FIELD(key, doc, expr) entry(key, doc, [](Config& c) -> auto& { return c.expr; })

void add_train_keys(std::vector<Entry>& t, const std::string& p, TrainHyper Config::*h) {
  auto field = [&](const char* name, const char* doc, auto member) {
    t.push_back(entry(p + "." + name, doc, [h, member](Config& c) -> auto& { return (c.*h).*member; }));
  };
  field("steps", "optimiser steps", &TrainHyper::steps);
  field("batch", "samples per micro-batch", &TrainHyper::batch);
  field("grad_accum", "micro-batches per optimiser step", &TrainHyper::grad_accum);
  field("peak_lr", "peak learning rate of the cosine schedule", &TrainHyper::peak_lr);
  field("warmup", "linear warmup steps", &TrainHyper::warmup);
  field("weight_decay", "decoupled AdamW weight decay", &TrainHyper::weight_decay);
  field("grad_clip", "global gradient-norm clip (0 disables)", &TrainHyper::grad_clip);
  field("log_every", "loss log interval in steps", &TrainHyper::log_every);
  field("checkpoint_every", "periodic checkpoint interval (0 disables)", &TrainHyper::checkpoint_every);
}

const std::vector<Entry>& table() {
  static const std::vector<Entry> entries = [] {
    std::vector<Entry> t{
        MMCTL_FIELD("world.height", "video frame height in pixels", world.height),
        MMCTL_FIELD("world.width", "video frame width in pixels", world.width),
        MMCTL_FIELD("world.sample_rate", "audio sample rate in Hz", world.sample_rate),
        MMCTL_FIELD("world.frame_len", "audio samples per video frame", world.frame_len),
        MMCTL_FIELD("world.t", "generated (target) frames", world.t),
        MMCTL_FIELD("world.k", "reference frames preceding the target", world.k),
        MMCTL_FIELD("world.size_min", "smallest square side", world.size_min),
        MMCTL_FIELD("world.size_max", "largest square side", world.size_max),
        MMCTL_FIELD("world.speed_min", "smallest horizontal speed, px/frame", world.speed_min),
        MMCTL_FIELD("world.speed_max", "largest horizontal speed, px/frame", world.speed_max),
        MMCTL_FIELD("world.vy_max", "largest vertical speed, px/frame", world.vy_max),
        MMCTL_FIELD("world.f_base", "base fundamental frequency, Hz", world.f_base),
        MMCTL_FIELD("world.kappa", "pitch slope, Hz per px of horizontal position", world.kappa),
        MMCTL_FIELD("codec.patch", "video patch side", patch),
        MMCTL_FIELD("model.layers", "joint blocks (even)", model.layers),
        MMCTL_FIELD("model.d_model", "hidden width", model.d_model),
        MMCTL_FIELD("model.heads", "attention heads", model.heads),
        MMCTL_FIELD("model.ffn_mult", "feed-forward expansion", model.ffn_mult),
        MMCTL_FIELD("model.sigma_dim", "sinusoidal noise-level features", model.sigma_dim),
        MMCTL_FIELD("model.vocab_size", "text hash buckets", model.text.vocab_size),
        MMCTL_FIELD("model.d_text", "text embedding width", model.text.d_text),
        MMCTL_FIELD("model.max_text_len", "text tokens per prompt", model.text.max_text_len),
        MMCTL_FIELD("model.max_frames", "positional table rows", model.max_frames),
        MMCTL_FIELD("model.max_ref_frames", "longest acoustic reference", model.max_ref_frames),
        MMCTL_FIELD("diffusion.video_scale", "video latent multiplier", diffusion.scale.video),
        MMCTL_FIELD("diffusion.audio_scale", "audio latent multiplier", diffusion.scale.audio),
        MMCTL_FIELD("diffusion.lambda_v", "video loss weight", diffusion.lambda_v),
        MMCTL_FIELD("diffusion.lambda_a", "audio loss weight", diffusion.lambda_a),
        MMCTL_FIELD("diffusion.p_text", "null-text substitution probability", diffusion.dropout.p_text),
        MMCTL_FIELD("diffusion.p_control", "per-modality control dropout probability", diffusion.dropout.p_control),
        MMCTL_FIELD("train.full_res_fraction", "share of training draws at full resolution", full_res_fraction),
        MMCTL_FIELD("train.caption_dropout", "per-attribute caption word dropout", caption_dropout),
        MMCTL_FIELD("sample.stage1_steps", "stage-1 Euler steps", sampling.stage1_steps),
        MMCTL_FIELD("sample.stage2_steps", "stage-2 Euler steps", sampling.stage2_steps),
        MMCTL_FIELD("sample.sigma0", "stage-2 re-noise level", sampling.sigma0),
        MMCTL_FIELD("sample.cfg_scale", "stage-1 classifier-free guidance scale", sampling.cfg_scale),
        MMCTL_FIELD("sample.stage2_cfg", "stage-2 guidance scale (must be 1)", sampling.stage2_cfg),
        MMCTL_FIELD("sample.gamma_v", "visual hint scale", sampling.gamma_v),
        MMCTL_FIELD("sample.gamma_a", "acoustic hint scale", sampling.gamma_a),
        MMCTL_FIELD("sample.k_default", "acoustic reference length without reference audio", sampling.k_default),
        MMCTL_FIELD("data.seed", "dataset seed", data_seed),
        MMCTL_FIELD("data.pretrain_size", "pretraining scenes", pretrain_size),
        MMCTL_FIELD("data.control_size", "control-training scenes per task", control_size),
        MMCTL_FIELD("synth.count", "samples written by the synth command", synth_count),
        MMCTL_FIELD("synth.task", "task of synthesised samples: mixed, ref+audio, ref+depth, ref+pose", synth_task),
        MMCTL_FIELD("eval.scenes", "held-out scenes in the gamma study", eval_scenes),
        MMCTL_FIELD("eval.seed", "held-out scene seed", eval_seed),
    };
    add_train_keys(t, "pretrain", &Config::pretrain);
    add_train_keys(t, "control", &Config::control);
    std::sort(t.begin(), t.end(), [](const Entry& a, const Entry& b) { return a.key < b.key; });
    return t;
  }();
  return entries;
}

#undef MMCTL_FIELD

const Entry& find_entry(const std::string& key) {
  const auto& t = table();
  auto it = std::lower_bound(t.begin(), t.end(), key, [](const Entry& e, const std::string& k) { return e.key < k; });
  if (it == t.end() || it->key != key) throw ConfigError("unknown config key: " + key);
  return *it;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

ModelConfig Config::model_config() const {
  ModelConfig m = model;
  if (patch <= 0 || world.height % patch != 0 || world.width % patch != 0) {
    throw ConfigError("codec.patch must divide the frame size");
  }
  if (world.height != world.width) throw ConfigError("frames must be square");
  m.grid_full = world.height / patch;
  m.video_dim = 3 * patch * patch;
  m.audio_dim = world.frame_len;
  return m;
}

TwoStageConfig Config::two_stage() const {
  TwoStageConfig c;
  c.stage1 = NoiseSchedule::linear(1.0, 0.0, sampling.stage1_steps);
  c.stage2_steps = sampling.stage2_steps;
  c.sigma0 = sampling.sigma0;
  c.stage2_cfg = sampling.stage2_cfg;
  c.guidance = {sampling.cfg_scale, sampling.gamma_v, sampling.gamma_a};
  c.scale = diffusion.scale;
  c.k_default = sampling.k_default;
  return c;
}

CodecPair Config::codecs() const {
  return {VideoCodec(world.height, world.width, patch), AudioCodec(world.sample_rate, world.frame_len)};
}

void Config::validate() const {
  world.validate();
  const ModelConfig m = model_config();
  m.validate();
  if (m.grid_full % 2 != 0) throw ConfigError("full-resolution patch grid must be even");
  if (world.t > m.max_frames) throw ConfigError("world.t exceeds model.max_frames");
  if (world.k > m.max_ref_frames || sampling.k_default > m.max_ref_frames) {
    throw ConfigError("reference length exceeds model.max_ref_frames");
  }
  for (double p : {diffusion.dropout.p_text, diffusion.dropout.p_control, full_res_fraction, caption_dropout}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("probabilities must lie in [0, 1]");
  }
  if (!(diffusion.scale.video > 0.0) || !(diffusion.scale.audio > 0.0)) throw ConfigError("latent scales must be positive");
  if (sampling.stage1_steps <= 0 || sampling.stage2_steps < 0) throw ConfigError("invalid sampling step counts");
  if (sampling.stage2_cfg != 1.0) throw ConfigError("sample.stage2_cfg must be 1: stage 2 runs without guidance");
  if (!(sampling.sigma0 >= 0.0 && sampling.sigma0 <= 1.0)) throw ConfigError("sample.sigma0 must lie in [0, 1]");
  if (synth_task != "mixed") parse_task(synth_task);
  for (const TrainHyper* h : {&pretrain, &control}) {
    if (h->steps == 0 || h->batch <= 0 || h->grad_accum <= 0) throw ConfigError("training steps, batch and grad_accum must be positive");
    if (h->warmup >= h->steps) throw ConfigError("warmup must be shorter than the schedule");
    if (!(h->peak_lr > 0.0)) throw ConfigError("peak_lr must be positive");
  }
}

std::vector<ConfigKey> config_keys() {
  std::vector<ConfigKey> out;
  for (const auto& e : table()) out.push_back({e.key, e.doc});
  return out;
}

void set_config_value(Config& cfg, const std::string& key, const std::string& value) {
  find_entry(key).set(cfg, value);
}

std::string get_config_value(const Config& cfg, const std::string& key) { return find_entry(key).get(cfg); }

Config parse_config(const std::string& text, Config base) {
  std::istringstream in(text);
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      set_config_value(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

Config load_config(const std::filesystem::path& path, Config base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::string resolved_config(const Config& cfg) {
  std::string out;
  for (const auto& e : table()) out += e.key + " = " + e.get(cfg) + "\n";
  return out;
}

std::string config_hash(const Config& cfg) { return sha256_hex(resolved_config(cfg)); }

}  // namespace mmctl
