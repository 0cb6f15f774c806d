#include "mmctl/synthdata.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "mmctl/codecs.hpp"
#include "mmctl/hashing.hpp"
#include "mmctl/media_io.hpp"

namespace mmctl {
namespace fs = std::filesystem;

namespace {

// Position on [lo, hi] after reflecting a free path at both ends.
double reflect(double p, double lo, double hi) {
  const double span = hi - lo;
  if (span <= 0.0) return lo;
  const double period = 2.0 * span;
  double m = std::fmod(p - lo, period);
  if (m < 0.0) m += period;
  return lo + (m <= span ? m : period - m);
}

std::string join_words(const std::vector<std::string>& ws) {
  std::string out;
  for (const auto& w : ws) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

std::vector<std::string> split_words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::string slurp_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw InputError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Tensor<float> first_channel(const Tensor<float>& rgb) {
  if (rgb.rank() != 4) throw ShapeError("expected [t x h x w x 3] frames");
  Tensor<float> out({rgb.dim(0), rgb.dim(1), rgb.dim(2)});
  for (Index i = 0; i < out.size(); ++i) out[i] = rgb[3 * i];
  return out;
}

}  // namespace

void WorldConfig::validate() const {
  if (height <= 0 || width <= 0) throw ConfigError("world frame size must be positive");
  if (sample_rate <= 0.0 || frame_len <= 0) throw ConfigError("audio geometry must be positive");
  if (t <= 0 || k <= 0) throw ConfigError("world t and k must be positive");
  if (size_min <= 0 || size_max < size_min || size_max > std::min(height, width)) {
    throw ConfigError("square size range must fit inside the frame");
  }
  if (speed_min < 0.0 || speed_max < speed_min || vy_max < 0.0) throw ConfigError("invalid speed range");
  const double f_lo = f_base + kSpeakers.front().f_offset + kappa * 0.5 * static_cast<double>(size_min);
  const double f_hi = f_base + kSpeakers.back().f_offset + kappa * static_cast<double>(width);
  if (f_lo <= 0.0 || f_hi >= sample_rate / 2.0) throw ConfigError("pitch range must lie below Nyquist");
}

SceneSpec gen_scene(Rng rng, const WorldConfig& world) {
  world.validate();
  SceneSpec s;
  s.seed = rng.key();
  s.color = static_cast<int>(rng.split("color").below(kPalette.size()));
  s.speaker = static_cast<int>(rng.split("speaker").below(kSpeakers.size()));
  s.size = world.size_min + static_cast<Index>(rng.split("size").below(
                                static_cast<std::uint64_t>(world.size_max - world.size_min + 1)));
  const double half = 0.5 * static_cast<double>(s.size);
  Rng pos = rng.split("position");
  s.x0 = pos.uniform(half, static_cast<double>(world.width) - half);
  s.y0 = pos.uniform(half, static_cast<double>(world.height) - half);
  Rng vel = rng.split("velocity");
  const double speed = vel.uniform(world.speed_min, world.speed_max);
  s.vx = vel.bernoulli(0.5) ? speed : -speed;
  s.vy = vel.uniform(-world.vy_max, world.vy_max);
  s.frames = world.clip_frames();
  return s;
}

SceneSpec scene_from_seed(std::uint64_t seed, const WorldConfig& world) {
  SceneSpec s = gen_scene(Rng(seed, "scene"), world);
  s.seed = seed;
  return s;
}

FramePos position_at(const SceneSpec& spec, Index frame, const WorldConfig& world) {
  const double half = 0.5 * static_cast<double>(spec.size);
  const double f = static_cast<double>(frame);
  const double cx = reflect(spec.x0 + spec.vx * f, half, static_cast<double>(world.width) - half);
  const double cy = reflect(spec.y0 + spec.vy * f, half, static_cast<double>(world.height) - half);
  FramePos p{};
  p.left = std::clamp<Index>(static_cast<Index>(std::lround(cx - half)), 0, world.width - spec.size);
  p.top = std::clamp<Index>(static_cast<Index>(std::lround(cy - half)), 0, world.height - spec.size);
  p.cx = static_cast<double>(p.left) + half;
  p.cy = static_cast<double>(p.top) + half;
  return p;
}

double pitch_at(const SceneSpec& spec, Index frame, const WorldConfig& world) {
  const auto& sp = kSpeakers.at(static_cast<std::size_t>(spec.speaker));
  return world.f_base + sp.f_offset + world.kappa * position_at(spec, frame, world).cx;
}

Tensor<float> render_video(const SceneSpec& spec, const WorldConfig& world) {
  Tensor<float> v({spec.frames, world.height, world.width, 3});
  v.matrix().setConstant(kBackground);
  const auto& rgb = kPalette.at(static_cast<std::size_t>(spec.color)).rgb;
  for (Index f = 0; f < spec.frames; ++f) {
    const FramePos p = position_at(spec, f, world);
    for (Index y = p.top; y < p.top + spec.size; ++y)
      for (Index x = p.left; x < p.left + spec.size; ++x)
        for (Index c = 0; c < 3; ++c) v[((f * world.height + y) * world.width + x) * 3 + c] = rgb[static_cast<std::size_t>(c)];
  }
  return v;
}

Tensor<float> render_audio(const SceneSpec& spec, const WorldConfig& world) {
  const auto& sp = kSpeakers.at(static_cast<std::size_t>(spec.speaker));
  double wsum = 0.0;
  for (double w : sp.weights) wsum += w;
  const double amp = 0.8 / wsum;
  Tensor<float> a({spec.frames * world.frame_len});
  double phase = 0.0;
  for (Index f = 0; f < spec.frames; ++f) {
    const double step = 2.0 * std::numbers::pi * pitch_at(spec, f, world) / world.sample_rate;
    for (Index n = 0; n < world.frame_len; ++n) {
      double s = 0.0;
      for (std::size_t h = 0; h < sp.weights.size(); ++h) s += sp.weights[h] * std::sin(static_cast<double>(h + 1) * phase);
      a[f * world.frame_len + n] = static_cast<float>(amp * s);
      phase = std::fmod(phase + step, 2.0 * std::numbers::pi);
    }
  }
  return a;
}

Tensor<float> derive_depth(const SceneSpec& spec, const WorldConfig& world) {
  Tensor<float> d({spec.frames, world.height, world.width});
  d.matrix().setConstant(kDepthBackground);
  for (Index f = 0; f < spec.frames; ++f) {
    const FramePos p = position_at(spec, f, world);
    for (Index y = p.top; y < p.top + spec.size; ++y)
      for (Index x = p.left; x < p.left + spec.size; ++x) d[(f * world.height + y) * world.width + x] = kDepthObject;
  }
  return d;
}

Tensor<float> derive_pose(const SceneSpec& spec, const WorldConfig& world) {
  Tensor<float> out({spec.frames, world.height, world.width});
  for (Index f = 0; f < spec.frames; ++f) {
    const FramePos p = position_at(spec, f, world);
    const auto px = static_cast<double>(static_cast<Index>(std::floor(p.cx)));
    const auto py = static_cast<double>(static_cast<Index>(std::floor(p.cy)));
    for (Index y = 0; y < world.height; ++y)
      for (Index x = 0; x < world.width; ++x) {
        const double dx = static_cast<double>(x) - px, dy = static_cast<double>(y) - py;
        out[(f * world.height + y) * world.width + x] =
            static_cast<float>(std::exp(-(dx * dx + dy * dy) / (2.0 * kPoseSigma * kPoseSigma)));
      }
  }
  return out;
}

const char* direction_word(const SceneSpec& spec) { return spec.vx >= 0.0 ? "right" : "left"; }

StructuredPrompt caption(const SceneSpec& spec) {
  StructuredPrompt p;
  p.visual = std::string("a ") + kPalette.at(static_cast<std::size_t>(spec.color)).name + " square moving " +
             direction_word(spec);
  p.speech = std::string("tone pattern ") + kSpeakers.at(static_cast<std::size_t>(spec.speaker)).name;
  return p;
}

StructuredPrompt generic_caption(const SceneSpec& spec) { return drop_attributes(caption(spec), true, true); }

StructuredPrompt drop_attributes(const StructuredPrompt& p, bool drop_color, bool drop_speaker) {
  auto filter = [](const std::string& s, auto&& is_attr) {
    std::vector<std::string> kept;
    for (auto& w : split_words(s)) {
      if (!is_attr(w)) kept.push_back(w);
    }
    return join_words(kept);
  };
  StructuredPrompt out = p;
  if (drop_color) {
    out.visual = filter(p.visual, [](const std::string& w) {
      for (const auto& e : kPalette) {
        if (w == e.name) return true;
      }
      return false;
    });
  }
  if (drop_speaker) {
    out.speech = filter(p.speech, [](const std::string& w) {
      for (const auto& e : kSpeakers) {
        if (w == e.name) return true;
      }
      return false;
    });
  }
  return out;
}

const char* task_name(Task t) {
  switch (t) {
    case Task::ref_audio: return "ref+audio";
    case Task::ref_depth: return "ref+depth";
    case Task::ref_pose: return "ref+pose";
  }
  return "?";
}

Task parse_task(const std::string& s) {
  if (s == "ref+audio") return Task::ref_audio;
  if (s == "ref+depth") return Task::ref_depth;
  if (s == "ref+pose") return Task::ref_pose;
  throw InputError("unknown task '" + s + "' (expected ref+audio, ref+depth or ref+pose)");
}

std::optional<Tensor<float>> TrainingSample::structure() const {
  switch (task) {
    case Task::ref_depth: return gray_to_rgb(depth);
    case Task::ref_pose: return gray_to_rgb(pose);
    case Task::ref_audio: break;
  }
  return std::nullopt;
}

TrainingSample make_sample(const SceneSpec& spec, Task task, const WorldConfig& world, std::string id) {
  world.validate();
  if (spec.frames < world.k + world.t) {
    throw InputError("clip of " + std::to_string(spec.frames) + " frames is shorter than k + t = " +
                     std::to_string(world.k + world.t));
  }
  const Tensor<float> video = render_video(spec, world);
  const Tensor<float> audio = render_audio(spec, world);
  const Tensor<float> depth = derive_depth(spec, world);
  const Tensor<float> pose = derive_pose(spec, world);
  const Index hw = world.height * world.width;
  const Index L = world.frame_len;

  TrainingSample s;
  s.id = std::move(id);
  s.task = task;
  s.seed = spec.seed;
  s.t = world.t;
  s.k = world.k;
  s.prompt = caption(spec);
  s.ref_range = {0, world.k * L};
  s.target_range = {world.k * L, (world.k + world.t) * L};

  s.video = Tensor<float>({world.t, world.height, world.width, 3});
  s.video.matrix() = video.matrix().middleRows(world.k * hw, world.t * hw);
  s.depth = Tensor<float>({world.t, world.height, world.width});
  s.depth.matrix() = depth.matrix().middleRows(world.k * world.height, world.t * world.height);
  s.pose = Tensor<float>({world.t, world.height, world.width});
  s.pose.matrix() = pose.matrix().middleRows(world.k * world.height, world.t * world.height);
  s.ref_image = Tensor<float>({world.height, world.width, 3});
  s.ref_image.matrix() = video.matrix().topRows(hw);

  s.audio = Tensor<float>({world.t * L});
  s.ref_audio = Tensor<float>({world.k * L});
  for (Index i = 0; i < s.audio.size(); ++i) s.audio[i] = audio[s.target_range.begin + i];
  for (Index i = 0; i < s.ref_audio.size(); ++i) s.ref_audio[i] = audio[s.ref_range.begin + i];
  return s;
}

std::string manifest_line(const ManifestEntry& e) {
  std::ostringstream out;
  out << "id=" << e.id << " task=" << task_name(e.task) << " seed=" << e.seed << " t=" << e.t << " k=" << e.k
      << " ref=" << e.ref_range.begin << ":" << e.ref_range.end << " target=" << e.target_range.begin << ":"
      << e.target_range.end << " prompt=" << e.prompt;
  return out.str();
}

ManifestEntry parse_manifest_line(const std::string& line) {
  const std::size_t pp = line.find(" prompt=");
  if (pp == std::string::npos) throw FormatError("manifest line without prompt: " + line);
  ManifestEntry e;
  e.prompt = line.substr(pp + 8);
  auto range = [&](const std::string& v) {
    const std::size_t c = v.find(':');
    if (c == std::string::npos) throw FormatError("bad range '" + v + "' in manifest");
    return SampleRange{std::stoll(v.substr(0, c)), std::stoll(v.substr(c + 1))};
  };
  bool seen_id = false;
  try {
    for (const auto& kv : split_words(line.substr(0, pp))) {
      const std::size_t eq = kv.find('=');
      if (eq == std::string::npos) throw FormatError("bad manifest field '" + kv + "'");
      const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
      if (key == "id") {
        e.id = val;
        seen_id = true;
      } else if (key == "task") {
        e.task = parse_task(val);
      } else if (key == "seed") {
        e.seed = std::stoull(val);
      } else if (key == "t") {
        e.t = std::stoll(val);
      } else if (key == "k") {
        e.k = std::stoll(val);
      } else if (key == "ref") {
        e.ref_range = range(val);
      } else if (key == "target") {
        e.target_range = range(val);
      } else {
        throw FormatError("unknown manifest field '" + key + "'");
      }
    }
  } catch (const std::logic_error&) {
    throw FormatError("malformed number in manifest line: " + line);
  }
  if (!seen_id) throw FormatError("manifest line without id: " + line);
  return e;
}

ManifestEntry manifest_entry(const TrainingSample& s) {
  return {s.id, s.task, s.seed, s.t, s.k, s.ref_range, s.target_range, render_prompt(s.prompt)};
}

std::uint64_t sample_seed(std::uint64_t dataset_seed, std::size_t index) {
  return Rng(dataset_seed, "dataset").split(index).next_u64();
}

TrainingSample dataset_sample(const DatasetSpec& d, std::size_t index, const WorldConfig& world) {
  static constexpr Task kCycle[] = {Task::ref_audio, Task::ref_depth, Task::ref_pose};
  const Task task = d.task ? *d.task : kCycle[index % 3];
  char id[32];
  std::snprintf(id, sizeof id, "s%05zu", index);
  return make_sample(scene_from_seed(sample_seed(d.seed, index), world), task, world, id);
}

std::string manifest_text(const DatasetSpec& d, const WorldConfig& world) {
  std::string text;
  for (std::size_t i = 0; i < d.count; ++i) text += manifest_line(manifest_entry(dataset_sample(d, i, world))) + "\n";
  return text;
}

void write_sample(const fs::path& dir, const TrainingSample& s, const WorldConfig& world) {
  const int sr = static_cast<int>(std::lround(world.sample_rate));
  write_frames(dir / "video", s.video);
  write_wav(dir / "audio.wav", s.audio, sr);
  write_frames(dir / "depth", gray_to_rgb(s.depth));
  write_frames(dir / "pose", gray_to_rgb(s.pose));
  write_ppm(dir / "ref.ppm", s.ref_image);
  write_wav(dir / "ref.wav", s.ref_audio, sr);
  std::ofstream(dir / "prompt.txt") << render_prompt(s.prompt) << "\n";
}

std::string write_dataset(const fs::path& root, const DatasetSpec& d, const WorldConfig& world, bool force) {
  if (d.count == 0) throw InputError("dataset count must be positive");
  if (fs::exists(root)) {
    if (!force) throw StateError(root.string() + " already exists (use --force to overwrite)");
    fs::remove_all(root);
  }
  fs::create_directories(root);
  std::string text;
  for (std::size_t i = 0; i < d.count; ++i) {
    const TrainingSample s = dataset_sample(d, i, world);
    write_sample(root / s.id, s, world);
    text += manifest_line(manifest_entry(s)) + "\n";
  }
  std::ofstream(root / "manifest", std::ios::binary) << text;
  return sha256_hex(text);
}

std::vector<ManifestEntry> read_manifest(const fs::path& root) {
  std::istringstream in(slurp_text(root / "manifest"));
  std::vector<ManifestEntry> out;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(parse_manifest_line(line));
  }
  return out;
}

TrainingSample read_sample(const fs::path& root, const ManifestEntry& e, const WorldConfig& world) {
  const fs::path dir = root / e.id;
  TrainingSample s;
  s.id = e.id;
  s.task = e.task;
  s.seed = e.seed;
  s.t = e.t;
  s.k = e.k;
  s.ref_range = e.ref_range;
  s.target_range = e.target_range;
  s.prompt = parse_prompt(e.prompt);
  s.video = read_frames(dir / "video");
  s.depth = first_channel(read_frames(dir / "depth"));
  s.pose = first_channel(read_frames(dir / "pose"));
  s.ref_image = read_ppm(dir / "ref.ppm");
  const WavData a = read_wav(dir / "audio.wav");
  const WavData r = read_wav(dir / "ref.wav");
  s.audio = a.wave;
  s.ref_audio = r.wave;
  if (s.video.dim(0) != e.t || s.audio.size() != e.t * world.frame_len || s.ref_audio.size() != e.k * world.frame_len) {
    throw FormatError("sample " + e.id + " does not match its manifest entry");
  }
  return s;
}

}  // namespace mmctl
