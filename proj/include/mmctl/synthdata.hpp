#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mmctl/prompt.hpp"
#include "mmctl/rng.hpp"
#include "mmctl/tensor.hpp"

namespace mmctl {

struct PaletteEntry {
  const char* name;
  std::array<float, 3> rgb;
};

inline constexpr std::array<PaletteEntry, 8> kPalette{{
    {"red", {0.9f, 0.1f, 0.1f}},
    {"green", {0.1f, 0.9f, 0.1f}},
    {"blue", {0.1f, 0.1f, 0.9f}},
    {"yellow", {0.9f, 0.9f, 0.1f}},
    {"cyan", {0.1f, 0.9f, 0.9f}},
    {"magenta", {0.9f, 0.1f, 0.9f}},
    {"orange", {0.9f, 0.5f, 0.1f}},
    {"white", {0.9f, 0.9f, 0.9f}},
}};

// Harmonic amplitude weights for harmonics 1..4 plus a fundamental offset.
struct SpeakerProfile {
  const char* name;
  std::array<double, 4> weights;
  double f_offset;
};

inline constexpr std::array<SpeakerProfile, 4> kSpeakers{{
    {"alpha", {1.0, 0.9, 0.0, 0.0}, -3.0},
    {"beta", {1.0, 0.0, 0.9, 0.0}, -1.0},
    {"gamma", {1.0, 0.0, 0.0, 0.9}, 1.0},
    {"delta", {1.0, 0.0, 0.0, 0.0}, 3.0},
}};

inline constexpr float kBackground = 0.1f;
inline constexpr float kDepthObject = 0.8f;
inline constexpr float kDepthBackground = 0.2f;
inline constexpr double kPoseSigma = 1.5;

struct WorldConfig {
  Index height = 32;
  Index width = 32;
  double sample_rate = 640.0;
  Index frame_len = 64;  // audio samples per video frame
  Index t = 12;          // target frames
  Index k = 4;           // reference frames
  Index size_min = 8;
  Index size_max = 12;
  double speed_min = 0.6;  // |vx| in px/frame
  double speed_max = 1.4;
  double vy_max = 0.5;
  double f_base = 28.0;  // Hz
  double kappa = 1.5;    // Hz per px of horizontal position

  Index clip_frames() const { return k + t; }
  void validate() const;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  int color = 0;    // palette index
  int speaker = 0;  // speaker index
  Index size = 8;   // square side in px
  double x0 = 0, y0 = 0;  // centre at frame 0
  double vx = 0, vy = 0;  // px per frame, reflected at the borders
  Index frames = 0;
};

struct FramePos {
  Index left, top;  // square's top-left pixel
  double cx, cy;    // square centre in continuous coordinates (pixel i spans [i, i + 1))
};

SceneSpec gen_scene(Rng rng, const WorldConfig& world);
SceneSpec scene_from_seed(std::uint64_t seed, const WorldConfig& world);

FramePos position_at(const SceneSpec& spec, Index frame, const WorldConfig& world);
double pitch_at(const SceneSpec& spec, Index frame, const WorldConfig& world);

Tensor<float> render_video(const SceneSpec& spec, const WorldConfig& world);  // [frames x h x w x 3]
Tensor<float> render_audio(const SceneSpec& spec, const WorldConfig& world);  // [frames * frame_len]
Tensor<float> derive_depth(const SceneSpec& spec, const WorldConfig& world);  // [frames x h x w]
Tensor<float> derive_pose(const SceneSpec& spec, const WorldConfig& world);   // [frames x h x w]

const char* direction_word(const SceneSpec& spec);
StructuredPrompt caption(const SceneSpec& spec);
// Caption without the identity words: no colour, no speaker name.
StructuredPrompt generic_caption(const SceneSpec& spec);
// Removes palette colour words from the visual field and speaker names from
// the speech field.
StructuredPrompt drop_attributes(const StructuredPrompt& p, bool drop_color, bool drop_speaker);

enum class Task { ref_audio, ref_depth, ref_pose };
const char* task_name(Task t);
Task parse_task(const std::string& s);

struct SampleRange {
  Index begin = 0, end = 0;  // [begin, end) in audio samples
};

struct TrainingSample {
  std::string id;
  Task task = Task::ref_audio;
  std::uint64_t seed = 0;
  Index t = 0, k = 0;
  StructuredPrompt prompt;
  Tensor<float> video;      // [t x h x w x 3] target frames
  Tensor<float> audio;      // [t * frame_len]
  Tensor<float> depth;      // [t x h x w]
  Tensor<float> pose;       // [t x h x w]
  Tensor<float> ref_image;  // [h x w x 3], clip frame 0
  Tensor<float> ref_audio;  // [k * frame_len]
  SampleRange ref_range, target_range;

  // The task's structural frames as RGB, or nothing for the ref+audio task.
  std::optional<Tensor<float>> structure() const;
};

TrainingSample make_sample(const SceneSpec& spec, Task task, const WorldConfig& world, std::string id);

struct ManifestEntry {
  std::string id;
  Task task = Task::ref_audio;
  std::uint64_t seed = 0;
  Index t = 0, k = 0;
  SampleRange ref_range, target_range;
  std::string prompt;
};

std::string manifest_line(const ManifestEntry& e);
ManifestEntry parse_manifest_line(const std::string& line);
ManifestEntry manifest_entry(const TrainingSample& s);

struct DatasetSpec {
  std::uint64_t seed = 0;
  std::size_t count = 0;
  std::optional<Task> task;  // nullopt: tasks cycle through all three
};

// Per-sample seed i of a dataset; the sample is a pure function of it.
std::uint64_t sample_seed(std::uint64_t dataset_seed, std::size_t index);
TrainingSample dataset_sample(const DatasetSpec& d, std::size_t index, const WorldConfig& world);
std::string manifest_text(const DatasetSpec& d, const WorldConfig& world);

// Writes <root>/<id>/... plus <root>/manifest; returns the manifest SHA-256.
std::string write_dataset(const std::filesystem::path& root, const DatasetSpec& d, const WorldConfig& world,
                          bool force);
void write_sample(const std::filesystem::path& dir, const TrainingSample& s, const WorldConfig& world);

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& root);
TrainingSample read_sample(const std::filesystem::path& root, const ManifestEntry& e, const WorldConfig& world);

}  // namespace mmctl
