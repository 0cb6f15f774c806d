#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <vector>

#include "mmctl/config.hpp"
#include "mmctl/diffusion.hpp"
#include "mmctl/eval.hpp"
#include "mmctl/synthdata.hpp"

namespace mmctl {

// Which controls a generation or training example receives.
struct Conditions {
  bool ref_image = true;
  bool ref_audio = true;
  bool structure = true;  // the sample's task structure, if it has one
};

// Target latents plus control unit at half (true) or full resolution.
// Controls are encoded only when `with_controls` is set.
TrainExample make_example(const TrainingSample& s, const StructuredPrompt& prompt, bool half, bool with_controls,
                          const Config& cfg, const CodecPair& codecs);

// Random-access sample provider.
using SampleFn = std::function<TrainingSample(std::size_t)>;

// Training draws: resolution and caption-attribute dropout are sampled per
// draw from the fetch stream.
TrainSource make_train_source(std::size_t size, SampleFn samples, bool with_controls, const Config& cfg);

SampleFn synthetic_samples(const DatasetSpec& d, const WorldConfig& world);
SampleFn disk_samples(const std::filesystem::path& root, const WorldConfig& world, std::size_t* count);

JointModel<float> new_backbone(const Config& cfg, std::uint64_t seed);
// Freezes the backbone and attaches a fresh bypass.
void prepare_control(JointModel<float>& model, std::uint64_t seed);

GenerateRequest make_request(const TrainingSample& s, const StructuredPrompt& prompt, const Conditions& c);

Generated generate(const JointModel<float>& model, const JointModel<float>* model_hi, const GenerateRequest& req,
                   const TwoStageConfig& tsc, const Config& cfg, std::uint64_t seed);

// Held-out comparison of control settings.
struct StudyReport {
  std::size_t scenes = 0;
  MetricMean depth_controlled;    // ref image + depth + ref audio, gamma_v = 1
  MetricMean depth_uncontrolled;  // same inputs, gamma_v = 0
  // identity / timbre similarity over the (gamma_v, gamma_a) grid, generic
  // prompt, ref image + ref audio; index = 2 * gamma_v + gamma_a.
  std::array<MetricMean, 4> identity;
  std::array<MetricMean, 4> timbre;
  MetricMean sync_matched;   // audio and video of the same generation
  MetricMean sync_shuffled;  // audio of scene i with video of scene i + 1
};

StudyReport run_study(const JointModel<float>& model, const Config& cfg, std::uint64_t seed, std::ostream* progress);
void print_study(std::ostream& out, const StudyReport& r);

}  // namespace mmctl
