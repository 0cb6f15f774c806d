#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <utility>
#include <vector>

#include "mmctl/codecs.hpp"
#include "mmctl/mmcu.hpp"
#include "mmctl/model.hpp"
#include "mmctl/optim.hpp"

namespace mmctl {

// Descending noise levels visited by the sampler.
struct NoiseSchedule {
  std::vector<double> sigmas;

  // Throws ConfigError unless nonempty, strictly decreasing, within [0, 1].
  void validate() const;
  Index steps() const { return static_cast<Index>(sigmas.size()) - 1; }

  // steps + 1 evenly spaced levels from `from` down to `to`. A zero-length
  // span (from == to) yields the single level {from}, i.e. zero steps.
  static NoiseSchedule linear(double from, double to, Index steps);
};

struct GuidanceParams {
  double cfg_scale = 4.0;
  double gamma_v = 1.0;
  double gamma_a = 1.0;

  void validate() const;
};

struct GuidanceDropout {
  double p_text = 0.1;
  double p_control = 0.1;
};

// Multipliers taking codec latents to the diffusion working space.
struct LatentScale {
  double video = 1.0;
  double audio = 1.0;
};

struct DiffusionConfig {
  LatentScale scale;
  double lambda_v = 1.0;
  double lambda_a = 1.0;
  GuidanceDropout dropout;
};

// One training item at a single resolution.
struct TrainExample {
  LatentSeq video;  // clean target latents
  LatentSeq audio;
  ControlUnit unit;  // text always used; controls only when the model has a bypass
};

// (noisy, target velocity) on the straight path between clean and noise.
std::pair<Tensor<float>, Tensor<float>> noise_interpolate(const Tensor<float>& clean, const Tensor<float>& eps,
                                                          double sigma);

Tensor<float> cfg_combine(const Tensor<float>& v_cond, const Tensor<float>& v_uncond, double s);

// Builds the per-sample loss node: sigma ~ U(0, 1), independent noise per
// modality, control and text dropout, weighted velocity MSE.
template <typename S>
Var fm_sample_loss(Graph<S>& g, const JointModel<S>& model, const TrainExample& ex, const DiffusionConfig& cfg,
                   Rng rng);

template <typename S>
struct FmResult {
  double loss = 0.0;          // batch mean
  std::vector<double> per_sample;
  GradBuffer<S> grads;        // gradient of the batch mean
};

template <typename S>
FmResult<S> fm_loss(const JointModel<S>& model, const std::vector<TrainExample>& batch, const DiffusionConfig& cfg,
                    const Rng& rng);

struct SampleShape {
  Index t = 0;
  Index grid = 0;  // patch grid side of the generated video
};

struct SampledLatents {
  LatentSeq video;  // codec space (scale removed)
  LatentSeq audio;
};

// Euler integration over `schedule`. `init` (codec space) replaces the
// initial noise draw; it must already sit at schedule.sigmas.front().
template <typename S>
SampledLatents euler_sample(const JointModel<S>& model, const ControlUnit& unit, const NoiseSchedule& schedule,
                            const GuidanceParams& guidance, const SampleShape& shape, const LatentScale& scale,
                            const Rng& rng, const std::optional<SampledLatents>& init = std::nullopt);

// Half-resolution video latents to full resolution: decode, nearest-neighbour
// 2x in pixel space, re-encode with the full-resolution codec.
LatentSeq upsample_latents(const LatentSeq& lo, const VideoCodec& codec_lo, const VideoCodec& codec_hi);

struct GenerateRequest {
  StructuredPrompt prompt;
  std::optional<Tensor<float>> ref_image;  // [h x w x 3] full resolution
  std::optional<Tensor<float>> ref_audio;  // [n]
  std::optional<Tensor<float>> structure;  // [t x h x w x 3] full resolution
  Index t = 0;
};

struct TwoStageConfig {
  NoiseSchedule stage1 = NoiseSchedule::linear(1.0, 0.0, 32);
  Index stage2_steps = 3;
  double sigma0 = 0.25;
  double stage2_cfg = 1.0;  // must stay 1: stage 2 runs without CFG
  GuidanceParams guidance;
  LatentScale scale;
  Index k_default = 2;  // acoustic reference length when no reference audio is given
};

struct Generated {
  Tensor<float> video;  // [t x h x w x 3]
  Tensor<float> audio;  // [t * frame_len]
  SampledLatents stage1;
  SampledLatents stage2;
};

struct CodecPair {
  VideoCodec video;  // full resolution
  AudioCodec audio;
};

template <typename S>
Generated two_stage_generate(const JointModel<S>& model_lo, const JointModel<S>* model_hi,
                             const GenerateRequest& req, const TwoStageConfig& cfg, const CodecPair& codecs,
                             const Rng& rng);

struct TrainHyper {
  std::uint64_t steps = 4000;
  Index batch = 8;
  Index grad_accum = 2;
  double peak_lr = 1e-3;
  std::uint64_t warmup = 100;
  double weight_decay = 0.01;
  double grad_clip = 1.0;  // global norm; 0 disables
  std::uint64_t log_every = 10;
  std::uint64_t checkpoint_every = 500;  // 0 disables periodic checkpoints
};

// Random-access training data; fetch(i, rng) may use rng for per-draw choices
// such as resolution.
struct TrainSource {
  std::size_t size = 0;
  std::function<TrainExample(std::size_t index, Rng& rng)> fetch;
};

template <typename S>
struct TrainHooks {
  std::ostream* loss_log = nullptr;
  // Called with the model and optimiser state after periodic steps, at the
  // end, and (diagnostic = true) before aborting on a non-finite loss.
  std::function<void(const JointModel<S>&, const AdamState<S>&, bool diagnostic)> checkpoint;
};

// Runs optimiser steps state.step + 1 .. hyper.steps. Step n uses
// cosine_lr(n); a step whose rate is 0 leaves the weights unchanged. All
// randomness is keyed by the step number, so a resumed run matches an
// uninterrupted one.
template <typename S>
void train_loop(JointModel<S>& model, const TrainSource& data, Phase phase, const TrainHyper& hyper,
                const DiffusionConfig& cfg, AdamState<S>& state, const Rng& rng, const TrainHooks<S>& hooks);

}  // namespace mmctl
