#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mmctl/tensor.hpp"

namespace mmctl {

// Subject pixels are those whose luminance (max channel) exceeds the
// background level by this margin.
inline constexpr double kSubjectMargin = 0.15;
inline constexpr double kBackgroundLevel = 0.1;
// Luminance threshold used when re-deriving a two-level depth map from frames.
inline constexpr double kDepthThreshold = 0.5;

// Peak frequency (Hz) of each window of `window` samples taken every `hop`
// samples. Hann-weighted, zero-padded DFT with parabolic peak refinement.
// All-zero windows report 0.
std::vector<double> dominant_freq(const Tensor<float>& wave, double sample_rate, Index window, Index hop = 0);

// Hann-windowed DFT magnitude of wave[begin, begin + len) at frequency f.
double spectral_magnitude(const Tensor<float>& wave, Index begin, Index len, double f, double sample_rate);

struct Point {
  double x = 0, y = 0;
};

double luminance(const Tensor<float>& frame, Index y, Index x);

// Intensity-weighted centroid of the subject mask of an [h x w x 3] frame,
// in continuous pixel coordinates (pixel i spans [i, i + 1)).
std::optional<Point> centroid(const Tensor<float>& frame);

// Two-level depth map re-derived from RGB frames [t x h x w x 3] -> [t x h x w].
Tensor<float> rederive_depth(const Tensor<float>& frames);

double depth_mae(const Tensor<float>& d_in, const Tensor<float>& d_out);

// Cosine similarity of mean subject RGB over the video frames and over the
// reference image. Not measurable unless the subject is found in at least half
// of the frames and in the reference.
std::optional<double> identity_sim(const Tensor<float>& frames, const Tensor<float>& ref_image);

// Pitch-normalised harmonic profile: per window, magnitudes at h * f0
// (h = 1..4) scaled to unit norm, averaged over windows with f0 > 0.
std::optional<std::vector<double>> harmonic_profile(const Tensor<float>& wave, double sample_rate, Index window);
std::optional<double> timbre_sim(const Tensor<float>& wave, const Tensor<float>& ref_wave, double sample_rate,
                                 Index window);

// Pearson correlation of per-frame dominant frequency against per-frame
// centroid x over frames where both are measurable.
std::optional<double> sync_corr(const Tensor<float>& wave, const Tensor<float>& frames, double sample_rate,
                                Index frame_len);

std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b);

// Running mean that counts the inputs it could not use.
struct MetricMean {
  double sum = 0.0;
  std::size_t n = 0;
  std::size_t not_measurable = 0;

  void add(const std::optional<double>& v);
  std::optional<double> mean() const;
};

struct SampleMetrics {
  std::string id;
  std::optional<double> depth_mae, identity_sim, timbre_sim, sync_corr;
};

struct MetricReport {
  MetricMean depth_mae, identity_sim, timbre_sim, sync_corr;
  std::size_t n_samples = 0;

  void add(const SampleMetrics& m);
};

struct EvalGeometry {
  double sample_rate = 640.0;
  Index frame_len = 64;
};

// Metrics of one generated sample against its dataset counterpart. Depth MAE
// is reported only when gt_depth is given.
SampleMetrics evaluate_sample(const std::string& id, const Tensor<float>& gen_video, const Tensor<float>& gen_audio,
                              const std::optional<Tensor<float>>& gt_depth, const Tensor<float>& ref_image,
                              const Tensor<float>& ref_audio, const EvalGeometry& geo);

std::string metrics_line(const SampleMetrics& m);
void print_report_table(std::ostream& out, const MetricReport& r);
std::string report_json(const MetricReport& r, const std::vector<SampleMetrics>& per_sample);

// Evaluates <generated>/<id>/{video,audio.wav} against <dataset>/<id>/ for the
// ids present in both; throws InputError listing missing ids when the sets
// differ or the intersection is empty.
std::vector<SampleMetrics> evaluate_dirs(const std::filesystem::path& generated, const std::filesystem::path& dataset,
                                         const EvalGeometry& geo);

}  // namespace mmctl
