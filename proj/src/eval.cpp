#include "mmctl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <iomanip>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>
#include <unsupported/Eigen/FFT>

#include "mmctl/media_io.hpp"
#include "mmctl/synthdata.hpp"

namespace mmctl {
namespace fs = std::filesystem;

namespace {

constexpr Index kPadFactor = 16;
constexpr int kHarmonics = 4;

std::vector<double> hann_window(Index n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    w[static_cast<std::size_t>(i)] =
        n == 1 ? 1.0 : 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n - 1));
  }
  return w;
}

// De-meaned samples of wave[begin, begin + len); nullopt when all are zero.
std::optional<std::vector<double>> centered(const Tensor<float>& wave, Index begin, Index len) {
  std::vector<double> x(static_cast<std::size_t>(len));
  double mean = 0.0;
  bool any = false;
  for (Index i = 0; i < len; ++i) {
    x[static_cast<std::size_t>(i)] = wave[begin + i];
    any = any || wave[begin + i] != 0.0f;
    mean += wave[begin + i];
  }
  if (!any) return std::nullopt;
  mean /= static_cast<double>(len);
  for (double& v : x) v -= mean;
  return x;
}

double window_peak(const Tensor<float>& wave, Index begin, Index len, double sr) {
  const auto x = centered(wave, begin, len);
  if (!x) return 0.0;
  const auto w = hann_window(len);
  Index nfft = 1;
  while (nfft < kPadFactor * len) nfft *= 2;
  std::vector<double> buf(static_cast<std::size_t>(nfft), 0.0);
  for (Index i = 0; i < len; ++i) buf[static_cast<std::size_t>(i)] = (*x)[static_cast<std::size_t>(i)] * w[static_cast<std::size_t>(i)];
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> spec;
  fft.fwd(spec, buf);
  const Index half = nfft / 2;
  Index best = 1;
  double best_mag = -1.0;
  for (Index k = 1; k < half; ++k) {
    const double m = std::abs(spec[static_cast<std::size_t>(k)]);
    if (m > best_mag) {
      best_mag = m;
      best = k;
    }
  }
  if (!(best_mag > 1e-12)) return 0.0;
  double offset = 0.0;
  if (best > 1 && best < half - 1) {
    const double a = std::abs(spec[static_cast<std::size_t>(best - 1)]);
    const double b = best_mag;
    const double c = std::abs(spec[static_cast<std::size_t>(best + 1)]);
    const double denom = a - 2.0 * b + c;
    if (denom != 0.0) offset = std::clamp(0.5 * (a - c) / denom, -0.5, 0.5);
  }
  return (static_cast<double>(best) + offset) * sr / static_cast<double>(nfft);
}

void check_wave(const Tensor<float>& wave) {
  if (wave.rank() != 1) throw ShapeError("expected a 1-D waveform, got " + shape_str(wave.shape()));
}

void check_frame(const Tensor<float>& frame) {
  if (frame.rank() != 3 || frame.dim(2) != 3) throw ShapeError("expected an [h x w x 3] frame");
}

void check_frames(const Tensor<float>& frames) {
  if (frames.rank() != 4 || frames.dim(3) != 3) throw ShapeError("expected [t x h x w x 3] frames");
}

Tensor<float> frame_of(const Tensor<float>& frames, Index i) {
  Tensor<float> f({frames.dim(1), frames.dim(2), 3});
  const Index hw = frames.dim(1) * frames.dim(2);
  f.matrix() = frames.matrix().middleRows(i * hw, hw);
  return f;
}

// Sum of subject RGB and subject pixel count of one frame.
std::pair<std::array<double, 3>, Index> subject_rgb(const Tensor<float>& frame) {
  std::array<double, 3> sum{0, 0, 0};
  Index n = 0;
  for (Index y = 0; y < frame.dim(0); ++y)
    for (Index x = 0; x < frame.dim(1); ++x) {
      if (luminance(frame, y, x) <= kBackgroundLevel + kSubjectMargin) continue;
      for (Index c = 0; c < 3; ++c) sum[static_cast<std::size_t>(c)] += frame[(y * frame.dim(1) + x) * 3 + c];
      ++n;
    }
  return {sum, n};
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

std::string fmt(const std::optional<double>& v) {
  if (!v) return "na";
  std::ostringstream out;
  out << std::setprecision(9) << *v;
  return out.str();
}

nlohmann::json json_value(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace

std::vector<double> dominant_freq(const Tensor<float>& wave, double sample_rate, Index window, Index hop) {
  check_wave(wave);
  if (window <= 0 || window > wave.size()) throw InputError("dominant_freq: window must lie in [1, wave length]");
  if (hop <= 0) hop = window;
  std::vector<double> out;
  for (Index begin = 0; begin + window <= wave.size(); begin += hop) out.push_back(window_peak(wave, begin, window, sample_rate));
  return out;
}

double spectral_magnitude(const Tensor<float>& wave, Index begin, Index len, double f, double sample_rate) {
  const auto x = centered(wave, begin, len);
  if (!x) return 0.0;
  const auto w = hann_window(len);
  std::complex<double> acc{0.0, 0.0};
  for (Index i = 0; i < len; ++i) {
    const double ang = -2.0 * std::numbers::pi * f * static_cast<double>(i) / sample_rate;
    acc += (*x)[static_cast<std::size_t>(i)] * w[static_cast<std::size_t>(i)] * std::polar(1.0, ang);
  }
  return std::abs(acc);
}

double luminance(const Tensor<float>& frame, Index y, Index x) {
  const Index base = (y * frame.dim(1) + x) * 3;
  return std::max({frame[base], frame[base + 1], frame[base + 2]});
}

std::optional<Point> centroid(const Tensor<float>& frame) {
  check_frame(frame);
  double sx = 0, sy = 0, sw = 0;
  for (Index y = 0; y < frame.dim(0); ++y)
    for (Index x = 0; x < frame.dim(1); ++x) {
      const double l = luminance(frame, y, x);
      if (l <= kBackgroundLevel + kSubjectMargin) continue;
      sx += l * (static_cast<double>(x) + 0.5);
      sy += l * (static_cast<double>(y) + 0.5);
      sw += l;
    }
  if (sw <= 0.0) return std::nullopt;
  return Point{sx / sw, sy / sw};
}

Tensor<float> rederive_depth(const Tensor<float>& frames) {
  check_frames(frames);
  Tensor<float> d({frames.dim(0), frames.dim(1), frames.dim(2)});
  for (Index i = 0; i < d.size(); ++i) {
    const float l = std::max({frames[3 * i], frames[3 * i + 1], frames[3 * i + 2]});
    d[i] = l > kDepthThreshold ? kDepthObject : kDepthBackground;
  }
  return d;
}

double depth_mae(const Tensor<float>& d_in, const Tensor<float>& d_out) {
  if (d_in.shape() != d_out.shape()) {
    throw ShapeError("depth_mae: " + shape_str(d_in.shape()) + " vs " + shape_str(d_out.shape()));
  }
  if (d_in.size() == 0) throw ShapeError("depth_mae: empty maps");
  double s = 0.0;
  for (Index i = 0; i < d_in.size(); ++i) s += std::abs(static_cast<double>(d_in[i]) - static_cast<double>(d_out[i]));
  return s / static_cast<double>(d_in.size());
}

std::optional<double> identity_sim(const Tensor<float>& frames, const Tensor<float>& ref_image) {
  check_frames(frames);
  check_frame(ref_image);
  std::vector<double> gen(3, 0.0);
  Index pixels = 0, detected = 0;
  for (Index f = 0; f < frames.dim(0); ++f) {
    const auto [sum, n] = subject_rgb(frame_of(frames, f));
    if (n == 0) continue;
    ++detected;
    pixels += n;
    for (std::size_t c = 0; c < 3; ++c) gen[c] += sum[c];
  }
  if (2 * detected < frames.dim(0) || pixels == 0) return std::nullopt;
  const auto [rsum, rn] = subject_rgb(ref_image);
  if (rn == 0) return std::nullopt;
  return cosine(gen, {rsum[0], rsum[1], rsum[2]});
}

std::optional<std::vector<double>> harmonic_profile(const Tensor<float>& wave, double sample_rate, Index window) {
  check_wave(wave);
  const std::vector<double> f0 = dominant_freq(wave, sample_rate, window);
  std::vector<double> acc(kHarmonics, 0.0);
  std::size_t used = 0;
  for (std::size_t w = 0; w < f0.size(); ++w) {
    if (f0[w] <= 0.0) continue;
    std::vector<double> m(kHarmonics, 0.0);
    double norm = 0.0;
    for (int h = 1; h <= kHarmonics; ++h) {
      const double f = h * f0[w];
      if (f >= sample_rate / 2.0) continue;
      m[static_cast<std::size_t>(h - 1)] = spectral_magnitude(wave, static_cast<Index>(w) * window, window, f, sample_rate);
      norm += m[static_cast<std::size_t>(h - 1)] * m[static_cast<std::size_t>(h - 1)];
    }
    if (norm <= 0.0) continue;
    norm = std::sqrt(norm);
    for (int h = 0; h < kHarmonics; ++h) acc[static_cast<std::size_t>(h)] += m[static_cast<std::size_t>(h)] / norm;
    ++used;
  }
  if (used == 0) return std::nullopt;
  for (double& v : acc) v /= static_cast<double>(used);
  return acc;
}

std::optional<double> timbre_sim(const Tensor<float>& wave, const Tensor<float>& ref_wave, double sample_rate,
                                 Index window) {
  const auto a = harmonic_profile(wave, sample_rate, window);
  const auto b = harmonic_profile(ref_wave, sample_rate, window);
  if (!a || !b) return std::nullopt;
  return cosine(*a, *b);
}

std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("pearson: length mismatch");
  const auto n = static_cast<double>(a.size());
  if (a.size() < 2) return std::nullopt;
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  // Relative guard: variance indistinguishable from roundoff counts as zero.
  const double tiny = 1e-18;
  if (saa <= tiny * (1.0 + ma * ma) * n || sbb <= tiny * (1.0 + mb * mb) * n) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

std::optional<double> sync_corr(const Tensor<float>& wave, const Tensor<float>& frames, double sample_rate,
                                Index frame_len) {
  check_wave(wave);
  check_frames(frames);
  const Index t = std::min(frames.dim(0), wave.size() / frame_len);
  const std::vector<double> f = dominant_freq(wave, sample_rate, frame_len);
  std::vector<double> freqs, xs;
  for (Index i = 0; i < t; ++i) {
    const double fi = f[static_cast<std::size_t>(i)];
    const auto c = centroid(frame_of(frames, i));
    if (fi <= 0.0 || !c) continue;
    freqs.push_back(fi);
    xs.push_back(c->x);
  }
  if (freqs.size() < 4) return std::nullopt;
  return pearson(freqs, xs);
}

void MetricMean::add(const std::optional<double>& v) {
  if (v && std::isfinite(*v)) {
    sum += *v;
    ++n;
  } else {
    ++not_measurable;
  }
}

std::optional<double> MetricMean::mean() const {
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

void MetricReport::add(const SampleMetrics& m) {
  ++n_samples;
  depth_mae.add(m.depth_mae);
  identity_sim.add(m.identity_sim);
  timbre_sim.add(m.timbre_sim);
  sync_corr.add(m.sync_corr);
}

SampleMetrics evaluate_sample(const std::string& id, const Tensor<float>& gen_video, const Tensor<float>& gen_audio,
                              const std::optional<Tensor<float>>& gt_depth, const Tensor<float>& ref_image,
                              const Tensor<float>& ref_audio, const EvalGeometry& geo) {
  SampleMetrics m;
  m.id = id;
  if (gt_depth) m.depth_mae = depth_mae(*gt_depth, rederive_depth(gen_video));
  m.identity_sim = identity_sim(gen_video, ref_image);
  m.timbre_sim = timbre_sim(gen_audio, ref_audio, geo.sample_rate, geo.frame_len);
  m.sync_corr = sync_corr(gen_audio, gen_video, geo.sample_rate, geo.frame_len);
  return m;
}

std::string metrics_line(const SampleMetrics& m) {
  const std::optional<double> x100 = m.depth_mae ? std::optional<double>(*m.depth_mae * 100.0) : std::nullopt;
  return "id=" + m.id + " depth_mae=" + fmt(m.depth_mae) + " depth_mae_x100=" + fmt(x100) +
         " identity_sim_analogue=" + fmt(m.identity_sim) + " timbre_sim_analogue=" + fmt(m.timbre_sim) +
         " sync_corr_analogue=" + fmt(m.sync_corr);
}

void print_report_table(std::ostream& out, const MetricReport& r) {
  auto row = [&](const char* name, const MetricMean& m, double mult = 1.0) {
    const auto v = m.mean();
    out << std::left << std::setw(24) << name << std::right << std::setw(12)
        << (v ? fmt(*v * mult) : std::string("na")) << std::setw(10) << m.n << std::setw(16) << m.not_measurable
        << "\n";
  };
  out << std::left << std::setw(24) << "metric" << std::right << std::setw(12) << "mean" << std::setw(10) << "n"
      << std::setw(16) << "not_measurable" << "\n";
  row("depth_mae", r.depth_mae);
  row("depth_mae_x100", r.depth_mae, 100.0);
  row("identity_sim_analogue", r.identity_sim);
  row("timbre_sim_analogue", r.timbre_sim);
  row("sync_corr_analogue", r.sync_corr);
  out << "samples: " << r.n_samples << "\n";
}

std::string report_json(const MetricReport& r, const std::vector<SampleMetrics>& per_sample) {
  using nlohmann::json;
  auto summary = [](const MetricMean& m) {
    return json{{"mean", json_value(m.mean())}, {"n", m.n}, {"not_measurable", m.not_measurable}};
  };
  json doc;
  doc["n_samples"] = r.n_samples;
  doc["depth_mae"] = summary(r.depth_mae);
  doc["depth_mae_x100"] = json_value(r.depth_mae.mean() ? std::optional<double>(*r.depth_mae.mean() * 100.0)
                                                        : std::nullopt);
  doc["identity_sim_analogue"] = summary(r.identity_sim);
  doc["timbre_sim_analogue"] = summary(r.timbre_sim);
  doc["sync_corr_analogue"] = summary(r.sync_corr);
  json samples = json::array();
  for (const auto& m : per_sample) {
    samples.push_back({{"id", m.id},
                       {"depth_mae", json_value(m.depth_mae)},
                       {"identity_sim_analogue", json_value(m.identity_sim)},
                       {"timbre_sim_analogue", json_value(m.timbre_sim)},
                       {"sync_corr_analogue", json_value(m.sync_corr)}});
  }
  doc["samples"] = samples;
  return doc.dump(2);
}

std::vector<SampleMetrics> evaluate_dirs(const fs::path& generated, const fs::path& dataset, const EvalGeometry& geo) {
  std::map<std::string, ManifestEntry> entries;
  for (auto& e : read_manifest(dataset)) entries.emplace(e.id, e);
  std::set<std::string> gen_ids;
  if (!fs::is_directory(generated)) throw InputError(generated.string() + " is not a directory");
  for (const auto& d : fs::directory_iterator(generated)) {
    if (d.is_directory() && fs::exists(d.path() / "video")) gen_ids.insert(d.path().filename().string());
  }
  std::vector<std::string> missing;
  for (const auto& id : gen_ids) {
    if (!entries.count(id)) missing.push_back(id);
  }
  if (!missing.empty()) {
    std::string msg = "generated ids missing from the dataset:";
    for (const auto& id : missing) msg += " " + id;
    throw InputError(msg);
  }
  if (gen_ids.empty()) throw InputError("no generated samples share an id with the dataset");
  std::vector<SampleMetrics> out;
  for (const auto& [id, e] : entries) {
    if (!gen_ids.count(id)) continue;
    const Tensor<float> video = read_frames(generated / id / "video");
    const Tensor<float> audio = read_wav(generated / id / "audio.wav").wave;
    Tensor<float> depth_rgb = read_frames(dataset / id / "depth");
    Tensor<float> depth({depth_rgb.dim(0), depth_rgb.dim(1), depth_rgb.dim(2)});
    for (Index i = 0; i < depth.size(); ++i) depth[i] = depth_rgb[3 * i];
    out.push_back(evaluate_sample(id, video, audio, depth, read_ppm(dataset / id / "ref.ppm"),
                                  read_wav(dataset / id / "ref.wav").wave, geo));
  }
  return out;
}

}  // namespace mmctl
