#include "mmctl/pipeline.hpp"

#include <iomanip>
#include <ostream>
#include <sstream>

#include "mmctl/parallel.hpp"

namespace mmctl {

namespace {

Tensor<float> half_image(const Tensor<float>& img) {
  const Tensor<float> d = downsample2x(img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)}));
  return d.reshaped({d.dim(1), d.dim(2), d.dim(3)});
}

std::string fmt(const MetricMean& m) {
  const auto v = m.mean();
  if (!v) return "na";
  std::ostringstream out;
  out << std::fixed << std::setprecision(4) << *v;
  return out.str();
}

}  // namespace

TrainExample make_example(const TrainingSample& s, const StructuredPrompt& prompt, bool half, bool with_controls,
                          const Config& cfg, const CodecPair& codecs) {
  const VideoCodec& full = codecs.video;
  const VideoCodec codec = half ? full.with_frame(full.frame_h() / 2, full.frame_w() / 2) : full;
  TrainExample ex;
  ex.video = codec.encode(half ? downsample2x(s.video) : s.video);
  ex.audio = codecs.audio.encode(s.audio);
  std::optional<Tensor<float>> ref_image, structure, ref_audio;
  if (with_controls) {
    ref_image = half ? half_image(s.ref_image) : s.ref_image;
    if (auto st = s.structure()) structure = half ? downsample2x(*st) : *st;
    ref_audio = s.ref_audio;
  }
  ex.unit = make_control_unit(prompt, cfg.model.text, build_visual_control(ref_image, structure, s.t, codec),
                              build_acoustic_control(ref_audio, s.t, codecs.audio, cfg.sampling.k_default));
  return ex;
}

TrainSource make_train_source(std::size_t size, SampleFn samples, bool with_controls, const Config& cfg) {
  TrainSource src;
  src.size = size;
  src.fetch = [samples = std::move(samples), with_controls, cfg, codecs = cfg.codecs()](std::size_t i, Rng& rng) {
    const TrainingSample s = samples(i);
    const bool half = !rng.split("resolution").bernoulli(cfg.full_res_fraction);
    Rng cap = rng.split("caption");
    const bool drop_color = cap.bernoulli(cfg.caption_dropout);
    const bool drop_speaker = cap.bernoulli(cfg.caption_dropout);
    return make_example(s, drop_attributes(s.prompt, drop_color, drop_speaker), half, with_controls, cfg, codecs);
  };
  return src;
}

SampleFn synthetic_samples(const DatasetSpec& d, const WorldConfig& world) {
  return [d, world](std::size_t i) { return dataset_sample(d, i, world); };
}

SampleFn disk_samples(const std::filesystem::path& root, const WorldConfig& world, std::size_t* count) {
  auto entries = std::make_shared<std::vector<ManifestEntry>>(read_manifest(root));
  if (entries->empty()) throw InputError("dataset " + root.string() + " has an empty manifest");
  if (count) *count = entries->size();
  return [root, world, entries](std::size_t i) { return read_sample(root, entries->at(i), world); };
}

JointModel<float> new_backbone(const Config& cfg, std::uint64_t seed) {
  return JointModel<float>::init_backbone(cfg.model_config(), Rng(seed, "model"));
}

void prepare_control(JointModel<float>& model, std::uint64_t seed) {
  model.freeze_backbone();
  model.attach_bypass(Rng(seed, "bypass"));
  model.set_phase(Phase::control);
}

GenerateRequest make_request(const TrainingSample& s, const StructuredPrompt& prompt, const Conditions& c) {
  GenerateRequest req;
  req.prompt = prompt;
  req.t = s.t;
  if (c.ref_image) req.ref_image = s.ref_image;
  if (c.ref_audio) req.ref_audio = s.ref_audio;
  if (c.structure) req.structure = s.structure();
  return req;
}

Generated generate(const JointModel<float>& model, const JointModel<float>* model_hi, const GenerateRequest& req,
                   const TwoStageConfig& tsc, const Config& cfg, std::uint64_t seed) {
  return two_stage_generate(model, model_hi, req, tsc, cfg.codecs(), Rng(seed, "generate"));
}

StudyReport run_study(const JointModel<float>& model, const Config& cfg, std::uint64_t seed, std::ostream* progress) {
  const std::size_t n = cfg.eval_scenes;
  if (n < 2) throw ConfigError("the study needs at least two scenes");
  const DatasetSpec held_out{cfg.eval_seed, n, Task::ref_depth};
  const EvalGeometry geo{cfg.world.sample_rate, cfg.world.frame_len};

  struct SceneResult {
    std::optional<double> depth_on, depth_off, sync;
    std::array<std::optional<double>, 4> identity, timbre;
    Tensor<float> video, audio;
  };
  std::vector<SceneResult> res(n);
  parallel_for(n, [&](std::size_t i) {
    const TrainingSample s = dataset_sample(held_out, i, cfg.world);
    const std::uint64_t gen_seed = Rng(seed, "study").split(i).next_u64();
    TwoStageConfig tsc = cfg.two_stage();
    SceneResult& r = res[i];

    tsc.guidance.gamma_v = 1.0;
    tsc.guidance.gamma_a = 1.0;
    Generated g = generate(model, nullptr, make_request(s, s.prompt, {}), tsc, cfg, gen_seed);
    r.depth_on = depth_mae(s.depth, rederive_depth(g.video));
    r.sync = sync_corr(g.audio, g.video, geo.sample_rate, geo.frame_len);
    r.video = std::move(g.video);
    r.audio = std::move(g.audio);

    tsc.guidance.gamma_v = 0.0;
    g = generate(model, nullptr, make_request(s, s.prompt, {}), tsc, cfg, gen_seed);
    r.depth_off = depth_mae(s.depth, rederive_depth(g.video));

    const StructuredPrompt generic = drop_attributes(s.prompt, true, true);
    for (int gv = 0; gv < 2; ++gv)
      for (int ga = 0; ga < 2; ++ga) {
        tsc.guidance.gamma_v = gv;
        tsc.guidance.gamma_a = ga;
        g = generate(model, nullptr, make_request(s, generic, {true, true, false}), tsc, cfg, gen_seed);
        r.identity[static_cast<std::size_t>(2 * gv + ga)] = identity_sim(g.video, s.ref_image);
        r.timbre[static_cast<std::size_t>(2 * gv + ga)] =
            timbre_sim(g.audio, s.ref_audio, geo.sample_rate, geo.frame_len);
      }
    if (progress) *progress << "." << std::flush;
  });
  if (progress) *progress << "\n";

  StudyReport rep;
  rep.scenes = n;
  for (std::size_t i = 0; i < n; ++i) {
    const SceneResult& r = res[i];
    rep.depth_controlled.add(r.depth_on);
    rep.depth_uncontrolled.add(r.depth_off);
    rep.sync_matched.add(r.sync);
    const SceneResult& other = res[(i + 1) % n];
    rep.sync_shuffled.add(sync_corr(r.audio, other.video, geo.sample_rate, geo.frame_len));
    for (std::size_t c = 0; c < 4; ++c) {
      rep.identity[c].add(r.identity[c]);
      rep.timbre[c].add(r.timbre[c]);
    }
  }
  return rep;
}

void print_study(std::ostream& out, const StudyReport& r) {
  out << "scenes: " << r.scenes << "\n";
  out << "depth_mae  controlled(gamma_v=1) " << fmt(r.depth_controlled) << "  uncontrolled(gamma_v=0) "
      << fmt(r.depth_uncontrolled) << "\n";
  out << "gamma_v gamma_a  identity_sim_analogue  timbre_sim_analogue\n";
  for (int c = 0; c < 4; ++c) {
    out << "   " << c / 2 << "       " << c % 2 << "      " << std::setw(8) << fmt(r.identity[static_cast<std::size_t>(c)])
        << "             " << std::setw(8) << fmt(r.timbre[static_cast<std::size_t>(c)]) << "\n";
  }
  out << "sync_corr_analogue  matched " << fmt(r.sync_matched) << "  shuffled " << fmt(r.sync_shuffled) << " (n "
      << r.sync_matched.n << "/" << r.sync_shuffled.n << ")\n";
}

}  // namespace mmctl
