// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Usage: acceptance <config file> [work dir]
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "mmctl/checkpoint.hpp"
#include "mmctl/gradcheck.hpp"
#include "mmctl/media_io.hpp"
#include "mmctl/pipeline.hpp"

using namespace mmctl;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Clock {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); }
};

std::string num(double x) {
  std::ostringstream s;
  s << std::setprecision(4) << x;
  return s.str();
}

float max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<float>::infinity();
  return (a.matrix() - b.matrix()).cwiseAbs().maxCoeff();
}

// Criterion bodies run inside this guard so that an exception fails only
// its own criterion.
Outcome guarded(const std::function<Outcome()>& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    return {false, std::string("exception: ") + e.what()};
  }
}

ModelConfig small_model(Index layers, Index d_model) {
  Config c;
  ModelConfig m = c.model_config();
  m.layers = layers;
  m.d_model = d_model;
  m.heads = 2;
  m.ffn_mult = 2;
  m.sigma_dim = 8;
  m.text = {64, 8, 16};
  return m;
}

template <typename S>
void randomize_heads(JointModel<S>& m, std::uint64_t seed) {
  Rng rng(seed, "heads");
  for (auto& p : m.params()) {
    if (p.name.find(".out") != std::string::npos || p.name.rfind("backbone.head.", 0) == 0) {
      p.value.matrix() = rng.normal_matrix<S>(p.value.matrix().rows(), p.value.matrix().cols(), 0.05);
    }
  }
}

Generated run_generate(const JointModel<float>& m, const TrainingSample& s, const Config& cfg, double gv, double ga,
                       std::uint64_t seed) {
  TwoStageConfig tsc = cfg.two_stage();
  tsc.guidance.gamma_v = gv;
  tsc.guidance.gamma_a = ga;
  return generate(m, nullptr, make_request(s, s.prompt, {}), tsc, cfg, seed);
}

// 1. A freshly attached bypass leaves generation unchanged.
Outcome zero_init_transparency(const JointModel<float>& backbone, const Config& cfg) {
  JointModel<float> fresh = backbone;
  prepare_control(fresh, 41);
  float worst = 0.0f;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const TrainingSample s = dataset_sample(DatasetSpec{cfg.eval_seed + 1, 3, std::nullopt}, seed - 1, cfg.world);
    const Generated a = run_generate(backbone, s, cfg, 1.0, 1.0, seed);
    const Generated b = run_generate(fresh, s, cfg, 1.0, 1.0, seed);
    worst = std::max({worst, max_abs_diff(a.video, b.video), max_abs_diff(a.audio, b.audio)});
  }
  return {worst <= 1e-5f, "max |fresh bypass - backbone| = " + num(worst) + " over 3 seeds"};
}

// 2. Gamma 0 on a trained bypass reproduces the backbone exactly.
Outcome gamma_gate(const JointModel<float>& backbone, const JointModel<float>& controlled, const Config& cfg) {
  JointModel<float> fresh = backbone;
  prepare_control(fresh, 43);
  bool exact = true;
  for (std::uint64_t seed : {5u, 6u}) {
    const TrainingSample s = dataset_sample(DatasetSpec{cfg.eval_seed + 2, 2, Task::ref_depth}, seed - 5, cfg.world);
    const Generated ref = run_generate(backbone, s, cfg, 1.0, 1.0, seed);
    for (const JointModel<float>* m : std::array<const JointModel<float>*, 2>{&fresh, &controlled}) {
      const Generated g = run_generate(*m, s, cfg, 0.0, 0.0, seed);
      exact = exact && g.video == ref.video && g.audio == ref.audio;
    }
  }
  return {exact, exact ? "gamma 0 output bit-identical to the backbone (fresh and trained bypass)"
                       : "gamma 0 output differs from the backbone"};
}

// 4. Full flow-matching loss gradient against central differences.
Outcome grad_correctness() {
  WorldConfig w;
  w.t = 4;
  w.k = 2;
  Config cfg;
  cfg.world = w;
  const ModelConfig mc = small_model(2, 16);
  cfg.model.text = mc.text;
  const CodecPair codecs = cfg.codecs();
  JointModel<double> base = JointModel<double>::init_backbone(mc, Rng(4));
  randomize_heads(base, 5);
  const DatasetSpec d{2, 8, std::nullopt};
  std::vector<TrainExample> batch = {
      make_example(dataset_sample(d, 0, w), dataset_sample(d, 0, w).prompt, true, true, cfg, codecs),
      make_example(dataset_sample(d, 1, w), dataset_sample(d, 1, w).prompt, false, true, cfg, codecs)};
  DiffusionConfig dc;
  dc.scale = {2.0, 1.5};
  dc.dropout = {0.0, 0.0};

  double worst = 0.0;
  std::size_t checked = 0;
  for (const bool control : {false, true}) {
    JointModel<double> m = base;
    if (control) {
      m.freeze_backbone();
      m.attach_bypass(Rng(6, "bypass"));
      m.set_phase(Phase::control);
      randomize_heads(m, 7);
    }
    const Rng rng(8, control ? "control" : "pretrain");
    const FmResult<double> res = fm_loss(m, batch, dc, rng);
    std::vector<GradProbe> probes;
    Rng pick(9, "pick");
    for (int id : m.trainable_params(control ? Phase::control : Phase::pretrain)) {
      auto& p = m.params()[id];
      const auto k = static_cast<Index>(pick.below(static_cast<std::uint64_t>(p.value.size())));
      const double analytic = res.grads[id].size() ? res.grads[id].data()[k] : 0.0;
      probes.push_back({p.name, [&p, k] { return p.value[k]; }, [&p, k](double x) { p.value[k] = x; }, analytic});
    }
    const GradCheckReport rep = grad_check([&] { return fm_loss(m, batch, dc, rng).loss; }, probes, 1e-5);
    worst = std::max(worst, rep.max_rel_error);
    checked += rep.checked;
  }
  return {worst < 1e-3, "max relative error " + num(worst) + " over " + std::to_string(checked) + " parameters"};
}

// 5. Mask layouts for every (t, k) and codec round trips.
Outcome mmcu_layout(const Config& cfg) {
  const CodecPair codecs = cfg.codecs();
  Rng rng(12, "layout");
  bool ok = true;
  float round_trip = 0.0f;
  for (Index t = 1; t <= 16; ++t) {
    std::vector<std::uint8_t> vexp(static_cast<std::size_t>(t + 1), 1);
    vexp[0] = 0;
    const VisualControl vc = build_visual_control(std::nullopt, std::nullopt, t, codecs.video);
    ok = ok && vc.mask == vexp && visual_mask_layout(t) == vexp && vc.latents.length() == t + 1;
    for (Index k = 1; k <= 8; ++k) {
      Tensor<float> ref({k * codecs.audio.frame_len()}, rng.normal_matrix<float>(k * codecs.audio.frame_len(), 1));
      const AcousticControl ac = build_acoustic_control(ref, t, codecs.audio);
      std::vector<std::uint8_t> aexp(static_cast<std::size_t>(k), 0);
      aexp.resize(static_cast<std::size_t>(k + t), 1);
      ok = ok && ac.mask == aexp && acoustic_mask_layout(k, t) == aexp && ac.k == k;
      ok = ok && ac.latents.frames(k, t).tokens().isZero(0);
      round_trip = std::max(round_trip, max_abs_diff(codecs.audio.decode(ac.latents.frames(0, k)), ref));
    }
  }
  Tensor<float> frames({3, codecs.video.frame_h(), codecs.video.frame_w(), 3});
  for (Index i = 0; i < frames.size(); ++i) frames[i] = static_cast<float>(rng.uniform());
  round_trip = std::max(round_trip, max_abs_diff(codecs.video.decode(codecs.video.encode(frames)), frames));
  ok = ok && round_trip <= 1e-5f;
  return {ok, std::string(ok ? "all layouts exact" : "layout or round-trip mismatch") +
                  ", codec round trip max error " + num(round_trip)};
}

// 9. Stage 2 doubles the resolution, keeps t and audio length, refuses CFG.
Outcome two_stage_contract(const JointModel<float>& m, const Config& cfg) {
  const CodecPair codecs = cfg.codecs();
  const TrainingSample s = dataset_sample(DatasetSpec{cfg.eval_seed + 3, 1, Task::ref_pose}, 0, cfg.world);
  TwoStageConfig tsc = cfg.two_stage();
  const Generated g = two_stage_generate(m, &m, make_request(s, s.prompt, {}), tsc, codecs, Rng(9));
  auto side = [](const LatentSeq& z) { return static_cast<Index>(std::lround(std::sqrt(z.tokens_per_frame()))); };
  const Index lo = side(g.stage1.video), hi = side(g.stage2.video);
  bool ok = hi == 2 * lo && g.stage2.video.length() == g.stage1.video.length() && g.stage1.video.length() == s.t &&
            g.stage2.audio.length() == g.stage1.audio.length() && g.audio.size() == s.audio.size() &&
            g.video.dim(1) == cfg.world.height && g.video.dim(2) == cfg.world.width;
  bool refused = false;
  tsc.stage2_cfg = cfg.sampling.cfg_scale;
  try {
    two_stage_generate(m, &m, make_request(s, s.prompt, {}), tsc, codecs, Rng(9));
  } catch (const ConfigError&) {
    refused = true;
  }
  return {ok && refused, "patch grid " + std::to_string(lo) + " -> " + std::to_string(hi) + ", frames " +
                             std::to_string(g.stage2.video.length()) + ", stage-2 CFG " +
                             (refused ? "rejected" : "accepted")};
}

std::string media_bytes(const Generated& g, const fs::path& dir, int sample_rate) {
  fs::remove_all(dir);
  write_frames(dir / "video", g.video);
  write_wav(dir / "audio.wav", g.audio, sample_rate);
  std::string all;
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    all += fs::relative(f, dir).string() + "\n" + std::string(std::istreambuf_iterator<char>(in), {});
  }
  return all;
}

// 10. Repeated generation, checkpoint round trip and prompt round trip.
Outcome determinism(const JointModel<float>& m, const Config& cfg, const fs::path& work) {
  const TrainingSample s = dataset_sample(DatasetSpec{cfg.eval_seed + 4, 1, Task::ref_audio}, 0, cfg.world);
  const int sr = static_cast<int>(cfg.world.sample_rate);
  const std::string a = media_bytes(run_generate(m, s, cfg, 1.0, 1.0, 77), work / "det_a", sr);
  const std::string b = media_bytes(run_generate(m, s, cfg, 1.0, 1.0, 77), work / "det_b", sr);
  const bool media = a == b;

  const std::string bytes = encode_checkpoint(model_checkpoint(m, nullptr));
  const LoadedModel back = load_model(decode_checkpoint(bytes));
  const bool ckpt = encode_checkpoint(model_checkpoint(back.model, nullptr)) == bytes;

  Rng rng(10, "fuzz");
  static const char* pieces[] = {"[VISUAL]:", "[SPEECH]:", "[", "]", ":", " ", "red", "x", "\t", "\xff"};
  std::size_t parsed = 0, total = 0;
  bool prompts = true;
  for (int i = 0; i < 2000; ++i, ++total) {
    std::string text;
    // Every other case follows the template so that most of them parse.
    auto junk = [&](std::uint64_t lo) {
      std::string r;
      for (std::uint64_t j = 0, n = rng.below(40); j < n; ++j) r += pieces[lo + rng.below(10 - lo)];
      return r;
    };
    text = i % 2 ? junk(0) : "[VISUAL]:" + junk(5) + "[SPEECH]:" + junk(5);
    try {
      const StructuredPrompt p = parse_prompt(text);
      prompts = prompts && parse_prompt(render_prompt(p)) == p;
      ++parsed;
    } catch (const ParseError& e) {
      prompts = prompts && e.offset() <= text.size();
    }
  }
  return {media && ckpt && prompts, std::string("media ") + (media ? "identical" : "differ") + ", checkpoint " +
                                        (ckpt ? "identical" : "differs") + ", prompts " + std::to_string(parsed) +
                                        "/" + std::to_string(total) + " parsed " +
                                        (prompts ? "and round-tripped" : "with a round-trip failure")};
}

double mean_or_nan(const MetricMean& m) { return m.mean().value_or(std::nan("")); }

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: acceptance <config> [work dir]\n";
    return 2;
  }
  Config cfg;
  try {
    cfg = load_config(argv[1]);
  } catch (const std::exception& e) {
    std::cerr << "config: " << e.what() << "\n";
    return 2;
  }
  const fs::path work = argc > 2 ? fs::path(argv[2]) : fs::temp_directory_path() / "mmctl_acceptance";
  fs::create_directories(work);
  const Clock clock;
  auto note = [&](const std::string& msg) { std::cerr << "[" << std::fixed << std::setprecision(0) << clock.seconds()
                                                      << "s] " << msg << std::endl; };
  std::array<Outcome, 11> out;

  note("gradient check");
  out[4] = guarded(grad_correctness);
  note("mask layouts");
  out[5] = guarded([&] { return mmcu_layout(cfg); });

  note("pretraining " + std::to_string(cfg.pretrain.steps) + " steps");
  JointModel<float> backbone = new_backbone(cfg, 1);
  {
    const DatasetSpec ds{cfg.data_seed, cfg.pretrain_size, std::nullopt};
    const TrainSource src = make_train_source(ds.count, synthetic_samples(ds, cfg.world), false, cfg);
    AdamState<float> st;
    std::ofstream log(work / "pretrain_loss.log");
    TrainHooks<float> hooks;
    hooks.loss_log = &log;
    train_loop(backbone, src, Phase::pretrain, cfg.pretrain, cfg.diffusion, st, Rng(1, "pretrain"), hooks);
  }

  note("zero-init transparency");
  out[1] = guarded([&] { return zero_init_transparency(backbone, cfg); });

  note("control training " + std::to_string(cfg.control.steps) + " steps");
  JointModel<float> controlled = backbone;
  out[3] = guarded([&] {
    prepare_control(controlled, 2);
    const std::string before = controlled.backbone_checksum();
    const DatasetSpec ds{cfg.data_seed + 1000, cfg.control_size * 3, std::nullopt};
    const TrainSource src = make_train_source(ds.count, synthetic_samples(ds, cfg.world), true, cfg);
    AdamState<float> st;
    std::ofstream log(work / "control_loss.log");
    TrainHooks<float> hooks;
    hooks.loss_log = &log;
    train_loop(controlled, src, Phase::control, cfg.control, cfg.diffusion, st, Rng(2, "control"), hooks);
    const bool same = controlled.backbone_checksum() == before && before == backbone.backbone_checksum();
    const bool enough = st.step >= 500;
    return Outcome{same && enough, "checksum " + std::string(same ? "unchanged" : "changed") + " after " +
                                       std::to_string(st.step) + " control steps"};
  });
  write_checkpoint_file(work / "control.mmck", model_checkpoint(controlled, nullptr));

  note("gamma gate");
  out[2] = guarded([&] { return gamma_gate(backbone, controlled, cfg); });
  note("two-stage contract");
  out[9] = guarded([&] { return two_stage_contract(controlled, cfg); });
  note("determinism and formats");
  out[10] = guarded([&] { return determinism(controlled, cfg, work); });

  note("held-out study over " + std::to_string(cfg.eval_scenes) + " scenes");
  StudyReport study;
  try {
    study = run_study(controlled, cfg, 5, nullptr);
    std::ofstream f(work / "study.txt");
    print_study(f, study);
    print_study(std::cerr, study);
  } catch (const std::exception& e) {
    out[6] = out[7] = out[8] = {false, std::string("exception: ") + e.what()};
  }
  if (study.scenes > 0) {
    const double on = mean_or_nan(study.depth_controlled), off = mean_or_nan(study.depth_uncontrolled);
    out[6] = {on <= 0.7 * off, "depth_mae controlled " + num(on) + " vs uncontrolled " + num(off) + " (ratio " +
                                   num(on / off) + ", ordering " + (on < off ? "holds" : "fails") + ")"};

    std::array<double, 4> id{}, tb{};
    for (std::size_t c = 0; c < 4; ++c) {
      id[c] = mean_or_nan(study.identity[c]);
      tb[c] = mean_or_nan(study.timbre[c]);
    }
    // Index 2 * gamma_v + gamma_a.
    const double id_gap = (id[2] + id[3] - id[0] - id[1]) / 2, tb_gap = (tb[1] + tb[3] - tb[0] - tb[2]) / 2;
    const bool id_order = id[2] > id[0] && id[3] > id[1], tb_order = tb[1] > tb[0] && tb[3] > tb[2];
    out[7] = {id_gap >= 0.1 && tb_gap >= 0.1 && id_order && tb_order,
              "identity gap " + num(id_gap) + (id_order ? "" : " (ordering flips)") + ", timbre gap " + num(tb_gap) +
                  (tb_order ? "" : " (ordering flips)")};

    const double matched = mean_or_nan(study.sync_matched), shuffled = mean_or_nan(study.sync_shuffled);
    out[8] = {matched - shuffled >= 0.3, "sync_corr matched " + num(matched) + " vs shuffled " + num(shuffled) +
                                             " (difference " + num(matched - shuffled) + ")"};
  }

  static const char* names[] = {"",
                                "zero-init transparency",
                                "gamma gate",
                                "frozen backbone",
                                "gradient correctness",
                                "mmcu layout and codecs",
                                "structural control",
                                "decoupled control",
                                "joint sync",
                                "two-stage contract",
                                "determinism and formats"};
  int failed = 0;
  for (int c = 1; c <= 10; ++c) {
    const Outcome& o = out[static_cast<std::size_t>(c)];
    failed += !o.pass;
    std::cout << "criterion " << std::setw(2) << c << " " << (o.pass ? "PASS" : "FAIL") << "  " << names[c] << ": "
              << o.detail << "\n";
  }
  std::cout << (10 - failed) << "/10 criteria passed in " << std::fixed << std::setprecision(0) << clock.seconds()
            << " s\n";
  return failed == 0 ? 0 : 1;
}
