#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mmctl/checkpoint.hpp"
#include "mmctl/hashing.hpp"
#include "mmctl/media_io.hpp"
#include "mmctl/pipeline.hpp"

namespace fs = std::filesystem;
using namespace mmctl;

namespace {

struct Globals {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  bool force = false;
  std::vector<std::string> overrides;
};

Config resolve_config(const Globals& g) {
  Config cfg = g.config.empty() ? Config{} : load_config(g.config);
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

fs::path require_out(const Globals& g) {
  if (g.out.empty()) throw UsageError("--out is required for this command");
  return g.out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw InputError("cannot write " + p.string());
  out << text;
}

nlohmann::json run_meta(const std::string& command, const Globals& g, const Config& cfg) {
  return {{"command", command}, {"seed", g.seed}, {"config_hash", config_hash(cfg)}};
}

void announce_config(const Config& cfg, const fs::path& out) {
  std::cout << "# resolved config (sha256 " << config_hash(cfg) << ")\n" << resolved_config(cfg);
  write_text(out / "config.resolved", resolved_config(cfg));
}

// ---------------------------------------------------------------------------

int cmd_synth(const Globals& g) {
  const Config cfg = resolve_config(g);
  const fs::path out = require_out(g);
  DatasetSpec d{g.seed, cfg.synth_count, std::nullopt};
  if (cfg.synth_task != "mixed") d.task = parse_task(cfg.synth_task);
  const std::string hash = write_dataset(out, d, cfg.world, g.force);
  nlohmann::json meta = run_meta("synth", g, cfg);
  meta["count"] = d.count;
  meta["manifest_sha256"] = hash;
  write_text(out / "run.json", meta.dump(2) + "\n");
  std::cout << "wrote " << d.count << " samples to " << out.string() << "\nmanifest_sha256=" << hash << "\n";
  return 0;
}

struct TrainArgs {
  std::string dataset;
  std::string init;
  std::string resume;
};

int run_training(const Globals& g, const TrainArgs& a, Phase phase) {
  const Config cfg = resolve_config(g);
  const fs::path out = require_out(g);
  const bool control = phase == Phase::control;
  const char* command = control ? "train-control" : "pretrain";
  if (a.dataset.empty()) throw UsageError("--dataset is required");
  if (fs::exists(out / "final.mmck") && a.resume.empty() && !g.force) {
    throw StateError(out.string() + " already holds a final checkpoint (use --force or --resume)");
  }
  fs::create_directories(out);
  announce_config(cfg, out);

  std::optional<LoadedModel> loaded;
  std::optional<std::string> init_checksum;
  if (control && !a.init.empty()) {
    if (!fs::exists(a.init)) throw InputError("pretrain checkpoint not found: " + a.init);
    LoadedModel init = load_model_file(a.init);
    if (init.model.has_bypass()) throw StateError(a.init + " is not a pretrain checkpoint");
    init_checksum = init.model.backbone_checksum();
    if (a.resume.empty()) {
      prepare_control(init.model, g.seed);
      init.state = {};
      loaded = std::move(init);
    }
  } else if (control && a.resume.empty()) {
    throw UsageError("train-control needs --init <pretrain checkpoint>");
  }
  if (!a.resume.empty()) {
    loaded = load_model_file(a.resume);
    if (loaded->model.backbone_frozen() != control) {
      throw StateError(a.resume + " belongs to the other training phase");
    }
    if (init_checksum && *init_checksum != loaded->model.backbone_checksum()) {
      throw StateError("backbone checksum of " + a.resume + " differs from " + a.init);
    }
    std::cout << "resuming at step " << loaded->state.step << "\n";
  }
  if (!loaded) loaded = LoadedModel{new_backbone(cfg, g.seed), {}, {}};

  std::size_t count = 0;
  SampleFn samples = disk_samples(a.dataset, cfg.world, &count);
  const TrainSource src = make_train_source(count, std::move(samples), control, cfg);
  const TrainHyper& hyper = control ? cfg.control : cfg.pretrain;

  std::ofstream log(out / "loss.log", a.resume.empty() ? std::ios::trunc : std::ios::app);
  TrainHooks<float> hooks;
  hooks.loss_log = &log;
  nlohmann::json meta = run_meta(command, g, cfg);
  hooks.checkpoint = [&](const JointModel<float>& m, const AdamState<float>& st, bool diagnostic) {
    const CheckpointData ck = model_checkpoint(m, &st, meta);
    if (diagnostic) {
      write_checkpoint_file(out / "diagnostic.mmck", ck);
      return;
    }
    char name[32];
    std::snprintf(name, sizeof name, "step_%06llu.mmck", static_cast<unsigned long long>(st.step));
    write_checkpoint_file(out / name, ck);
    if (st.step == hyper.steps) write_checkpoint_file(out / "final.mmck", ck);
    std::cout << "checkpoint step " << st.step << "\n" << std::flush;
  };
  train_loop(loaded->model, src, phase, hyper, cfg.diffusion, loaded->state, Rng(g.seed, command), hooks);
  std::cout << "backbone_checksum=" << loaded->model.backbone_checksum() << "\n";
  if (init_checksum) std::cout << "init_backbone_checksum=" << *init_checksum << "\n";
  return 0;
}

struct GenerateArgs {
  std::string checkpoint;
  std::string checkpoint_hi;
  std::string prompt;
  std::string ref_image;
  std::string ref_audio;
  std::string depth;
  std::string pose;
  std::string dataset_dir;
  std::optional<double> gamma_v, gamma_a, cfg_scale;
  Index frames = 0;
  bool generic_prompt = false;
  bool no_structure = false;
};

void write_generation(const fs::path& dir, const Generated& gen, const Config& cfg, nlohmann::json meta) {
  write_frames(dir / "video", gen.video);
  write_wav(dir / "audio.wav", gen.audio, static_cast<int>(std::lround(cfg.world.sample_rate)));
  write_text(dir / "meta.json", meta.dump(2) + "\n");
}

int cmd_generate(const Globals& g, const GenerateArgs& a) {
  Config cfg = resolve_config(g);
  const fs::path out = require_out(g);
  if (!a.depth.empty() && !a.pose.empty()) throw UsageError("--depth and --pose are mutually exclusive");
  if (a.checkpoint.empty()) throw UsageError("--checkpoint is required");
  if (a.gamma_v) cfg.sampling.gamma_v = *a.gamma_v;
  if (a.gamma_a) cfg.sampling.gamma_a = *a.gamma_a;
  if (a.cfg_scale) cfg.sampling.cfg_scale = *a.cfg_scale;
  cfg.validate();
  if (fs::exists(out) && !g.force) throw StateError(out.string() + " already exists (use --force to overwrite)");
  if (fs::exists(out)) fs::remove_all(out);

  const LoadedModel lo = load_model_file(a.checkpoint);
  std::optional<LoadedModel> hi;
  if (!a.checkpoint_hi.empty()) hi = load_model_file(a.checkpoint_hi);
  const TwoStageConfig tsc = cfg.two_stage();
  nlohmann::json meta = run_meta("generate", g, cfg);
  meta["checkpoint_sha256"] = sha256_hex(slurp(a.checkpoint));
  if (hi) meta["checkpoint_hi_sha256"] = sha256_hex(slurp(a.checkpoint_hi));
  meta["gamma_v"] = tsc.guidance.gamma_v;
  meta["gamma_a"] = tsc.guidance.gamma_a;
  meta["cfg_scale"] = tsc.guidance.cfg_scale;
  meta["stage1_sigmas"] = tsc.stage1.sigmas;
  meta["stage2_steps"] = tsc.stage2_steps;
  meta["sigma0"] = tsc.sigma0;
  const JointModel<float>* model_hi = hi ? &hi->model : nullptr;

  if (!a.dataset_dir.empty()) {
    std::size_t count = 0;
    const SampleFn samples = disk_samples(a.dataset_dir, cfg.world, &count);
    for (std::size_t i = 0; i < count; ++i) {
      const TrainingSample s = samples(i);
      const StructuredPrompt prompt = a.generic_prompt ? drop_attributes(s.prompt, true, true) : s.prompt;
      const GenerateRequest req = make_request(s, prompt, {true, true, !a.no_structure});
      const std::uint64_t seed = Rng(g.seed, "generate-dataset").split(i).next_u64();
      nlohmann::json m = meta;
      m["id"] = s.id;
      m["prompt"] = render_prompt(prompt);
      m["sample_seed"] = seed;
      write_generation(out / s.id, generate(lo.model, model_hi, req, tsc, cfg, seed), cfg, m);
      std::cout << s.id << "\n" << std::flush;
    }
    return 0;
  }

  if (a.prompt.empty()) throw UsageError("--prompt is required unless --dataset-dir is given");
  GenerateRequest req;
  req.prompt = parse_prompt(a.prompt);
  req.t = a.frames > 0 ? a.frames : cfg.world.t;
  if (!a.ref_image.empty()) req.ref_image = read_ppm(a.ref_image);
  if (!a.ref_audio.empty()) {
    const WavData w = read_wav(a.ref_audio);
    if (w.sample_rate != static_cast<int>(std::lround(cfg.world.sample_rate))) {
      throw InputError("reference audio sample rate " + std::to_string(w.sample_rate) + " differs from the world's");
    }
    req.ref_audio = w.wave;
  }
  const std::string& structure_dir = a.depth.empty() ? a.pose : a.depth;
  if (!structure_dir.empty()) {
    req.structure = read_frames(structure_dir);
    if (a.frames == 0) req.t = req.structure->dim(0);
  }
  meta["prompt"] = render_prompt(req.prompt);
  write_generation(out, generate(lo.model, model_hi, req, tsc, cfg, g.seed), cfg, meta);
  std::cout << "wrote " << out.string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string generated;
  std::string dataset;
  bool json = false;
};

int cmd_eval(const Globals& g, const EvalArgs& a) {
  const Config cfg = resolve_config(g);
  if (a.generated.empty() || a.dataset.empty()) throw UsageError("--generated-dir and --dataset-dir are required");
  const std::vector<SampleMetrics> per = evaluate_dirs(a.generated, a.dataset, {cfg.world.sample_rate, cfg.world.frame_len});
  MetricReport report;
  std::string lines;
  for (const auto& m : per) {
    report.add(m);
    lines += metrics_line(m) + "\n";
  }
  if (!g.out.empty()) {
    write_text(fs::path(g.out) / "metrics.txt", lines);
    write_text(fs::path(g.out) / "report.json", report_json(report, per) + "\n");
  }
  if (a.json) {
    std::cout << report_json(report, per) << "\n";
  } else {
    std::cout << lines;
    print_report_table(std::cout, report);
  }
  return 0;
}

int cmd_inspect(const std::string& path) {
  const CheckpointData ck = read_checkpoint_file(path);
  std::cout << "file: " << path << "\nformat version: " << kCheckpointVersion << "\nmetadata:\n"
            << ck.meta.dump(2) << "\n";
  std::cout << std::left << std::setw(52) << "tensor" << std::setw(16) << "shape" << std::setw(10) << "numel"
            << "sha256[:16]\n";
  Index total = 0;
  for (const auto& t : ck.tensors) {
    CheckpointData one;
    one.tensors.push_back(t);
    const std::string digest = sha256_hex(encode_checkpoint(one)).substr(0, 16);
    std::cout << std::left << std::setw(52) << t.name << std::setw(16) << shape_str(t.value.shape()) << std::setw(10)
              << t.value.size() << digest << "\n";
    total += t.value.size();
  }
  std::cout << ck.tensors.size() << " tensors, " << total << " scalars\n";
  const LoadedModel m = load_model(ck);
  std::cout << "backbone checksum verified: " << m.model.backbone_checksum() << "\n";
  return 0;
}

int cmd_eval_gamma(const Globals& g, const std::string& checkpoint) {
  const Config cfg = resolve_config(g);
  if (checkpoint.empty()) throw UsageError("--checkpoint is required");
  const LoadedModel m = load_model_file(checkpoint);
  if (!m.model.has_bypass()) throw StateError("the gamma study needs a control checkpoint");
  const StudyReport r = run_study(m.model, cfg, g.seed, &std::cerr);
  print_study(std::cout, r);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Controllable joint audio-video diffusion on a synthetic world"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "flat key = value config file");
  app.add_option("--seed", g.seed, "run seed");
  app.add_option("--out", g.out, "output directory");
  app.add_flag("--force", g.force, "overwrite existing outputs");
  app.add_option("--set", g.overrides, "config override key=value (repeatable)");

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset");

  TrainArgs pre_args, ctl_args;
  auto* pretrain = app.add_subcommand("pretrain", "train the joint backbone");
  pretrain->add_option("--dataset", pre_args.dataset, "dataset root")->required();
  pretrain->add_option("--resume", pre_args.resume, "resume from a pretrain checkpoint");
  auto* control = app.add_subcommand("train-control", "freeze the backbone and train the bypass");
  control->add_option("--dataset", ctl_args.dataset, "dataset root")->required();
  control->add_option("--init", ctl_args.init, "pretrain checkpoint");
  control->add_option("--resume", ctl_args.resume, "resume from a control checkpoint");

  GenerateArgs gen_args;
  auto* gen = app.add_subcommand("generate", "two-stage generation");
  gen->add_option("--checkpoint", gen_args.checkpoint, "model checkpoint")->required();
  gen->add_option("--checkpoint-hi", gen_args.checkpoint_hi, "optional stage-2 checkpoint");
  gen->add_option("--prompt", gen_args.prompt, "\"[VISUAL]: ... [SPEECH]: ...\"");
  gen->add_option("--ref-image", gen_args.ref_image, "reference image (PPM)");
  gen->add_option("--ref-audio", gen_args.ref_audio, "reference audio (WAV)");
  gen->add_option("--depth", gen_args.depth, "directory of depth frames (PPM)");
  gen->add_option("--pose", gen_args.pose, "directory of pose frames (PPM)");
  gen->add_option("--gamma-v", gen_args.gamma_v, "visual hint scale");
  gen->add_option("--gamma-a", gen_args.gamma_a, "acoustic hint scale");
  gen->add_option("--cfg-scale", gen_args.cfg_scale, "stage-1 guidance scale");
  gen->add_option("--frames", gen_args.frames, "frames to generate without structure input");
  gen->add_option("--dataset-dir", gen_args.dataset_dir, "generate one output per dataset sample");
  gen->add_flag("--generic-prompt", gen_args.generic_prompt, "dataset mode: drop colour and speaker words");
  gen->add_flag("--no-structure", gen_args.no_structure, "dataset mode: omit structural control");

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "score generated samples against a dataset");
  eval->add_option("--generated-dir", eval_args.generated, "generated samples root")->required();
  eval->add_option("--dataset-dir", eval_args.dataset, "dataset root")->required();
  eval->add_flag("--json", eval_args.json, "print a single JSON document");

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect-checkpoint", "print a checkpoint's tensor table");
  inspect->add_option("path", inspect_path, "checkpoint file")->required();

  std::string gamma_ckpt;
  auto* gamma = app.add_subcommand("eval-gamma", "held-out study over control settings and the gamma grid");
  gamma->add_option("--checkpoint", gamma_ckpt, "control checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    if (*synth) return cmd_synth(g);
    if (*pretrain) return run_training(g, pre_args, Phase::pretrain);
    if (*control) return run_training(g, ctl_args, Phase::control);
    if (*gen) return cmd_generate(g, gen_args);
    if (*eval) return cmd_eval(g, eval_args);
    if (*inspect) return cmd_inspect(inspect_path);
    if (*gamma) return cmd_eval_gamma(g, gamma_ckpt);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
