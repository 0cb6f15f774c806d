#include "mmctl/diffusion.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "mmctl/parallel.hpp"

namespace mmctl {

namespace {

Index square_side(Index tokens_per_frame) {
  const auto side = static_cast<Index>(std::lround(std::sqrt(static_cast<double>(tokens_per_frame))));
  if (side * side != tokens_per_frame) throw ShapeError("video tokens per frame do not form a square grid");
  return side;
}

// [h x w x 3] frame as a one-frame stack.
Tensor<float> as_stack(const Tensor<float>& frame) {
  if (frame.rank() != 3) throw InputError("expected an [h x w x 3] image, got " + shape_str(frame.shape()));
  return frame.reshaped({1, frame.dim(0), frame.dim(1), frame.dim(2)});
}

template <typename S>
LatentSeq to_latents(const Matrix<S>& m, Index length, Index tpf, double inv_scale) {
  LatentSeq out = LatentSeq::zeros(length, tpf, m.cols());
  out.tokens() = (m.template cast<double>() * inv_scale).template cast<float>();
  return out;
}

}  // namespace

void NoiseSchedule::validate() const {
  if (sigmas.empty()) throw ConfigError("noise schedule is empty");
  if (sigmas.front() > 1.0 || sigmas.back() < 0.0) throw ConfigError("noise schedule must lie within [0, 1]");
  for (std::size_t i = 0; i < sigmas.size(); ++i) {
    if (!std::isfinite(sigmas[i])) throw ConfigError("noise schedule contains a non-finite level");
    if (i > 0 && !(sigmas[i] < sigmas[i - 1])) throw ConfigError("noise schedule must be strictly decreasing");
  }
}

NoiseSchedule NoiseSchedule::linear(double from, double to, Index steps) {
  if (steps < 0) throw ConfigError("schedule step count must be non-negative");
  NoiseSchedule s;
  if (from == to || steps == 0) {
    s.sigmas = {from};
    return s;
  }
  for (Index i = 0; i <= steps; ++i) {
    s.sigmas.push_back(from + (to - from) * static_cast<double>(i) / static_cast<double>(steps));
  }
  s.sigmas.back() = to;
  return s;
}

void GuidanceParams::validate() const {
  if (!std::isfinite(cfg_scale) || cfg_scale < 0.0) throw ConfigError("cfg scale must be finite and >= 0");
  if (!std::isfinite(gamma_v) || gamma_v < 0.0 || !std::isfinite(gamma_a) || gamma_a < 0.0) {
    throw ConfigError("gamma values must be finite and >= 0");
  }
}

std::pair<Tensor<float>, Tensor<float>> noise_interpolate(const Tensor<float>& clean, const Tensor<float>& eps,
                                                          double sigma) {
  if (!(sigma >= 0.0 && sigma <= 1.0)) throw InputError("noise level must lie in [0, 1]");
  if (clean.shape() != eps.shape()) {
    throw ShapeError("noise_interpolate: " + shape_str(clean.shape()) + " vs " + shape_str(eps.shape()));
  }
  Tensor<float> noisy = clean;
  Tensor<float> target = clean;
  const auto s = static_cast<float>(sigma);
  noisy.matrix() = (1.0f - s) * clean.matrix() + s * eps.matrix();
  target.matrix() = eps.matrix() - clean.matrix();
  return {std::move(noisy), std::move(target)};
}

Tensor<float> cfg_combine(const Tensor<float>& v_cond, const Tensor<float>& v_uncond, double s) {
  if (v_cond.shape() != v_uncond.shape()) throw ShapeError("cfg_combine: shape mismatch");
  Tensor<float> out = v_uncond;
  out.matrix() = v_uncond.matrix() + static_cast<float>(s) * (v_cond.matrix() - v_uncond.matrix());
  return out;
}

template <typename S>
Var fm_sample_loss(Graph<S>& g, const JointModel<S>& model, const TrainExample& ex, const DiffusionConfig& cfg,
                   Rng rng) {
  const double sigma = rng.split("sigma").uniform();
  const bool drop_text = rng.split("text").bernoulli(cfg.dropout.p_text);

  const TextVars text = drop_text ? model.null_text(g) : model.text(g, ex.unit.text);
  const Var c = model.conditioning(g, sigma, text);

  const Matrix<S> x0v = ex.video.tokens().template cast<S>() * static_cast<S>(cfg.scale.video);
  const Matrix<S> x0a = ex.audio.tokens().template cast<S>() * static_cast<S>(cfg.scale.audio);
  const Matrix<S> ev = rng.split("eps_v").template normal_matrix<S>(x0v.rows(), x0v.cols());
  const Matrix<S> ea = rng.split("eps_a").template normal_matrix<S>(x0a.rows(), x0a.cols());
  const auto sg = static_cast<S>(sigma);
  const Var noisy_v = g.constant((S(1) - sg) * x0v + sg * ev);
  const Var noisy_a = g.constant((S(1) - sg) * x0a + sg * ea);

  std::optional<Hints> hints;
  if (model.has_bypass()) {
    Rng drop = rng.split("control");
    const ControlUnit u = apply_control_dropout(ex.unit, drop, cfg.dropout.p_control);
    hints = model.hints_for(g, u, text, c);
  }
  const Index t = ex.video.length();
  const Velocity v = model.backbone_forward(g, noisy_v, noisy_a, t, square_side(ex.video.tokens_per_frame()), text, c,
                                            hints ? &*hints : nullptr, 1.0, 1.0);
  const double wsum = cfg.lambda_v + cfg.lambda_a;
  if (!(wsum > 0.0)) throw ConfigError("loss weights must sum to a positive value");
  return ad::weighted_sum(g, {ad::mse(g, v.video, Matrix<S>(ev - x0v)), ad::mse(g, v.audio, Matrix<S>(ea - x0a))},
                          {cfg.lambda_v / wsum, cfg.lambda_a / wsum});
}

template <typename S>
FmResult<S> fm_loss(const JointModel<S>& model, const std::vector<TrainExample>& batch, const DiffusionConfig& cfg,
                    const Rng& rng) {
  if (batch.empty()) throw InputError("fm_loss: empty batch");
  const std::size_t n = batch.size();
  std::vector<GradBuffer<S>> grads(n, GradBuffer<S>(model.params().size()));
  std::vector<double> losses(n);
  parallel_for(n, [&](std::size_t i) {
    Graph<S> g(true);
    const Var loss = fm_sample_loss(g, model, batch[i], cfg, rng.split(i));
    losses[i] = static_cast<double>(g.value(loss)(0, 0));
    g.backward(loss);
    grads[i].collect(g, static_cast<S>(1.0 / static_cast<double>(n)));
  });
  FmResult<S> out;
  out.grads = GradBuffer<S>(model.params().size());
  for (std::size_t i = 0; i < n; ++i) {
    out.grads.add(grads[i]);
    out.loss += losses[i];
  }
  out.loss /= static_cast<double>(n);
  out.per_sample = std::move(losses);
  return out;
}

template <typename S>
SampledLatents euler_sample(const JointModel<S>& model, const ControlUnit& unit, const NoiseSchedule& schedule,
                            const GuidanceParams& guidance, const SampleShape& shape, const LatentScale& scale,
                            const Rng& rng, const std::optional<SampledLatents>& init) {
  schedule.validate();
  guidance.validate();
  const ModelConfig& mc = model.config();
  if (shape.t <= 0 || shape.grid <= 0) throw ShapeError("sample shape must be positive");
  if (unit.t != shape.t) throw ShapeError("control unit frame count differs from the sample shape");
  const Index tpf = shape.grid * shape.grid;
  if (init) {
    if (init->video.length() != shape.t || init->video.tokens_per_frame() != tpf || init->audio.length() != shape.t) {
      throw ShapeError("initial latents do not match the sample shape");
    }
    if (schedule.steps() == 0) return *init;
  }

  Matrix<S> xv, xa;
  if (init) {
    xv = init->video.tokens().template cast<S>() * static_cast<S>(scale.video);
    xa = init->audio.tokens().template cast<S>() * static_cast<S>(scale.audio);
  } else {
    xv = rng.split("eps_v").template normal_matrix<S>(shape.t * tpf, mc.video_dim);
    xa = rng.split("eps_a").template normal_matrix<S>(shape.t, mc.audio_dim);
  }
  const bool use_hints = model.has_bypass() && (guidance.gamma_v != 0.0 || guidance.gamma_a != 0.0);
  const bool two_pass = guidance.cfg_scale != 1.0;
  const auto s = static_cast<S>(guidance.cfg_scale);

  for (Index i = 0; i < schedule.steps(); ++i) {
    const double sigma = schedule.sigmas[static_cast<std::size_t>(i)];
    const auto dt = static_cast<S>(schedule.sigmas[static_cast<std::size_t>(i) + 1] - sigma);
    Graph<S> g(false);
    const TextVars text = model.text(g, unit.text);
    const Var c = model.conditioning(g, sigma, text);
    std::optional<Hints> hints;
    if (use_hints) hints = model.hints_for(g, unit, text, c);
    const Var in_v = g.constant(xv);
    const Var in_a = g.constant(xa);
    const Velocity vc = model.backbone_forward(g, in_v, in_a, shape.t, shape.grid, text, c,
                                               hints ? &*hints : nullptr, guidance.gamma_v, guidance.gamma_a);
    if (two_pass) {
      const TextVars null = model.null_text(g);
      const Var cu = model.conditioning(g, sigma, null);
      const Velocity vu = model.backbone_forward(g, in_v, in_a, shape.t, shape.grid, null, cu,
                                                 hints ? &*hints : nullptr, guidance.gamma_v, guidance.gamma_a);
      xv += dt * (g.value(vu.video) + s * (g.value(vc.video) - g.value(vu.video)));
      xa += dt * (g.value(vu.audio) + s * (g.value(vc.audio) - g.value(vu.audio)));
    } else {
      xv += dt * g.value(vc.video);
      xa += dt * g.value(vc.audio);
    }
  }
  return {to_latents(xv, shape.t, tpf, 1.0 / scale.video), to_latents(xa, shape.t, 1, 1.0 / scale.audio)};
}

LatentSeq upsample_latents(const LatentSeq& lo, const VideoCodec& codec_lo, const VideoCodec& codec_hi) {
  if (codec_hi.grid_h() != 2 * codec_lo.grid_h() || codec_hi.grid_w() != 2 * codec_lo.grid_w()) {
    throw ShapeError("upsample_latents: target grid must be twice the source grid");
  }
  return codec_hi.encode(upsample2x(codec_lo.decode(lo)));
}

template <typename S>
Generated two_stage_generate(const JointModel<S>& model_lo, const JointModel<S>* model_hi,
                             const GenerateRequest& req, const TwoStageConfig& cfg, const CodecPair& codecs,
                             const Rng& rng) {
  if (cfg.stage2_cfg != 1.0) throw ConfigError("stage 2 runs without classifier-free guidance; its scale must be 1");
  if (!(cfg.sigma0 >= 0.0 && cfg.sigma0 <= 1.0)) throw ConfigError("stage-2 noise level must lie in [0, 1]");
  cfg.stage1.validate();
  cfg.guidance.validate();
  if (req.t <= 0) throw InputError("frame count must be positive");
  const VideoCodec& vc_hi = codecs.video;
  if (vc_hi.grid_h() % 2 != 0 || vc_hi.grid_w() % 2 != 0) throw ConfigError("full-resolution grid must be even");
  const VideoCodec vc_lo = vc_hi.with_frame(vc_hi.frame_h() / 2, vc_hi.frame_w() / 2);
  if (req.structure) {
    const auto& st = *req.structure;
    if (st.rank() != 4 || st.dim(0) != req.t || st.dim(1) != vc_hi.frame_h() || st.dim(2) != vc_hi.frame_w()) {
      throw InputError("structure frames must be [t x h x w x 3] at full resolution, got " + shape_str(st.shape()));
    }
  }
  if (req.ref_image && (req.ref_image->rank() != 3 || req.ref_image->dim(0) != vc_hi.frame_h() ||
                        req.ref_image->dim(1) != vc_hi.frame_w())) {
    throw InputError("reference image must match the full output resolution");
  }
  const JointModel<S>& hi = model_hi ? *model_hi : model_lo;

  std::optional<Tensor<float>> ref_lo, structure_lo;
  if (req.ref_image) {
    const Tensor<float> d = downsample2x(as_stack(*req.ref_image));
    ref_lo = d.reshaped({d.dim(1), d.dim(2), d.dim(3)});
  }
  if (req.structure) structure_lo = downsample2x(*req.structure);
  const AcousticControl acoustic = build_acoustic_control(req.ref_audio, req.t, codecs.audio, cfg.k_default);

  const ControlUnit unit_lo =
      make_control_unit(req.prompt, model_lo.config().text, build_visual_control(ref_lo, structure_lo, req.t, vc_lo),
                        acoustic);
  Generated out;
  out.stage1 = euler_sample(model_lo, unit_lo, cfg.stage1, cfg.guidance, {req.t, vc_lo.grid_h()}, cfg.scale,
                            rng.split("stage1"));

  const LatentSeq up = upsample_latents(out.stage1.video, vc_lo, vc_hi);
  Rng r2 = rng.split("stage2");
  SampledLatents start;
  {
    const Tensor<float> ev = Tensor<float>::from_matrix(r2.split("eps_v").normal_matrix<float>(
        up.tokens().rows(), up.tokens().cols()));
    const Tensor<float> ea = Tensor<float>::from_matrix(r2.split("eps_a").normal_matrix<float>(
        out.stage1.audio.tokens().rows(), out.stage1.audio.tokens().cols()));
    Tensor<float> cv = Tensor<float>::from_matrix(up.tokens() * static_cast<float>(cfg.scale.video));
    Tensor<float> ca = Tensor<float>::from_matrix(out.stage1.audio.tokens() * static_cast<float>(cfg.scale.audio));
    start.video = LatentSeq::zeros(req.t, vc_hi.tokens_per_frame(), vc_hi.latent_dim());
    start.audio = LatentSeq::zeros(req.t, 1, codecs.audio.latent_dim());
    if (cfg.sigma0 == 0.0) {
      start.video = up;
      start.audio = out.stage1.audio;
    } else {
      start.video.tokens() = noise_interpolate(cv, ev, cfg.sigma0).first.matrix() / static_cast<float>(cfg.scale.video);
      start.audio.tokens() = noise_interpolate(ca, ea, cfg.sigma0).first.matrix() / static_cast<float>(cfg.scale.audio);
    }
  }
  const ControlUnit unit_hi = make_control_unit(
      req.prompt, hi.config().text, build_visual_control(req.ref_image, req.structure, req.t, vc_hi), acoustic);
  GuidanceParams g2 = cfg.guidance;
  g2.cfg_scale = cfg.stage2_cfg;
  out.stage2 = euler_sample(hi, unit_hi, NoiseSchedule::linear(cfg.sigma0, 0.0, cfg.stage2_steps), g2,
                            {req.t, vc_hi.grid_h()}, cfg.scale, r2.split("sample"), start);
  out.video = vc_hi.decode(out.stage2.video);
  out.audio = codecs.audio.decode(out.stage2.audio);
  return out;
}

template <typename S>
void train_loop(JointModel<S>& model, const TrainSource& data, Phase phase, const TrainHyper& hyper,
                const DiffusionConfig& cfg, AdamState<S>& state, const Rng& rng, const TrainHooks<S>& hooks) {
  if (data.size == 0 || !data.fetch) throw InputError("train_loop: dataset is empty");
  if (hyper.batch <= 0 || hyper.grad_accum <= 0) throw ConfigError("batch and grad_accum must be positive");
  if (state.step > hyper.steps) throw StateError("resume step lies beyond the configured schedule");
  model.set_phase(phase);
  auto& params = model.params();
  const std::vector<int> trainable = model.trainable_params(phase);

  for (std::uint64_t n = state.step + 1; n <= hyper.steps; ++n) {
    const Rng step_rng = rng.split("step").split(n);
    const double lr = cosine_lr(n, hyper.steps, hyper.peak_lr, hyper.warmup);
    params.zero_grad();
    double loss = 0.0;
    for (Index a = 0; a < hyper.grad_accum; ++a) {
      const Rng micro = step_rng.split("micro").split(static_cast<std::uint64_t>(a));
      std::vector<TrainExample> batch;
      for (Index b = 0; b < hyper.batch; ++b) {
        const Rng item = micro.split("item").split(static_cast<std::uint64_t>(b));
        const auto index = static_cast<std::size_t>(item.split("index").below(data.size));
        Rng fetch_rng = item.split("fetch");
        batch.push_back(data.fetch(index, fetch_rng));
      }
      FmResult<S> res = fm_loss(model, batch, cfg, micro.split("loss"));
      if (!std::isfinite(res.loss)) {
        if (hooks.checkpoint) hooks.checkpoint(model, state, true);
        throw NumericError("non-finite loss at step " + std::to_string(n));
      }
      res.grads.apply(params);
      loss += res.loss / static_cast<double>(hyper.grad_accum);
    }
    double sq = 0.0;
    for (int id : trainable) {
      auto& gm = params[id].grad.matrix();
      gm /= static_cast<S>(hyper.grad_accum);
      sq += gm.template cast<double>().squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) {
      if (hooks.checkpoint) hooks.checkpoint(model, state, true);
      throw NumericError("non-finite gradient at step " + std::to_string(n));
    }
    if (hyper.grad_clip > 0.0 && norm > hyper.grad_clip) {
      const auto f = static_cast<S>(hyper.grad_clip / norm);
      for (int id : trainable) params[id].grad.matrix() *= f;
    }
    if (lr > 0.0) {
      adamw_step(params, AdamWHyper{lr, 0.9, 0.999, 1e-8, hyper.weight_decay}, state);
    } else {
      state.step += 1;
    }
    if (hooks.loss_log && (n % std::max<std::uint64_t>(1, hyper.log_every) == 0 || n == hyper.steps)) {
      std::ostringstream line;
      line << "step=" << n << " lr=" << std::setprecision(9) << lr << " loss=" << loss << '\n';
      *hooks.loss_log << line.str() << std::flush;
    }
    const bool periodic = hyper.checkpoint_every > 0 && n % hyper.checkpoint_every == 0;
    if (hooks.checkpoint && (periodic || n == hyper.steps)) hooks.checkpoint(model, state, false);
  }
}

#define MMCTL_INSTANTIATE(S)                                                                                    \
  template Var fm_sample_loss<S>(Graph<S>&, const JointModel<S>&, const TrainExample&, const DiffusionConfig&, \
                                 Rng);                                                                         \
  template FmResult<S> fm_loss<S>(const JointModel<S>&, const std::vector<TrainExample>&,                      \
                                  const DiffusionConfig&, const Rng&);                                         \
  template SampledLatents euler_sample<S>(const JointModel<S>&, const ControlUnit&, const NoiseSchedule&,      \
                                          const GuidanceParams&, const SampleShape&, const LatentScale&,       \
                                          const Rng&, const std::optional<SampledLatents>&);                   \
  template Generated two_stage_generate<S>(const JointModel<S>&, const JointModel<S>*, const GenerateRequest&, \
                                           const TwoStageConfig&, const CodecPair&, const Rng&);               \
  template void train_loop<S>(JointModel<S>&, const TrainSource&, Phase, const TrainHyper&,                    \
                              const DiffusionConfig&, AdamState<S>&, const Rng&, const TrainHooks<S>&);

MMCTL_INSTANTIATE(float)
MMCTL_INSTANTIATE(double)

#undef MMCTL_INSTANTIATE

}  // namespace mmctl
