#include "mmctl/mmcu.hpp"

namespace mmctl {

std::vector<std::uint8_t> visual_mask_layout(Index t) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(1 + t), 1);
  m[0] = 0;
  return m;
}

std::vector<std::uint8_t> acoustic_mask_layout(Index k, Index t) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(k + t), 1);
  std::fill_n(m.begin(), k, std::uint8_t{0});
  return m;
}

VisualControl build_visual_control(const std::optional<Tensor<float>>& ref_image,
                                   const std::optional<Tensor<float>>& structure, Index t,
                                   const VideoCodec& codec) {
  if (t < 1) throw InputError("build_visual_control: t must be positive");
  const Index tpf = codec.tokens_per_frame(), dim = codec.latent_dim();
  VisualControl vc;
  LatentSeq ref = LatentSeq::zeros(1, tpf, dim);
  if (ref_image) {
    if (ref_image->rank() != 3) throw ShapeError("reference image must be [h x w x 3]");
    ref = codec.encode(ref_image->reshaped({1, ref_image->dim(0), ref_image->dim(1), ref_image->dim(2)}));
    vc.has_ref_image = true;
  }
  LatentSeq st = LatentSeq::zeros(t, tpf, dim);
  if (structure) {
    if (structure->rank() != 4 || structure->dim(0) != t) {
      throw ShapeError("structure must hold exactly t=" + std::to_string(t) + " frames, got " +
                       shape_str(structure->shape()));
    }
    st = codec.encode(*structure);
    vc.has_structure = true;
  }
  vc.latents = LatentSeq::concat(ref, st);
  vc.mask = visual_mask_layout(t);
  return vc;
}

AcousticControl build_acoustic_control(const std::optional<Tensor<float>>& ref_audio, Index t,
                                       const AudioCodec& codec, Index k_default) {
  if (t < 1) throw InputError("build_acoustic_control: t must be positive");
  AcousticControl ac;
  LatentSeq ref;
  if (ref_audio) {
    if (ref_audio->size() == 0) throw InputError("reference audio is empty");
    ref = codec.encode(*ref_audio);
    ac.has_ref_audio = true;
  } else {
    if (k_default < 1) throw ConfigError("k_default must be positive");
    ref = LatentSeq::zeros(k_default, 1, codec.latent_dim());
  }
  ac.k = ref.length();
  ac.latents = LatentSeq::concat(ref, silence_latents(t, codec));
  ac.mask = acoustic_mask_layout(ac.k, t);
  return ac;
}

ControlUnit make_control_unit(const StructuredPrompt& prompt, const TextConfig& text_cfg, VisualControl visual,
                              AcousticControl acoustic) {
  const Index tv = visual.latents.length() - 1;
  const Index ta = acoustic.latents.length() - acoustic.k;
  if (tv != ta) throw ShapeError("control unit: visual and acoustic frame counts differ");
  ControlUnit u;
  u.prompt = prompt;
  u.text = tokenize(prompt, text_cfg);
  u.visual = std::move(visual);
  u.acoustic = std::move(acoustic);
  u.t = tv;
  return u;
}

ControlUnit apply_control_dropout(ControlUnit u, Rng& rng, double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("control dropout probability must lie in [0, 1]");
  const bool drop_visual = rng.bernoulli(p);
  const bool drop_acoustic = rng.bernoulli(p);
  if (drop_visual) {
    u.visual.latents.tokens().setZero();
    std::fill(u.visual.mask.begin(), u.visual.mask.end(), std::uint8_t{0});
    u.visual.has_ref_image = u.visual.has_structure = false;
  }
  if (drop_acoustic) {
    u.acoustic.latents.tokens().setZero();
    std::fill(u.acoustic.mask.begin(), u.acoustic.mask.end(), std::uint8_t{0});
    u.acoustic.has_ref_audio = false;
  }
  return u;
}

}  // namespace mmctl
