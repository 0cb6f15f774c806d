#pragma once

#include <optional>
#include <vector>

#include "mmctl/codecs.hpp"
#include "mmctl/prompt.hpp"
#include "mmctl/rng.hpp"

namespace mmctl {

// Reference-image latent prepended to t structural latents, with mask
// {0} + {1} x t.
struct VisualControl {
  LatentSeq latents;                // length 1 + t
  std::vector<std::uint8_t> mask;   // length 1 + t
  bool has_ref_image = false;
  bool has_structure = false;
};

// k reference-audio latents followed by t silence latents, with mask
// {0}_k + {1}_t.
struct AcousticControl {
  LatentSeq latents;               // length k + t
  std::vector<std::uint8_t> mask;  // length k + t
  bool has_ref_audio = false;
  Index k = 0;
};

// Text enters as hash-bucket ids; the model's text encoder turns them into
// the T embedding inside its forward pass.
struct ControlUnit {
  StructuredPrompt prompt;
  TokenIds text;
  VisualControl visual;
  AcousticControl acoustic;
  Index t = 0;
};

std::vector<std::uint8_t> visual_mask_layout(Index t);
std::vector<std::uint8_t> acoustic_mask_layout(Index k, Index t);

// ref_image: [h x w x 3]; structure: [t x h x w x 3]. Absent inputs become
// zero latents with the layout unchanged.
VisualControl build_visual_control(const std::optional<Tensor<float>>& ref_image,
                                   const std::optional<Tensor<float>>& structure, Index t,
                                   const VideoCodec& codec);

// ref_audio: [n], n a positive multiple of the codec frame length. When absent,
// k_default zero latents stand in for the reference.
AcousticControl build_acoustic_control(const std::optional<Tensor<float>>& ref_audio, Index t,
                                       const AudioCodec& codec, Index k_default = 2);

ControlUnit make_control_unit(const StructuredPrompt& prompt, const TextConfig& text_cfg, VisualControl visual,
                              AcousticControl acoustic);

// Independently per modality, with probability p, zero that modality's
// latents and mask and clear its presence flags. Text is left alone.
ControlUnit apply_control_dropout(ControlUnit u, Rng& rng, double p);

}  // namespace mmctl
