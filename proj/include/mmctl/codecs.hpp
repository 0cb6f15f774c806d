#pragma once

#include <string>
#include <string_view>

#include "mmctl/tensor.hpp"

namespace mmctl {

// Latent token sequence [length x tokens_per_frame x dim].
struct LatentSeq {
  Tensor<float> data;

  LatentSeq() = default;
  explicit LatentSeq(Tensor<float> t) : data(std::move(t)) {
    if (data.rank() != 3) throw ShapeError("LatentSeq: expected rank-3 tensor, got " + shape_str(data.shape()));
  }
  static LatentSeq zeros(Index length, Index tokens_per_frame, Index dim) {
    return LatentSeq(Tensor<float>({length, tokens_per_frame, dim}));
  }

  Index length() const { return data.dim(0); }
  Index tokens_per_frame() const { return data.dim(1); }
  Index dim() const { return data.dim(2); }

  // [length * tokens_per_frame x dim] token rows, frame-major.
  Matrix<float>& tokens() { return data.matrix(); }
  const Matrix<float>& tokens() const { return data.matrix(); }

  // Frames [first, first + count) as a new sequence.
  LatentSeq frames(Index first, Index count) const;
  // Temporal concatenation.
  static LatentSeq concat(const LatentSeq& a, const LatentSeq& b);
};

// n x n orthogonal matrix from Householder QR of a Gaussian matrix drawn from
// the stream named `label`. Column signs are fixed by diag(R) > 0, so the
// result is a pure function of (label, n).
Tensor<float> make_orthogonal(std::string_view label, Index n);

// Patch codec: each p x p x 3 patch, flattened row-major (y, x, channel), is
// multiplied by an orthogonal basis. Tokens within a frame follow the row-major
// patch grid.
class VideoCodec {
 public:
  VideoCodec(Index frame_h, Index frame_w, Index patch, std::string_view label = "codec/video");

  Index frame_h() const noexcept { return frame_h_; }
  Index frame_w() const noexcept { return frame_w_; }
  Index patch() const noexcept { return patch_; }
  Index grid_h() const noexcept { return frame_h_ / patch_; }
  Index grid_w() const noexcept { return frame_w_ / patch_; }
  Index tokens_per_frame() const noexcept { return grid_h() * grid_w(); }
  Index latent_dim() const noexcept { return 3 * patch_ * patch_; }
  const Tensor<float>& basis() const noexcept { return basis_; }

  // frames: [t x h x w x 3]
  LatentSeq encode(const Tensor<float>& frames) const;
  Tensor<float> decode(const LatentSeq& latents) const;

  // Same basis, different frame geometry.
  VideoCodec with_frame(Index frame_h, Index frame_w) const;

 private:
  Index frame_h_, frame_w_, patch_;
  Tensor<float> basis_;
};

// Per-frame orthogonal audio codec: one latent token per video frame.
class AudioCodec {
 public:
  AudioCodec(double sample_rate, Index frame_len, std::string_view label = "codec/audio");

  double sample_rate() const noexcept { return sample_rate_; }
  Index frame_len() const noexcept { return frame_len_; }
  Index latent_dim() const noexcept { return frame_len_; }
  const Tensor<float>& basis() const noexcept { return basis_; }

  // wave: [n], n divisible by frame_len.
  LatentSeq encode(const Tensor<float>& wave) const;
  Tensor<float> decode(const LatentSeq& latents) const;

 private:
  double sample_rate_;
  Index frame_len_;
  Tensor<float> basis_;
};

LatentSeq silence_latents(Index t, const AudioCodec& codec);

// Pixel-domain helpers on [t x h x w x c] stacks.
Tensor<float> downsample2x(const Tensor<float>& frames);  // 2x2 block mean
Tensor<float> upsample2x(const Tensor<float>& frames);    // nearest neighbour
// Single-channel [t x h x w] maps replicated to 3 channels.
Tensor<float> gray_to_rgb(const Tensor<float>& maps);

}  // namespace mmctl
