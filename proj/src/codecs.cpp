#include "mmctl/codecs.hpp"

#include "mmctl/ops.hpp"
#include "mmctl/rng.hpp"

namespace mmctl {

LatentSeq LatentSeq::frames(Index first, Index count) const {
  if (first < 0 || count < 0 || first + count > length()) throw ShapeError("LatentSeq::frames: out of range");
  const Index tpf = tokens_per_frame();
  Matrix<float> rows = tokens().middleRows(first * tpf, count * tpf);
  return LatentSeq(Tensor<float>({count, tpf, dim()}, std::move(rows)));
}

LatentSeq LatentSeq::concat(const LatentSeq& a, const LatentSeq& b) {
  if (a.tokens_per_frame() != b.tokens_per_frame() || a.dim() != b.dim()) {
    throw ShapeError("LatentSeq::concat: token geometry differs");
  }
  Matrix<float> rows(a.tokens().rows() + b.tokens().rows(), a.dim());
  rows << a.tokens(), b.tokens();
  return LatentSeq(Tensor<float>({a.length() + b.length(), a.tokens_per_frame(), a.dim()}, std::move(rows)));
}

Tensor<float> make_orthogonal(std::string_view label, Index n) {
  if (n < 1) throw InputError("make_orthogonal: n must be positive");
  Rng rng(0, label);
  Matrix<double> a = rng.normal_matrix<double>(n, n);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, n);
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Index j = 0; j < n; ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  return Tensor<float>({n, n}, Matrix<float>(q.cast<float>()));
}

VideoCodec::VideoCodec(Index frame_h, Index frame_w, Index patch, std::string_view label)
    : frame_h_(frame_h), frame_w_(frame_w), patch_(patch) {
  if (patch <= 0 || frame_h <= 0 || frame_w <= 0 || frame_h % patch != 0 || frame_w % patch != 0) {
    throw ConfigError("VideoCodec: frame " + std::to_string(frame_h) + "x" + std::to_string(frame_w) +
                      " not divisible by patch " + std::to_string(patch));
  }
  basis_ = make_orthogonal(label, latent_dim());
}

VideoCodec VideoCodec::with_frame(Index frame_h, Index frame_w) const {
  VideoCodec c = *this;
  if (frame_h <= 0 || frame_w <= 0 || frame_h % patch_ != 0 || frame_w % patch_ != 0) {
    throw ConfigError("VideoCodec: frame not divisible by patch");
  }
  c.frame_h_ = frame_h;
  c.frame_w_ = frame_w;
  return c;
}

LatentSeq VideoCodec::encode(const Tensor<float>& frames) const {
  if (frames.rank() != 4 || frames.dim(1) != frame_h_ || frames.dim(2) != frame_w_ || frames.dim(3) != 3) {
    throw ShapeError("encode_video: expected [t x " + std::to_string(frame_h_) + " x " +
                     std::to_string(frame_w_) + " x 3], got " + shape_str(frames.shape()));
  }
  const Index t = frames.dim(0), gh = grid_h(), gw = grid_w(), p = patch_, dim = latent_dim();
  Matrix<float> patches(t * gh * gw, dim);
  for (Index f = 0; f < t; ++f)
    for (Index gy = 0; gy < gh; ++gy)
      for (Index gx = 0; gx < gw; ++gx) {
        const Index row = (f * gh + gy) * gw + gx;
        Index col = 0;
        for (Index y = 0; y < p; ++y)
          for (Index x = 0; x < p; ++x)
            for (Index c = 0; c < 3; ++c) {
              patches(row, col++) = frames[((f * frame_h_ + gy * p + y) * frame_w_ + gx * p + x) * 3 + c];
            }
      }
  Matrix<float> lat = mul_acc(patches, basis_.matrix().transpose());
  return LatentSeq(Tensor<float>({t, gh * gw, dim}, std::move(lat)));
}

Tensor<float> VideoCodec::decode(const LatentSeq& latents) const {
  if (latents.tokens_per_frame() != tokens_per_frame() || latents.dim() != latent_dim()) {
    throw ShapeError("decode_video: latent geometry does not match codec");
  }
  const Index t = latents.length(), gh = grid_h(), gw = grid_w(), p = patch_;
  const Matrix<float> patches = mul_acc(latents.tokens(), basis_.matrix());
  Tensor<float> frames({t, frame_h_, frame_w_, 3});
  for (Index f = 0; f < t; ++f)
    for (Index gy = 0; gy < gh; ++gy)
      for (Index gx = 0; gx < gw; ++gx) {
        const Index row = (f * gh + gy) * gw + gx;
        Index col = 0;
        for (Index y = 0; y < p; ++y)
          for (Index x = 0; x < p; ++x)
            for (Index c = 0; c < 3; ++c) {
              frames[((f * frame_h_ + gy * p + y) * frame_w_ + gx * p + x) * 3 + c] = patches(row, col++);
            }
      }
  return frames;
}

AudioCodec::AudioCodec(double sample_rate, Index frame_len, std::string_view label)
    : sample_rate_(sample_rate), frame_len_(frame_len) {
  if (frame_len <= 0 || !(sample_rate > 0)) throw ConfigError("AudioCodec: invalid geometry");
  basis_ = make_orthogonal(label, frame_len);
}

LatentSeq AudioCodec::encode(const Tensor<float>& wave) const {
  if (wave.rank() != 1 || wave.size() % frame_len_ != 0) {
    throw ShapeError("encode_audio: wave length " + std::to_string(wave.size()) +
                     " not divisible by frame length " + std::to_string(frame_len_));
  }
  const Index t = wave.size() / frame_len_;
  const Eigen::Map<const Matrix<float>> frames(wave.data(), t, frame_len_);
  Matrix<float> lat = mul_acc(frames, basis_.matrix().transpose());
  return LatentSeq(Tensor<float>({t, 1, frame_len_}, std::move(lat)));
}

Tensor<float> AudioCodec::decode(const LatentSeq& latents) const {
  if (latents.tokens_per_frame() != 1 || latents.dim() != frame_len_) {
    throw ShapeError("decode_audio: latent geometry does not match codec");
  }
  Matrix<float> frames = mul_acc(latents.tokens(), basis_.matrix());
  return Tensor<float>({latents.length() * frame_len_}, std::move(frames));
}

LatentSeq silence_latents(Index t, const AudioCodec& codec) {
  if (t < 1) throw InputError("silence_latents: t must be positive");
  return codec.encode(Tensor<float>({t * codec.frame_len()}));
}

Tensor<float> downsample2x(const Tensor<float>& frames) {
  if (frames.rank() != 4 || frames.dim(1) % 2 != 0 || frames.dim(2) % 2 != 0) {
    throw ShapeError("downsample2x: expected [t x h x w x c] with even h, w");
  }
  const Index t = frames.dim(0), h = frames.dim(1), w = frames.dim(2), c = frames.dim(3);
  Tensor<float> out({t, h / 2, w / 2, c});
  for (Index f = 0; f < t; ++f)
    for (Index y = 0; y < h / 2; ++y)
      for (Index x = 0; x < w / 2; ++x)
        for (Index ch = 0; ch < c; ++ch) {
          double s = 0;
          for (Index dy = 0; dy < 2; ++dy)
            for (Index dx = 0; dx < 2; ++dx) s += frames[((f * h + 2 * y + dy) * w + 2 * x + dx) * c + ch];
          out[((f * (h / 2) + y) * (w / 2) + x) * c + ch] = static_cast<float>(s / 4.0);
        }
  return out;
}

Tensor<float> upsample2x(const Tensor<float>& frames) {
  if (frames.rank() != 4) throw ShapeError("upsample2x: expected [t x h x w x c]");
  const Index t = frames.dim(0), h = frames.dim(1), w = frames.dim(2), c = frames.dim(3);
  Tensor<float> out({t, 2 * h, 2 * w, c});
  for (Index f = 0; f < t; ++f)
    for (Index y = 0; y < 2 * h; ++y)
      for (Index x = 0; x < 2 * w; ++x)
        for (Index ch = 0; ch < c; ++ch) {
          out[((f * 2 * h + y) * 2 * w + x) * c + ch] = frames[((f * h + y / 2) * w + x / 2) * c + ch];
        }
  return out;
}

Tensor<float> gray_to_rgb(const Tensor<float>& maps) {
  if (maps.rank() != 3) throw ShapeError("gray_to_rgb: expected [t x h x w]");
  const Index n = maps.size();
  Tensor<float> out({maps.dim(0), maps.dim(1), maps.dim(2), 3});
  for (Index i = 0; i < n; ++i) out[3 * i] = out[3 * i + 1] = out[3 * i + 2] = maps[i];
  return out;
}

}  // namespace mmctl
