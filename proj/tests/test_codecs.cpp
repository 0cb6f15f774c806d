#include <doctest.h>

#include "mmctl/codecs.hpp"
#include "mmctl/media_io.hpp"
#include "mmctl/rng.hpp"
#include "support.hpp"

using namespace mmctl;

namespace {

Tensor<float> random_frames(Index t, Index h, Index w, std::uint64_t seed) {
  Rng rng(seed, "frames");
  Tensor<float> f({t, h, w, 3});
  for (Index i = 0; i < f.size(); ++i) f[i] = static_cast<float>(rng.uniform());
  return f;
}

float max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  REQUIRE(a.shape() == b.shape());
  return (a.matrix() - b.matrix()).cwiseAbs().maxCoeff();
}

}  // namespace

TEST_CASE("make_orthogonal") {
  const Tensor<float> one = make_orthogonal("x", 1);
  CHECK(std::abs(std::abs(one[0]) - 1.0f) < 1e-7f);
  const Tensor<float> q = make_orthogonal("codec/test", 48);
  const Matrix<double> qd = q.matrix().cast<double>();
  CHECK((qd.transpose() * qd - Matrix<double>::Identity(48, 48)).cwiseAbs().maxCoeff() < 1e-5);
  CHECK(make_orthogonal("codec/test", 48) == q);
  CHECK(!(make_orthogonal("codec/other", 48) == q));
  CHECK_THROWS_AS(make_orthogonal("x", 0), InputError);
}

TEST_CASE("video codec") {
  const VideoCodec codec(32, 32, 8);
  CHECK(codec.tokens_per_frame() == 16);
  CHECK(codec.latent_dim() == 192);
  const Tensor<float> x = random_frames(3, 32, 32, 1);
  const LatentSeq z = codec.encode(x);
  CHECK(z.length() == 3);
  CHECK(z.tokens_per_frame() == 16);
  CHECK(z.dim() == 192);
  CHECK(max_abs_diff(codec.decode(z), x) <= 1e-5f);

  const LatentSeq zero = codec.encode(Tensor<float>({2, 32, 32, 3}));
  CHECK(zero.tokens().isZero(0));

  const Tensor<float> y = random_frames(3, 32, 32, 2);
  Tensor<float> sum = x;
  sum.matrix() += y.matrix();
  Matrix<float> lin = codec.encode(x).tokens() + codec.encode(y).tokens();
  CHECK((codec.encode(sum).tokens() - lin).cwiseAbs().maxCoeff() < 1e-5f);

  CHECK_THROWS_AS(VideoCodec(30, 32, 8), ConfigError);
  CHECK_THROWS_AS(codec.encode(random_frames(1, 16, 16, 3)), ShapeError);

  // Token order follows the row-major patch grid: a lone bright patch at grid
  // (1, 2) lands in token 1 * 4 + 2.
  Tensor<float> patch({1, 32, 32, 3});
  for (Index yy = 8; yy < 16; ++yy)
    for (Index xx = 16; xx < 24; ++xx)
      for (Index c = 0; c < 3; ++c) patch[((yy * 32) + xx) * 3 + c] = 1.0f;
  const Matrix<float> tok = codec.encode(patch).tokens();
  for (Index r = 0; r < 16; ++r) CHECK((tok.row(r).norm() > 0.5f) == (r == 6));

  const VideoCodec half = codec.with_frame(16, 16);
  CHECK(half.basis() == codec.basis());
  CHECK(half.tokens_per_frame() == 4);
}

TEST_CASE("audio codec") {
  const AudioCodec codec(640.0, 64);
  Rng rng(3, "wave");
  Tensor<float> wave({64 * 5});
  for (Index i = 0; i < wave.size(); ++i) wave[i] = static_cast<float>(rng.uniform(-1, 1));
  const LatentSeq z = codec.encode(wave);
  CHECK(z.length() == 5);
  CHECK(z.tokens_per_frame() == 1);
  CHECK(max_abs_diff(codec.decode(z), wave) <= 1e-5f);
  for (Index f = 0; f < 5; ++f) {
    const double frame_norm = wave.matrix().reshaped<Eigen::RowMajor>(5, 64).row(f).cast<double>().norm();
    CHECK(std::abs(z.tokens().row(f).cast<double>().norm() - frame_norm) <= 1e-4);
  }
  CHECK_THROWS_AS(codec.encode(Tensor<float>({100})), ShapeError);

  const LatentSeq sil = silence_latents(3, codec);
  CHECK(sil.length() == 3);
  CHECK(sil.tokens().isZero(0));
  CHECK(codec.encode(Tensor<float>({64 * 3})).data == sil.data);
  CHECK(codec.decode(sil).matrix().isZero(0));
  CHECK_THROWS_AS(silence_latents(0, codec), InputError);
}

TEST_CASE("pixel resampling") {
  const Tensor<float> x = random_frames(2, 8, 8, 5);
  const Tensor<float> up = upsample2x(x);
  CHECK(up.shape() == Shape{2, 16, 16, 3});
  CHECK(max_abs_diff(downsample2x(up), x) == 0.0f);
  Tensor<float> maps({1, 2, 2});
  maps[3] = 0.5f;
  const Tensor<float> rgb = gray_to_rgb(maps);
  CHECK(rgb.shape() == Shape{1, 2, 2, 3});
  CHECK(rgb[9] == 0.5f);
  CHECK(rgb[11] == 0.5f);
}

TEST_CASE("media formats") {
  test::TempDir dir("media");
  const Tensor<float> frames = random_frames(2, 8, 4, 6);
  write_frames(dir / "v", frames);
  const Tensor<float> back = read_frames(dir / "v");
  CHECK(back.shape() == frames.shape());
  CHECK(max_abs_diff(back, frames) <= 0.5f / 255.0f + 1e-6f);
  write_frames(dir / "v2", back);
  CHECK(read_frames(dir / "v2") == back);

  Tensor<float> wave({100});
  for (Index i = 0; i < 100; ++i) wave[i] = std::sin(0.3f * static_cast<float>(i)) * 0.9f;
  write_wav(dir / "a.wav", wave, 640);
  const WavData w = read_wav(dir / "a.wav");
  CHECK(w.sample_rate == 640);
  CHECK(max_abs_diff(w.wave, wave) <= 1.0f / 32767.0f);
  const std::string bytes = test::slurp(dir / "a.wav");
  CHECK(bytes.substr(0, 4) == "RIFF");
  CHECK(bytes.size() == 44 + 200);

  std::ofstream(dir / "bad.ppm") << "P3\n1 1\n255\n0 0 0\n";
  CHECK_THROWS_AS(read_ppm(dir / "bad.ppm"), FormatError);
  CHECK_THROWS_AS(read_wav(dir / "missing.wav"), InputError);
}
