#include <doctest.h>

#include "mmctl/mmcu.hpp"
#include "support.hpp"

using namespace mmctl;

namespace {

const VideoCodec& vcodec() {
  static const VideoCodec c(32, 32, 8);
  return c;
}
const AudioCodec& acodec() {
  static const AudioCodec c(640.0, 64);
  return c;
}

Tensor<float> noise(Shape s, std::uint64_t seed) {
  Rng rng(seed, "noise");
  Tensor<float> t(std::move(s));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform());
  return t;
}

}  // namespace

TEST_CASE("visual control layout") {
  CHECK(test::source_says("M_v &= \\{0\\} + \\{1\\} \\times t"));
  const Tensor<float> ref = noise({32, 32, 3}, 1);
  const Tensor<float> st = noise({3, 32, 32, 3}, 2);
  const VisualControl full = build_visual_control(ref, st, 3, vcodec());
  CHECK(full.latents.length() == 4);
  CHECK(full.mask == std::vector<std::uint8_t>{0, 1, 1, 1});
  CHECK(full.has_ref_image);
  CHECK(full.has_structure);
  CHECK(full.latents.frames(0, 1).data == vcodec().encode(ref.reshaped({1, 32, 32, 3})).data);
  CHECK(full.latents.frames(1, 3).data == vcodec().encode(st).data);

  const VisualControl no_st = build_visual_control(ref, std::nullopt, 3, vcodec());
  CHECK(no_st.mask == std::vector<std::uint8_t>{0, 1, 1, 1});
  CHECK(no_st.latents.frames(0, 1).data == full.latents.frames(0, 1).data);
  CHECK(no_st.latents.frames(1, 3).tokens().isZero(0));
  CHECK(!no_st.has_structure);

  const VisualControl none = build_visual_control(std::nullopt, std::nullopt, 3, vcodec());
  CHECK(none.latents.tokens().isZero(0));
  CHECK(none.mask == std::vector<std::uint8_t>{0, 1, 1, 1});
  CHECK(!none.has_ref_image);
  CHECK(!none.has_structure);

  CHECK_THROWS_AS(build_visual_control(ref, noise({2, 32, 32, 3}, 3), 3, vcodec()), ShapeError);
}

TEST_CASE("acoustic control layout") {
  CHECK(test::source_says("M_a &= \\{\\mathbf{0}\\}_k + \\{\\mathbf{1}\\}_t"));
  CHECK(test::source_says("silence latents $\\mathbf{z}_{sil}$ of length $t$"));
  Tensor<float> ref = noise({128}, 4);
  const AcousticControl ac = build_acoustic_control(ref, 3, acodec());
  CHECK(ac.k == 2);
  CHECK(ac.mask == std::vector<std::uint8_t>{0, 0, 1, 1, 1});
  CHECK(ac.has_ref_audio);
  CHECK((acodec().decode(ac.latents.frames(0, 2)).matrix() - ref.matrix()).cwiseAbs().maxCoeff() <= 1e-5f);
  CHECK(ac.latents.frames(2, 3).data == silence_latents(3, acodec()).data);

  const AcousticControl absent = build_acoustic_control(std::nullopt, 3, acodec(), 2);
  CHECK(absent.latents.length() == 5);
  CHECK(absent.latents.tokens().isZero(0));
  CHECK(absent.mask == std::vector<std::uint8_t>{0, 0, 1, 1, 1});
  CHECK(!absent.has_ref_audio);

  CHECK_THROWS_AS(build_acoustic_control(Tensor<float>({0}), 3, acodec()), InputError);
  CHECK_THROWS_AS(build_acoustic_control(Tensor<float>({100}), 3, acodec()), ShapeError);
}

TEST_CASE("mask layouts match the closed form for every (t, k)") {
  for (Index t = 1; t <= 16; ++t) {
    for (Index k = 1; k <= 8; ++k) {
      const AcousticControl ac = build_acoustic_control(noise({k * 64}, static_cast<std::uint64_t>(t * 10 + k)), t,
                                                        acodec());
      std::vector<std::uint8_t> expect(static_cast<std::size_t>(k), 0);
      expect.resize(static_cast<std::size_t>(k + t), 1);
      CHECK(ac.mask == expect);
      CHECK(ac.latents.length() == k + t);
    }
    const VisualControl vc = build_visual_control(std::nullopt, std::nullopt, t, vcodec());
    std::vector<std::uint8_t> expect(static_cast<std::size_t>(t + 1), 1);
    expect[0] = 0;
    CHECK(vc.mask == expect);
    CHECK(vc.latents.length() == t + 1);
  }
}

TEST_CASE("control unit") {
  const ControlUnit u = make_control_unit({"a", "b"}, TextConfig{64, 8, 4},
                                          build_visual_control(std::nullopt, std::nullopt, 3, vcodec()),
                                          build_acoustic_control(std::nullopt, 3, acodec()));
  CHECK(u.t == 3);
  CHECK(u.text.ids.size() == 4);
  CHECK_THROWS_AS(make_control_unit({"a", "b"}, TextConfig{64, 8, 4},
                                    build_visual_control(std::nullopt, std::nullopt, 3, vcodec()),
                                    build_acoustic_control(std::nullopt, 4, acodec())),
                  ShapeError);
}

TEST_CASE("control dropout") {
  const ControlUnit u = make_control_unit(
      {"a", "b"}, TextConfig{64, 8, 4},
      build_visual_control(noise({32, 32, 3}, 5), noise({2, 32, 32, 3}, 6), 2, vcodec()),
      build_acoustic_control(noise({128}, 7), 2, acodec()));

  Rng r0(1, "drop");
  const ControlUnit same = apply_control_dropout(u, r0, 0.0);
  CHECK(same.visual.latents.data == u.visual.latents.data);
  CHECK(same.acoustic.latents.data == u.acoustic.latents.data);
  CHECK(same.visual.mask == u.visual.mask);
  CHECK(same.acoustic.mask == u.acoustic.mask);

  Rng r1(1, "drop");
  const ControlUnit gone = apply_control_dropout(u, r1, 1.0);
  CHECK(gone.visual.latents.tokens().isZero(0));
  CHECK(gone.acoustic.latents.tokens().isZero(0));
  CHECK(gone.visual.mask == std::vector<std::uint8_t>(3, 0));
  CHECK(gone.acoustic.mask == std::vector<std::uint8_t>(4, 0));
  CHECK(!gone.visual.has_ref_image);
  CHECK(!gone.visual.has_structure);
  CHECK(!gone.acoustic.has_ref_audio);
  CHECK(gone.text.ids == u.text.ids);

  // 10,000 draws at p = 0.1: a 3-sigma binomial band is [0.091, 0.109].
  Rng rng(2, "rate");
  int dv = 0, da = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const ControlUnit d = apply_control_dropout(u, rng, 0.1);
    dv += d.visual.has_ref_image ? 0 : 1;
    da += d.acoustic.has_ref_audio ? 0 : 1;
  }
  CHECK(dv / double(n) >= 0.08);
  CHECK(dv / double(n) <= 0.12);
  CHECK(da / double(n) >= 0.08);
  CHECK(da / double(n) <= 0.12);
  CHECK(test::source_says("a dropout probability of 0.1 is applied to both visual and acoustic control signals"));
}
