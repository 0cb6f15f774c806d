#include <doctest.h>

#include <set>

#include "mmctl/eval.hpp"
#include "mmctl/synthdata.hpp"
#include "support.hpp"

using namespace mmctl;

namespace {

Tensor<float> frame_at(const Tensor<float>& frames, Index f) {
  const Index h = frames.dim(1), w = frames.dim(2);
  Tensor<float> out({h, w, 3});
  out.matrix() = frames.matrix().middleRows(f * h * w, h * w);
  return out;
}

}  // namespace

TEST_CASE("scene generation covers the world and stays in frame") {
  const WorldConfig w;
  std::set<int> colors, speakers;
  std::set<Index> sizes;
  int left = 0;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const SceneSpec s = scene_from_seed(i, w);
    colors.insert(s.color);
    speakers.insert(s.speaker);
    sizes.insert(s.size);
    left += s.vx < 0;
    CHECK(std::abs(s.vx) >= w.speed_min);
    CHECK(std::abs(s.vx) <= w.speed_max);
    for (Index f = 0; f < s.frames; ++f) {
      const FramePos p = position_at(s, f, w);
      CHECK(p.left >= 0);
      CHECK(p.top >= 0);
      CHECK(p.left + s.size <= w.width);
      CHECK(p.top + s.size <= w.height);
    }
  }
  CHECK(colors.size() == kPalette.size());
  CHECK(speakers.size() == kSpeakers.size());
  CHECK(sizes.size() == static_cast<std::size_t>(w.size_max - w.size_min + 1));
  CHECK(left > 400);
  CHECK(left < 600);
  CHECK(scene_from_seed(5, w).x0 == scene_from_seed(5, w).x0);
}

TEST_CASE("rendered oracles agree with the scene") {
  const WorldConfig w;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SceneSpec s = scene_from_seed(seed, w);
    const Tensor<float> video = render_video(s, w);
    const Tensor<float> audio = render_audio(s, w);
    const Tensor<float> depth = derive_depth(s, w);
    const Tensor<float> pose = derive_pose(s, w);
    CHECK(video.shape() == Shape{s.frames, 32, 32, 3});
    CHECK(audio.size() == s.frames * w.frame_len);
    CHECK(audio.matrix().cwiseAbs().maxCoeff() <= 0.8f + 1e-6f);

    // Pitch per frame within one bin of the 64-sample analysis window.
    const std::vector<double> f = dominant_freq(audio, w.sample_rate, w.frame_len);
    for (Index i = 0; i < s.frames; ++i) {
      INFO("seed " << seed << " frame " << i);
      CHECK(std::abs(f[static_cast<std::size_t>(i)] - pitch_at(s, i, w)) < w.sample_rate / w.frame_len);

      const FramePos p = position_at(s, i, w);
      const auto c = centroid(frame_at(video, i));
      REQUIRE(c);
      CHECK(std::abs(c->x - p.cx) < 0.5);
      CHECK(std::abs(c->y - p.cy) < 0.5);

      Index object = 0, argmax = 0;
      for (Index y = 0; y < 32; ++y)
        for (Index x = 0; x < 32; ++x) {
          const float d = depth[(i * 32 + y) * 32 + x];
          CHECK((d == kDepthObject || d == kDepthBackground));
          object += d == kDepthObject;
          if (pose[(i * 32 + y) * 32 + x] > pose[i * 1024 + argmax]) argmax = y * 32 + x;
        }
      CHECK(object == s.size * s.size);
      CHECK(argmax % 32 == static_cast<Index>(std::floor(p.cx)));
      CHECK(argmax / 32 == static_cast<Index>(std::floor(p.cy)));
      CHECK(pose[i * 1024 + argmax] == doctest::Approx(1.0));
    }
  }
}

TEST_CASE("captions") {
  SceneSpec s;
  s.color = 0;
  s.speaker = 0;
  s.vx = 1.0;
  CHECK(render_prompt(caption(s)) == "[VISUAL]: a red square moving right [SPEECH]: tone pattern alpha");
  s.color = 6;
  s.speaker = 3;
  s.vx = -1.0;
  CHECK(render_prompt(caption(s)) == "[VISUAL]: a orange square moving left [SPEECH]: tone pattern delta");
  CHECK(render_prompt(generic_caption(s)) == "[VISUAL]: a square moving left [SPEECH]: tone pattern");
  CHECK(drop_attributes(caption(s), false, true).visual == caption(s).visual);
  CHECK(drop_attributes(caption(s), true, false).speech == caption(s).speech);
}

TEST_CASE("training samples") {
  CHECK(test::source_says("non-overlapping segments between the reference audio"));
  const WorldConfig w;
  const SceneSpec spec = scene_from_seed(11, w);
  const Tensor<float> video = render_video(spec, w);
  const Tensor<float> audio = render_audio(spec, w);
  for (Task task : {Task::ref_audio, Task::ref_depth, Task::ref_pose}) {
    const TrainingSample s = make_sample(spec, task, w, "x");
    CHECK(s.ref_range.end <= s.target_range.begin);
    CHECK(s.ref_range.end - s.ref_range.begin == w.k * w.frame_len);
    CHECK(s.target_range.end - s.target_range.begin == w.t * w.frame_len);
    CHECK(s.video.shape() == Shape{w.t, 32, 32, 3});
    CHECK(s.ref_image.matrix() == video.matrix().topRows(1024));
    CHECK(s.video.matrix() == video.matrix().middleRows(w.k * 1024, w.t * 1024));
    for (Index i = 0; i < s.ref_audio.size(); ++i) REQUIRE(s.ref_audio[i] == audio[s.ref_range.begin + i]);
    for (Index i = 0; i < s.audio.size(); ++i) REQUIRE(s.audio[i] == audio[s.target_range.begin + i]);
    CHECK(s.structure().has_value() == (task != Task::ref_audio));
    if (task == Task::ref_depth) CHECK(s.structure()->matrix().col(1) == s.depth.matrix().reshaped<Eigen::RowMajor>(s.depth.size(), 1));
    CHECK(parse_task(task_name(task)) == task);
  }
  SceneSpec short_clip = spec;
  short_clip.frames = w.t;
  CHECK_THROWS_AS(make_sample(short_clip, Task::ref_audio, w, "y"), InputError);
  CHECK_THROWS_AS(parse_task("depth"), InputError);
}

TEST_CASE("oracle pitch tracks horizontal position") {
  const WorldConfig w;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const TrainingSample s = dataset_sample(DatasetSpec{3, 10, Task::ref_audio}, seed, w);
    const auto r = sync_corr(s.audio, s.video, w.sample_rate, w.frame_len);
    REQUIRE(r);
    CHECK(*r >= 0.99);
  }
}

TEST_CASE("manifest") {
  const WorldConfig w;
  const DatasetSpec d{7, 9, std::nullopt};
  const std::string text = manifest_text(d, w);
  CHECK(text == manifest_text(d, w));
  CHECK(text != manifest_text(DatasetSpec{8, 9, std::nullopt}, w));
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const ManifestEntry e = parse_manifest_line(line);
    CHECK(manifest_line(e) == line);
    CHECK(e.task == static_cast<Task>(n % 3));
    ++n;
  }
  CHECK(n == 9);
  CHECK_THROWS_AS(parse_manifest_line("id=s0 task=bogus"), FormatError);

  test::TempDir dir("synth");
  const std::string h1 = write_dataset(dir / "a", DatasetSpec{7, 3, std::nullopt}, w, false);
  CHECK_THROWS_AS(write_dataset(dir / "a", DatasetSpec{7, 3, std::nullopt}, w, false), StateError);
  const std::string h2 = write_dataset(dir / "a", DatasetSpec{7, 3, std::nullopt}, w, true);
  CHECK(h1 == h2);
  CHECK(h1.size() == 64);
  CHECK_THROWS_AS(write_dataset(dir / "b", DatasetSpec{7, 0, std::nullopt}, w, false), InputError);

  const auto entries = read_manifest(dir / "a");
  REQUIRE(entries.size() == 3);
  const TrainingSample back = read_sample(dir / "a", entries[1], w);
  const TrainingSample orig = dataset_sample(DatasetSpec{7, 3, std::nullopt}, 1, w);
  CHECK(back.prompt == orig.prompt);
  CHECK((back.video.matrix() - orig.video.matrix()).cwiseAbs().maxCoeff() <= 0.5f / 255 + 1e-6f);
  CHECK((back.audio.matrix() - orig.audio.matrix()).cwiseAbs().maxCoeff() <= 1.0f / 32767 + 1e-6f);
}
