#include <doctest.h>

#include <set>

#include "mmctl/model.hpp"
#include "support.hpp"

using namespace mmctl;

namespace {

// Scalar count derived from the architecture description, independent of the
// layout code: text tables, backbone, and one bypass branch per modality.
struct Counts {
  Index backbone, bypass;
};

Counts analytic_counts(const ModelConfig& c) {
  const Index d = c.d_model, dt = c.text.d_text, h = c.ffn_mult * d, half = c.layers / 2;
  const Index text = c.text.vocab_size * dt + 2 * dt + dt + dt;
  const Index self_attn = 4 * (d * d + d);
  const Index text_attn = d * d + d + 2 * (dt * d + d) + d * d + d;
  const Index ffn = d * h + h + h * d + d;
  const Index mod = (d + 1) * 6 * d;
  const Index stream = mod + 2 * self_attn + text_attn + 2 * (2 * d) + ffn;
  const Index embeds = (c.video_dim + 1) * d + (c.audio_dim + 1) * d;
  const Index positions = 2 * c.max_frames * d + c.grid_full * c.grid_full * d + 2 * d + 2 * d;
  const Index sigma = (c.sigma_dim + 1) * d + (d + 1) * d;
  const Index heads = 2 * (d + 1) * 2 * d + (d + 1) * c.video_dim + (d + 1) * c.audio_dim;
  const Index backbone = text + embeds + positions + sigma + (dt + 1) * d + c.layers * 2 * stream + heads;
  const Index block = mod + self_attn + 2 * d + text_attn + ffn;
  auto branch = [&](Index latent, Index ref_rows) {
    return (latent + 1) * d + d + ref_rows * d + half * (block + (d + 1) * d);
  };
  return {backbone, branch(c.video_dim, 1) + branch(c.audio_dim, c.max_ref_frames)};
}

Index count(const JointModel<float>& m, const std::vector<int>& ids) {
  Index n = 0;
  for (int id : ids) n += m.params()[id].value.size();
  return n;
}

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

ControlUnit unit(Index t, const TextConfig& text, std::uint64_t seed) {
  return make_control_unit({"a red square moving right", "tone pattern alpha"}, text,
                           build_visual_control(noise({32, 32, 3}, seed), noise({t, 32, 32, 3}, seed + 1), t,
                                                vcodec()),
                           build_acoustic_control(noise({128}, seed + 2), t, acodec()));
}

LatentSeq latents(Index t, Index tpf, Index dim, std::uint64_t seed) {
  return LatentSeq(Tensor<float>({t, tpf, dim}, Rng(seed, "lat").normal_matrix<float>(t * tpf, dim)));
}

template <typename S>
void randomize_outputs(JointModel<S>& m, std::uint64_t seed) {
  Rng rng(seed, "outputs");
  for (auto& p : m.params()) {
    if (p.name.find(".out") != std::string::npos || p.name.rfind("backbone.head.", 0) == 0) {
      p.value.matrix() = rng.normal_matrix<S>(p.value.matrix().rows(), p.value.matrix().cols(), 0.05);
    }
  }
}

template <typename S>
JointModel<S> controlled(const ModelConfig& cfg, std::uint64_t seed) {
  JointModel<S> m = JointModel<S>::init_backbone(cfg, Rng(seed, "model"));
  m.freeze_backbone();
  m.attach_bypass(Rng(seed, "bypass"));
  m.set_phase(Phase::control);
  return m;
}

}  // namespace

TEST_CASE("parameter counts are a pure function of the config") {
  const ModelConfig cfg;
  JointModel<float> m = JointModel<float>::init_backbone(cfg, Rng(1));
  const Counts expect = analytic_counts(cfg);
  CHECK(expect.backbone == 7043200);
  CHECK(expect.bypass == 2940544);
  CHECK(m.params().count_scalars() == expect.backbone);
  m.freeze_backbone();
  m.attach_bypass(Rng(2));
  CHECK(count(m, m.trainable_params(Phase::pretrain)) == expect.backbone);
  CHECK(count(m, m.trainable_params(Phase::control)) == expect.bypass);
  CHECK(count(m, m.trainable_params(Phase::control)) < count(m, m.trainable_params(Phase::pretrain)));

  const ModelConfig small = test::tiny_model(4, 32);
  const JointModel<float> s = JointModel<float>::init_backbone(small, Rng(1));
  CHECK(s.params().count_scalars() == analytic_counts(small).backbone);
}

TEST_CASE("config validation") {
  ModelConfig c = test::tiny_model();
  c.layers = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = test::tiny_model();
  c.heads = 3;
  CHECK_THROWS_AS(JointModel<float>::init_backbone(c, Rng(1)), ConfigError);
}

TEST_CASE("init determinism and zero heads") {
  const ModelConfig cfg = test::tiny_model();
  const JointModel<float> a = JointModel<float>::init_backbone(cfg, Rng(3));
  const JointModel<float> b = JointModel<float>::init_backbone(cfg, Rng(3));
  const JointModel<float> c = JointModel<float>::init_backbone(cfg, Rng(4));
  CHECK(a.backbone_checksum() == b.backbone_checksum());
  CHECK(a.backbone_checksum() != c.backbone_checksum());
  CHECK(a.backbone_checksum().size() == 64);

  const auto [vv, va] = backbone_forward(latents(3, 16, 192, 1), latents(3, 1, 64, 2),
                                         tokenize({"x", "y"}, cfg.text), 0.4, nullptr, 1.0, 1.0, a);
  CHECK(vv.shape() == Shape{48, 192});
  CHECK(va.shape() == Shape{3, 64});
  CHECK(vv.matrix().isZero(0));
  CHECK(va.matrix().isZero(0));
  // Half resolution runs on a 2 x 2 grid.
  const auto [hv, ha] = backbone_forward(latents(3, 4, 192, 1), latents(3, 1, 64, 2), tokenize({"x", "y"}, cfg.text),
                                         0.4, nullptr, 1.0, 1.0, a);
  CHECK(hv.shape() == Shape{12, 192});
}

TEST_CASE("attach_bypass") {
  CHECK(test::source_says("interleaved with even-numbered backbone layers"));
  const ModelConfig cfg;  // L = 8
  JointModel<float> m = JointModel<float>::init_backbone(cfg, Rng(5));
  CHECK_THROWS_AS(m.attach_bypass(Rng(6)), StateError);
  const std::string before = m.backbone_checksum();
  m.freeze_backbone();
  m.attach_bypass(Rng(6));
  CHECK_THROWS_AS(m.attach_bypass(Rng(6)), StateError);
  CHECK(m.backbone_checksum() == before);
  CHECK(m.bypass()->video.blocks.size() == 4);
  CHECK(m.bypass()->audio.blocks.size() == 4);

  const auto& P = m.params();
  for (Index j = 1; j <= 4; ++j) {
    const std::string layer = "backbone.layer" + std::to_string(2 * j);
    for (const char* s : {"self_attn.wq", "self_attn.bo", "text_attn.wk", "ffn.w1", "ffn.b2", "mod.weight"}) {
      const auto& src = P[P.id(layer + ".video." + s)].value;
      const auto& dst = P[P.id("bypass.v.block" + std::to_string(j) + "." + s)].value;
      CHECK(src == dst);
    }
    CHECK(!P.find("bypass.v.block" + std::to_string(j) + ".cross_attn.wq"));
    CHECK(P[P.id("bypass.a.out" + std::to_string(2 * j) + ".weight")].value.matrix().isZero(0));
    CHECK(P[P.id("bypass.v.out" + std::to_string(2 * j) + ".bias")].value.matrix().isZero(0));
  }
  const auto& proj = P[P.id("bypass.v.proj.weight")].value.matrix();
  const auto& embed = P[P.id("backbone.embed.video.weight")].value.matrix();
  CHECK(proj.rows() == embed.rows() + 1);
  CHECK(proj.topRows(embed.rows()) == embed);
  CHECK(proj.bottomRows(1).norm() > 0);

  for (int id : m.backbone_param_ids()) CHECK(!P[id].trainable);
  for (int id : m.bypass_param_ids()) CHECK(P[id].trainable);
}

TEST_CASE("phase partition") {
  JointModel<float> m = JointModel<float>::init_backbone(test::tiny_model(), Rng(7));
  CHECK_THROWS_AS(m.trainable_params(Phase::control), StateError);
  m.freeze_backbone();
  m.attach_bypass(Rng(8));
  const auto pre = m.trainable_params(Phase::pretrain);
  const auto ctl = m.trainable_params(Phase::control);
  std::set<int> all(pre.begin(), pre.end());
  for (int id : ctl) CHECK(all.insert(id).second);
  CHECK(static_cast<int>(all.size()) == m.params().size());
  m.set_phase(Phase::pretrain);
  for (int id : pre) CHECK(m.params()[id].trainable);
  for (int id : ctl) CHECK(!m.params()[id].trainable);
}

TEST_CASE("zero-init transparency and the gamma gate") {
  const ModelConfig cfg = test::tiny_model(4, 16);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    JointModel<float> plain = JointModel<float>::init_backbone(cfg, Rng(seed));
    randomize_outputs(plain, seed);  // nonzero heads so the comparison is not vacuous
    JointModel<float> m = plain;
    m.freeze_backbone();
    m.attach_bypass(Rng(seed + 100));
    const ControlUnit u = unit(3, cfg.text, seed);
    const LatentSeq v = latents(3, 16, 192, seed), a = latents(3, 1, 64, seed + 1);
    const auto ref = backbone_forward(v, a, u.text, 0.6, nullptr, 1.0, 1.0, plain);
    const auto fresh = backbone_forward(v, a, u.text, 0.6, &u, 1.0, 1.0, m);
    CHECK((fresh.first.matrix() - ref.first.matrix()).cwiseAbs().maxCoeff() <= 1e-5f);
    CHECK((fresh.second.matrix() - ref.second.matrix()).cwiseAbs().maxCoeff() <= 1e-5f);
    CHECK(ref.first.matrix().norm() > 0);
    for (const auto& h : bypass_forward(u, 0.6, m, Modality::video)) CHECK(h.matrix().isZero(0));

    randomize_outputs(m, seed + 7);  // a "trained" bypass with live hints
    // Heads were re-randomized too; restore the backbone copy for comparison.
    for (int id : m.backbone_param_ids()) m.params()[id].value = plain.params()[id].value;
    const auto gated = backbone_forward(v, a, u.text, 0.6, &u, 0.0, 0.0, m);
    CHECK(gated.first == ref.first);
    CHECK(gated.second == ref.second);
    const auto on = backbone_forward(v, a, u.text, 0.6, &u, 1.0, 1.0, m);
    const auto twice = backbone_forward(v, a, u.text, 0.6, &u, 2.0, 2.0, m);
    CHECK((on.first.matrix() - ref.first.matrix()).norm() > 0);
    CHECK((twice.first.matrix() - on.first.matrix()).norm() > 0);
    CHECK((twice.second.matrix() - on.second.matrix()).norm() > 0);
    CHECK_THROWS_AS(backbone_forward(v, a, u.text, 0.6, &u, std::nan(""), 1.0, m), InputError);
  }
}

TEST_CASE("hint alignment and locality") {
  const ModelConfig cfg = test::tiny_model(4, 16);
  JointModel<float> m = controlled<float>(cfg, 9);
  randomize_outputs(m, 10);
  const ControlUnit u = unit(5, cfg.text, 11);
  const auto hv = bypass_forward(u, 0.3, m, Modality::video);
  const auto ha = bypass_forward(u, 0.3, m, Modality::audio);
  CHECK(hv.size() == 2);
  CHECK(ha.size() == 2);
  for (const auto& h : hv) CHECK(h.shape() == Shape{5 * 16, 16});
  for (const auto& h : ha) CHECK(h.shape() == Shape{5, 16});
  // Hints are a function of the control unit, text and sigma only.
  const auto again = bypass_forward(u, 0.3, m, Modality::video);
  for (std::size_t j = 0; j < hv.size(); ++j) CHECK(again[j] == hv[j]);
  const auto other_sigma = bypass_forward(u, 0.7, m, Modality::video);
  CHECK((other_sigma[0].matrix() - hv[0].matrix()).norm() > 0);

  // A live mask channel: flipping M_v[0] moves the hints.
  ControlUnit flipped = u;
  flipped.visual.mask[0] = 1;
  const auto hf = bypass_forward(flipped, 0.3, m, Modality::video);
  CHECK((hf[0].matrix() - hv[0].matrix()).norm() > 0);
}

TEST_CASE("context projection") {
  const ModelConfig cfg = test::tiny_model(2, 16);
  JointModel<float> m = controlled<float>(cfg, 12);
  const ControlUnit u = unit(3, cfg.text, 13);
  const Tensor<float> base = context_project(u, Modality::video, m);
  CHECK(base.shape() == Shape{4 * 16, 16});

  // Flipping one frame's mask bit changes only that frame's tokens.
  ControlUnit flipped = u;
  flipped.visual.mask[2] = 0;
  const Tensor<float> fl = context_project(flipped, Modality::video, m);
  for (Index r = 0; r < 64; ++r) {
    const bool changed = (fl.matrix().row(r) - base.matrix().row(r)).norm() > 0;
    CHECK(changed == (r >= 32 && r < 48));
  }

  // All-zero latents leave only the mask column, bias and positions; with the
  // mask row zeroed the latent part is exactly the inherited embedder.
  auto& proj = m.params()[m.params().id("bypass.v.proj.weight")].value.matrix();
  const Matrix<float> mask_row = proj.bottomRows(1);
  ControlUnit zero = u;
  zero.visual.latents.tokens().setZero();
  const Tensor<float> z_on = context_project(zero, Modality::video, m);
  proj.bottomRows(1).setZero();
  const Tensor<float> z_off = context_project(zero, Modality::video, m);
  for (Index r = 0; r < 64; ++r) {
    const float bit = u.visual.mask[static_cast<std::size_t>(r / 16)];
    CHECK((z_on.matrix().row(r) - z_off.matrix().row(r) - bit * mask_row).cwiseAbs().maxCoeff() < 1e-6f);
  }
  const Tensor<float> x_off = context_project(u, Modality::video, m);
  const Matrix<float>& w = m.params()[m.params().id("backbone.embed.video.weight")].value.matrix();
  const Matrix<double> embedded = u.visual.latents.tokens().cast<double>() * w.cast<double>();
  CHECK(((x_off.matrix() - z_off.matrix()).cast<double>() - embedded).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("from_store rebuilds an identical model") {
  const ModelConfig cfg = test::tiny_model(2, 16);
  JointModel<float> m = controlled<float>(cfg, 14);
  randomize_outputs(m, 15);
  const JointModel<float> r = JointModel<float>::from_store(cfg, m.params(), true, true);
  CHECK(r.backbone_checksum() == m.backbone_checksum());
  const ControlUnit u = unit(2, cfg.text, 16);
  const LatentSeq v = latents(2, 16, 192, 1), a = latents(2, 1, 64, 2);
  CHECK(backbone_forward(v, a, u.text, 0.5, &u, 1.0, 1.0, r).first ==
        backbone_forward(v, a, u.text, 0.5, &u, 1.0, 1.0, m).first);
  CHECK_THROWS_AS(JointModel<float>::from_store(test::tiny_model(4, 16), m.params(), true, true), StateError);
}
