#include "mmctl/model.hpp"

#include <cmath>
#include <cstring>

#include "mmctl/hashing.hpp"

namespace mmctl {

void ModelConfig::validate() const {
  if (layers < 2 || layers % 2 != 0) throw ConfigError("model.layers must be even and >= 2");
  if (d_model <= 0 || heads <= 0 || d_model % heads != 0) throw ConfigError("model.heads must divide model.d_model");
  if (ffn_mult <= 0) throw ConfigError("model.ffn_mult must be positive");
  if (sigma_dim <= 0 || sigma_dim % 2 != 0) throw ConfigError("model.sigma_dim must be positive and even");
  if (text.vocab_size <= 0 || text.d_text <= 0 || text.max_text_len <= 0) throw ConfigError("invalid text config");
  if (max_frames <= 0 || max_ref_frames <= 0) throw ConfigError("frame limits must be positive");
  if (grid_full <= 0 || grid_full % 2 != 0) throw ConfigError("model.grid_full must be positive and even");
  if (video_dim <= 0 || audio_dim <= 0) throw ConfigError("latent dims must be positive");
  if (!std::isfinite(gamma_v) || !std::isfinite(gamma_a)) throw ConfigError("gamma defaults must be finite");
}

template <typename S>
Matrix<S> sigma_features(double sigma, Index dim) {
  const Index half = dim / 2;
  Matrix<S> f(1, dim);
  for (Index i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    const double arg = sigma * 1000.0 * freq;
    f(0, i) = static_cast<S>(std::sin(arg));
    f(0, half + i) = static_cast<S>(std::cos(arg));
  }
  return f;
}

namespace {

// Parameter layout shared by fresh initialisation and checkpoint loading:
// in `create` mode each entry is materialised from its init rule, otherwise it
// is looked up by name and shape-checked.
template <typename S>
class Layout {
 public:
  Layout(ParamStore<S>& store, Rng rng, bool create) : store_(store), rng_(std::move(rng)), create_(create) {}

  int normal(const std::string& name, Index r, Index c) {
    return make(name, r, c, [&] { return rng_.split(name).template normal_matrix<S>(r, c, 0.02); });
  }
  int zeros(const std::string& name, Index r, Index c) {
    return make(name, r, c, [&] { return Matrix<S>(Matrix<S>::Zero(r, c)); });
  }
  int ones(const std::string& name, Index r, Index c) {
    return make(name, r, c, [&] { return Matrix<S>(Matrix<S>::Ones(r, c)); });
  }
  int copy(const std::string& name, int src) {
    const Matrix<S> v = store_[src].value.matrix();
    return make(name, v.rows(), v.cols(), [&] { return v; });
  }
  // Source rows followed by one freshly drawn row.
  int copy_plus_row(const std::string& name, int src) {
    const Matrix<S> v = store_[src].value.matrix();
    return make(name, v.rows() + 1, v.cols(), [&] {
      Matrix<S> m(v.rows() + 1, v.cols());
      m.topRows(v.rows()) = v;
      m.bottomRows(1) = rng_.split(name + "/mask").template normal_matrix<S>(1, v.cols(), 0.02);
      return m;
    });
  }

  LinearIds linear(const std::string& prefix, Index in, Index out) {
    return {normal(prefix + ".weight", in, out), zeros(prefix + ".bias", 1, out)};
  }
  LinearIds zero_linear(const std::string& prefix, Index in, Index out) {
    return {zeros(prefix + ".weight", in, out), zeros(prefix + ".bias", 1, out)};
  }
  AttnIds attn(const std::string& prefix, Index q_in, Index kv_in, Index d) {
    AttnIds a{};
    a.wq = normal(prefix + ".wq", q_in, d);
    a.bq = zeros(prefix + ".bq", 1, d);
    a.wk = normal(prefix + ".wk", kv_in, d);
    a.bk = zeros(prefix + ".bk", 1, d);
    a.wv = normal(prefix + ".wv", kv_in, d);
    a.bv = zeros(prefix + ".bv", 1, d);
    a.wo = normal(prefix + ".wo", d, d);
    a.bo = zeros(prefix + ".bo", 1, d);
    return a;
  }
  NormIds norm(const std::string& prefix, Index d) {
    return {ones(prefix + ".gain", 1, d), zeros(prefix + ".bias", 1, d)};
  }
  FfnIds ffn(const std::string& prefix, Index d, Index hidden) {
    return {normal(prefix + ".w1", d, hidden), zeros(prefix + ".b1", 1, hidden), normal(prefix + ".w2", hidden, d),
            zeros(prefix + ".b2", 1, d)};
  }
  AttnIds copy_attn(const std::string& prefix, const AttnIds& s) {
    return {copy(prefix + ".wq", s.wq), copy(prefix + ".bq", s.bq), copy(prefix + ".wk", s.wk),
            copy(prefix + ".bk", s.bk), copy(prefix + ".wv", s.wv), copy(prefix + ".bv", s.bv),
            copy(prefix + ".wo", s.wo), copy(prefix + ".bo", s.bo)};
  }

 private:
  template <typename F>
  int make(const std::string& name, Index r, Index c, F&& init) {
    if (create_) return store_.add(name, init(), true);
    const int id = store_.id(name);
    const auto& m = store_[id].value.matrix();
    if (m.rows() != r || m.cols() != c) {
      throw ShapeError("parameter " + name + " has shape " + std::to_string(m.rows()) + "x" +
                       std::to_string(m.cols()) + ", expected " + std::to_string(r) + "x" + std::to_string(c));
    }
    return id;
  }

  ParamStore<S>& store_;
  Rng rng_;
  bool create_;
};

template <typename S>
BackboneIds layout_backbone(Layout<S>& lay, const ModelConfig& cfg) {
  const Index d = cfg.d_model;
  BackboneIds b;
  b.embed_video = lay.linear("backbone.embed.video", cfg.video_dim, d);
  b.embed_audio = lay.linear("backbone.embed.audio", cfg.audio_dim, d);
  b.pos_frame_video = lay.normal("backbone.pos.frame_video", cfg.max_frames, d);
  b.pos_spatial = lay.normal("backbone.pos.spatial", cfg.grid_full * cfg.grid_full, d);
  // Both streams start from the same frame table so that same-frame tokens
  // line up in cross-modal attention from the first step.
  b.pos_frame_audio = lay.copy("backbone.pos.frame_audio", b.pos_frame_video);
  b.modality = lay.normal("backbone.pos.modality", 2, d);
  b.resolution = lay.normal("backbone.pos.resolution", 2, d);
  b.sigma1 = lay.linear("backbone.sigma.fc1", cfg.sigma_dim, d);
  b.sigma2 = lay.linear("backbone.sigma.fc2", d, d);
  b.text_pool = lay.linear("backbone.text_pool", cfg.text.d_text, d);
  for (Index l = 1; l <= cfg.layers; ++l) {
    JointBlockIds jb;
    for (auto [tag, sb] : {std::pair{"video", &jb.video}, std::pair{"audio", &jb.audio}}) {
      const std::string pre = "backbone.layer" + std::to_string(l) + "." + tag;
      sb->mod = lay.linear(pre + ".mod", d, 6 * d);
      sb->self_attn = lay.attn(pre + ".self_attn", d, d, d);
      sb->cross_norm = lay.norm(pre + ".cross_norm", d);
      sb->cross_attn = lay.attn(pre + ".cross_attn", d, d, d);
      sb->text_norm = lay.norm(pre + ".text_norm", d);
      sb->text_attn = lay.attn(pre + ".text_attn", d, cfg.text.d_text, d);
      sb->ffn = lay.ffn(pre + ".ffn", d, cfg.ffn_mult * d);
    }
    b.blocks.push_back(jb);
  }
  b.head_video = {lay.linear("backbone.head.video.mod", d, 2 * d),
                  lay.zero_linear("backbone.head.video.out", d, cfg.video_dim)};
  b.head_audio = {lay.linear("backbone.head.audio.mod", d, 2 * d),
                  lay.zero_linear("backbone.head.audio.out", d, cfg.audio_dim)};
  return b;
}

template <typename S>
BranchIds layout_branch(Layout<S>& lay, const ModelConfig& cfg, const BackboneIds& bb, Modality m) {
  const Index d = cfg.d_model;
  const std::string tag = modality_tag(m);
  const std::string pre = "bypass." + tag;
  const LinearIds& embed = m == Modality::video ? bb.embed_video : bb.embed_audio;
  BranchIds br;
  br.proj = {lay.copy_plus_row(pre + ".proj.weight", embed.w), lay.copy(pre + ".proj.bias", embed.b)};
  br.ref_pos = lay.normal(pre + ".ref_pos", m == Modality::video ? 1 : cfg.max_ref_frames, d);
  for (Index j = 1; j <= cfg.layers / 2; ++j) {
    const StreamBlockIds& src = m == Modality::video ? bb.blocks[static_cast<std::size_t>(2 * j - 1)].video
                                                     : bb.blocks[static_cast<std::size_t>(2 * j - 1)].audio;
    const std::string bp = pre + ".block" + std::to_string(j);
    BypassBlockIds blk;
    blk.mod = {lay.copy(bp + ".mod.weight", src.mod.w), lay.copy(bp + ".mod.bias", src.mod.b)};
    blk.self_attn = lay.copy_attn(bp + ".self_attn", src.self_attn);
    blk.text_norm = {lay.copy(bp + ".text_norm.gain", src.text_norm.gain),
                     lay.copy(bp + ".text_norm.bias", src.text_norm.bias)};
    blk.text_attn = lay.copy_attn(bp + ".text_attn", src.text_attn);
    blk.ffn = {lay.copy(bp + ".ffn.w1", src.ffn.w1), lay.copy(bp + ".ffn.b1", src.ffn.b1),
               lay.copy(bp + ".ffn.w2", src.ffn.w2), lay.copy(bp + ".ffn.b2", src.ffn.b2)};
    br.blocks.push_back(blk);
    br.out.push_back(lay.zero_linear(pre + ".out" + std::to_string(2 * j), d, d));
  }
  return br;
}

bool is_bypass_name(const std::string& name) { return name.rfind("bypass.", 0) == 0; }

}  // namespace

template <typename S>
JointModel<S> JointModel<S>::init_backbone(const ModelConfig& cfg, Rng rng) {
  cfg.validate();
  JointModel m;
  m.cfg_ = cfg;
  Rng init = rng.split("init");
  m.text_ = TextParams::create(m.params_, cfg.text, init.split("text"));
  Layout<S> lay(m.params_, init, true);
  m.backbone_ = layout_backbone(lay, cfg);
  return m;
}

template <typename S>
JointModel<S> JointModel<S>::from_store(const ModelConfig& cfg, ParamStore<S> store, bool with_bypass, bool frozen) {
  cfg.validate();
  JointModel m;
  m.cfg_ = cfg;
  m.params_ = std::move(store);
  m.text_.table = m.params_.id("text.table");
  m.text_.segment = m.params_.id("text.segment");
  m.text_.pad = m.params_.id("text.pad");
  m.text_.null = m.params_.id("text.null");
  Layout<S> lay(m.params_, Rng(0), false);
  m.backbone_ = layout_backbone(lay, cfg);
  if (with_bypass) {
    m.bypass_ = BypassIds{layout_branch(lay, cfg, m.backbone_, Modality::video),
                          layout_branch(lay, cfg, m.backbone_, Modality::audio)};
  }
  m.frozen_ = frozen;
  m.set_phase(frozen ? Phase::control : Phase::pretrain);
  return m;
}

template <typename S>
void JointModel<S>::freeze_backbone() {
  frozen_ = true;
  for (int id : backbone_param_ids()) params_[id].trainable = false;
}

template <typename S>
void JointModel<S>::attach_bypass(Rng rng) {
  if (bypass_) throw StateError("attach_bypass: bypass already attached");
  if (!frozen_) throw StateError("attach_bypass: backbone must be frozen first");
  Layout<S> lay(params_, rng.split("init"), true);
  BypassIds ids;
  ids.video = layout_branch(lay, cfg_, backbone_, Modality::video);
  ids.audio = layout_branch(lay, cfg_, backbone_, Modality::audio);
  bypass_ = std::move(ids);
}

template <typename S>
std::vector<int> JointModel<S>::backbone_param_ids() const {
  std::vector<int> ids;
  for (int i = 0; i < params_.size(); ++i) {
    if (!is_bypass_name(params_[i].name)) ids.push_back(i);
  }
  return ids;
}

template <typename S>
std::vector<int> JointModel<S>::bypass_param_ids() const {
  std::vector<int> ids;
  for (int i = 0; i < params_.size(); ++i) {
    if (is_bypass_name(params_[i].name)) ids.push_back(i);
  }
  return ids;
}

template <typename S>
std::vector<int> JointModel<S>::trainable_params(Phase phase) const {
  if (phase == Phase::control) {
    if (!bypass_) throw StateError("control phase requires an attached bypass");
    return bypass_param_ids();
  }
  return backbone_param_ids();
}

template <typename S>
void JointModel<S>::set_phase(Phase phase) {
  const std::vector<int> ids = trainable_params(phase);
  for (auto& prm : params_) prm.trainable = false;
  for (int id : ids) params_[id].trainable = true;
  frozen_ = phase == Phase::control;
}

template <typename S>
std::string JointModel<S>::backbone_checksum() const {
  Sha256 h;
  for (int id : backbone_param_ids()) {
    const auto& prm = params_[id];
    h.update(prm.name);
    h.update(shape_str(prm.value.shape()));
    for (Index i = 0; i < prm.value.size(); ++i) {
      const float f = static_cast<float>(prm.value[i]);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      const std::uint8_t le[4] = {static_cast<std::uint8_t>(bits), static_cast<std::uint8_t>(bits >> 8),
                                  static_cast<std::uint8_t>(bits >> 16), static_cast<std::uint8_t>(bits >> 24)};
      h.update(std::span<const std::uint8_t>(le, 4));
    }
  }
  return h.hex_digest();
}

// ---------------------------------------------------------------------------

template <typename S>
Var JointModel<S>::lin(Graph<S>& g, const LinearIds& l, Var x) const {
  return ad::linear(g, x, p(g, l.w), p(g, l.b));
}

template <typename S>
TextVars JointModel<S>::text(Graph<S>& g, const TokenIds& ids) const {
  if (static_cast<Index>(ids.ids.size()) != cfg_.text.max_text_len) {
    throw ShapeError("token ids do not match max_text_len");
  }
  return text_forward(g, params_, text_, ids);
}

template <typename S>
TextVars JointModel<S>::null_text(Graph<S>& g) const {
  return null_text_forward(g, params_, text_, cfg_.text.max_text_len);
}

template <typename S>
Var JointModel<S>::conditioning(Graph<S>& g, double sigma, const TextVars& text) const {
  const Var f = g.constant(sigma_features<S>(sigma, cfg_.sigma_dim));
  const Var h = lin(g, backbone_.sigma2, ad::silu(g, lin(g, backbone_.sigma1, f)));
  return ad::add(g, h, lin(g, backbone_.text_pool, text.pooled));
}

template <typename S>
Index JointModel<S>::resolution_index(Index grid) const {
  if (grid == cfg_.grid_full) return 1;
  if (grid * 2 == cfg_.grid_full) return 0;
  throw ShapeError("unsupported patch grid " + std::to_string(grid) + " (full grid is " +
                   std::to_string(cfg_.grid_full) + ")");
}

template <typename S>
Var JointModel<S>::video_positions(Graph<S>& g, Index t, Index grid, bool reference_prefix) const {
  const Index res = resolution_index(grid);
  const Index tpf = grid * grid;
  if (t > cfg_.max_frames) throw ShapeError("frame count exceeds model.max_frames");
  Var spatial_table = p(g, backbone_.pos_spatial);
  if (res == 0) {
    // Half-resolution token (y, x) covers full-grid tokens (2y..2y+1, 2x..2x+1).
    const Index gf = cfg_.grid_full;
    Matrix<S> pool = Matrix<S>::Zero(tpf, gf * gf);
    for (Index y = 0; y < grid; ++y)
      for (Index x = 0; x < grid; ++x)
        for (Index dy = 0; dy < 2; ++dy)
          for (Index dx = 0; dx < 2; ++dx) pool(y * grid + x, (2 * y + dy) * gf + 2 * x + dx) = S(0.25);
    spatial_table = ad::matmul(g, g.constant(std::move(pool)), spatial_table);
  }
  const Index frames = t + (reference_prefix ? 1 : 0);
  std::vector<Index> spatial_ids, frame_ids;
  for (Index f = 0; f < frames; ++f)
    for (Index s = 0; s < tpf; ++s) spatial_ids.push_back(s);
  for (Index f = 0; f < t; ++f)
    for (Index s = 0; s < tpf; ++s) frame_ids.push_back(f);
  Var frame_part = ad::gather_rows(g, p(g, backbone_.pos_frame_video), std::move(frame_ids));
  if (reference_prefix) {
    if (!bypass_) throw StateError("reference positions need an attached bypass");
    Var ref = ad::gather_rows(g, p(g, bypass_->video.ref_pos), std::vector<Index>(static_cast<std::size_t>(tpf), 0));
    frame_part = ad::concat_rows(g, {ref, frame_part});
  }
  Var pos = ad::add(g, frame_part, ad::gather_rows(g, spatial_table, std::move(spatial_ids)));
  pos = ad::add_row(g, pos, ad::gather_rows(g, p(g, backbone_.modality), {0}));
  return ad::add_row(g, pos, ad::gather_rows(g, p(g, backbone_.resolution), {res}));
}

template <typename S>
Var JointModel<S>::audio_positions(Graph<S>& g, Index k, Index t) const {
  if (t > cfg_.max_frames) throw ShapeError("frame count exceeds model.max_frames");
  std::vector<Index> ids(static_cast<std::size_t>(t));
  for (Index i = 0; i < t; ++i) ids[static_cast<std::size_t>(i)] = i;
  Var pos = ad::gather_rows(g, p(g, backbone_.pos_frame_audio), std::move(ids));
  if (k > 0) {
    if (!bypass_) throw StateError("reference positions need an attached bypass");
    if (k > cfg_.max_ref_frames) throw ShapeError("reference length exceeds model.max_ref_frames");
    std::vector<Index> rids(static_cast<std::size_t>(k));
    for (Index i = 0; i < k; ++i) rids[static_cast<std::size_t>(i)] = i;
    pos = ad::concat_rows(g, {ad::gather_rows(g, p(g, bypass_->audio.ref_pos), std::move(rids)), pos});
  }
  return ad::add_row(g, pos, ad::gather_rows(g, p(g, backbone_.modality), {1}));
}

template <typename S>
Var JointModel<S>::embed_latents(Graph<S>& g, Modality m, Var latents) const {
  return lin(g, m == Modality::video ? backbone_.embed_video : backbone_.embed_audio, latents);
}

template <typename S>
Var JointModel<S>::project_context(Graph<S>& g, Modality m, Var latents_with_mask) const {
  if (!bypass_) throw StateError("context projection needs an attached bypass");
  return lin(g, m == Modality::video ? bypass_->video.proj : bypass_->audio.proj, latents_with_mask);
}

template <typename S>
Var JointModel<S>::context_project(Graph<S>& g, const ControlUnit& u, Modality m) const {
  const bool video = m == Modality::video;
  const LatentSeq& seq = video ? u.visual.latents : u.acoustic.latents;
  const auto& mask = video ? u.visual.mask : u.acoustic.mask;
  const Index dim = video ? cfg_.video_dim : cfg_.audio_dim;
  if (seq.dim() != dim || static_cast<Index>(mask.size()) != seq.length()) {
    throw ShapeError("control unit geometry does not match the model");
  }
  const Index tpf = seq.tokens_per_frame();
  Matrix<S> z(seq.tokens().rows(), dim + 1);
  z.leftCols(dim) = seq.tokens().template cast<S>();
  for (Index f = 0; f < seq.length(); ++f) {
    z.block(f * tpf, dim, tpf, 1).setConstant(static_cast<S>(mask[static_cast<std::size_t>(f)]));
  }
  const Var proj = project_context(g, m, g.constant(std::move(z)));
  if (video) {
    const auto grid = static_cast<Index>(std::lround(std::sqrt(static_cast<double>(tpf))));
    if (grid * grid != tpf) throw ShapeError("visual control tokens do not form a square grid");
    return ad::add(g, proj, video_positions(g, u.t, grid, true));
  }
  return ad::add(g, proj, audio_positions(g, u.acoustic.k, u.t));
}

template <typename S>
Var JointModel<S>::attend(Graph<S>& g, const AttnIds& a, Var q_in, Var kv_in,
                          const std::vector<std::uint8_t>& key_valid) const {
  const Var q = ad::linear(g, q_in, p(g, a.wq), p(g, a.bq));
  const Var k = ad::linear(g, kv_in, p(g, a.wk), p(g, a.bk));
  const Var v = ad::linear(g, kv_in, p(g, a.wv), p(g, a.bv));
  const Var o = ad::attention(g, q, k, v, cfg_.heads, key_valid);
  return ad::linear(g, o, p(g, a.wo), p(g, a.bo));
}

template <typename S>
Var JointModel<S>::stream_block(Graph<S>& g, const StreamBlockIds& b, Var x, Var other, const TextVars& text,
                                Var c) const {
  const Index d = cfg_.d_model;
  const Var mod = lin(g, b.mod, ad::silu(g, c));
  auto part = [&](Index i) { return ad::slice_cols(g, mod, i * d, d); };
  Var h = ad::modulate(g, ad::layer_norm(g, x, Var{}, Var{}), part(0), part(1));
  x = ad::gated_residual(g, x, attend(g, b.self_attn, h, h, {}), part(2));
  h = ad::layer_norm(g, x, p(g, b.cross_norm.gain), p(g, b.cross_norm.bias));
  const Var kv = ad::layer_norm(g, other, Var{}, Var{});
  x = ad::add(g, x, attend(g, b.cross_attn, h, kv, {}));
  h = ad::layer_norm(g, x, p(g, b.text_norm.gain), p(g, b.text_norm.bias));
  x = ad::add(g, x, attend(g, b.text_attn, h, text.tokens, text.valid));
  h = ad::modulate(g, ad::layer_norm(g, x, Var{}, Var{}), part(3), part(4));
  const Var f = ad::linear(g, ad::gelu(g, ad::linear(g, h, p(g, b.ffn.w1), p(g, b.ffn.b1))), p(g, b.ffn.w2),
                           p(g, b.ffn.b2));
  return ad::gated_residual(g, x, f, part(5));
}

template <typename S>
Var JointModel<S>::bypass_block(Graph<S>& g, const BypassBlockIds& b, Var x, const TextVars& text, Var c) const {
  const Index d = cfg_.d_model;
  const Var mod = lin(g, b.mod, ad::silu(g, c));
  auto part = [&](Index i) { return ad::slice_cols(g, mod, i * d, d); };
  Var h = ad::modulate(g, ad::layer_norm(g, x, Var{}, Var{}), part(0), part(1));
  x = ad::gated_residual(g, x, attend(g, b.self_attn, h, h, {}), part(2));
  h = ad::layer_norm(g, x, p(g, b.text_norm.gain), p(g, b.text_norm.bias));
  x = ad::add(g, x, attend(g, b.text_attn, h, text.tokens, text.valid));
  h = ad::modulate(g, ad::layer_norm(g, x, Var{}, Var{}), part(3), part(4));
  const Var f = ad::linear(g, ad::gelu(g, ad::linear(g, h, p(g, b.ffn.w1), p(g, b.ffn.b1))), p(g, b.ffn.w2),
                           p(g, b.ffn.b2));
  return ad::gated_residual(g, x, f, part(5));
}

template <typename S>
Var JointModel<S>::head(Graph<S>& g, const HeadIds& h, Var x, Var c) const {
  const Index d = cfg_.d_model;
  const Var mod = lin(g, h.mod, ad::silu(g, c));
  const Var y = ad::modulate(g, ad::layer_norm(g, x, Var{}, Var{}), ad::slice_cols(g, mod, 0, d),
                             ad::slice_cols(g, mod, d, d));
  return lin(g, h.out, y);
}

template <typename S>
std::vector<Var> JointModel<S>::bypass_forward(Graph<S>& g, Var ctx, const TextVars& text, Var c, Modality m,
                                               Index prefix_tokens) const {
  if (!bypass_) throw StateError("bypass_forward: no bypass attached");
  const BranchIds& br = m == Modality::video ? bypass_->video : bypass_->audio;
  const Index rows = g.value(ctx).rows();
  if (prefix_tokens < 0 || prefix_tokens > rows) throw ShapeError("bypass_forward: prefix longer than context");
  std::vector<Var> hints;
  Var x = ctx;
  for (std::size_t j = 0; j < br.blocks.size(); ++j) {
    x = bypass_block(g, br.blocks[j], x, text, c);
    hints.push_back(ad::slice_rows(g, lin(g, br.out[j], x), prefix_tokens, rows - prefix_tokens));
  }
  return hints;
}

template <typename S>
Hints JointModel<S>::hints_for(Graph<S>& g, const ControlUnit& u, const TextVars& text, Var c) const {
  Hints h;
  h.video = bypass_forward(g, context_project(g, u, Modality::video), text, c, Modality::video,
                           u.visual.latents.tokens_per_frame());
  h.audio = bypass_forward(g, context_project(g, u, Modality::audio), text, c, Modality::audio, u.acoustic.k);
  return h;
}

template <typename S>
Velocity JointModel<S>::backbone_forward(Graph<S>& g, Var video_noisy, Var audio_noisy, Index t, Index grid,
                                         const TextVars& text, Var c, const Hints* hints, double gamma_v,
                                         double gamma_a) const {
  if (!std::isfinite(gamma_v) || !std::isfinite(gamma_a)) throw InputError("guidance scales must be finite");
  const auto& vv = g.value(video_noisy);
  const auto& av = g.value(audio_noisy);
  if (vv.rows() != t * grid * grid || vv.cols() != cfg_.video_dim) throw ShapeError("video latents have wrong shape");
  if (av.rows() != t || av.cols() != cfg_.audio_dim) throw ShapeError("audio latents have wrong shape");
  const auto half = static_cast<std::size_t>(cfg_.layers / 2);
  if (hints && (hints->video.size() != half || hints->audio.size() != half)) {
    throw ShapeError("hint count must equal layers / 2");
  }
  Var xv = ad::add(g, embed_latents(g, Modality::video, video_noisy), video_positions(g, t, grid, false));
  Var xa = ad::add(g, embed_latents(g, Modality::audio, audio_noisy), audio_positions(g, 0, t));
  for (Index l = 1; l <= cfg_.layers; ++l) {
    const JointBlockIds& b = backbone_.blocks[static_cast<std::size_t>(l - 1)];
    const Var nv = stream_block(g, b.video, xv, xa, text, c);
    const Var na = stream_block(g, b.audio, xa, xv, text, c);
    xv = nv;
    xa = na;
    if (hints && l % 2 == 0) {
      const auto j = static_cast<std::size_t>(l / 2 - 1);
      if (gamma_v != 0.0) xv = ad::add_scaled(g, xv, hints->video[j], static_cast<S>(gamma_v));
      if (gamma_a != 0.0) xa = ad::add_scaled(g, xa, hints->audio[j], static_cast<S>(gamma_a));
    }
  }
  return {head(g, backbone_.head_video, xv, c), head(g, backbone_.head_audio, xa, c)};
}

template class JointModel<float>;
template class JointModel<double>;

template Matrix<float> sigma_features<float>(double, Index);
template Matrix<double> sigma_features<double>(double, Index);

// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> context_project(const ControlUnit& u, Modality m, const JointModel<S>& model) {
  Graph<S> g(false);
  return Tensor<S>::from_matrix(g.value(model.context_project(g, u, m)));
}

template <typename S>
std::vector<Tensor<S>> bypass_forward(const ControlUnit& u, double sigma, const JointModel<S>& model, Modality m) {
  Graph<S> g(false);
  const TextVars text = model.text(g, u.text);
  const Var c = model.conditioning(g, sigma, text);
  const Index prefix = m == Modality::video ? u.visual.latents.tokens_per_frame() : u.acoustic.k;
  std::vector<Tensor<S>> out;
  for (Var h : model.bypass_forward(g, model.context_project(g, u, m), text, c, m, prefix)) {
    out.push_back(Tensor<S>::from_matrix(g.value(h)));
  }
  return out;
}

template <typename S>
std::pair<Tensor<S>, Tensor<S>> backbone_forward(const LatentSeq& video_noisy, const LatentSeq& audio_noisy,
                                                 const TokenIds& text, double sigma, const ControlUnit* hints_from,
                                                 double gamma_v, double gamma_a, const JointModel<S>& model) {
  Graph<S> g(false);
  const TextVars tv = model.text(g, text);
  const Var c = model.conditioning(g, sigma, tv);
  std::optional<Hints> hints;
  if (hints_from) hints = model.hints_for(g, *hints_from, tv, c);
  const Index t = video_noisy.length();
  const auto grid =
      static_cast<Index>(std::lround(std::sqrt(static_cast<double>(video_noisy.tokens_per_frame()))));
  const Velocity v = model.backbone_forward(g, g.constant(video_noisy.tokens().template cast<S>()),
                                            g.constant(audio_noisy.tokens().template cast<S>()), t, grid, tv, c,
                                            hints ? &*hints : nullptr, gamma_v, gamma_a);
  return {Tensor<S>::from_matrix(g.value(v.video)), Tensor<S>::from_matrix(g.value(v.audio))};
}

template Tensor<float> context_project(const ControlUnit&, Modality, const JointModel<float>&);
template Tensor<double> context_project(const ControlUnit&, Modality, const JointModel<double>&);
template std::vector<Tensor<float>> bypass_forward(const ControlUnit&, double, const JointModel<float>&, Modality);
template std::vector<Tensor<double>> bypass_forward(const ControlUnit&, double, const JointModel<double>&, Modality);
template std::pair<Tensor<float>, Tensor<float>> backbone_forward(const LatentSeq&, const LatentSeq&,
                                                                  const TokenIds&, double, const ControlUnit*, double,
                                                                  double, const JointModel<float>&);
template std::pair<Tensor<double>, Tensor<double>> backbone_forward(const LatentSeq&, const LatentSeq&,
                                                                    const TokenIds&, double, const ControlUnit*,
                                                                    double, double, const JointModel<double>&);

}  // namespace mmctl
