#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mmctl/autodiff.hpp"
#include "mmctl/mmcu.hpp"
#include "mmctl/optim.hpp"
#include "mmctl/prompt.hpp"
#include "mmctl/rng.hpp"

namespace mmctl {

struct ModelConfig {
  Index layers = 8;   // L, even
  Index d_model = 128;
  Index heads = 4;
  Index ffn_mult = 4;
  Index sigma_dim = 64;  // sinusoidal noise-level features
  TextConfig text{4096, 64, 16};
  Index max_frames = 16;      // positional rows; >= generated frame count
  Index max_ref_frames = 8;   // longest acoustic reference (k)
  Index grid_full = 4;        // full-resolution patch grid side
  Index video_dim = 192;      // 3 * patch^2
  Index audio_dim = 64;       // samples per frame
  double gamma_v = 1.0;
  double gamma_a = 1.0;

  void validate() const;
};

enum class Modality { video, audio };
enum class Phase { pretrain, control };

inline const char* modality_tag(Modality m) { return m == Modality::video ? "v" : "a"; }

struct AttnIds { int wq, bq, wk, bk, wv, bv, wo, bo; };
struct NormIds { int gain, bias; };
struct FfnIds { int w1, b1, w2, b2; };
struct LinearIds { int w, b; };

// One modality's half of a joint block.
struct StreamBlockIds {
  LinearIds mod;  // silu(c) -> shift/scale/gate for self-attention and FFN
  AttnIds self_attn;
  NormIds cross_norm;
  AttnIds cross_attn;  // queries this stream, keys/values the other stream
  NormIds text_norm;
  AttnIds text_attn;
  FfnIds ffn;
};

struct JointBlockIds {
  StreamBlockIds video, audio;
};

// Bypass block: one stream, no cross-modal attention.
struct BypassBlockIds {
  LinearIds mod;
  AttnIds self_attn;
  NormIds text_norm;
  AttnIds text_attn;
  FfnIds ffn;
};

struct HeadIds {
  LinearIds mod;  // silu(c) -> shift/scale
  LinearIds out;  // d_model -> latent dim, zero-initialised
};

struct BackboneIds {
  LinearIds embed_video, embed_audio;
  int pos_frame_video = -1, pos_spatial = -1, pos_frame_audio = -1, modality = -1, resolution = -1;
  LinearIds sigma1, sigma2, text_pool;
  std::vector<JointBlockIds> blocks;
  HeadIds head_video, head_audio;
};

struct BranchIds {
  LinearIds proj;  // (latent_dim + 1) -> d_model; last row is the mask channel
  int ref_pos = -1;
  std::vector<BypassBlockIds> blocks;  // block j feeds backbone layer 2j
  std::vector<LinearIds> out;          // zero-initialised hint projectors
};

struct BypassIds {
  BranchIds video, audio;
};

// Graph-level hint set: L/2 tensors per modality aligned to the main streams.
struct Hints {
  std::vector<Var> video, audio;
};

struct Velocity {
  Var video;  // [t * tokens_per_frame x video_dim]
  Var audio;  // [t x audio_dim]
};

// Frozen joint DiT backbone plus optional dual-stream bypass. Parameters live
// in one ParamStore; the structs above hold their ids.
template <typename S>
class JointModel {
 public:
  static JointModel init_backbone(const ModelConfig& cfg, Rng rng);

  const ModelConfig& config() const noexcept { return cfg_; }
  ParamStore<S>& params() noexcept { return params_; }
  const ParamStore<S>& params() const noexcept { return params_; }
  const TextParams& text_params() const noexcept { return text_; }
  const BackboneIds& backbone() const noexcept { return backbone_; }
  const std::optional<BypassIds>& bypass() const noexcept { return bypass_; }
  bool has_bypass() const noexcept { return bypass_.has_value(); }
  bool backbone_frozen() const noexcept { return frozen_; }

  void freeze_backbone();
  void attach_bypass(Rng rng);
  // Marks exactly the phase's parameter partition as trainable.
  void set_phase(Phase phase);
  std::vector<int> trainable_params(Phase phase) const;
  std::vector<int> backbone_param_ids() const;
  std::vector<int> bypass_param_ids() const;

  // SHA-256 over (name, shape, little-endian float32 data) of every backbone
  // parameter in registration order.
  std::string backbone_checksum() const;

  // Rebuilds the id tables from a store whose names follow this model's
  // scheme (used when loading checkpoints).
  static JointModel from_store(const ModelConfig& cfg, ParamStore<S> store, bool with_bypass, bool frozen);

  // ---- graph-level building blocks ----
  TextVars text(Graph<S>& g, const TokenIds& ids) const;
  TextVars null_text(Graph<S>& g) const;
  Var conditioning(Graph<S>& g, double sigma, const TextVars& text) const;

  // Linear embedders alone (no positions).
  Var embed_latents(Graph<S>& g, Modality m, Var latents) const;
  // Context projector linear map on [latents | mask] rows.
  Var project_context(Graph<S>& g, Modality m, Var latents_with_mask) const;
  // Full context projection of a control unit: mask channel appended, linear
  // projection, positional and modality embeddings added.
  Var context_project(Graph<S>& g, const ControlUnit& u, Modality m) const;
  // Runs the bypass branch; hints have the reference prefix removed.
  std::vector<Var> bypass_forward(Graph<S>& g, Var ctx, const TextVars& text, Var c, Modality m,
                                  Index prefix_tokens) const;
  Hints hints_for(Graph<S>& g, const ControlUnit& u, const TextVars& text, Var c) const;

  // Joint forward. `hints` may be null. video_noisy rows are frame-major
  // patch tokens on a grid x grid lattice (grid = grid_full or grid_full / 2).
  Velocity backbone_forward(Graph<S>& g, Var video_noisy, Var audio_noisy, Index t, Index grid,
                            const TextVars& text, Var c, const Hints* hints, double gamma_v,
                            double gamma_a) const;

 private:
  Var video_positions(Graph<S>& g, Index t, Index grid, bool reference_prefix) const;
  Var audio_positions(Graph<S>& g, Index k, Index t) const;
  Var stream_block(Graph<S>& g, const StreamBlockIds& b, Var x, Var other, const TextVars& text, Var c) const;
  Var bypass_block(Graph<S>& g, const BypassBlockIds& b, Var x, const TextVars& text, Var c) const;
  Var attend(Graph<S>& g, const AttnIds& a, Var q_in, Var kv_in, const std::vector<std::uint8_t>& key_valid) const;
  Var head(Graph<S>& g, const HeadIds& h, Var x, Var c) const;
  Var lin(Graph<S>& g, const LinearIds& l, Var x) const;
  Var p(Graph<S>& g, int id) const { return params_.bind(g, id); }
  Index resolution_index(Index grid) const;

  ModelConfig cfg_;
  ParamStore<S> params_;
  TextParams text_;
  BackboneIds backbone_;
  std::optional<BypassIds> bypass_;
  bool frozen_ = false;
};

extern template class JointModel<float>;
extern template class JointModel<double>;

// Sinusoidal features of a noise level in [0, 1].
template <typename S>
Matrix<S> sigma_features(double sigma, Index dim);

// Tensor-level convenience wrappers (no gradients).
template <typename S>
Tensor<S> context_project(const ControlUnit& u, Modality m, const JointModel<S>& model);

template <typename S>
std::vector<Tensor<S>> bypass_forward(const ControlUnit& u, double sigma, const JointModel<S>& model, Modality m);

template <typename S>
std::pair<Tensor<S>, Tensor<S>> backbone_forward(const LatentSeq& video_noisy, const LatentSeq& audio_noisy,
                                                 const TokenIds& text, double sigma, const ControlUnit* hints_from,
                                                 double gamma_v, double gamma_a, const JointModel<S>& model);

}  // namespace mmctl
