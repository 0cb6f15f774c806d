#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "mmctl/autodiff.hpp"
#include "mmctl/optim.hpp"
#include "mmctl/rng.hpp"

namespace mmctl {

inline constexpr std::string_view kVisualTag = "[VISUAL]:";
inline constexpr std::string_view kSpeechTag = "[SPEECH]:";

struct StructuredPrompt {
  std::string visual;  // scene description
  std::string speech;  // spoken content; may be empty
  friend bool operator==(const StructuredPrompt&, const StructuredPrompt&) = default;
};

// "[VISUAL]: <c_v> [SPEECH]: <c_s>", tags case-sensitive and in that order.
// Throws ParseError carrying the byte offset of the violation.
StructuredPrompt parse_prompt(std::string_view s);
std::string render_prompt(const StructuredPrompt& p);

struct TextConfig {
  Index vocab_size = 4096;
  Index d_text = 32;
  Index max_text_len = 16;
};

// Hash-bucket token ids for one prompt, padded to max_text_len.
struct TokenIds {
  std::vector<Index> ids;
  std::vector<Index> segments;      // 0 = visual span, 1 = speech span
  std::vector<std::uint8_t> valid;  // 0 at pad positions
};

TokenIds tokenize(const StructuredPrompt& p, const TextConfig& cfg);

template <typename S>
struct TextEmbedding {
  Tensor<S> tokens;  // [max_text_len x d_text]
  Tensor<S> pooled;  // [1 x d_text], mean of token rows
  std::vector<std::uint8_t> valid;
};

// Parameter ids of the toy text encoder.
struct TextParams {
  int table = -1;    // [vocab x d_text]
  int segment = -1;  // [2 x d_text]
  int pad = -1;      // [1 x d_text]
  int null = -1;     // [1 x d_text], unconditional embedding

  template <typename S>
  static TextParams create(ParamStore<S>& store, const TextConfig& cfg, Rng rng) {
    TextParams tp;
    tp.table = store.add("text.table", rng.split("table").normal_matrix<S>(cfg.vocab_size, cfg.d_text, 0.02));
    tp.segment = store.add("text.segment", rng.split("segment").normal_matrix<S>(2, cfg.d_text, 0.02));
    tp.pad = store.add("text.pad", rng.split("pad").normal_matrix<S>(1, cfg.d_text, 0.02));
    tp.null = store.add("text.null", rng.split("null").normal_matrix<S>(1, cfg.d_text, 0.02));
    return tp;
  }
};

// Differentiable text stream: token rows plus their validity mask.
struct TextVars {
  Var tokens;
  Var pooled;
  std::vector<std::uint8_t> valid;
};

template <typename S>
TextVars text_forward(Graph<S>& g, const ParamStore<S>& store, const TextParams& tp, const TokenIds& ids) {
  const Var table = store.bind(g, tp.table);
  const Var seg = store.bind(g, tp.segment);
  const Var pad = store.bind(g, tp.pad);
  const auto& tv = g.value(table);
  const auto& sv = g.value(seg);
  const auto& pv = g.value(pad);
  const Index n = static_cast<Index>(ids.ids.size());
  Matrix<S> rows(n, tv.cols());
  for (Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    rows.row(i) = ids.valid[k] ? RowVector<S>(tv.row(ids.ids[k]) + sv.row(ids.segments[k])) : RowVector<S>(pv.row(0));
  }
  Var tokens = g.record(std::move(rows), {table, seg, pad}, [table, seg, pad, ids](Graph<S>& g, int self) {
    const auto& dy = g.grad_of(self);
    for (std::size_t k = 0; k < ids.ids.size(); ++k) {
      const auto r = static_cast<Index>(k);
      if (ids.valid[k]) {
        if (g.needs_grad(table)) g.grad(table).row(ids.ids[k]) += dy.row(r);
        if (g.needs_grad(seg)) g.grad(seg).row(ids.segments[k]) += dy.row(r);
      } else if (g.needs_grad(pad)) {
        g.grad(pad).row(0) += dy.row(r);
      }
    }
  });
  return {tokens, ad::mean_rows(g, tokens), ids.valid};
}

template <typename S>
TextVars null_text_forward(Graph<S>& g, const ParamStore<S>& store, const TextParams& tp, Index max_text_len) {
  const Var null = store.bind(g, tp.null);
  std::vector<Index> rows(static_cast<std::size_t>(max_text_len), 0);
  Var tokens = ad::gather_rows(g, null, std::move(rows));
  return {tokens, null, std::vector<std::uint8_t>(static_cast<std::size_t>(max_text_len), 1)};
}

template <typename S>
TextEmbedding<S> encode_text(const StructuredPrompt& p, const ParamStore<S>& store, const TextParams& tp,
                             const TextConfig& cfg) {
  Graph<S> g(false);
  const TextVars tv = text_forward(g, store, tp, tokenize(p, cfg));
  return {Tensor<S>::from_matrix(g.value(tv.tokens)), Tensor<S>::from_matrix(g.value(tv.pooled)), tv.valid};
}

}  // namespace mmctl
