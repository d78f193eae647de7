#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "ovseg/params.hpp"
#include "ovseg/tensor.hpp"

namespace ovseg {

struct EncoderConfig {
  std::size_t image_size = 224;
  std::size_t patch_size = 16;
  std::size_t depth = 4;
  std::size_t embed_dim = 64;
  std::size_t num_heads = 4;
  std::size_t proj_dim = 32;
  bool surgery_enabled = true;

  std::size_t grid() const { return image_size / patch_size; }
  void validate() const;  // ConfigError on inconsistent sizes
  bool operator==(const EncoderConfig&) const = default;
};

// Token matrix [(h*w + 1) x dim]; row 0 is the [CLS] token, rows 1.. are the
// patch tokens in row-major patch order.
struct TokenSequence {
  Tensor tokens;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t dim() const { return tokens.dim(1); }
  Tensor cls() const { return ops::slice_rows(tokens, 0, 1); }
  Tensor patches() const { return ops::slice_rows(tokens, 1, tokens.dim(0)); }
};

struct BlockWeights {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv;  // [d x d], [d]
  Tensor wo, bo;
  Tensor ln2_g, ln2_b;
  Tensor fc1_w, fc1_b;  // [d x 4d], [4d]
  Tensor fc2_w, fc2_b;  // [4d x d], [d]
};

struct EncoderWeights {
  Tensor patch_w;  // [d x 3 x p x p]
  Tensor patch_b;  // [d]
  Tensor cls;      // [d]
  Tensor pos;      // [(h*w + 1) x d]
  std::vector<BlockWeights> blocks;
  Tensor proj;     // [d x c]

  // Seeded Gaussian initialization scaled by 1/sqrt(fan_in).
  static EncoderWeights synthesize(const EncoderConfig& cfg, std::uint64_t seed);
  // Reads canonical names (`patch_embed.w`, `block0.attn.wq`, `proj`, ...)
  // after stripping `prefix`; shapes are checked against `cfg`.
  static EncoderWeights from_params(const ParamSet& params, const EncoderConfig& cfg, std::string_view prefix = {});

  ParamSet params(std::string_view prefix = {}) const;
  EncoderWeights clone() const;
  void check(const EncoderConfig& cfg) const;  // ConfigError on shape mismatch
};

// Image [3 x S x S] in [-1, 1] -> tokens with [CLS] prepended and positional
// embeddings added.
TokenSequence patch_embed(const Tensor& image, const EncoderWeights& weights, const EncoderConfig& cfg);

// y = X + SA(q, k, v);  z = y + FFN(LN(y)),  with q/k/v = LN(X) W + b.
TokenSequence standard_block(const TokenSequence& x, const BlockWeights& block, std::size_t num_heads);

// Self-self attention without FFN or residual: per head,
// softmax((q q^T + k k^T + v v^T) / sqrt(d_head)) v, then the out-projection.
// When `attention` is non-null it receives the per-head attention matrices.
TokenSequence surgery_block(const TokenSequence& x, const BlockWeights& block, std::size_t num_heads,
                            std::vector<Tensor>* attention = nullptr);

struct Encoding {
  TokenSequence x_last;  // input to the final block
  TokenSequence out;     // Proj(final block), dim c
  Tensor o_prime;        // Proj(x_last patch rows) [h*w x c]
};

Encoding encode(const Tensor& image, const EncoderWeights& weights, const EncoderConfig& cfg);

// [h*w x c] patch rows -> [c x h x w] feature map, and back.
Tensor tokens_to_map(const Tensor& rows, std::size_t h, std::size_t w);
Tensor map_to_tokens(const Tensor& map);

}  // namespace ovseg
