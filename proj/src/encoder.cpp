#include "ovseg/encoder.hpp"

#include <cmath>
#include <string>

#include "ovseg/rng.hpp"

namespace ovseg {

void EncoderConfig::validate() const {
  if (patch_size == 0 || image_size == 0) throw ConfigError("encoder: image and patch sizes must be positive");
  if (image_size % patch_size != 0) {
    throw ConfigError("encoder: image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                      std::to_string(patch_size));
  }
  if (depth == 0) throw ConfigError("encoder: depth must be at least 1");
  if (num_heads == 0 || embed_dim % num_heads != 0) {
    throw ConfigError("encoder: embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (proj_dim == 0 || proj_dim > embed_dim) throw ConfigError("encoder: proj_dim must be in [1, embed_dim]");
}

namespace {

Tensor gaussian(Rng& rng, Shape shape, double stddev) {
  const std::size_t n = shape_numel(shape);
  std::vector<double> v(n);
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

std::string block_prefix(std::size_t i) { return "block" + std::to_string(i) + "."; }

void expect_shape(const Tensor& t, const Shape& shape, const std::string& name) {
  if (t.shape() != shape) {
    throw ConfigError("encoder weight '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                      shape_str(shape));
  }
}

}  // namespace

EncoderWeights EncoderWeights::synthesize(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(Rng::derive(seed, "encoder"));
  const std::size_t d = cfg.embed_dim, p = cfg.patch_size, t = cfg.grid() * cfg.grid() + 1;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  EncoderWeights w;
  w.patch_w = gaussian(rng, {d, 3, p, p}, 1.0 / std::sqrt(3.0 * static_cast<double>(p * p)));
  w.patch_b = gaussian(rng, {d}, 0.02);
  w.cls = gaussian(rng, {d}, 0.5);
  w.pos = gaussian(rng, {t, d}, 0.1);
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    BlockWeights b;
    b.ln1_g = Tensor::full({d}, 1.0);
    b.ln1_b = Tensor::zeros({d});
    b.wq = gaussian(rng, {d, d}, sd);
    b.bq = gaussian(rng, {d}, 0.02);
    b.wk = gaussian(rng, {d, d}, sd);
    b.bk = gaussian(rng, {d}, 0.02);
    b.wv = gaussian(rng, {d, d}, sd);
    b.bv = gaussian(rng, {d}, 0.02);
    b.wo = gaussian(rng, {d, d}, sd);
    b.bo = gaussian(rng, {d}, 0.02);
    b.ln2_g = Tensor::full({d}, 1.0);
    b.ln2_b = Tensor::zeros({d});
    b.fc1_w = gaussian(rng, {d, 4 * d}, sd);
    b.fc1_b = gaussian(rng, {4 * d}, 0.02);
    b.fc2_w = gaussian(rng, {4 * d, d}, 0.5 * sd);
    b.fc2_b = gaussian(rng, {d}, 0.02);
    w.blocks.push_back(std::move(b));
  }
  w.proj = gaussian(rng, {d, cfg.proj_dim}, sd);
  return w;
}

ParamSet EncoderWeights::params(std::string_view prefix) const {
  ParamSet ps;
  const std::string pre(prefix);
  ps.add(pre + "patch_embed.w", patch_w);
  ps.add(pre + "patch_embed.b", patch_b);
  ps.add(pre + "cls", cls);
  ps.add(pre + "pos", pos);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string bp = pre + block_prefix(i);
    ps.add(bp + "ln1.g", b.ln1_g);
    ps.add(bp + "ln1.b", b.ln1_b);
    ps.add(bp + "attn.wq", b.wq);
    ps.add(bp + "attn.bq", b.bq);
    ps.add(bp + "attn.wk", b.wk);
    ps.add(bp + "attn.bk", b.bk);
    ps.add(bp + "attn.wv", b.wv);
    ps.add(bp + "attn.bv", b.bv);
    ps.add(bp + "attn.wo", b.wo);
    ps.add(bp + "attn.bo", b.bo);
    ps.add(bp + "ln2.g", b.ln2_g);
    ps.add(bp + "ln2.b", b.ln2_b);
    ps.add(bp + "mlp.w1", b.fc1_w);
    ps.add(bp + "mlp.b1", b.fc1_b);
    ps.add(bp + "mlp.w2", b.fc2_w);
    ps.add(bp + "mlp.b2", b.fc2_b);
  }
  ps.add(pre + "proj", proj);
  return ps;
}

EncoderWeights EncoderWeights::from_params(const ParamSet& params, const EncoderConfig& cfg, std::string_view prefix) {
  cfg.validate();
  const std::string pre(prefix);
  auto get = [&](const std::string& name) { return params.get(pre + name).clone(); };
  EncoderWeights w;
  w.patch_w = get("patch_embed.w");
  w.patch_b = get("patch_embed.b");
  w.cls = get("cls");
  w.pos = get("pos");
  for (std::size_t i = 0;; ++i) {
    const std::string bp = block_prefix(i);
    if (!params.contains(pre + bp + "attn.wq")) break;
    BlockWeights b;
    b.ln1_g = get(bp + "ln1.g");
    b.ln1_b = get(bp + "ln1.b");
    b.wq = get(bp + "attn.wq");
    b.bq = get(bp + "attn.bq");
    b.wk = get(bp + "attn.wk");
    b.bk = get(bp + "attn.bk");
    b.wv = get(bp + "attn.wv");
    b.bv = get(bp + "attn.bv");
    b.wo = get(bp + "attn.wo");
    b.bo = get(bp + "attn.bo");
    b.ln2_g = get(bp + "ln2.g");
    b.ln2_b = get(bp + "ln2.b");
    b.fc1_w = get(bp + "mlp.w1");
    b.fc1_b = get(bp + "mlp.b1");
    b.fc2_w = get(bp + "mlp.w2");
    b.fc2_b = get(bp + "mlp.b2");
    w.blocks.push_back(std::move(b));
  }
  w.proj = get("proj");
  w.check(cfg);
  return w;
}

EncoderWeights EncoderWeights::clone() const {
  EncoderWeights w;
  w.patch_w = patch_w.clone();
  w.patch_b = patch_b.clone();
  w.cls = cls.clone();
  w.pos = pos.clone();
  for (const auto& b : blocks) {
    w.blocks.push_back(BlockWeights{b.ln1_g.clone(), b.ln1_b.clone(), b.wq.clone(), b.bq.clone(), b.wk.clone(),
                                    b.bk.clone(), b.wv.clone(), b.bv.clone(), b.wo.clone(), b.bo.clone(),
                                    b.ln2_g.clone(), b.ln2_b.clone(), b.fc1_w.clone(), b.fc1_b.clone(),
                                    b.fc2_w.clone(), b.fc2_b.clone()});
  }
  w.proj = proj.clone();
  return w;
}

void EncoderWeights::check(const EncoderConfig& cfg) const {
  cfg.validate();
  const std::size_t d = cfg.embed_dim, p = cfg.patch_size, t = cfg.grid() * cfg.grid() + 1;
  if (blocks.size() != cfg.depth) {
    throw ConfigError("encoder weights have " + std::to_string(blocks.size()) + " blocks, config depth is " +
                      std::to_string(cfg.depth));
  }
  expect_shape(patch_w, {d, 3, p, p}, "patch_embed.w");
  expect_shape(patch_b, {d}, "patch_embed.b");
  expect_shape(cls, {d}, "cls");
  expect_shape(pos, {t, d}, "pos");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string bp = block_prefix(i);
    for (const auto* v : {&b.ln1_g, &b.ln1_b, &b.bq, &b.bk, &b.bv, &b.bo, &b.ln2_g, &b.ln2_b, &b.fc2_b}) {
      expect_shape(*v, {d}, bp + "vector");
    }
    for (const auto* m : {&b.wq, &b.wk, &b.wv, &b.wo}) expect_shape(*m, {d, d}, bp + "attn");
    expect_shape(b.fc1_w, {d, 4 * d}, bp + "mlp.w1");
    expect_shape(b.fc1_b, {4 * d}, bp + "mlp.b1");
    expect_shape(b.fc2_w, {4 * d, d}, bp + "mlp.w2");
  }
  expect_shape(proj, {d, cfg.proj_dim}, "proj");
}

namespace {

// [3 x S x S] -> [(S/p)^2 x 3*p*p], channel-major within each patch.
Tensor patchify(const Tensor& image, std::size_t p) {
  const std::size_t s = image.dim(1), g = s / p;
  const auto px = image.data();
  std::vector<double> rows(g * g * 3 * p * p);
  std::size_t at = 0;
  for (std::size_t gy = 0; gy < g; ++gy)
    for (std::size_t gx = 0; gx < g; ++gx)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t ky = 0; ky < p; ++ky)
          for (std::size_t kx = 0; kx < p; ++kx) rows[at++] = px[(c * s + gy * p + ky) * s + gx * p + kx];
  return Tensor({g * g, 3 * p * p}, std::move(rows));
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return ops::add_row(ops::matmul(x, w), b); }

struct Qkv {
  Tensor q, k, v;
};

Qkv project_qkv(const Tensor& x, const BlockWeights& b) {
  const Tensor h = ops::layer_norm(x, b.ln1_g, b.ln1_b);
  return {linear(h, b.wq, b.bq), linear(h, b.wk, b.bk), linear(h, b.wv, b.bv)};
}

}  // namespace

TokenSequence patch_embed(const Tensor& image, const EncoderWeights& weights, const EncoderConfig& cfg) {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg.image_size || image.dim(2) != cfg.image_size) {
    throw DimensionError("patch_embed: expected image [3x" + std::to_string(cfg.image_size) + "x" +
                         std::to_string(cfg.image_size) + "], got " + shape_str(image.shape()));
  }
  const std::size_t d = cfg.embed_dim, p = cfg.patch_size, g = cfg.grid();
  const Tensor kernel = ops::reshape(weights.patch_w, {d, 3 * p * p});
  const Tensor patches = linear(patchify(image, p), ops::transpose(kernel), weights.patch_b);
  const Tensor tokens = ops::concat_rows({ops::reshape(weights.cls, {1, d}), patches});
  return {ops::add(tokens, weights.pos), g, g};
}

TokenSequence standard_block(const TokenSequence& x, const BlockWeights& block, std::size_t num_heads) {
  const std::size_t d = x.dim();
  if (d % num_heads != 0) throw DimensionError("standard_block: dim not divisible by heads");
  const std::size_t dh = d / num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Qkv qkv = project_qkv(x.tokens, block);
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < num_heads; ++h) {
    const Tensor q = ops::slice_cols(qkv.q, h * dh, (h + 1) * dh);
    const Tensor k = ops::slice_cols(qkv.k, h * dh, (h + 1) * dh);
    const Tensor v = ops::slice_cols(qkv.v, h * dh, (h + 1) * dh);
    const Tensor attn = ops::softmax(ops::scale(ops::matmul(q, ops::transpose(k)), scale), 1);
    heads.push_back(ops::matmul(attn, v));
  }
  const Tensor sa = linear(ops::concat_cols(heads), block.wo, block.bo);
  const Tensor y = ops::add(x.tokens, sa);
  const Tensor hidden = ops::gelu(linear(ops::layer_norm(y, block.ln2_g, block.ln2_b), block.fc1_w, block.fc1_b));
  const Tensor z = ops::add(y, linear(hidden, block.fc2_w, block.fc2_b));
  return {z, x.h, x.w};
}

TokenSequence surgery_block(const TokenSequence& x, const BlockWeights& block, std::size_t num_heads,
                            std::vector<Tensor>* attention) {
  const std::size_t d = x.dim();
  if (d % num_heads != 0) throw DimensionError("surgery_block: dim not divisible by heads");
  const std::size_t dh = d / num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Qkv qkv = project_qkv(x.tokens, block);
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < num_heads; ++h) {
    const Tensor q = ops::slice_cols(qkv.q, h * dh, (h + 1) * dh);
    const Tensor k = ops::slice_cols(qkv.k, h * dh, (h + 1) * dh);
    const Tensor v = ops::slice_cols(qkv.v, h * dh, (h + 1) * dh);
    const Tensor logits = ops::add(ops::add(ops::matmul(q, ops::transpose(q)), ops::matmul(k, ops::transpose(k))),
                                   ops::matmul(v, ops::transpose(v)));
    const Tensor attn = ops::softmax(ops::scale(logits, scale), 1);
    if (attention) attention->push_back(attn);
    heads.push_back(ops::matmul(attn, v));
  }
  return {linear(ops::concat_cols(heads), block.wo, block.bo), x.h, x.w};
}

Encoding encode(const Tensor& image, const EncoderWeights& weights, const EncoderConfig& cfg) {
  weights.check(cfg);
  TokenSequence x = patch_embed(image, weights, cfg);
  for (std::size_t i = 0; i + 1 < cfg.depth; ++i) x = standard_block(x, weights.blocks[i], cfg.num_heads);
  const BlockWeights& last = weights.blocks.back();
  const TokenSequence final_tokens =
      cfg.surgery_enabled ? surgery_block(x, last, cfg.num_heads) : standard_block(x, last, cfg.num_heads);
  Encoding enc;
  enc.out = {ops::matmul(final_tokens.tokens, weights.proj), x.h, x.w};
  enc.o_prime = ops::matmul(x.patches(), weights.proj);
  enc.x_last = std::move(x);
  return enc;
}

Tensor tokens_to_map(const Tensor& rows, std::size_t h, std::size_t w) {
  if (rows.rank() != 2 || rows.dim(0) != h * w) {
    throw DimensionError("tokens_to_map: " + shape_str(rows.shape()) + " is not a " + std::to_string(h) + "x" +
                         std::to_string(w) + " grid");
  }
  return ops::reshape(ops::transpose(rows), {rows.dim(1), h, w});
}

Tensor map_to_tokens(const Tensor& map) {
  if (map.rank() != 3) throw DimensionError("map_to_tokens: expected [C x H x W]");
  return ops::transpose(ops::reshape(map, {map.dim(0), map.dim(1) * map.dim(2)}));
}

}  // namespace ovseg
