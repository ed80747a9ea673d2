#include "incseg/backbone.hpp"

#include <cmath>
#include <stdexcept>

#include "incseg/rng.hpp"

namespace incseg::vision {

void BackboneConfig::validate() const {
  if (image_size % patch_size != 0)
    throw std::domain_error("backbone: image size not divisible by patch size");
  if (dim % heads != 0) throw std::domain_error("backbone: dim not divisible by heads");
  if (depth < 1) throw std::domain_error("backbone: depth must be >= 1");
  if (fuse_layers.empty()) throw std::domain_error("backbone: fuse_layers must be nonempty");
  for (int l : fuse_layers)
    if (l < 1 || l > depth) throw std::domain_error("backbone: fuse layer index out of range");
  if (trainable.empty()) throw std::domain_error("backbone: trainable set must be nonempty");
}

namespace {

Mat init_weight(Rng& rng, Eigen::Index rows, Eigen::Index cols, double std_dev = 0.02) {
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.normal(0.0, std_dev);
  return m;
}

LinearParams make_linear(Rng& rng, const std::string& name, Eigen::Index in, Eigen::Index out,
                         bool zero = false) {
  LinearParams p;
  p.w = Param(name + ".w", zero ? Mat::Zero(in, out) : init_weight(rng, in, out));
  p.b = Param(name + ".b", Mat::Zero(1, out));
  return p;
}

BlockParams make_block(Rng& rng, const std::string& name, int dim, int mlp_ratio,
                       bool zero_out_proj = false) {
  BlockParams b;
  b.ln1_g = Param(name + ".ln1.g", Mat::Ones(1, dim));
  b.ln1_b = Param(name + ".ln1.b", Mat::Zero(1, dim));
  b.q = make_linear(rng, name + ".q", dim, dim);
  b.k = make_linear(rng, name + ".k", dim, dim);
  b.v = make_linear(rng, name + ".v", dim, dim);
  b.o = make_linear(rng, name + ".o", dim, dim, zero_out_proj);
  b.ln2_g = Param(name + ".ln2.g", Mat::Ones(1, dim));
  b.ln2_b = Param(name + ".ln2.b", Mat::Zero(1, dim));
  b.fc1 = make_linear(rng, name + ".fc1", dim, dim * mlp_ratio);
  b.fc2 = make_linear(rng, name + ".fc2", dim * mlp_ratio, dim, zero_out_proj);
  return b;
}

}  // namespace

BackboneParams make_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, "backbone.init"));
  BackboneParams p;
  const int in_dim = cfg.patch_size * cfg.patch_size * 3;
  p.patch_embed = make_linear(rng, "backbone.patch_embed", in_dim, cfg.dim);
  p.pos = Param("backbone.pos", init_weight(rng, cfg.patches(), cfg.dim));
  const int std_blocks =
      cfg.last_layer_mode == LastLayerMode::kVvNoFfnNoResidual ? cfg.depth - 1 : cfg.depth;
  for (int i = 0; i < std_blocks; ++i)
    p.blocks.push_back(make_block(rng, "backbone.block" + std::to_string(i), cfg.dim, cfg.mlp_ratio));
  p.vv.ln_g = Param("backbone.vv.ln.g", Mat::Ones(1, cfg.dim));
  p.vv.ln_b = Param("backbone.vv.ln.b", Mat::Zero(1, cfg.dim));
  p.vv.v = make_linear(rng, "backbone.vv.v", cfg.dim, cfg.dim);
  p.vv.o = make_linear(rng, "backbone.vv.o", cfg.dim, cfg.dim);
  p.fuse_proj = make_linear(rng, "backbone.fuse_proj",
                            static_cast<Eigen::Index>(cfg.fuse_layers.size()) * cfg.dim, cfg.dim);
  p.adapter_w1 = Param("backbone.adapter.w1", init_weight(rng, 9 * cfg.dim, cfg.dim));
  p.adapter_b1 = Param("backbone.adapter.b1", Mat::Zero(1, cfg.dim));
  p.adapter_w2 = Param("backbone.adapter.w2", Mat::Zero(9 * cfg.dim, cfg.dim));
  p.adapter_b2 = Param("backbone.adapter.b2", Mat::Zero(1, cfg.dim));
  return p;
}

Mat patchify(const ImageTensor& img, int patch_size) {
  if (img.h % patch_size != 0 || img.w % patch_size != 0)
    throw std::domain_error("patchify: image shape not divisible by patch size");
  const int gh = img.h / patch_size, gw = img.w / patch_size;
  Mat out(static_cast<Eigen::Index>(gh) * gw, static_cast<Eigen::Index>(patch_size) * patch_size * 3);
  for (int py = 0; py < gh; ++py)
    for (int px = 0; px < gw; ++px) {
      Eigen::Index row = static_cast<Eigen::Index>(py) * gw + px;
      Eigen::Index col = 0;
      for (int y = 0; y < patch_size; ++y)
        for (int x = 0; x < patch_size; ++x)
          for (int c = 0; c < 3; ++c)
            out(row, col++) = img.at(py * patch_size + y, px * patch_size + x, c);
    }
  return out;
}

Value linear(Tape& t, Value x, LinearParams& p) {
  return t.add_rowvec(t.matmul(x, t.param(p.w)), t.param(p.b));
}

static Value multihead_attention(Tape& t, Value x, BlockParams& p, int heads) {
  const int dim = static_cast<int>(t.val(x).cols());
  const int dk = dim / heads;
  Value q = linear(t, x, p.q);
  Value k = linear(t, x, p.k);
  Value v = linear(t, x, p.v);
  std::vector<Value> outs;
  outs.reserve(heads);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  for (int h = 0; h < heads; ++h) {
    Value qh = t.slice_cols(q, static_cast<Eigen::Index>(h) * dk, dk);
    Value kh = t.slice_cols(k, static_cast<Eigen::Index>(h) * dk, dk);
    Value vh = t.slice_cols(v, static_cast<Eigen::Index>(h) * dk, dk);
    Value a = t.softmax_rows(t.scale(t.matmul(qh, t.transpose(kh)), inv_sqrt_dk));
    outs.push_back(t.matmul(a, vh));
  }
  return linear(t, t.concat_cols(outs), p.o);
}

Value transformer_block(Tape& t, Value x, BlockParams& p, int heads) {
  Value x1 = t.layer_norm_rows(x, t.param(p.ln1_g), t.param(p.ln1_b));
  Value attn = multihead_attention(t, x1, p, heads);
  Value y = t.add(x, attn);
  Value y1 = t.layer_norm_rows(y, t.param(p.ln2_g), t.param(p.ln2_b));
  Value ffn = linear(t, t.gelu(linear(t, y1, p.fc1)), p.fc2);
  return t.add(y, ffn);
}

static Value vv_block(Tape& t, Value x, VvBlockParams& p) {
  const int dim = static_cast<int>(t.val(x).cols());
  Value x1 = t.layer_norm_rows(x, t.param(p.ln_g), t.param(p.ln_b));
  Value v = linear(t, x1, p.v);
  Value a = t.softmax_rows(t.scale(t.matmul(v, t.transpose(v)), 1.0 / std::sqrt(double(dim))));
  // no FFN, no residual
  return linear(t, t.matmul(a, v), p.o);
}

EncodeResult encode_patches(Tape& t, const ImageTensor& img, BackboneParams& p,
                            const BackboneConfig& cfg) {
  cfg.validate();
  if (img.h != cfg.image_size || img.w != cfg.image_size)
    throw std::domain_error("encode_patches: image size does not match config");
  Value patches = t.constant(patchify(img, cfg.patch_size));
  Value x = t.add(linear(t, patches, p.patch_embed), t.param(p.pos));
  EncodeResult res;
  const int std_blocks =
      cfg.last_layer_mode == LastLayerMode::kVvNoFfnNoResidual ? cfg.depth - 1 : cfg.depth;
  for (int i = 0; i < std_blocks; ++i) {
    x = transformer_block(t, x, p.blocks[static_cast<std::size_t>(i)], cfg.heads);
    res.layers.push_back(x);
  }
  if (cfg.last_layer_mode == LastLayerMode::kVvNoFfnNoResidual) {
    x = vv_block(t, x, p.vv);
    res.layers.push_back(x);
  }
  res.final_layer = x;
  return res;
}

Value fuse_layers(Tape& t, const EncodeResult& cached, BackboneParams& p,
                  const BackboneConfig& cfg) {
  if (cfg.fuse_layers.empty()) throw std::domain_error("fuse_layers: empty layer list");
  std::vector<Value> parts;
  parts.reserve(cfg.fuse_layers.size());
  for (int l : cfg.fuse_layers) {
    if (l < 1 || l > static_cast<int>(cached.layers.size()))
      throw std::domain_error("fuse_layers: layer index out of range");
    parts.push_back(cached.layers[static_cast<std::size_t>(l - 1)]);
  }
  return linear(t, t.concat_cols(parts), p.fuse_proj);
}

Value apply_adapter(Tape& t, Value v, BackboneParams& p, const BackboneConfig& cfg) {
  if (!cfg.adapter_enabled) return v;
  const int g = cfg.grid();
  Value h1 = t.gelu(t.conv3x3(v, g, g, t.param(p.adapter_w1), t.param(p.adapter_b1)));
  Value h2 = t.conv3x3(h1, g, g, t.param(p.adapter_w2), t.param(p.adapter_b2));
  return t.add(v, h2);
}

Value backbone_forward(Tape& t, const ImageTensor& img, BackboneParams& p,
                       const BackboneConfig& cfg) {
  EncodeResult enc = encode_patches(t, img, p, cfg);
  return apply_adapter(t, fuse_layers(t, enc, p, cfg), p, cfg);
}

static void collect_linear(LinearParams& p, std::vector<Param*>& out) {
  out.push_back(&p.w);
  out.push_back(&p.b);
}

void collect_backbone_params(BackboneParams& p, const BackboneConfig& cfg,
                             std::vector<Param*>& encoder_group,
                             std::vector<Param*>& adapter_group) {
  collect_linear(p.patch_embed, encoder_group);
  encoder_group.push_back(&p.pos);
  for (auto& b : p.blocks) {
    encoder_group.push_back(&b.ln1_g);
    encoder_group.push_back(&b.ln1_b);
    collect_linear(b.q, encoder_group);
    collect_linear(b.k, encoder_group);
    collect_linear(b.v, encoder_group);
    collect_linear(b.o, encoder_group);
    encoder_group.push_back(&b.ln2_g);
    encoder_group.push_back(&b.ln2_b);
    collect_linear(b.fc1, encoder_group);
    collect_linear(b.fc2, encoder_group);
  }
  if (cfg.last_layer_mode == LastLayerMode::kVvNoFfnNoResidual) {
    encoder_group.push_back(&p.vv.ln_g);
    encoder_group.push_back(&p.vv.ln_b);
    collect_linear(p.vv.v, encoder_group);
    collect_linear(p.vv.o, encoder_group);
  }
  collect_linear(p.fuse_proj, encoder_group);
  if (cfg.adapter_enabled) {
    adapter_group.push_back(&p.adapter_w1);
    adapter_group.push_back(&p.adapter_b1);
    adapter_group.push_back(&p.adapter_w2);
    adapter_group.push_back(&p.adapter_b2);
  }
}

}  // namespace incseg::vision
