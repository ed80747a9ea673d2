#include "incseg/decoder.hpp"

#include <stdexcept>

#include "incseg/rng.hpp"

namespace incseg::fusion {

DecoderParams make_decoder(const DecoderConfig& cfg, int dim, std::uint64_t seed) {
  if (dim % cfg.heads != 0) throw std::domain_error("decoder: dim not divisible by heads");
  Rng rng(derive_seed(seed, "decoder.init"));
  DecoderParams p;
  for (int i = 0; i < cfg.depth; ++i) {
    vision::BlockParams b;
    const std::string name = "decoder.block" + std::to_string(i);
    auto weight = [&](Eigen::Index r, Eigen::Index c) {
      Mat m(r, c);
      for (Eigen::Index rr = 0; rr < r; ++rr)
        for (Eigen::Index cc = 0; cc < c; ++cc) m(rr, cc) = rng.normal(0.0, 0.02);
      return m;
    };
    b.ln1_g = Param(name + ".ln1.g", Mat::Ones(1, dim));
    b.ln1_b = Param(name + ".ln1.b", Mat::Zero(1, dim));
    b.q = {Param(name + ".q.w", weight(dim, dim)), Param(name + ".q.b", Mat::Zero(1, dim))};
    b.k = {Param(name + ".k.w", weight(dim, dim)), Param(name + ".k.b", Mat::Zero(1, dim))};
    b.v = {Param(name + ".v.w", weight(dim, dim)), Param(name + ".v.b", Mat::Zero(1, dim))};
    // zero residual projections: identity at init
    b.o = {Param(name + ".o.w", Mat::Zero(dim, dim)), Param(name + ".o.b", Mat::Zero(1, dim))};
    b.ln2_g = Param(name + ".ln2.g", Mat::Ones(1, dim));
    b.ln2_b = Param(name + ".ln2.b", Mat::Zero(1, dim));
    b.fc1 = {Param(name + ".fc1.w", weight(dim, dim * cfg.mlp_ratio)),
             Param(name + ".fc1.b", Mat::Zero(1, dim * cfg.mlp_ratio))};
    b.fc2 = {Param(name + ".fc2.w", Mat::Zero(dim * cfg.mlp_ratio, dim)),
             Param(name + ".fc2.b", Mat::Zero(1, dim))};
    p.blocks.push_back(std::move(b));
  }
  return p;
}

DecodeResult decode(Tape& t, Value text_embeddings, Value patch_embeddings, DecoderParams& p,
                    const DecoderConfig& cfg) {
  if (t.val(text_embeddings).cols() != t.val(patch_embeddings).cols())
    throw std::invalid_argument("decode: embedding dimension mismatch");
  const Eigen::Index k = t.val(text_embeddings).rows();
  const Eigen::Index m = t.val(patch_embeddings).rows();
  std::vector<Value> parts{text_embeddings, patch_embeddings};
  Value x = t.concat_rows(parts);
  for (auto& b : p.blocks) x = vision::transformer_block(t, x, b, cfg.heads);
  return {t.slice_rows(x, 0, k), t.slice_rows(x, k, m)};
}

Value score_maps(Tape& t, Value refined_text, Value refined_patches) {
  return t.matmul(refined_text, t.transpose(refined_patches));
}

Value fuse_background(Tape& t, Value scores, int n_background) {
  if (n_background < 1) throw std::domain_error("fuse_background: need at least one background channel");
  if (t.val(scores).rows() < n_background)
    throw std::invalid_argument("fuse_background: fewer rows than background channels");
  return t.colwise_max(t.slice_rows(scores, 0, n_background));
}

Value upsample_logits(Tape& t, Value fused, int grid_h, int grid_w, int out_h, int out_w) {
  return t.bilinear_upsample(fused, grid_h, grid_w, out_h, out_w);
}

void collect_decoder_params(DecoderParams& p, std::vector<Param*>& group) {
  for (auto& b : p.blocks) {
    group.push_back(&b.ln1_g);
    group.push_back(&b.ln1_b);
    for (auto* l : {&b.q, &b.k, &b.v, &b.o, &b.fc1, &b.fc2}) {
      group.push_back(&l->w);
      group.push_back(&l->b);
    }
    group.push_back(&b.ln2_g);
    group.push_back(&b.ln2_b);
  }
}

}  // namespace incseg::fusion
