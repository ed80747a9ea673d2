#pragma once

#include <cstdint>
#include <vector>

#include "incseg/backbone.hpp"
#include "incseg/tape.hpp"

namespace incseg::fusion {

using ad::Mat;
using ad::Param;
using ad::Tape;
using ad::Value;

struct DecoderConfig {
  int depth = 2;
  int heads = 4;
  int mlp_ratio = 4;
};

struct DecoderParams {
  std::vector<vision::BlockParams> blocks;
};

// Residual projections are zero-initialized so decode() is the identity at
// initialization.
DecoderParams make_decoder(const DecoderConfig& cfg, int dim, std::uint64_t seed);

struct DecodeResult {
  Value text;     // K x C refined class embeddings t'
  Value patches;  // M x C refined patch embeddings v'
};

// self-attention over the concatenated [t; v] sequence, then split back
DecodeResult decode(Tape& t, Value text_embeddings, Value patch_embeddings, DecoderParams& p,
                    const DecoderConfig& cfg);

// S[i, m] = <t'_i, v'_m> for every class slot (backgrounds included)
Value score_maps(Tape& t, Value refined_text, Value refined_patches);

// per-pixel max over the first n_background rows -> 1 x M
Value fuse_background(Tape& t, Value scores, int n_background);

// fused (N+1) x M' logits -> (N+1) x (H*W) by bilinear interpolation
Value upsample_logits(Tape& t, Value fused, int grid_h, int grid_w, int out_h, int out_w);

void collect_decoder_params(DecoderParams& p, std::vector<Param*>& group);

}  // namespace incseg::fusion
