#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "incseg/tape.hpp"

namespace incseg::vision {

using ad::Mat;
using ad::Param;
using ad::Tape;
using ad::Value;

// H x W x 3 image in [0,1], row-major, channel-interleaved.
struct ImageTensor {
  int h = 0, w = 0;
  std::vector<double> rgb;  // size h*w*3

  ImageTensor() = default;
  ImageTensor(int h_, int w_) : h(h_), w(w_), rgb(static_cast<std::size_t>(h_) * w_ * 3, 0.0) {}
  double& at(int y, int x, int c) { return rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c]; }
  double at(int y, int x, int c) const { return rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c]; }
};

enum class LastLayerMode { kStandard, kVvNoFfnNoResidual };

enum class Component { kPrompts, kAdapter, kEncoder };

struct BackboneConfig {
  int image_size = 64;
  int patch_size = 8;
  int depth = 4;
  int dim = 64;
  int heads = 4;
  int mlp_ratio = 4;
  std::vector<int> fuse_layers = {2, 3, 4};  // 1-based block indices
  LastLayerMode last_layer_mode = LastLayerMode::kVvNoFfnNoResidual;
  bool adapter_enabled = true;
  std::set<Component> trainable = {Component::kPrompts, Component::kAdapter, Component::kEncoder};

  int grid() const { return image_size / patch_size; }
  int patches() const { return grid() * grid(); }
  void validate() const;
};

struct LinearParams {
  Param w;  // in x out
  Param b;  // 1 x out
};

struct BlockParams {
  Param ln1_g, ln1_b;
  LinearParams q, k, v, o;
  Param ln2_g, ln2_b;
  LinearParams fc1, fc2;
};

// final-layer value-value attention: LN -> v-projection -> softmax(v v^T / sqrt(C)) v -> out proj
struct VvBlockParams {
  Param ln_g, ln_b;
  LinearParams v, o;
};

struct BackboneParams {
  LinearParams patch_embed;  // (patch^2*3) x C
  Param pos;                 // M x C learned positions
  std::vector<BlockParams> blocks;  // depth-1 standard blocks (or depth when standard mode)
  VvBlockParams vv;                 // used when last_layer_mode == kVvNoFfnNoResidual
  LinearParams fuse_proj;           // (|fuse_layers|*C) x C
  Param adapter_w1, adapter_b1;     // conv3x3 C->C
  Param adapter_w2, adapter_b2;     // conv3x3 C->C, zero-initialized
};

BackboneParams make_backbone(const BackboneConfig& cfg, std::uint64_t seed);

Value linear(Tape& t, Value x, LinearParams& p);
Value transformer_block(Tape& t, Value x, BlockParams& p, int heads);

struct EncodeResult {
  std::vector<Value> layers;  // output of block 1..depth
  Value final_layer;          // == layers.back()
};

// patchify -> embed -> blocks (last per cfg.last_layer_mode), caching the
// per-layer outputs for fusion
EncodeResult encode_patches(Tape& t, const ImageTensor& img, BackboneParams& p,
                            const BackboneConfig& cfg);

// channel-concatenate the selected cached layers and project back to C
Value fuse_layers(Tape& t, const EncodeResult& cached, BackboneParams& p,
                  const BackboneConfig& cfg);

// residual two-layer 3x3 conv map over the patch grid; identity when disabled
Value apply_adapter(Tape& t, Value v, BackboneParams& p, const BackboneConfig& cfg);

// full pipeline: encode -> fuse -> adapter
Value backbone_forward(Tape& t, const ImageTensor& img, BackboneParams& p,
                       const BackboneConfig& cfg);

// flattened patch rows, row-major over the patch grid
Mat patchify(const ImageTensor& img, int patch_size);

void collect_backbone_params(BackboneParams& p, const BackboneConfig& cfg,
                             std::vector<Param*>& encoder_group,
                             std::vector<Param*>& adapter_group);

}  // namespace incseg::vision
