#include <doctest.h>

#include "incseg/backbone.hpp"
#include "testing_util.hpp"

using namespace incseg;
using ad::Mat;
using ad::Param;
using ad::Tape;
using ad::Value;
using vision::BackboneConfig;
using vision::ImageTensor;
using testing::grad_check;
using testing::random_mat;

namespace {

ImageTensor random_image(Rng& rng, int n) {
  ImageTensor img(n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = rng.uniform();
  return img;
}

BackboneConfig tiny_config() {
  BackboneConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 8;
  cfg.depth = 2;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.fuse_layers = {1, 2};
  return cfg;
}

}  // namespace

TEST_CASE("patchify shapes and content") {
  Rng rng(1);
  ImageTensor img = random_image(rng, 64);
  Mat p = vision::patchify(img, 8);
  CHECK(p.rows() == 64);  // 64x64, patch 8 -> 8x8 grid
  CHECK(p.cols() == 8 * 8 * 3);
  // first element of patch (1,2) is pixel (8, 16) channel 0
  CHECK(p(1 * 8 + 2, 0) == img.at(8, 16, 0));
  ImageTensor odd(60, 60);
  CHECK_THROWS_AS(vision::patchify(odd, 8), std::domain_error);
}

TEST_CASE("encode_patches: shape, determinism, mode effect") {
  Rng rng(2);
  BackboneConfig cfg;
  cfg.image_size = 64;
  cfg.patch_size = 8;
  cfg.depth = 4;
  cfg.dim = 64;
  cfg.heads = 4;
  auto params = vision::make_backbone(cfg, 7);
  ImageTensor img = random_image(rng, 64);

  Tape t(false);
  auto enc = vision::encode_patches(t, img, params, cfg);
  CHECK(enc.layers.size() == 4);
  CHECK(t.val(enc.final_layer).rows() == 64);
  CHECK(t.val(enc.final_layer).cols() == 64);

  // deterministic under fixed weights
  Tape t2(false);
  auto enc2 = vision::encode_patches(t2, img, params, cfg);
  CHECK((t.val(enc.final_layer) - t2.val(enc2.final_layer)).cwiseAbs().maxCoeff() == 0.0);

  // standard final layer differs from the v-v surgery
  BackboneConfig std_cfg = cfg;
  std_cfg.last_layer_mode = vision::LastLayerMode::kStandard;
  auto std_params = vision::make_backbone(std_cfg, 7);
  Tape t3(false);
  auto enc3 = vision::encode_patches(t3, img, std_params, std_cfg);
  CHECK((t.val(enc.final_layer) - t3.val(enc3.final_layer)).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("fuse_layers: projection contract and singleton fusion") {
  Rng rng(3);
  BackboneConfig cfg = tiny_config();
  auto params = vision::make_backbone(cfg, 11);
  ImageTensor img = random_image(rng, cfg.image_size);

  Tape t(false);
  auto enc = vision::encode_patches(t, img, params, cfg);
  Value fused = vision::fuse_layers(t, enc, params, cfg);
  CHECK(t.val(fused).cols() == cfg.dim);

  // singleton fusion equals a plain projection of the final layer
  BackboneConfig single = cfg;
  single.fuse_layers = {2};
  auto sp = vision::make_backbone(single, 11);
  Tape t2(false);
  auto enc2 = vision::encode_patches(t2, img, sp, single);
  Value f2 = vision::fuse_layers(t2, enc2, sp, single);
  Mat manual = t2.val(enc2.final_layer) * sp.fuse_proj.w.value;
  manual.rowwise() += sp.fuse_proj.b.value.row(0);
  CHECK((t2.val(f2) - manual).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(t2.val(f2).cols() == cfg.dim);
}

TEST_CASE("apply_adapter: identity off, identity at zero-init, parameters counted") {
  Rng rng(4);
  BackboneConfig cfg = tiny_config();
  cfg.adapter_enabled = false;
  auto params = vision::make_backbone(cfg, 13);
  Tape t(false);
  Value v = t.constant(random_mat(rng, 4, cfg.dim));
  Value out = vision::apply_adapter(t, v, params, cfg);
  CHECK(out.id == v.id);  // disabled adapter is a true no-op

  cfg.adapter_enabled = true;
  auto params2 = vision::make_backbone(cfg, 13);
  Tape t2(false);
  Value v2 = t2.constant(random_mat(rng, 4, cfg.dim));
  Value out2 = vision::apply_adapter(t2, v2, params2, cfg);
  // second conv is zero-initialized, residual passes through exactly
  CHECK((t2.val(out2) - t2.val(v2)).cwiseAbs().maxCoeff() == 0.0);

  std::vector<Param*> enc_group, ada_group;
  vision::collect_backbone_params(params2, cfg, enc_group, ada_group);
  long long adapter_params = 0;
  for (auto* p : ada_group) adapter_params += p->size();
  CHECK(adapter_params > 0);
}

TEST_CASE("permutation equivariance under patch translation (zero positions, no adapter)") {
  Rng rng(5);
  BackboneConfig cfg = tiny_config();
  cfg.image_size = 32;  // 4x4 patch grid
  cfg.adapter_enabled = false;
  auto params = vision::make_backbone(cfg, 17);
  params.pos.value.setZero();

  ImageTensor img = random_image(rng, 32);
  // img2 = img cyclically translated by one patch row
  ImageTensor img2(32, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      for (int c = 0; c < 3; ++c) img2.at((y + 8) % 32, x, c) = img.at(y, x, c);

  Tape t(false);
  Value f1 = vision::backbone_forward(t, img, params, cfg);
  Value f2 = vision::backbone_forward(t, img2, params, cfg);
  const Mat& a = t.val(f1);
  const Mat& b = t.val(f2);
  const int gw = 4;
  for (int row = 0; row < 16; ++row) {
    int shifted = ((row / gw + 1) % 4) * gw + row % gw;
    CHECK((a.row(row) - b.row(shifted)).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("backbone gradient matches finite differences on sampled weights") {
  Rng rng(6);
  BackboneConfig cfg = tiny_config();
  auto params = vision::make_backbone(cfg, 19);
  ImageTensor img = random_image(rng, cfg.image_size);
  Mat probe = random_mat(rng, cfg.patches(), cfg.dim);

  std::vector<Param*> enc_group, ada_group;
  vision::collect_backbone_params(params, cfg, enc_group, ada_group);
  std::vector<Param*> sampled = {&params.patch_embed.w, &params.pos,
                                 &params.blocks[0].q.w, &params.blocks[0].fc1.w,
                                 &params.vv.v.w,        &params.fuse_proj.w,
                                 &params.adapter_w1,    &params.adapter_w2};
  auto res = grad_check([&](Tape& t) {
    return t.sum_all(t.mul(vision::backbone_forward(t, img, params, cfg), t.constant(probe)));
  }, sampled, 1e-5, 12);
  INFO("max rel err ", res.max_rel_err);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("config validation errors") {
  BackboneConfig cfg = tiny_config();
  cfg.image_size = 30;
  CHECK_THROWS_AS(cfg.validate(), std::domain_error);
  cfg = tiny_config();
  cfg.fuse_layers = {5};
  CHECK_THROWS_AS(cfg.validate(), std::domain_error);
  cfg = tiny_config();
  cfg.fuse_layers = {};
  CHECK_THROWS_AS(cfg.validate(), std::domain_error);
  cfg = tiny_config();
  cfg.trainable = {};
  CHECK_THROWS_AS(cfg.validate(), std::domain_error);
}
