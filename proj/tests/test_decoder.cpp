#include <doctest.h>

#include "incseg/decoder.hpp"
#include "testing_util.hpp"

using namespace incseg;
using ad::Mat;
using ad::Param;
using ad::Tape;
using ad::Value;
using fusion::DecoderConfig;
using testing::grad_check;
using testing::random_mat;
using testing::random_unit_rows;

TEST_CASE("decode: shape preservation, identity at init, determinism") {
  Rng rng(1);
  DecoderConfig cfg;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  auto params = fusion::make_decoder(cfg, 16, 5);

  Mat tmat = random_unit_rows(rng, 3, 16);
  Mat vmat = random_mat(rng, 6, 16);
  Tape t(false);
  auto out = fusion::decode(t, t.constant(tmat), t.constant(vmat), params, cfg);
  CHECK(t.val(out.text).rows() == 3);
  CHECK(t.val(out.patches).rows() == 6);
  CHECK(t.val(out.text).cols() == 16);

  // zero-initialized residual projections: identity at initialization
  CHECK((t.val(out.text) - tmat).cwiseAbs().maxCoeff() == 0.0);
  CHECK((t.val(out.patches) - vmat).cwiseAbs().maxCoeff() == 0.0);

  // determinism after perturbing weights away from identity
  params.blocks[0].o.w.value = random_mat(rng, 16, 16, 0.1);
  params.blocks[1].fc2.w.value = random_mat(rng, 32, 16, 0.1);
  Tape t1(false), t2(false);
  auto o1 = fusion::decode(t1, t1.constant(tmat), t1.constant(vmat), params, cfg);
  auto o2 = fusion::decode(t2, t2.constant(tmat), t2.constant(vmat), params, cfg);
  CHECK((t1.val(o1.text) - t2.val(o2.text)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((t1.val(o1.patches) - t2.val(o2.patches)).cwiseAbs().maxCoeff() == 0.0);
  // and the perturbed weights actually moved the output off the identity
  CHECK((t1.val(o1.patches) - vmat).cwiseAbs().maxCoeff() > 0.0);

  Mat wrong = random_mat(rng, 3, 8);
  Tape t3(false);
  CHECK_THROWS_AS(
      fusion::decode(t3, t3.constant(wrong), t3.constant(vmat), params, cfg),
      std::invalid_argument);
}

TEST_CASE("score_maps: orthogonality, bilinearity, naive matmul oracle") {
  Rng rng(2);
  Tape t(false);
  // t'_i orthogonal to all v' -> zero map
  Mat tm(1, 4);
  tm << 1, 0, 0, 0;
  Mat vm(3, 4);
  vm << 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1;
  Value s = fusion::score_maps(t, t.constant(tm), t.constant(vm));
  CHECK(t.val(s).cwiseAbs().maxCoeff() == 0.0);

  // doubling t doubles S
  Mat tr = random_mat(rng, 2, 5);
  Mat vr = random_mat(rng, 4, 5);
  Value s1 = fusion::score_maps(t, t.constant(tr), t.constant(vr));
  Value s2 = fusion::score_maps(t, t.constant(2.0 * tr), t.constant(vr));
  CHECK((t.val(s2) - 2.0 * t.val(s1)).cwiseAbs().maxCoeff() < 1e-12);

  // explicit double loop
  const Mat& sv = t.val(s1);
  for (int i = 0; i < 2; ++i)
    for (int m = 0; m < 4; ++m) {
      double acc = 0;
      for (int c = 0; c < 5; ++c) acc += tr(i, c) * vr(m, c);
      CHECK(sv(i, m) == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("fuse_background: degenerate max, hand case, dominance, monotonicity") {
  Tape t(false);
  Mat one(1, 3);
  one << 4, -1, 0;
  CHECK((t.val(fusion::fuse_background(t, t.constant(one), 1)) - one).cwiseAbs().maxCoeff() == 0.0);

  Mat two(2, 2);
  two << 1, 2, 3, 0;  // channels [[1,2],[3,0]] -> fused [3,2]
  const Mat fused = t.val(fusion::fuse_background(t, t.constant(two), 2));
  CHECK(fused(0, 0) == 3);
  CHECK(fused(0, 1) == 2);

  Rng rng(3);
  Mat random = random_mat(rng, 4, 7);
  const Mat f = t.val(fusion::fuse_background(t, t.constant(random), 4));
  for (int c = 0; c < 7; ++c)
    for (int r = 0; r < 4; ++r) CHECK(f(0, c) >= random(r, c));

  // monotone: raising any channel never lowers the fused value
  Mat bumped = random;
  bumped(2, 3) += 0.5;
  const Mat fb = t.val(fusion::fuse_background(t, t.constant(bumped), 4));
  for (int c = 0; c < 7; ++c) CHECK(fb(0, c) >= f(0, c) - 1e-15);

  CHECK_THROWS_AS(fusion::fuse_background(t, t.constant(two), 0), std::domain_error);
}

TEST_CASE("upsample_logits: constants, identity, channel independence") {
  Tape t(false);
  Value c = t.constant(Mat::Constant(2, 4, 1.25));
  const Mat up = t.val(fusion::upsample_logits(t, c, 2, 2, 8, 8));
  CHECK((up.array() == 1.25).all());

  Rng rng(4);
  Mat m = random_mat(rng, 3, 6);
  CHECK((t.val(fusion::upsample_logits(t, t.constant(m), 2, 3, 2, 3)) - m)
            .cwiseAbs()
            .maxCoeff() == 0.0);
  CHECK_THROWS_AS(fusion::upsample_logits(t, t.constant(m), 2, 3, 5, 6), std::invalid_argument);
}

TEST_CASE("argmax invariance under constant channel shifts") {
  Rng rng(5);
  Tape t(false);
  Mat logits = random_mat(rng, 5, 9);
  Mat shifted = logits.array() + 3.7;
  for (int c = 0; c < 9; ++c) {
    Eigen::Index a, b;
    logits.col(c).maxCoeff(&a);
    shifted.col(c).maxCoeff(&b);
    CHECK(a == b);
  }
}

TEST_CASE("end-to-end decode->score->fuse->upsample gradient check") {
  // 2 class slots (1 background + 1 foreground), 4 patches
  Rng rng(6);
  DecoderConfig cfg;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  auto params = fusion::make_decoder(cfg, 8, 21);
  // move off the zero-init point so gradients are nontrivial
  params.blocks[0].o.w.value = random_mat(rng, 8, 8, 0.2);
  params.blocks[0].fc2.w.value = random_mat(rng, 16, 8, 0.2);
  params.blocks[1].o.w.value = random_mat(rng, 8, 8, 0.2);

  Param text("text", random_unit_rows(rng, 2, 8));
  Param patches("patches", random_mat(rng, 4, 8));
  Mat probe = random_mat(rng, 2, 16);

  std::vector<Param*> checked{&text, &patches, &params.blocks[0].q.w, &params.blocks[1].fc1.w,
                              &params.blocks[0].o.w};
  auto res = grad_check([&](Tape& t) {
    auto dec = fusion::decode(t, t.param(text), t.param(patches), params, cfg);
    Value s = fusion::score_maps(t, dec.text, dec.patches);
    Value bkg = fusion::fuse_background(t, s, 1);
    std::vector<Value> rows{bkg, t.slice_rows(s, 1, 1)};
    Value fused = t.concat_rows(rows);
    Value up = fusion::upsample_logits(t, fused, 2, 2, 4, 4);
    return t.sum_all(t.mul(up, t.constant(probe)));
  }, checked, 1e-5, 16);
  INFO("max rel err ", res.max_rel_err);
  CHECK(res.max_rel_err < 1e-4);
}
