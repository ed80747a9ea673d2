#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "incseg/metrics.hpp"
#include "incseg/rng.hpp"
#include "testing_util.hpp"

using namespace incseg;
namespace fs = std::filesystem;

TEST_CASE("confusion: diagonal, single error, tally oracle, integer conservation") {
  std::vector<int> same{0, 1, 2, 1, 0};
  auto cm = metrics::confusion(same, same, 2);
  CHECK(cm.counts(0, 0) == 2);
  CHECK(cm.counts(1, 1) == 2);
  CHECK(cm.counts(2, 2) == 1);
  CHECK(cm.counts(0, 1) == 0);

  auto single = metrics::confusion({0}, {1}, 1);  // gt=1 predicted 0
  CHECK(single.counts(1, 0) == 1);

  Rng rng(3);
  std::vector<int> preds(16), gts(16);
  for (auto& v : preds) v = static_cast<int>(rng.below(4));
  for (auto& v : gts) v = static_cast<int>(rng.below(4));
  auto big = metrics::confusion(preds, gts, 3);
  long long tally[4][4] = {};
  for (int i = 0; i < 16; ++i) ++tally[gts[static_cast<std::size_t>(i)]][preds[static_cast<std::size_t>(i)]];
  for (int g = 0; g < 4; ++g)
    for (int p = 0; p < 4; ++p) CHECK(big.counts(g, p) == tally[g][p]);
  CHECK(big.total() == 16);

  CHECK_THROWS_AS(metrics::confusion({5}, {0}, 3), std::domain_error);
}

TEST_CASE("miou: perfect prediction, handcrafted oracle, exclusion rule") {
  metrics::ConfusionMatrix diag(4);
  diag.counts.setZero();
  for (int i = 0; i < 4; ++i) diag.counts(i, i) = 10;
  auto rep = metrics::miou(diag, {1, 2}, {3});
  CHECK(rep.base_miou == doctest::Approx(1.0));
  CHECK(rep.new_miou == doctest::Approx(1.0));
  CHECK(rep.all_miou == doctest::Approx(1.0));
  CHECK(rep.harmonic_mean == doctest::Approx(1.0));

  // handcrafted 3-class (+bkg) matrix: per-class TP/FP/FN arithmetic by hand
  metrics::ConfusionMatrix cm(4);
  cm.counts << 50, 2, 3, 0,
               4, 20, 1, 0,
               0, 5, 15, 0,
               0, 0, 0, 0;  // class 3 absent everywhere
  // class 0: TP=50 FP=4 FN=5 -> 50/59
  // class 1: TP=20 FP=7 FN=5 -> 20/32
  // class 2: TP=15 FP=4 FN=5 -> 15/24
  auto r = metrics::miou(cm, {1}, {2, 3});
  CHECK(r.per_class_iou.at(0) == doctest::Approx(50.0 / 59.0));
  CHECK(r.per_class_iou.at(1) == doctest::Approx(20.0 / 32.0));
  CHECK(r.per_class_iou.at(2) == doctest::Approx(15.0 / 24.0));
  CHECK(r.per_class_iou.count(3) == 0);  // zero union: excluded, not zero
  CHECK(std::find(r.excluded.begin(), r.excluded.end(), 3) != r.excluded.end());
  CHECK(r.base_miou == doctest::Approx(20.0 / 32.0));
  CHECK(r.new_miou == doctest::Approx(15.0 / 24.0));  // class 3 dropped from the mean
  CHECK(r.all_miou == doctest::Approx((50.0 / 59.0 + 20.0 / 32.0 + 15.0 / 24.0) / 3.0));

  metrics::ConfusionMatrix empty(3);
  CHECK_THROWS_AS(metrics::miou(empty, {1}, {2}), std::domain_error);
}

TEST_CASE("miou is invariant under matched row+column permutation") {
  Rng rng(9);
  metrics::ConfusionMatrix cm(4);
  for (int g = 0; g < 4; ++g)
    for (int p = 0; p < 4; ++p) cm.counts(g, p) = static_cast<long long>(rng.below(30));
  auto base = metrics::miou(cm, {1, 2}, {3});

  // swap classes 1 and 3 in both axes and in the groups
  metrics::ConfusionMatrix perm(4);
  std::vector<int> map{0, 3, 2, 1};
  for (int g = 0; g < 4; ++g)
    for (int p = 0; p < 4; ++p)
      perm.counts(map[static_cast<std::size_t>(g)], map[static_cast<std::size_t>(p)]) =
          cm.counts(g, p);
  auto permuted = metrics::miou(perm, {3, 2}, {1});
  CHECK(permuted.base_miou == doctest::Approx(base.base_miou).epsilon(1e-12));
  CHECK(permuted.new_miou == doctest::Approx(base.new_miou).epsilon(1e-12));
  CHECK(permuted.all_miou == doctest::Approx(base.all_miou).epsilon(1e-12));
}

TEST_CASE("harmonic mean: reported values, identities, bound") {
  CHECK(metrics::harmonic(80.9, 64.9) == doctest::Approx(72.0).epsilon(0.0007));
  CHECK(metrics::harmonic(79.6, 59.6) == doctest::Approx(68.2).epsilon(0.0008));
  CHECK(metrics::harmonic(42.0, 42.0) == doctest::Approx(42.0));
  CHECK(metrics::harmonic(0.0, 0.0) == 0.0);
  CHECK_THROWS_AS(metrics::harmonic(-1.0, 5.0), std::domain_error);

  Rng rng(11);
  for (int i = 0; i < 50; ++i) {
    double a = rng.uniform(0, 100), b = rng.uniform(0, 100);
    double h = metrics::harmonic(a, b);
    CHECK(h <= (a + b) / 2.0 + 1e-12);
    if (std::abs(a - b) > 1e-9) CHECK(h < (a + b) / 2.0);
  }
}

TEST_CASE("pca projection: collinear points collapse to one axis") {
  std::vector<Eigen::VectorXd> pts;
  Eigen::VectorXd dir(5);
  dir << 1, 2, -1, 0.5, 3;
  for (double s : {-2.0, 0.5, 4.0}) pts.push_back(s * dir);
  auto proj = metrics::pca_project_2d(pts);
  REQUIRE(proj.rows() == 3);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(proj(i, 1)) < 1e-9);  // second component ~ 0
  // first components spread out
  CHECK(std::abs(proj(0, 0) - proj(2, 0)) > 1.0);
}

TEST_CASE("emit_reports writes deterministic files") {
  auto dir = fs::temp_directory_path() / "incseg_reports";
  fs::remove_all(dir);
  metrics::ConfusionMatrix cm(3);
  cm.counts << 5, 1, 0, 0, 7, 1, 0, 0, 9;
  auto rep = metrics::miou(cm, {1}, {2});
  std::vector<metrics::EmbeddingPoint> em;
  Rng rng(13);
  for (int c = 1; c <= 2; ++c) {
    Eigen::VectorXd v = testing::random_mat(rng, 6, 1);
    em.push_back({c, "embedding", v});
    em.push_back({c, "template", v * 0.9});
  }
  std::vector<metrics::ComponentParams> params{{"encoder", 100, 100}, {"prompts", 16, 32}};
  auto files = metrics::emit_reports(dir.string(), 2, cm, rep, em, params);

  auto read = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  std::string a = read(files.metrics_csv) + read(files.confusion_csv) +
                  read(files.projection_csv) + read(files.params_csv);
  CHECK(a.find("harmonic") != std::string::npos);
  CHECK(a.find("gt\\pred,0,1,2") != std::string::npos);
  CHECK(a.find("class_id,kind,x,y") != std::string::npos);
  CHECK(a.find("prompts,16,32") != std::string::npos);

  // re-emission from identical state is byte-identical
  auto files2 = metrics::emit_reports(dir.string(), 2, cm, rep, em, params);
  std::string b = read(files2.metrics_csv) + read(files2.confusion_csv) +
                  read(files2.projection_csv) + read(files2.params_csv);
  CHECK(a == b);
  fs::remove_all(dir);
}
