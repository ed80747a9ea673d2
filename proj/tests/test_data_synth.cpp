#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "incseg/data_synth.hpp"
#include "incseg/png_io.hpp"
#include "incseg/rng.hpp"

using namespace incseg;
namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// independent containment check: ray casting for the polygonal shapes,
// analytic only for the curved ones
bool oracle_contains(const data::ShapeInstance& s, double px, double py) {
  using data::ShapeKind;
  auto in_polygon = [&](const std::vector<std::pair<double, double>>& poly) {
    bool inside = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
      auto [xi, yi] = poly[i];
      auto [xj, yj] = poly[j];
      bool crosses = (yi > py) != (yj > py);
      if (crosses && px < (xj - xi) * (py - yi) / (yj - yi) + xi) inside = !inside;
    }
    return inside;
  };
  double dx = px - s.cx, dy = py - s.cy;
  switch (s.kind) {
    case ShapeKind::kCircle:
      return dx * dx + dy * dy <= s.r * s.r;
    case ShapeKind::kSquare:
      return in_polygon({{s.cx - s.r, s.cy - s.r},
                         {s.cx + s.r, s.cy - s.r},
                         {s.cx + s.r, s.cy + s.r},
                         {s.cx - s.r, s.cy + s.r}});
    case ShapeKind::kTriangle:
      return in_polygon({{s.cx, s.cy - s.r}, {s.cx - s.r, s.cy + s.r}, {s.cx + s.r, s.cy + s.r}});
    case ShapeKind::kDiamond:
      return in_polygon({{s.cx, s.cy - s.r}, {s.cx + s.r, s.cy}, {s.cx, s.cy + s.r},
                         {s.cx - s.r, s.cy}});
    case ShapeKind::kEllipse: {
      double ry = s.r * s.aspect;
      return dx * dx / (s.r * s.r) + dy * dy / (ry * ry) <= 1.0;
    }
    case ShapeKind::kRing: {
      double d2 = dx * dx + dy * dy;
      return d2 <= s.r * s.r && d2 >= s.r * s.inner * s.r * s.inner;
    }
  }
  return false;
}

}  // namespace

TEST_CASE("class styles are deterministic with unique names") {
  data::ShapesConfig cfg;
  cfg.num_classes = 12;
  auto a = data::class_styles(cfg);
  auto b = data::class_styles(cfg);
  REQUIRE(a.size() == 12);
  std::set<std::string> names;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(a[i].hue == b[i].hue);
    names.insert(a[i].name);
  }
  CHECK(names.size() == 12);  // deduplicated even under hue collisions
}

TEST_CASE("rendered labels match a point-in-polygon recount") {
  data::ShapesConfig cfg;
  cfg.num_classes = 6;
  cfg.image_size = 64;
  cfg.shapes_max = 3;
  auto styles = data::class_styles(cfg);
  for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull}) {
    Rng rng(seed);
    auto r = data::render_sample(cfg, styles, rng);
    std::map<int, int> histogram, recount;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        ++histogram[r.labels[static_cast<std::size_t>(y) * 64 + x]];
        int winner = 0;
        for (int k = static_cast<int>(r.shapes.size()) - 1; k >= 0; --k)
          if (oracle_contains(r.shapes[static_cast<std::size_t>(k)], x + 0.5, y + 0.5)) {
            winner = r.shapes[static_cast<std::size_t>(k)].class_id;
            break;
          }
        ++recount[winner];
      }
    CHECK(histogram == recount);
    // contained-class list equals the distinct non-background labels
    std::set<int> distinct;
    for (auto v : r.labels)
      if (v) distinct.insert(v);
    CHECK(std::set<int>(r.classes.begin(), r.classes.end()) == distinct);
  }
}

TEST_CASE("generate_corpus: determinism, manifest contract, round trip") {
  data::ShapesConfig cfg;
  cfg.num_classes = 4;
  cfg.image_size = 32;
  TempDir d1("incseg_corpus_a"), d2("incseg_corpus_b");
  auto c1 = data::generate_corpus(cfg, 6, 3, 99, d1.path.string());
  auto c2 = data::generate_corpus(cfg, 6, 3, 99, d2.path.string());

  CHECK(read_file((d1.path / "manifest.tsv").string()) ==
        read_file((d2.path / "manifest.tsv").string()));
  CHECK(read_file((d1.path / c1.records[0].image_path).string()) ==
        read_file((d2.path / c2.records[0].image_path).string()));
  CHECK(read_file((d1.path / c1.records[5].label_path).string()) ==
        read_file((d2.path / c2.records[5].label_path).string()));

  REQUIRE(c1.records.size() == 9);
  std::set<std::string> train_paths, test_paths;
  for (const auto& r : c1.records) {
    CHECK(!r.classes.empty());  // every record contains at least one foreground class
    (r.split == "train" ? train_paths : test_paths).insert(r.image_path);
  }
  CHECK(train_paths.size() == 6);
  CHECK(test_paths.size() == 3);
  for (const auto& p : train_paths) CHECK(test_paths.count(p) == 0);

  // manifest class-presence equals an exhaustive rescan of each label file
  for (const auto& r : c1.records) {
    auto png = data::read_png((d1.path / r.label_path).string());
    std::set<int> seen;
    for (auto v : png.pixels)
      if (v) seen.insert(static_cast<int>(v));
    CHECK(seen == std::set<int>(r.classes.begin(), r.classes.end()));
  }

  // reload from disk and fetch one sample losslessly
  auto loaded = data::load_corpus(d1.path.string());
  CHECK(loaded.records.size() == c1.records.size());
  CHECK(loaded.class_names == c1.class_names);
  auto sample = data::load_sample(loaded, loaded.records[0], 32);
  auto png = data::read_png((d1.path / loaded.records[0].label_path).string());
  for (std::size_t i = 0; i < sample.labels.size(); ++i)
    CHECK(sample.labels[i] == static_cast<int>(png.pixels[i]));  // identity resize keeps labels

  // image values live in [0,1]
  for (double v : sample.image.rgb) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("load_sample rejects grayscale images and manifest mismatch") {
  TempDir d("incseg_badcorpus");
  fs::create_directories(d.path / "images");
  fs::create_directories(d.path / "labels");
  std::vector<std::uint8_t> gray(16 * 16, 100);
  data::write_png((d.path / "images/x.png").string(), 16, 16, 1, gray);
  std::vector<std::uint8_t> lab(16 * 16, 0);
  lab[0] = 2;
  data::write_png((d.path / "labels/x.png").string(), 16, 16, 1, lab);
  {
    std::ofstream m(d.path / "manifest.tsv");
    m << "images/x.png\tlabels/x.png\t2\ttrain\n";
  }
  auto corpus = data::load_corpus(d.path.string());
  CHECK_THROWS_AS(data::load_sample(corpus, corpus.records[0], 16), std::runtime_error);

  // fix the image but corrupt the manifest class list
  std::vector<std::uint8_t> rgb(16 * 16 * 3, 100);
  data::write_png((d.path / "images/x.png").string(), 16, 16, 3, rgb);
  {
    std::ofstream m(d.path / "manifest.tsv");
    m << "images/x.png\tlabels/x.png\t2,3\ttrain\n";
  }
  corpus = data::load_corpus(d.path.string());
  CHECK_THROWS_AS(data::load_sample(corpus, corpus.records[0], 16), std::runtime_error);
}

TEST_CASE("nearest-neighbor label downsample") {
  std::vector<int> labels(16, 0);
  // 4x4 grid with class 3 occupying the bottom-right 2x2
  labels[10] = labels[11] = labels[14] = labels[15] = 3;
  auto down = data::downsample_labels_nearest(labels, 4, 4, 2, 2);
  CHECK(down == std::vector<int>{0, 0, 0, 3});
  CHECK_THROWS_AS(data::downsample_labels_nearest(labels, 3, 4, 2, 2), std::invalid_argument);
}

TEST_CASE("png round trip") {
  TempDir d("incseg_png");
  std::vector<std::uint8_t> rgb(8 * 6 * 3);
  Rng rng(5);
  for (auto& v : rgb) v = static_cast<std::uint8_t>(rng.below(256));
  data::write_png((d.path / "t.png").string(), 8, 6, 3, rgb);
  auto img = data::read_png((d.path / "t.png").string());
  CHECK(img.w == 8);
  CHECK(img.h == 6);
  CHECK(img.channels == 3);
  CHECK(img.pixels == rgb);
  CHECK_THROWS_AS(data::read_png((d.path / "missing.png").string()), std::runtime_error);
}
