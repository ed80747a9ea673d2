#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "incseg/backbone.hpp"
#include "incseg/rng.hpp"

namespace incseg::data {

struct SampleRecord {
  std::string image_path;  // relative to corpus root
  std::string label_path;
  std::vector<int> classes;  // distinct non-background ids in the label map
  std::string split;         // "train" or "test"
};

struct Corpus {
  std::string root;
  std::vector<SampleRecord> records;
  std::map<int, std::string> class_names;

  std::vector<int> indices(const std::string& split) const;
};

enum class ShapeKind { kCircle, kSquare, kTriangle, kEllipse, kDiamond, kRing };

struct ShapesConfig {
  int num_classes = 6;
  int image_size = 64;
  int shapes_min = 1;
  int shapes_max = 3;
  double texture_noise = 0.06;   // background/foreground pixel noise amplitude
  double hue_spacing = 1.0;      // 1 = evenly spread hues; smaller values make classes confusable
  std::uint64_t assignment_seed = 7;  // class -> (shape, hue) assignment
};

struct ClassStyle {
  ShapeKind shape;
  double hue;  // degrees
  std::string name;
};

// deterministic class -> (shape, hue, name) assignment
std::vector<ClassStyle> class_styles(const ShapesConfig& cfg);

// One drawn shape instance; analytic containment is the rasterization rule.
struct ShapeInstance {
  int class_id;
  ShapeKind kind;
  double cx, cy, r;       // center and radius (half-extent)
  double aspect;          // ellipse y-compression
  double inner;           // ring inner radius fraction
};

bool shape_contains(const ShapeInstance& s, double px, double py);

struct RenderedSample {
  std::vector<std::uint8_t> rgb;
  std::vector<std::uint8_t> labels;
  std::vector<int> classes;
  std::vector<ShapeInstance> shapes;  // draw order; later shapes overdraw
};

RenderedSample render_sample(const ShapesConfig& cfg, const std::vector<ClassStyle>& styles,
                             Rng& rng);

// Renders images of colored shapes on a textured background and writes PNGs
// plus the manifest. Byte-deterministic per (cfg, seed).
Corpus generate_corpus(const ShapesConfig& cfg, int n_train, int n_test, std::uint64_t seed,
                       const std::string& out_dir);

Corpus load_corpus(const std::string& dir);

struct LoadedSample {
  vision::ImageTensor image;
  std::vector<int> labels;  // per-pixel class ids, 0 = background
};

// image scaled to [0,1] and bilinearly resized; labels nearest-neighbor
LoadedSample load_sample(const Corpus& corpus, const SampleRecord& record, int resolution);

// nearest-neighbor downsample of a full-resolution label map to a patch grid
std::vector<int> downsample_labels_nearest(const std::vector<int>& labels, int h, int w,
                                           int out_h, int out_w);

}  // namespace incseg::data
