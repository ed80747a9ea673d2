#include "incseg/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "incseg/png_io.hpp"
#include "incseg/rng.hpp"

namespace incseg::data {

namespace fs = std::filesystem;

std::vector<int> Corpus::indices(const std::string& split) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].split == split) out.push_back(static_cast<int>(i));
  return out;
}

namespace {

const char* shape_word(ShapeKind k) {
  switch (k) {
    case ShapeKind::kCircle: return "circle";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
    case ShapeKind::kEllipse: return "ellipse";
    case ShapeKind::kDiamond: return "diamond";
    case ShapeKind::kRing: return "ring";
  }
  return "shape";
}

const char* hue_word(double hue) {
  int h = static_cast<int>(std::fmod(std::fmod(hue, 360.0) + 360.0, 360.0));
  if (h < 20 || h >= 345) return "red";
  if (h < 45) return "orange";
  if (h < 70) return "yellow";
  if (h < 100) return "lime";
  if (h < 150) return "green";
  if (h < 190) return "teal";
  if (h < 225) return "cyan";
  if (h < 265) return "blue";
  if (h < 300) return "purple";
  return "pink";
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0) / 60.0;
  int i = static_cast<int>(h);
  double f = h - i;
  double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i % 6) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
}

}  // namespace

std::vector<ClassStyle> class_styles(const ShapesConfig& cfg) {
  if (cfg.num_classes < 2) throw std::domain_error("shapes: num_classes must be >= 2");
  constexpr ShapeKind kKinds[] = {ShapeKind::kCircle,  ShapeKind::kSquare, ShapeKind::kTriangle,
                                  ShapeKind::kEllipse, ShapeKind::kDiamond, ShapeKind::kRing};
  Rng rng(derive_seed(cfg.assignment_seed, "shapes.assignment"));
  double hue0 = rng.uniform(0.0, 360.0);
  std::vector<ClassStyle> styles;
  std::set<std::string> used;
  for (int c = 0; c < cfg.num_classes; ++c) {
    ClassStyle s;
    s.shape = kKinds[c % 6];
    s.hue = hue0 + cfg.hue_spacing * 360.0 * c / cfg.num_classes;
    std::string base = std::string(hue_word(s.hue)) + " " + shape_word(s.shape);
    std::string name = base;
    int suffix = 2;
    while (used.count(name)) name = base + " " + std::to_string(suffix++);
    used.insert(name);
    s.name = name;
    styles.push_back(s);
  }
  return styles;
}

bool shape_contains(const ShapeInstance& s, double px, double py) {
  double dx = px - s.cx, dy = py - s.cy;
  switch (s.kind) {
    case ShapeKind::kCircle:
      return dx * dx + dy * dy <= s.r * s.r;
    case ShapeKind::kSquare:
      return std::abs(dx) <= s.r && std::abs(dy) <= s.r;
    case ShapeKind::kTriangle: {
      // upright isoceles triangle: apex at (cx, cy - r), base at cy + r
      double x0 = s.cx, y0 = s.cy - s.r;
      double x1 = s.cx - s.r, y1 = s.cy + s.r;
      double x2 = s.cx + s.r, y2 = s.cy + s.r;
      auto side = [&](double ax, double ay, double bx, double by) {
        return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
      };
      double d0 = side(x0, y0, x1, y1), d1 = side(x1, y1, x2, y2), d2 = side(x2, y2, x0, y0);
      bool neg = (d0 < 0) || (d1 < 0) || (d2 < 0);
      bool pos = (d0 > 0) || (d1 > 0) || (d2 > 0);
      return !(neg && pos);
    }
    case ShapeKind::kEllipse: {
      double ry = s.r * s.aspect;
      return (dx * dx) / (s.r * s.r) + (dy * dy) / (ry * ry) <= 1.0;
    }
    case ShapeKind::kDiamond:
      return std::abs(dx) + std::abs(dy) <= s.r;
    case ShapeKind::kRing: {
      double d2 = dx * dx + dy * dy;
      double rin = s.r * s.inner;
      return d2 <= s.r * s.r && d2 >= rin * rin;
    }
  }
  return false;
}

RenderedSample render_sample(const ShapesConfig& cfg, const std::vector<ClassStyle>& styles,
                             Rng& rng) {
  const int n = cfg.image_size;
  RenderedSample out;
  out.rgb.assign(static_cast<std::size_t>(n) * n * 3, 0);
  out.labels.assign(static_cast<std::size_t>(n) * n, 0);

  // textured background: low-frequency ramp + per-pixel noise around gray
  double ramp_ax = rng.uniform(-0.06, 0.06), ramp_ay = rng.uniform(-0.06, 0.06);
  double base = rng.uniform(0.30, 0.45);

  int count = cfg.shapes_min + static_cast<int>(rng.below(
                  static_cast<std::uint64_t>(cfg.shapes_max - cfg.shapes_min + 1)));
  std::vector<ShapeInstance> shapes;
  std::vector<double> hues, sats, vals;
  for (int k = 0; k < count; ++k) {
    int cls = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.num_classes)));
    const ClassStyle& st = styles[static_cast<std::size_t>(cls - 1)];
    ShapeInstance si;
    si.class_id = cls;
    si.kind = st.shape;
    si.r = rng.uniform(0.16, 0.30) * n;
    si.cx = rng.uniform(si.r * 0.9, n - si.r * 0.9);
    si.cy = rng.uniform(si.r * 0.9, n - si.r * 0.9);
    si.aspect = rng.uniform(0.55, 0.8);
    si.inner = rng.uniform(0.35, 0.55);
    shapes.push_back(si);
    hues.push_back(st.hue + rng.uniform(-8.0, 8.0));
    sats.push_back(rng.uniform(0.7, 0.9));
    vals.push_back(rng.uniform(0.7, 0.9));
  }

  std::set<int> present;
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double px = x + 0.5, py = y + 0.5;
      int winner = -1;
      for (int k = static_cast<int>(shapes.size()) - 1; k >= 0; --k)
        if (shape_contains(shapes[static_cast<std::size_t>(k)], px, py)) {
          winner = k;  // later shapes overdraw earlier ones
          break;
        }
      double r, g, b;
      if (winner < 0) {
        double v = base + ramp_ax * (px - n / 2.0) / n + ramp_ay * (py - n / 2.0) / n +
                   rng.uniform(-cfg.texture_noise, cfg.texture_noise);
        r = g = b = v;
      } else {
        const auto k = static_cast<std::size_t>(winner);
        hsv_to_rgb(hues[k], sats[k], vals[k], r, g, b);
        double jitter = rng.uniform(-cfg.texture_noise, cfg.texture_noise) * 0.5;
        r += jitter;
        g += jitter;
        b += jitter;
        int cls = shapes[k].class_id;
        out.labels[static_cast<std::size_t>(y) * n + x] = static_cast<std::uint8_t>(cls);
        present.insert(cls);
      }
      std::size_t o = (static_cast<std::size_t>(y) * n + x) * 3;
      out.rgb[o] = to_byte(r);
      out.rgb[o + 1] = to_byte(g);
      out.rgb[o + 2] = to_byte(b);
    }
  out.classes.assign(present.begin(), present.end());
  out.shapes = shapes;
  return out;
}

Corpus generate_corpus(const ShapesConfig& cfg, int n_train, int n_test, std::uint64_t seed,
                       const std::string& out_dir) {
  if (cfg.num_classes < 2) throw std::domain_error("generate_corpus: num_classes must be >= 2");
  if (cfg.shapes_min < 1 || cfg.shapes_max < cfg.shapes_min)
    throw std::domain_error("generate_corpus: bad shapes-per-image range");
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  fs::create_directories(fs::path(out_dir) / "labels", ec);
  if (!fs::exists(fs::path(out_dir) / "images"))
    throw std::runtime_error("generate_corpus: cannot create output directory " + out_dir);

  auto styles = class_styles(cfg);
  Corpus corpus;
  corpus.root = out_dir;
  for (int c = 0; c < cfg.num_classes; ++c)
    corpus.class_names[c + 1] = styles[static_cast<std::size_t>(c)].name;

  auto emit = [&](const std::string& split, int index) {
    // per-sample derived stream: parallel generation stays deterministic
    Rng rng(derive_seed(seed, "sample." + split + "." + std::to_string(index)));
    RenderedSample r = render_sample(cfg, styles, rng);
    int guard = 0;
    while (r.classes.empty() && ++guard < 64) r = render_sample(cfg, styles, rng);
    if (r.classes.empty())
      throw std::runtime_error("generate_corpus: could not render a foreground shape");
    char img_name[64], lab_name[64];
    std::snprintf(img_name, sizeof img_name, "images/%s_%05d.png", split.c_str(), index);
    std::snprintf(lab_name, sizeof lab_name, "labels/%s_%05d.png", split.c_str(), index);
    write_png((fs::path(out_dir) / img_name).string(), cfg.image_size, cfg.image_size, 3, r.rgb);
    write_png((fs::path(out_dir) / lab_name).string(), cfg.image_size, cfg.image_size, 1, r.labels);
    SampleRecord rec;
    rec.image_path = img_name;
    rec.label_path = lab_name;
    rec.classes = r.classes;
    rec.split = split;
    corpus.records.push_back(std::move(rec));
  };

  for (int i = 0; i < n_train; ++i) emit("train", i);
  for (int i = 0; i < n_test; ++i) emit("test", i);

  std::ofstream manifest(fs::path(out_dir) / "manifest.tsv");
  if (!manifest) throw std::runtime_error("generate_corpus: cannot write manifest");
  for (const auto& r : corpus.records) {
    manifest << r.image_path << '\t' << r.label_path << '\t';
    for (std::size_t i = 0; i < r.classes.size(); ++i)
      manifest << (i ? "," : "") << r.classes[i];
    manifest << '\t' << r.split << '\n';
  }
  std::ofstream classes(fs::path(out_dir) / "classes.txt");
  for (const auto& [id, name] : corpus.class_names) classes << id << '\t' << name << '\n';
  return corpus;
}

Corpus load_corpus(const std::string& dir) {
  std::ifstream manifest(fs::path(dir) / "manifest.tsv");
  if (!manifest) throw std::runtime_error("load_corpus: no manifest.tsv in " + dir);
  Corpus corpus;
  corpus.root = dir;
  std::string line;
  int line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    SampleRecord rec;
    std::string classes_field;
    if (!std::getline(ss, rec.image_path, '\t') || !std::getline(ss, rec.label_path, '\t') ||
        !std::getline(ss, classes_field, '\t') || !std::getline(ss, rec.split))
      throw std::runtime_error("load_corpus: malformed manifest line " + std::to_string(line_no));
    std::stringstream cs(classes_field);
    std::string tok;
    while (std::getline(cs, tok, ','))
      if (!tok.empty()) rec.classes.push_back(std::stoi(tok));
    corpus.records.push_back(std::move(rec));
  }
  std::ifstream classes(fs::path(dir) / "classes.txt");
  if (classes) {
    while (std::getline(classes, line)) {
      if (line.empty()) continue;
      auto tab = line.find('\t');
      if (tab == std::string::npos)
        throw std::runtime_error("load_corpus: malformed classes.txt line");
      corpus.class_names[std::stoi(line.substr(0, tab))] = line.substr(tab + 1);
    }
  } else {
    // ingestion path without names: synthesize stable ones
    std::set<int> ids;
    for (const auto& r : corpus.records) ids.insert(r.classes.begin(), r.classes.end());
    for (int id : ids) corpus.class_names[id] = "class " + std::to_string(id);
  }
  return corpus;
}

LoadedSample load_sample(const Corpus& corpus, const SampleRecord& record, int resolution) {
  PngImage img = read_png((fs::path(corpus.root) / record.image_path).string());
  if (img.channels != 3)
    throw std::runtime_error("load_sample: expected 3-channel image: " + record.image_path);
  PngImage lab = read_png((fs::path(corpus.root) / record.label_path).string());
  if (lab.channels != 1)
    throw std::runtime_error("load_sample: expected single-channel label map: " + record.label_path);
  if (lab.w != img.w || lab.h != img.h)
    throw std::runtime_error("load_sample: image/label shape mismatch: " + record.image_path);

  {  // manifest consistency check
    std::set<int> seen;
    for (auto v : lab.pixels)
      if (v != 0) seen.insert(static_cast<int>(v));
    std::set<int> declared(record.classes.begin(), record.classes.end());
    if (seen != declared)
      throw std::runtime_error("load_sample: label content disagrees with manifest: " +
                               record.label_path);
  }

  LoadedSample out;
  out.image = vision::ImageTensor(resolution, resolution);
  out.labels.assign(static_cast<std::size_t>(resolution) * resolution, 0);
  const double sy = static_cast<double>(img.h) / resolution;
  const double sx = static_cast<double>(img.w) / resolution;
  for (int y = 0; y < resolution; ++y)
    for (int x = 0; x < resolution; ++x) {
      // bilinear image resize (identity when shapes already match)
      double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.h - 1));
      double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.w - 1));
      int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
      int y1 = std::min(y0 + 1, img.h - 1), x1 = std::min(x0 + 1, img.w - 1);
      double wy = fy - y0, wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        auto px = [&](int yy, int xx) {
          return img.pixels[(static_cast<std::size_t>(yy) * img.w + xx) * 3 + c] / 255.0;
        };
        out.image.at(y, x, c) = (1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x1)) +
                                wy * ((1 - wx) * px(y1, x0) + wx * px(y1, x1));
      }
      int ny = std::min(static_cast<int>((y + 0.5) * sy), lab.h - 1);
      int nx = std::min(static_cast<int>((x + 0.5) * sx), lab.w - 1);
      out.labels[static_cast<std::size_t>(y) * resolution + x] =
          static_cast<int>(lab.pixels[static_cast<std::size_t>(ny) * lab.w + nx]);
    }
  return out;
}

std::vector<int> downsample_labels_nearest(const std::vector<int>& labels, int h, int w,
                                           int out_h, int out_w) {
  if (static_cast<int>(labels.size()) != h * w)
    throw std::invalid_argument("downsample_labels_nearest: size mismatch");
  std::vector<int> out(static_cast<std::size_t>(out_h) * out_w);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      int sy = std::min(static_cast<int>((y + 0.5) * h / out_h), h - 1);
      int sx = std::min(static_cast<int>((x + 0.5) * w / out_w), w - 1);
      out[static_cast<std::size_t>(y) * out_w + x] = labels[static_cast<std::size_t>(sy) * w + sx];
    }
  return out;
}

}  // namespace incseg::data
