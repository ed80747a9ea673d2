#include "incseg/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace incseg {

namespace {

constexpr char kMagic[4] = {'I', 'S', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f64(double v) { raw(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }
  void raw(const void* p, std::size_t n) {
    buf_.append(static_cast<const char*>(p), n);
  }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : buf_(std::move(bytes)) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
  std::uint32_t u32() {
    std::uint32_t v;
    std::memcpy(&v, take(4), 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    std::memcpy(&v, take(8), 8);
    return v;
  }
  double f64() {
    double v;
    std::memcpy(&v, take(8), 8);
    return v;
  }
  std::string str() {
    std::uint32_t n = u32();
    if (n > remaining()) fail("string length overruns file");
    const char* p = take(n);
    return std::string(p, n);
  }
  const char* take(std::size_t n) {
    if (n > remaining()) fail("unexpected end of data");
    const char* p = buf_.data() + off_;
    off_ += n;
    return p;
  }
  std::size_t remaining() const { return buf_.size() - off_; }
  std::size_t offset() const { return off_; }
  [[noreturn]] void fail(const std::string& why) const {
    throw std::runtime_error("checkpoint: " + why + " at byte " + std::to_string(off_));
  }

 private:
  std::string buf_;
  std::size_t off_ = 0;
};

std::uint32_t crc_of(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()),
            static_cast<uInt>(bytes.size())));
}

void write_config(ByteWriter& w, const ModelConfig& c) {
  w.u32(static_cast<std::uint32_t>(c.backbone.image_size));
  w.u32(static_cast<std::uint32_t>(c.backbone.patch_size));
  w.u32(static_cast<std::uint32_t>(c.backbone.depth));
  w.u32(static_cast<std::uint32_t>(c.backbone.dim));
  w.u32(static_cast<std::uint32_t>(c.backbone.heads));
  w.u32(static_cast<std::uint32_t>(c.backbone.mlp_ratio));
  w.u32(static_cast<std::uint32_t>(c.backbone.fuse_layers.size()));
  for (int l : c.backbone.fuse_layers) w.u32(static_cast<std::uint32_t>(l));
  w.u8(c.backbone.last_layer_mode == vision::LastLayerMode::kVvNoFfnNoResidual ? 1 : 0);
  w.u8(c.backbone.adapter_enabled ? 1 : 0);
  w.u8(static_cast<std::uint8_t>(c.backbone.trainable.count(vision::Component::kPrompts)));
  w.u8(static_cast<std::uint8_t>(c.backbone.trainable.count(vision::Component::kAdapter)));
  w.u8(static_cast<std::uint8_t>(c.backbone.trainable.count(vision::Component::kEncoder)));
  w.u32(static_cast<std::uint32_t>(c.decoder.depth));
  w.u32(static_cast<std::uint32_t>(c.decoder.heads));
  w.u32(static_cast<std::uint32_t>(c.decoder.mlp_ratio));
  w.u32(static_cast<std::uint32_t>(c.context_len));
  w.u32(static_cast<std::uint32_t>(c.n_background));
  w.u8(c.prompt_tuning ? 1 : 0);
  w.u64(c.seed);
}

ModelConfig read_config(ByteReader& r) {
  ModelConfig c;
  c.backbone.image_size = static_cast<int>(r.u32());
  c.backbone.patch_size = static_cast<int>(r.u32());
  c.backbone.depth = static_cast<int>(r.u32());
  c.backbone.dim = static_cast<int>(r.u32());
  c.backbone.heads = static_cast<int>(r.u32());
  c.backbone.mlp_ratio = static_cast<int>(r.u32());
  std::uint32_t nf = r.u32();
  c.backbone.fuse_layers.clear();
  for (std::uint32_t i = 0; i < nf; ++i) c.backbone.fuse_layers.push_back(static_cast<int>(r.u32()));
  c.backbone.last_layer_mode =
      r.u8() ? vision::LastLayerMode::kVvNoFfnNoResidual : vision::LastLayerMode::kStandard;
  c.backbone.adapter_enabled = r.u8() != 0;
  c.backbone.trainable.clear();
  if (r.u8()) c.backbone.trainable.insert(vision::Component::kPrompts);
  if (r.u8()) c.backbone.trainable.insert(vision::Component::kAdapter);
  if (r.u8()) c.backbone.trainable.insert(vision::Component::kEncoder);
  c.decoder.depth = static_cast<int>(r.u32());
  c.decoder.heads = static_cast<int>(r.u32());
  c.decoder.mlp_ratio = static_cast<int>(r.u32());
  c.context_len = static_cast<int>(r.u32());
  c.n_background = static_cast<int>(r.u32());
  c.prompt_tuning = r.u8() != 0;
  c.seed = r.u64();
  return c;
}

}  // namespace

void write_checkpoint(const std::string& path, const Model& model, int step,
                      const protocol::ClassPartition& partition) {
  ByteWriter w;
  w.raw(kMagic, 4);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(step));
  w.u8(static_cast<std::uint8_t>(partition.mode));
  w.u32(static_cast<std::uint32_t>(partition.steps.size()));
  for (const auto& s : partition.steps) {
    w.u32(static_cast<std::uint32_t>(s.size()));
    for (int c : s) w.u32(static_cast<std::uint32_t>(c));
  }
  write_config(w, model.config());

  const auto& order = model.class_order();
  w.u32(static_cast<std::uint32_t>(order.size()));
  for (int id : order) {
    w.u32(static_cast<std::uint32_t>(id));
    w.str(model.class_names().at(id));
  }
  w.u32(static_cast<std::uint32_t>(model.templates().descriptions.size()));
  for (const auto& d : model.templates().descriptions) w.str(d);

  auto groups = const_cast<Model&>(model).param_groups();
  std::vector<ad::Param*> params;
  // param_groups skips prompt contexts when prompt tuning is off; serialize
  // them anyway so a round trip restores the full store
  if (!model.config().prompt_tuning) {
    for (auto& p : const_cast<Model&>(model).prompts().background) params.push_back(&p);
    for (auto& [id, p] : const_cast<Model&>(model).prompts().foreground) params.push_back(&p);
  }
  for (auto* p : groups.all()) params.push_back(p);

  w.u32(static_cast<std::uint32_t>(params.size()));
  for (auto* p : params) {
    w.str(p->name);
    w.u32(static_cast<std::uint32_t>(p->value.rows()));
    w.u32(static_cast<std::uint32_t>(p->value.cols()));
    w.u8(p->trainable ? 1 : 0);
    for (Eigen::Index i = 0; i < p->value.rows(); ++i)
      for (Eigen::Index j = 0; j < p->value.cols(); ++j) w.f64(p->value(i, j));
  }

  std::uint32_t crc = crc_of(w.bytes());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  out.write(reinterpret_cast<const char*>(&crc), 4);
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12) throw std::runtime_error("checkpoint: file too small: " + path);

  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  std::string body = bytes.substr(0, bytes.size() - 4);
  if (crc_of(body) != stored_crc)
    throw std::runtime_error("checkpoint: checksum mismatch in " + path);

  ByteReader r(std::move(body));
  if (std::memcmp(r.take(4), kMagic, 4) != 0) r.fail("bad magic");
  std::uint32_t version = r.u32();
  if (version != kVersion) r.fail("unsupported version " + std::to_string(version));

  Checkpoint ck;
  ck.step = static_cast<int>(r.u32());
  ck.partition.mode = static_cast<protocol::Mode>(r.u8());
  std::uint32_t nsteps = r.u32();
  for (std::uint32_t s = 0; s < nsteps; ++s) {
    std::uint32_t n = r.u32();
    std::vector<int> ids;
    for (std::uint32_t i = 0; i < n; ++i) ids.push_back(static_cast<int>(r.u32()));
    ck.partition.steps.push_back(std::move(ids));
  }

  ModelConfig cfg = read_config(r);
  std::uint32_t n_classes = r.u32();
  std::vector<std::pair<int, std::string>> classes;
  for (std::uint32_t i = 0; i < n_classes; ++i) {
    int id = static_cast<int>(r.u32());
    classes.emplace_back(id, r.str());
  }
  std::uint32_t n_desc = r.u32();
  std::vector<std::string> desc;
  for (std::uint32_t i = 0; i < n_desc; ++i) desc.push_back(r.str());

  ck.model = std::make_unique<Model>(cfg);
  ck.model->set_descriptions(desc);
  if (!classes.empty()) ck.model->register_classes(classes);

  std::map<std::string, ad::Param*> by_name;
  auto groups = ck.model->param_groups();
  for (auto* p : groups.all()) by_name[p->name] = p;
  for (auto& p : ck.model->prompts().background) by_name[p.name] = &p;
  for (auto& [id, p] : ck.model->prompts().foreground) by_name[p.name] = &p;

  std::uint32_t n_params = r.u32();
  for (std::uint32_t i = 0; i < n_params; ++i) {
    std::string name = r.str();
    auto it = by_name.find(name);
    if (it == by_name.end()) r.fail("unknown parameter blob '" + name + "'");
    ad::Param* p = it->second;
    std::uint32_t rows = r.u32(), cols = r.u32();
    if (rows != static_cast<std::uint32_t>(p->value.rows()) ||
        cols != static_cast<std::uint32_t>(p->value.cols()))
      r.fail("shape mismatch for parameter '" + name + "'");
    p->trainable = r.u8() != 0;
    for (std::uint32_t rr = 0; rr < rows; ++rr)
      for (std::uint32_t cc = 0; cc < cols; ++cc)
        p->value(static_cast<Eigen::Index>(rr), static_cast<Eigen::Index>(cc)) = r.f64();
  }
  if (r.remaining() != 0) r.fail("trailing bytes");
  return ck;
}

}  // namespace incseg
