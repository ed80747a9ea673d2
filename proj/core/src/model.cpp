#include "incseg/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "incseg/rng.hpp"

namespace incseg {

using ad::Param;
using ad::Tape;
using ad::Value;

void ModelConfig::validate() const {
  backbone.validate();
  if (context_len < 1) throw std::domain_error("model: context_len must be >= 1");
  if (n_background < 1) throw std::domain_error("model: need at least one background slot");
  if (!prompt_tuning && n_background > 1)
    throw std::domain_error("model: multiple background slots require prompt tuning");
}

Model::Model(const ModelConfig& cfg)
    : cfg_(cfg),
      backbone_(vision::make_backbone(cfg.backbone, cfg.seed)),
      decoder_(fusion::make_decoder(cfg.decoder, cfg.backbone.dim, cfg.seed)),
      encoder_(std::make_shared<text::StubTextEncoder>(derive_seed(cfg.seed, "text.stub"),
                                                       cfg.backbone.dim)),
      descriptions_(text::default_descriptions()) {
  cfg_.validate();
  prompts_.context_len = cfg.context_len;
  prompts_.dim = cfg.backbone.dim;
  prompts_.background =
      text::init_background_prompts(cfg.n_background, derive_seed(cfg.seed, "prompt.bkg"),
                                    cfg.context_len, cfg.backbone.dim);
}

int Model::channel_of(int class_id) const {
  for (std::size_t i = 0; i < fg_order_.size(); ++i)
    if (fg_order_[i] == class_id) return static_cast<int>(i) + 1;
  throw std::out_of_range("model: class " + std::to_string(class_id) + " not registered");
}

int Model::class_at_channel(int channel) const {
  if (channel < 1 || channel > n_foreground())
    throw std::out_of_range("model: channel out of range");
  return fg_order_[static_cast<std::size_t>(channel - 1)];
}

void Model::register_classes(const std::vector<std::pair<int, std::string>>& classes) {
  for (const auto& [id, name] : classes) {
    if (id == 0) throw std::domain_error("model: class id 0 is reserved for background");
    if (class_names_.count(id)) throw std::domain_error("model: class registered twice");
    class_names_[id] = name;
    fg_order_.push_back(id);
  }
  templates_ = text::build_templates(class_names_, *encoder_, descriptions_);
  const double sigma = 1.0 / std::sqrt(static_cast<double>(cfg_.context_len) * cfg_.backbone.dim);
  for (const auto& [id, name] : classes) {
    if (prompts_.has_class(id)) continue;
    // per-class derived stream keeps initialization independent of order
    Rng crng(derive_seed(cfg_.seed, "prompt.class_init." + std::to_string(id)));
    ad::Mat ctx(cfg_.context_len, cfg_.backbone.dim);
    for (int r = 0; r < cfg_.context_len; ++r)
      for (int c = 0; c < cfg_.backbone.dim; ++c) ctx(r, c) = crng.normal(0.0, sigma);
    prompts_.foreground.emplace(id, Param("prompt.class." + std::to_string(id), std::move(ctx)));
  }
}

std::vector<text::Vec> Model::background_embeddings_plain() const {
  std::vector<text::Vec> out;
  if (cfg_.prompt_tuning) {
    for (const auto& p : prompts_.background) out.push_back(encoder_->encode_plain(&p.value, {}));
  } else {
    out.push_back(encoder_->encode_plain(nullptr, {"background"}));
  }
  return out;
}

text::Vec Model::class_embedding_plain(int class_id) const {
  const auto it = class_names_.find(class_id);
  if (it == class_names_.end()) throw std::out_of_range("model: unknown class id");
  if (cfg_.prompt_tuning)
    return text::build_class_embedding_plain(class_id, it->second, prompts_, *encoder_);
  return encoder_->encode_plain(nullptr, text::tokenize(it->second));
}

Value Model::text_embeddings(Tape& t) {
  std::vector<Value> rows;
  if (cfg_.prompt_tuning) {
    for (auto& p : prompts_.background) {
      Value ctx = t.param(p);
      rows.push_back(encoder_->encode(t, &ctx, {}));
    }
  } else {
    rows.push_back(encoder_->encode(t, nullptr, {"background"}));
  }
  for (int id : fg_order_) {
    const std::string& name = class_names_.at(id);
    if (cfg_.prompt_tuning) {
      rows.push_back(text::build_class_embedding(t, id, name, prompts_, *encoder_));
    } else {
      rows.push_back(encoder_->encode(t, nullptr, text::tokenize(name)));
    }
  }
  return t.concat_rows(rows);
}

ForwardResult Model::forward(Tape& t, const vision::ImageTensor& img) {
  ForwardResult r;
  r.patches_raw = vision::backbone_forward(t, img, backbone_, cfg_.backbone);
  r.text_raw = text_embeddings(t);
  auto dec = fusion::decode(t, r.text_raw, r.patches_raw, decoder_, cfg_.decoder);
  r.text_refined = dec.text;
  r.patches_refined = dec.patches;
  r.scores = fusion::score_maps(t, r.text_refined, r.patches_refined);
  const int nb = cfg_.prompt_tuning ? cfg_.n_background : 1;
  Value fused_bkg = fusion::fuse_background(t, r.scores, nb);
  std::vector<Value> chans{fused_bkg};
  if (n_foreground() > 0) chans.push_back(t.slice_rows(r.scores, nb, n_foreground()));
  r.fused = t.concat_rows(chans);
  const int g = cfg_.backbone.grid();
  r.full = fusion::upsample_logits(t, r.fused, g, g, cfg_.backbone.image_size,
                                   cfg_.backbone.image_size);
  return r;
}

std::vector<int> Model::predict(const vision::ImageTensor& img) {
  std::vector<int> labels;
  std::vector<double> conf;
  predict_with_confidence(img, labels, conf);
  return labels;
}

void Model::predict_with_confidence(const vision::ImageTensor& img, std::vector<int>& labels,
                                    std::vector<double>& confidence) {
  Tape t(false);
  ForwardResult r = forward(t, img);
  const ad::Mat& z = t.val(r.full);
  const Eigen::Index pixels = z.cols();
  labels.assign(static_cast<std::size_t>(pixels), 0);
  confidence.assign(static_cast<std::size_t>(pixels), 0.0);
  for (Eigen::Index p = 0; p < pixels; ++p) {
    Eigen::Index best;
    double m = z.col(p).maxCoeff(&best);
    double denom = (z.col(p).array() - m).exp().sum();
    labels[static_cast<std::size_t>(p)] =
        best == 0 ? 0 : class_at_channel(static_cast<int>(best));
    confidence[static_cast<std::size_t>(p)] = 1.0 / denom;
  }
}

std::vector<Param*> Model::ParamGroups::all() const {
  std::vector<Param*> out;
  for (const auto* g : {&prompts, &encoder, &adapter, &decoder})
    out.insert(out.end(), g->begin(), g->end());
  return out;
}

Model::ParamGroups Model::param_groups() {
  ParamGroups g;
  if (cfg_.prompt_tuning) {
    for (auto& p : prompts_.background) g.prompts.push_back(&p);
    for (auto& [id, p] : prompts_.foreground) g.prompts.push_back(&p);
  }
  vision::collect_backbone_params(backbone_, cfg_.backbone, g.encoder, g.adapter);
  fusion::collect_decoder_params(decoder_, g.decoder);
  return g;
}

}  // namespace incseg
