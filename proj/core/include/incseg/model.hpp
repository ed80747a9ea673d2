#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "incseg/backbone.hpp"
#include "incseg/decoder.hpp"
#include "incseg/tape.hpp"
#include "incseg/text_bank.hpp"

namespace incseg {

struct ModelConfig {
  vision::BackboneConfig backbone;
  fusion::DecoderConfig decoder;
  int context_len = 8;   // N_p
  int n_background = 4;  // background prototype count
  bool prompt_tuning = true;
  std::uint64_t seed = 1234;

  void validate() const;
};

struct ForwardResult {
  ad::Value text_raw;        // K x C, background rows first (t)
  ad::Value patches_raw;     // M x C pre-decoder patch embeddings (V)
  ad::Value text_refined;    // t'
  ad::Value patches_refined; // v'
  ad::Value scores;          // K x M
  ad::Value fused;           // (N+1) x M, channel 0 = fused background
  ad::Value full;            // (N+1) x (H*W)
};

// Complete network state for one continual learner: backbone, decoder, prompt
// store, frozen text stub, templates, and the class registry. Copyable; copies
// are deep for all weights (snapshots rely on this).
class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const text::TemplateBank& templates() const { return templates_; }
  const std::map<int, std::string>& class_names() const { return class_names_; }
  const std::vector<int>& class_order() const { return fg_order_; }
  int n_foreground() const { return static_cast<int>(fg_order_.size()); }
  int n_channels() const { return n_foreground() + 1; }
  int channel_of(int class_id) const;  // 1-based foreground channel
  int class_at_channel(int channel) const;

  text::PromptStore& prompts() { return prompts_; }
  const text::PromptStore& prompts() const { return prompts_; }
  const text::TextEncoderBackend& text_encoder() const { return *encoder_; }
  vision::BackboneParams& backbone() { return backbone_; }
  fusion::DecoderParams& decoder() { return decoder_; }
  void set_descriptions(std::vector<std::string> d) { descriptions_ = std::move(d); }

  // Registers the classes of a step, extends the template bank, and gives
  // fresh random contexts to classes that have none yet (weight transfer may
  // overwrite them before training).
  void register_classes(const std::vector<std::pair<int, std::string>>& classes);

  std::vector<text::Vec> background_embeddings_plain() const;
  text::Vec class_embedding_plain(int class_id) const;

  ad::Value text_embeddings(ad::Tape& t);
  ForwardResult forward(ad::Tape& t, const vision::ImageTensor& img);

  // no-grad full-resolution prediction: per-pixel class ids (0 = background)
  std::vector<int> predict(const vision::ImageTensor& img);
  // no-grad per-pixel (class id, softmax confidence) from the fused channels
  void predict_with_confidence(const vision::ImageTensor& img, std::vector<int>& labels,
                               std::vector<double>& confidence);

  struct ParamGroups {
    std::vector<ad::Param*> prompts;
    std::vector<ad::Param*> encoder;
    std::vector<ad::Param*> adapter;
    std::vector<ad::Param*> decoder;
    std::vector<ad::Param*> all() const;
  };
  ParamGroups param_groups();

 private:
  ModelConfig cfg_;
  vision::BackboneParams backbone_;
  fusion::DecoderParams decoder_;
  text::PromptStore prompts_;
  std::shared_ptr<const text::StubTextEncoder> encoder_;  // immutable, shared across copies
  text::TemplateBank templates_;
  std::map<int, std::string> class_names_;
  std::vector<int> fg_order_;  // introduction order = score-map row order
  std::vector<std::string> descriptions_;
};

}  // namespace incseg
