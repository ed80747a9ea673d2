#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "incseg/config.hpp"
#include "incseg/data_synth.hpp"
#include "incseg/losses.hpp"
#include "incseg/metrics.hpp"
#include "incseg/model.hpp"

namespace incseg::protocol {

enum class Mode { kDisjoint, kOverlapped, kJoint };

Mode mode_from_string(const std::string& s);
std::string to_string(Mode m);

struct ClassPartition {
  Mode mode = Mode::kOverlapped;
  std::vector<std::vector<int>> steps;  // disjoint class-id sets, background excluded

  // "15-1" over ids [1..num_classes]: first step 15 classes, then 1 per step
  static ClassPartition from_split(const std::string& split, int num_classes, Mode mode);
  static ClassPartition joint(int num_classes);

  int num_steps() const { return static_cast<int>(steps.size()); }
  const std::vector<int>& step_classes(int t) const;            // 1-based
  std::vector<int> classes_up_to(int t) const;                  // C^{1:t}
  std::vector<int> old_classes(int t) const;                    // C^{1:t-1}
  void validate(int num_classes) const;
};

struct PseudoLabelConfig {
  double confidence_tau = 0.7;
};

// image subset a step may train on: indices into corpus.records
std::vector<int> partition_dataset(const data::Corpus& corpus, const ClassPartition& partition,
                                   int t);

// every pixel whose class is outside `current` becomes background
std::vector<int> remap_labels(const std::vector<int>& labels, const std::set<int>& current);

// background pixels take the previous model's confident old-class prediction
std::vector<int> pseudo_label(const std::vector<int>& prev_pred, const std::vector<double>& prev_conf,
                              const std::vector<int>& remapped, const std::set<int>& old_classes,
                              const PseudoLabelConfig& cfg);

struct StepMetrics {
  int step = 0;
  metrics::MetricReport report;
  metrics::ConfusionMatrix confusion{1};
  double train_loss = 0.0;
};

struct ContinualState {
  int completed_steps = 0;
  std::unique_ptr<Model> model;
  std::unique_ptr<Model> previous;  // frozen snapshot of the completed step
  ClassPartition partition;
};

class Trainer {
 public:
  Trainer(const ExperimentConfig& cfg, const data::Corpus& corpus);

  ContinualState& state() { return state_; }
  const ExperimentConfig& config() const { return cfg_; }

  // runs continual step t (1-based); steps must be invoked in order
  StepMetrics run_step(int t);

  // evaluation on the cumulative test set for classes seen up to step t
  StepMetrics evaluate(Model& model, int t);

  int num_steps() const { return state_.partition.num_steps(); }

  // test hook: every training-sample access is reported here
  std::function<void(int)> on_sample_access;

 private:
  struct PreparedSample {
    int corpus_index;
    vision::ImageTensor image;
    std::vector<int> merged_channel_labels;  // channel-space labels Y'
    std::vector<int> gt_patch_ids;           // remapped gt at patch resolution (class ids)
  };

  std::vector<PreparedSample> prepare_step_samples(int t);
  double train_epochs(int t, std::vector<PreparedSample>& samples);

  ExperimentConfig cfg_;
  const data::Corpus& corpus_;
  ContinualState state_;
  losses::LpdConfig lpd_;
  PseudoLabelConfig pseudo_;
  bool lpd_enabled_;
  bool mbd_enabled_;
  int epochs_;
  int batch_;
  int threads_;
  double lambda_lpd_, lambda_bkg_;
  double incremental_lr_scale_, encoder_lr_scale_;
  std::uint64_t seed_;
};

}  // namespace incseg::protocol
