#pragma once

#include <vector>

#include "incseg/core_ops.hpp"
#include "incseg/tape.hpp"

namespace incseg::losses {

using ad::Mat;
using ad::Tape;
using ad::Value;
using ops::BinaryMask;

enum class PlasticityForm { kAsPrinted, kOrthogonal };

struct LpdConfig {
  double alpha = 1.0;
  double beta = 0.2;
  double temperature = 2.0;
  int k = 0;  // 0 -> one edge per current-step class
  PlasticityForm form = PlasticityForm::kAsPrinted;
  ops::HuberConfig huber{1.0};
  bool normalize_distances = true;
};

// mean per-pixel cross-entropy; labels are channel indices (0 = background),
// ignore_label pixels excluded
Value ce_loss(Tape& t, Value full_logits, const std::vector<int>& labels, int ignore_label = -1);

// pairwise-distance and angle relations of the current embeddings matched to
// the template relations under a Huber penalty; each sum is averaged by its
// term count
Value stability_loss(Tape& t, Value embeddings, const Mat& templates, const ops::HuberConfig& cfg,
                     bool normalize_distances = true);

// top-k most similar directed pairs, counted only when the edge starts at a
// current-step class
Value plasticity_loss(Tape& t, Value embeddings, const std::vector<bool>& is_current,
                      const LpdConfig& cfg);

// temperature-scaled KL between patch-class score maps under current
// embeddings and under templates, times T^2
Value dense_loss(Tape& t, Value embeddings, const Mat& templates, Value patch_embeddings,
                 const LpdConfig& cfg);

Value lpd_loss(Tape& t, Value stability, Value plasticity, Value dense, const LpdConfig& cfg);

struct MaskSets {
  std::vector<BinaryMask> bkg;      // n, from the score-map argmax
  std::vector<BinaryMask> old_cls;  // N_old, from the score-map argmax
  std::vector<BinaryMask> new_cls;  // N_new, from the downsampled ground truth
  std::vector<BinaryMask> bkg_ref;  // N_new, complement of (union(old) | new_i)
};

// scores: (n_bkg + N_old) x M over background slots then old classes;
// gt_patch: per-patch class ids (0 = background); old_ids/new_ids give the
// class-id order of the score rows and of the new masks
MaskSets build_mask_sets(const Mat& scores, int n_bkg, const std::vector<int>& gt_patch,
                         const std::vector<int>& old_ids, const std::vector<int>& new_ids,
                         int grid_h, int grid_w);

struct BkgContrastiveResult {
  Value loss;
  bool all_skipped = false;
  int positive_terms = 0;
  int negative_terms = 0;
};

// anchors: pooled background regions; negatives: pooled new-class regions;
// positives: pooled reference-background regions. EMPTY pools skip their term
// and shrink that family's denominator.
BkgContrastiveResult bkg_contrastive_loss(Tape& t, const MaskSets& masks, Value patch_embeddings);

}  // namespace incseg::losses
