#include "incseg/losses.hpp"

#include <stdexcept>

namespace incseg::losses {

Value ce_loss(Tape& t, Value full_logits, const std::vector<int>& labels, int ignore_label) {
  return t.softmax_cross_entropy(full_logits, labels, ignore_label);
}

Value stability_loss(Tape& t, Value embeddings, const Mat& templates, const ops::HuberConfig& cfg,
                     bool normalize_distances) {
  const Eigen::Index n = t.val(embeddings).rows();
  if (templates.rows() != n || templates.cols() != t.val(embeddings).cols())
    throw std::invalid_argument("stability_loss: embedding/template size mismatch");
  if (n < 3) throw std::domain_error("stability_loss: need at least 3 classes for the angle term");

  // distance relations
  Value psi = ops::distance_potential(t, embeddings, normalize_distances);
  std::vector<Eigen::VectorXd> trows;
  for (Eigen::Index i = 0; i < n; ++i) trows.push_back(templates.row(i).transpose());
  Mat psi_star = ops::distance_potential(trows, normalize_distances);
  Value dist_terms = t.huber_elem(psi, t.constant(psi_star), cfg.delta);
  // symmetric matrix with zero diagonal: sum/2 pairs, averaged over N(N-1)/2
  Value dist = t.scale(t.sum_all(dist_terms), 1.0 / (static_cast<double>(n) * (n - 1)));

  // angle relations: every unordered triple, each vertex once
  std::vector<Value> rows;
  rows.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) rows.push_back(t.slice_rows(embeddings, i, 1));
  std::vector<Value> angle_terms;
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i) {
      if (i == j) continue;
      for (Eigen::Index k = i + 1; k < n; ++k) {
        if (k == j) continue;
        Value a = ops::angle_potential(t, rows[i], rows[j], rows[k]);
        double a_star = ops::angle_potential(trows[i], trows[j], trows[k]);
        angle_terms.push_back(t.huber_elem(a, t.scalar(a_star), cfg.delta));
      }
    }
  Value angle = t.scale(t.add_n(angle_terms), 1.0 / static_cast<double>(angle_terms.size()));
  return t.add(dist, angle);
}

Value plasticity_loss(Tape& t, Value embeddings, const std::vector<bool>& is_current,
                      const LpdConfig& cfg) {
  const Eigen::Index n = t.val(embeddings).rows();
  if (static_cast<Eigen::Index>(is_current.size()) != n)
    throw std::invalid_argument("plasticity_loss: indicator size mismatch");
  if (n < 2) throw std::domain_error("plasticity_loss: need at least 2 embeddings");
  int k = cfg.k;
  if (k == 0) {
    for (bool c : is_current) k += c ? 1 : 0;
    k = std::max(k, 1);
  }
  auto edges = ops::topk_similar_pairs(t.val(embeddings), k);
  std::vector<Value> rows;
  for (Eigen::Index i = 0; i < n; ++i) rows.push_back(t.slice_rows(embeddings, i, 1));
  std::vector<Value> terms;
  for (auto [i, j] : edges) {
    if (!is_current[static_cast<std::size_t>(i)]) continue;
    Value c = ops::cosine_sim(t, rows[static_cast<std::size_t>(i)], rows[static_cast<std::size_t>(j)]);
    if (cfg.form == PlasticityForm::kAsPrinted) {
      terms.push_back(t.add_const(t.scale(c, -1.0), 1.0));  // 1 - cos
    } else {
      terms.push_back(t.square(c));  // cos^2
    }
  }
  if (terms.empty()) return t.scalar(0.0);
  return t.add_n(terms);
}

Value dense_loss(Tape& t, Value embeddings, const Mat& templates, Value patch_embeddings,
                 const LpdConfig& cfg) {
  if (t.val(embeddings).rows() != templates.rows())
    throw std::invalid_argument("dense_loss: embedding/template count mismatch");
  if (cfg.temperature <= 0.0) throw std::domain_error("dense_loss: temperature must be positive");
  Value vt = t.transpose(patch_embeddings);                   // C x M
  Value s = t.matmul(embeddings, vt);                         // N x M
  Value s_star = t.matmul(t.constant(templates), vt);         // N x M
  Value p = ops::class_softmax(t, s, cfg.temperature);
  Value q = ops::class_softmax(t, s_star, cfg.temperature);
  return t.scale(ops::kl_divergence(t, p, q), cfg.temperature * cfg.temperature);
}

Value lpd_loss(Tape& t, Value stability, Value plasticity, Value dense, const LpdConfig& cfg) {
  return t.add(stability, t.add(t.scale(plasticity, cfg.alpha), t.scale(dense, cfg.beta)));
}

MaskSets build_mask_sets(const Mat& scores, int n_bkg, const std::vector<int>& gt_patch,
                         const std::vector<int>& old_ids, const std::vector<int>& new_ids,
                         int grid_h, int grid_w) {
  const int m = grid_h * grid_w;
  const int n_old = static_cast<int>(old_ids.size());
  if (scores.rows() != n_bkg + n_old)
    throw std::invalid_argument("build_mask_sets: score rows != n_bkg + old classes");
  if (scores.cols() != m || static_cast<int>(gt_patch.size()) != m)
    throw std::invalid_argument("build_mask_sets: grid size mismatch");

  MaskSets out;
  out.bkg.assign(static_cast<std::size_t>(n_bkg), BinaryMask(grid_h, grid_w));
  out.old_cls.assign(static_cast<std::size_t>(n_old), BinaryMask(grid_h, grid_w));
  for (int px = 0; px < m; ++px) {
    Eigen::Index best;
    scores.col(px).maxCoeff(&best);
    if (best < n_bkg) {
      out.bkg[static_cast<std::size_t>(best)].values[static_cast<std::size_t>(px)] = 1;
    } else {
      out.old_cls[static_cast<std::size_t>(best - n_bkg)].values[static_cast<std::size_t>(px)] = 1;
    }
  }

  BinaryMask old_union(grid_h, grid_w);
  for (const auto& om : out.old_cls) old_union = ops::mask_union(old_union, om);

  for (int nid : new_ids) {
    BinaryMask nm(grid_h, grid_w);
    for (int px = 0; px < m; ++px)
      if (gt_patch[static_cast<std::size_t>(px)] == nid) nm.values[static_cast<std::size_t>(px)] = 1;
    out.new_cls.push_back(nm);
    out.bkg_ref.push_back(ops::mask_not(ops::mask_union(old_union, nm)));
  }
  return out;
}

BkgContrastiveResult bkg_contrastive_loss(Tape& t, const MaskSets& masks, Value patch_embeddings) {
  if (masks.new_cls.empty())
    throw std::domain_error("bkg_contrastive_loss: need at least one new class");
  if (masks.new_cls.size() != masks.bkg_ref.size())
    throw std::invalid_argument("bkg_contrastive_loss: new/reference mask count mismatch");

  std::vector<std::optional<Value>> anchors, negatives, positives;
  for (const auto& mb : masks.bkg) anchors.push_back(ops::masked_mean_pool(t, mb, patch_embeddings));
  for (const auto& mn : masks.new_cls) negatives.push_back(ops::masked_mean_pool(t, mn, patch_embeddings));
  for (const auto& mr : masks.bkg_ref) positives.push_back(ops::masked_mean_pool(t, mr, patch_embeddings));

  std::vector<Value> neg_terms, pos_terms;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (!anchors[i]) continue;
    for (std::size_t j = 0; j < negatives.size(); ++j) {
      if (negatives[j])
        neg_terms.push_back(ops::cosine_sim(t, *anchors[i], *negatives[j]));
      if (positives[j])
        pos_terms.push_back(
            t.add_const(t.scale(ops::cosine_sim(t, *anchors[i], *positives[j]), -1.0), 1.0));
    }
  }

  BkgContrastiveResult res;
  res.negative_terms = static_cast<int>(neg_terms.size());
  res.positive_terms = static_cast<int>(pos_terms.size());
  if (neg_terms.empty() && pos_terms.empty()) {
    res.loss = t.scalar(0.0);
    res.all_skipped = true;
    return res;
  }
  // each family is averaged over its valid term count
  Value acc = t.scalar(0.0);
  if (!neg_terms.empty())
    acc = t.add(acc, t.scale(t.add_n(neg_terms), 1.0 / static_cast<double>(neg_terms.size())));
  if (!pos_terms.empty())
    acc = t.add(acc, t.scale(t.add_n(pos_terms), 1.0 / static_cast<double>(pos_terms.size())));
  res.loss = acc;
  return res;
}

}  // namespace incseg::losses
