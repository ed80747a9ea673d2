#pragma once

#include <Eigen/Dense>
#include <map>
#include <string>
#include <vector>

namespace incseg::metrics {

using CountMatrix = Eigen::Matrix<long long, Eigen::Dynamic, Eigen::Dynamic>;

// rows = ground truth, cols = prediction; class ids 0..N (0 = background)
struct ConfusionMatrix {
  CountMatrix counts;

  explicit ConfusionMatrix(int n_classes_incl_bkg)
      : counts(CountMatrix::Zero(n_classes_incl_bkg, n_classes_incl_bkg)) {}
  int classes() const { return static_cast<int>(counts.rows()); }
  long long total() const { return counts.sum(); }
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
};

// per-pixel tally; values outside [0, N] are a domain error
void accumulate(ConfusionMatrix& cm, const std::vector<int>& preds, const std::vector<int>& gts);
ConfusionMatrix confusion(const std::vector<int>& preds, const std::vector<int>& gts,
                          int n_foreground);

struct MetricReport {
  std::map<int, double> per_class_iou;  // classes with zero union are absent
  std::vector<int> excluded;            // zero-union class ids
  double base_miou = 0.0;               // over C^1
  double new_miou = 0.0;                // over C^{2:T}
  double all_miou = 0.0;                // over background + every class
  double harmonic_mean = 0.0;
};

// IoU_c = TP / (TP + FP + FN); zero-union classes are excluded from means, an
// empty group reports 0. "all" includes the background id 0.
MetricReport miou(const ConfusionMatrix& cm, const std::vector<int>& base_ids,
                  const std::vector<int>& new_ids);

double harmonic(double base_miou, double new_miou);

// rows = points projected onto the top-2 principal components, deterministic
// sign convention
Eigen::MatrixXd pca_project_2d(const std::vector<Eigen::VectorXd>& points);

struct ComponentParams {
  std::string name;
  long long trainable = 0;
  long long total = 0;
};

struct ReportFiles {
  std::string metrics_csv;
  std::string confusion_csv;
  std::string projection_csv;
  std::string params_csv;
};

struct EmbeddingPoint {
  int class_id;
  std::string kind;  // "embedding" or "template"
  Eigen::VectorXd vec;
};

// writes the four comma-separated artifacts for one step
ReportFiles emit_reports(const std::string& out_dir, int step, const ConfusionMatrix& cm,
                         const MetricReport& report, const std::vector<EmbeddingPoint>& embeddings,
                         const std::vector<ComponentParams>& params);

}  // namespace incseg::metrics
