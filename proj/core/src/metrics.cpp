#include "incseg/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

namespace incseg::metrics {

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.counts.rows() != counts.rows())
    throw std::invalid_argument("confusion: size mismatch in accumulation");
  counts += other.counts;
  return *this;
}

void accumulate(ConfusionMatrix& cm, const std::vector<int>& preds, const std::vector<int>& gts) {
  if (preds.size() != gts.size()) throw std::invalid_argument("confusion: pred/gt size mismatch");
  const int n = cm.classes();
  for (std::size_t i = 0; i < preds.size(); ++i) {
    int g = gts[i], p = preds[i];
    if (g < 0 || g >= n || p < 0 || p >= n)
      throw std::domain_error("confusion: label value outside [0, N]");
    ++cm.counts(g, p);
  }
}

ConfusionMatrix confusion(const std::vector<int>& preds, const std::vector<int>& gts,
                          int n_foreground) {
  ConfusionMatrix cm(n_foreground + 1);
  accumulate(cm, preds, gts);
  return cm;
}

namespace {
double group_mean(const std::map<int, double>& iou, const std::vector<int>& ids) {
  double sum = 0.0;
  int n = 0;
  for (int id : ids) {
    auto it = iou.find(id);
    if (it == iou.end()) continue;  // zero-union class: excluded, not zero
    sum += it->second;
    ++n;
  }
  return n > 0 ? sum / n : 0.0;
}
}  // namespace

MetricReport miou(const ConfusionMatrix& cm, const std::vector<int>& base_ids,
                  const std::vector<int>& new_ids) {
  if (base_ids.empty() && new_ids.empty()) throw std::domain_error("miou: empty class groups");
  MetricReport rep;
  const int n = cm.classes();
  int with_union = 0;
  for (int c = 0; c < n; ++c) {
    long long tp = cm.counts(c, c);
    long long fp = cm.counts.col(c).sum() - tp;
    long long fn = cm.counts.row(c).sum() - tp;
    long long uni = tp + fp + fn;
    if (uni == 0) {
      rep.excluded.push_back(c);
      continue;
    }
    ++with_union;
    rep.per_class_iou[c] = static_cast<double>(tp) / static_cast<double>(uni);
  }
  if (with_union == 0) throw std::domain_error("miou: every class has zero union");
  rep.base_miou = group_mean(rep.per_class_iou, base_ids);
  rep.new_miou = group_mean(rep.per_class_iou, new_ids);
  std::vector<int> all_ids{0};
  all_ids.insert(all_ids.end(), base_ids.begin(), base_ids.end());
  all_ids.insert(all_ids.end(), new_ids.begin(), new_ids.end());
  rep.all_miou = group_mean(rep.per_class_iou, all_ids);
  rep.harmonic_mean = harmonic(rep.base_miou, rep.new_miou);
  return rep;
}

double harmonic(double base_miou, double new_miou) {
  if (base_miou < 0.0 || new_miou < 0.0) throw std::domain_error("harmonic: negative input");
  double s = base_miou + new_miou;
  if (s == 0.0) return 0.0;
  return 2.0 * base_miou * new_miou / s;
}

Eigen::MatrixXd pca_project_2d(const std::vector<Eigen::VectorXd>& points) {
  if (points.empty()) throw std::invalid_argument("pca_project_2d: no points");
  const Eigen::Index dim = points[0].size();
  const Eigen::Index n = static_cast<Eigen::Index>(points.size());
  Eigen::MatrixXd x(n, dim);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (points[static_cast<std::size_t>(i)].size() != dim)
      throw std::invalid_argument("pca_project_2d: inconsistent dimensions");
    x.row(i) = points[static_cast<std::size_t>(i)].transpose();
  }
  Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  Eigen::MatrixXd cov = (x.transpose() * x) / std::max<double>(1.0, static_cast<double>(n - 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  Eigen::MatrixXd basis(dim, 2);
  // eigenvalues ascend; take the last two columns, largest first
  for (int k = 0; k < 2; ++k) {
    Eigen::VectorXd v = es.eigenvectors().col(dim - 1 - k);
    Eigen::Index imax;
    v.cwiseAbs().maxCoeff(&imax);
    if (v(imax) < 0) v = -v;  // deterministic sign
    basis.col(k) = v;
  }
  return x * basis;
}

namespace {
void open_or_throw(std::ofstream& out, const std::string& path) {
  out.open(path);
  if (!out) throw std::runtime_error("emit_reports: cannot write " + path);
}
std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}
}  // namespace

ReportFiles emit_reports(const std::string& out_dir, int step, const ConfusionMatrix& cm,
                         const MetricReport& report, const std::vector<EmbeddingPoint>& embeddings,
                         const std::vector<ComponentParams>& params) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  ReportFiles files;
  const std::string suffix = "_step" + std::to_string(step) + ".csv";

  files.metrics_csv = (fs::path(out_dir) / ("metrics" + suffix)).string();
  {
    std::ofstream out;
    open_or_throw(out, files.metrics_csv);
    out << "key,value\n";
    out << "base_miou," << fmt(report.base_miou) << "\n";
    out << "new_miou," << fmt(report.new_miou) << "\n";
    out << "all_miou," << fmt(report.all_miou) << "\n";
    out << "harmonic," << fmt(report.harmonic_mean) << "\n";
    for (const auto& [id, iou] : report.per_class_iou)
      out << "iou_class_" << id << "," << fmt(iou) << "\n";
    for (int id : report.excluded) out << "excluded_class_" << id << ",\n";
  }

  files.confusion_csv = (fs::path(out_dir) / ("confusion" + suffix)).string();
  {
    std::ofstream out;
    open_or_throw(out, files.confusion_csv);
    out << "gt\\pred";
    for (int c = 0; c < cm.classes(); ++c) out << "," << c;
    out << "\n";
    for (int r = 0; r < cm.classes(); ++r) {
      out << r;
      for (int c = 0; c < cm.classes(); ++c) out << "," << cm.counts(r, c);
      out << "\n";
    }
  }

  files.projection_csv = (fs::path(out_dir) / ("projection" + suffix)).string();
  {
    std::ofstream out;
    open_or_throw(out, files.projection_csv);
    out << "class_id,kind,x,y\n";
    if (!embeddings.empty()) {
      std::vector<Eigen::VectorXd> pts;
      pts.reserve(embeddings.size());
      for (const auto& e : embeddings) pts.push_back(e.vec);
      Eigen::MatrixXd proj = pca_project_2d(pts);
      for (std::size_t i = 0; i < embeddings.size(); ++i)
        out << embeddings[i].class_id << "," << embeddings[i].kind << ","
            << fmt(proj(static_cast<Eigen::Index>(i), 0)) << ","
            << fmt(proj(static_cast<Eigen::Index>(i), 1)) << "\n";
    }
  }

  files.params_csv = (fs::path(out_dir) / ("params" + suffix)).string();
  {
    std::ofstream out;
    open_or_throw(out, files.params_csv);
    out << "component,trainable,total\n";
    for (const auto& p : params)
      out << p.name << "," << p.trainable << "," << p.total << "\n";
  }
  return files;
}

}  // namespace incseg::metrics
