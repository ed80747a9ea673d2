#include "incseg/core_ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace incseg::ops {

int BinaryMask::count() const {
  int c = 0;
  for (auto v : values) c += v ? 1 : 0;
  return c;
}

static void require_same_grid(const BinaryMask& a, const BinaryMask& b, const char* op) {
  if (a.h != b.h || a.w != b.w)
    throw std::invalid_argument(std::string("mask ") + op + ": grid shape mismatch");
}

BinaryMask mask_union(const BinaryMask& a, const BinaryMask& b) {
  require_same_grid(a, b, "union");
  BinaryMask r(a.h, a.w);
  for (std::size_t i = 0; i < r.values.size(); ++i) r.values[i] = (a.values[i] || b.values[i]) ? 1 : 0;
  return r;
}

BinaryMask mask_not(const BinaryMask& a) {
  BinaryMask r(a.h, a.w);
  for (std::size_t i = 0; i < r.values.size(); ++i) r.values[i] = a.values[i] ? 0 : 1;
  return r;
}

BinaryMask mask_and(const BinaryMask& a, const BinaryMask& b) {
  require_same_grid(a, b, "and");
  BinaryMask r(a.h, a.w);
  for (std::size_t i = 0; i < r.values.size(); ++i) r.values[i] = (a.values[i] && b.values[i]) ? 1 : 0;
  return r;
}

double cosine_sim(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_sim: dimension mismatch");
  double na = a.norm(), nb = b.norm();
  if (na == 0.0) throw std::domain_error("cosine_sim: first argument has zero norm");
  if (nb == 0.0) throw std::domain_error("cosine_sim: second argument has zero norm");
  return a.dot(b) / (na * nb);
}

double huber(double x, double y, const HuberConfig& cfg) {
  if (cfg.delta <= 0.0) throw std::domain_error("huber: delta must be positive");
  double d = x - y, ad = std::abs(d);
  return ad <= cfg.delta ? 0.5 * d * d : cfg.delta * (ad - 0.5 * cfg.delta);
}

Mat distance_potential(const std::vector<Vec>& t, bool normalize) {
  const int n = static_cast<int>(t.size());
  if (n < 2) throw std::domain_error("distance_potential: need at least 2 embeddings");
  Mat d = Mat::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double v = (t[i] - t[j]).norm();
      d(i, j) = v;
      d(j, i) = v;
    }
  if (normalize) {
    double mean = d.sum() / (static_cast<double>(n) * (n - 1));
    if (mean > 0.0) d /= mean;
  }
  return d;
}

double angle_potential(const Vec& ti, const Vec& tj, const Vec& tk) {
  Vec e = ti - tj, f = tk - tj;
  double ne = e.norm(), nf = f.norm();
  if (ne == 0.0 || nf == 0.0)
    throw std::domain_error("angle_potential: degenerate vertex (coincident points)");
  return e.dot(f) / (ne * nf);
}

Mat class_softmax(const Mat& s, double temperature) {
  if (temperature <= 0.0) throw std::domain_error("class_softmax: temperature must be positive");
  Mat y(s.rows(), s.cols());
  for (Eigen::Index c = 0; c < s.cols(); ++c) {
    Eigen::ArrayXd z = s.col(c).array() / temperature;
    double m = z.maxCoeff();
    Eigen::ArrayXd e = (z - m).exp();
    y.col(c) = (e / e.sum()).matrix();
  }
  return y;
}

double kl_divergence(const Mat& p, const Mat& q, double eps) {
  if (p.rows() != q.rows() || p.cols() != q.cols())
    throw std::invalid_argument("kl_divergence: shape mismatch");
  double total = 0.0;
  for (Eigen::Index c = 0; c < p.cols(); ++c)
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      double pe = p(r, c);
      if (pe <= 0.0) continue;
      total += pe * std::log(pe / std::max(q(r, c), eps));
    }
  return total / static_cast<double>(p.cols());
}

std::optional<Vec> masked_mean_pool(const BinaryMask& mask, const Mat& v) {
  if (mask.size() != v.rows())
    throw std::invalid_argument("masked_mean_pool: mask length != rows of V");
  int cnt = mask.count();
  if (cnt == 0) return std::nullopt;
  Vec acc = Vec::Zero(v.cols());
  for (int i = 0; i < mask.size(); ++i)
    if (mask.values[i]) acc += v.row(i).transpose();
  return acc / cnt;
}

std::vector<std::pair<int, int>> topk_similar_pairs(const Mat& t, int k) {
  const int n = static_cast<int>(t.rows());
  const long total = static_cast<long>(n) * (n - 1);
  if (k < 1 || k > total)
    throw std::domain_error("topk_similar_pairs: k outside [1, N(N-1)]");
  struct Edge {
    double score;
    int i, j;
  };
  std::vector<Edge> edges;
  edges.reserve(total);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      edges.push_back({cosine_sim(t.row(i).transpose(), t.row(j).transpose()), i, j});
    }
  std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.i != b.i) return a.i < b.i;
    return a.j < b.j;
  });
  std::vector<std::pair<int, int>> out;
  out.reserve(k);
  for (int e = 0; e < k; ++e) out.emplace_back(edges[e].i, edges[e].j);
  return out;
}

// ---- tape variants ----

Value cosine_sim(Tape& t, Value a, Value b) {
  const Mat& va = t.val(a);
  const Mat& vb = t.val(b);
  if (va.norm() == 0.0) throw std::domain_error("cosine_sim: first argument has zero norm");
  if (vb.norm() == 0.0) throw std::domain_error("cosine_sim: second argument has zero norm");
  Value na = t.sqrt_elem(t.dot(a, a));
  Value nb = t.sqrt_elem(t.dot(b, b));
  return t.div(t.dot(a, b), t.mul(na, nb));
}

Value distance_potential(Tape& t, Value bank, bool normalize) {
  if (t.val(bank).rows() < 2)
    throw std::domain_error("distance_potential: need at least 2 embeddings");
  Value d = t.pairwise_distances(bank);
  if (!normalize) return d;
  Eigen::Index n = t.val(bank).rows();
  // divide (not multiply by the reciprocal) so this matches the plain
  // evaluation path bit-for-bit
  Value mean = t.div(t.sum_all(d), t.scalar(static_cast<double>(n) * (n - 1)));
  return t.div_by_scalar(d, mean);
}

Value angle_potential(Tape& t, Value ti, Value tj, Value tk) {
  Value e = t.sub(ti, tj);
  Value f = t.sub(tk, tj);
  if (t.val(e).norm() == 0.0 || t.val(f).norm() == 0.0)
    throw std::domain_error("angle_potential: degenerate vertex (coincident points)");
  Value ne = t.sqrt_elem(t.dot(e, e));
  Value nf = t.sqrt_elem(t.dot(f, f));
  return t.div(t.dot(e, f), t.mul(ne, nf));
}

Value class_softmax(Tape& t, Value s, double temperature) {
  if (temperature <= 0.0) throw std::domain_error("class_softmax: temperature must be positive");
  return t.softmax_cols(t.scale(s, 1.0 / temperature));
}

Value kl_divergence(Tape& t, Value p, Value q, double eps) {
  return t.kl_divergence_cols(p, q, eps);
}

std::optional<Value> masked_mean_pool(Tape& t, const BinaryMask& mask, Value v) {
  if (mask.size() != t.val(v).rows())
    throw std::invalid_argument("masked_mean_pool: mask length != rows of V");
  int cnt = mask.count();
  if (cnt == 0) return std::nullopt;
  Mat sel(1, mask.size());
  for (int i = 0; i < mask.size(); ++i) sel(0, i) = mask.values[i] ? 1.0 : 0.0;
  return t.scale(t.matmul(t.constant(std::move(sel)), v), 1.0 / cnt);
}

}  // namespace incseg::ops
