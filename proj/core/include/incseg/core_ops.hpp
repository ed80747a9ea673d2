#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "incseg/tape.hpp"

namespace incseg::ops {

using ad::Mat;
using ad::Tape;
using ad::Value;
using Vec = Eigen::VectorXd;

struct HuberConfig {
  double delta = 1.0;
};

// {0,1} grid at patch resolution.
struct BinaryMask {
  int h = 0, w = 0;
  std::vector<std::uint8_t> values;  // row-major, size h*w

  BinaryMask() = default;
  BinaryMask(int h_, int w_) : h(h_), w(w_), values(static_cast<std::size_t>(h_) * w_, 0) {}
  int size() const { return h * w; }
  std::uint8_t& at(int y, int x) { return values[static_cast<std::size_t>(y) * w + x]; }
  std::uint8_t at(int y, int x) const { return values[static_cast<std::size_t>(y) * w + x]; }
  int count() const;
  bool empty_mask() const { return count() == 0; }
};

BinaryMask mask_union(const BinaryMask& a, const BinaryMask& b);
BinaryMask mask_not(const BinaryMask& a);
BinaryMask mask_and(const BinaryMask& a, const BinaryMask& b);

// ---- plain (value-level) operations ----

double cosine_sim(const Vec& a, const Vec& b);
double huber(double x, double y, const HuberConfig& cfg);

// psi_D[i][j] = ||t_i - t_j||; with normalize, every entry is divided by the
// mean off-diagonal distance.
Mat distance_potential(const std::vector<Vec>& t, bool normalize);

// cosine of the angle at vertex tj
double angle_potential(const Vec& ti, const Vec& tj, const Vec& tk);

// per-column softmax of S/temperature
Mat class_softmax(const Mat& s, double temperature);

// mean over columns of sum_c P log(P/Q), Q clamped to >= eps
double kl_divergence(const Mat& p, const Mat& q, double eps = 1e-8);

// mean of the rows of v selected by the mask; nullopt when no pixel is active
std::optional<Vec> masked_mean_pool(const BinaryMask& mask, const Mat& v);

// k directed pairs (i,j), i != j, with the largest cos(t_i, t_j); ties broken
// by ascending (i,j).
std::vector<std::pair<int, int>> topk_similar_pairs(const Mat& t, int k);

// ---- differentiable (tape) operations ----
// Row-vector convention: embeddings are 1 x C rows, banks are N x C.

Value cosine_sim(Tape& t, Value a, Value b);
Value distance_potential(Tape& t, Value bank, bool normalize);
Value angle_potential(Tape& t, Value ti, Value tj, Value tk);
Value class_softmax(Tape& t, Value s, double temperature);
Value kl_divergence(Tape& t, Value p, Value q, double eps = 1e-8);
std::optional<Value> masked_mean_pool(Tape& t, const BinaryMask& mask, Value v);

}  // namespace incseg::ops
