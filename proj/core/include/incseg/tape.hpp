#pragma once

#include <Eigen/Dense>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace incseg::ad {

using Mat = Eigen::MatrixXd;

// A named, persistent tensor of weights. Lives outside any tape; tapes bind
// to it per forward pass and the training loop accumulates into `grad`.
struct Param {
  std::string name;
  Mat value;
  Mat grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, Mat v) : name(std::move(n)), value(std::move(v)) {
    grad = Mat::Zero(value.rows(), value.cols());
  }
  void zero_grad() { grad.setZero(); }
  Eigen::Index size() const { return value.size(); }
};

// Handle into a Tape. Default-constructed handles are invalid.
struct Value {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape over dense double matrices. One tape per forward pass;
// ops append nodes, backward() runs the closures in reverse order. Not
// thread-safe; use one tape per thread.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  Value constant(Mat v);
  Value scalar(double v);
  Value param(Param& p);

  const Mat& val(Value v) const { return nodes_[check(v)].val; }
  const Mat& grad(Value v) const { return nodes_[check(v)].grad; }

  // ---- elementwise / arithmetic ----
  Value add(Value a, Value b);
  Value sub(Value a, Value b);
  Value mul(Value a, Value b);            // hadamard
  Value div(Value a, Value b);            // elementwise
  Value scale(Value a, double s);
  Value add_const(Value a, double c);
  Value sqrt_elem(Value a);               // requires positive entries for a finite gradient
  Value square(Value a);
  Value gelu(Value a);                    // exact erf form
  Value huber_elem(Value a, Value b, double delta);

  // ---- linear algebra ----
  Value matmul(Value a, Value b);
  Value transpose(Value a);
  Value add_rowvec(Value a, Value row);   // broadcast a 1xC row over all rows of a

  // ---- shape ----
  Value concat_rows(std::span<const Value> parts);
  Value concat_cols(std::span<const Value> parts);
  Value slice_rows(Value a, Eigen::Index r0, Eigen::Index nrows);
  Value slice_cols(Value a, Eigen::Index c0, Eigen::Index ncols);

  // ---- reductions ----
  Value sum_all(Value a);                 // 1x1
  Value mean_all(Value a);                // 1x1
  Value mean_rows(Value a);               // 1xC, mean over rows
  Value dot(Value a, Value b);            // 1x1, sum(a.*b), shapes must match
  Value add_n(std::span<const Value> parts);
  Value div_by_scalar(Value a, Value s);  // s is 1x1

  // ---- row/col structured ----
  Value softmax_rows(Value a);
  Value softmax_cols(Value a);
  Value layer_norm_rows(Value a, Value gain, Value bias, double eps = 1e-5);
  Value l2_normalize_rows(Value a);
  // Columnwise max over the rows of a (n x M -> 1 x M); subgradient routes to
  // the smallest row index achieving the max.
  Value colwise_max(Value a);
  Value pairwise_distances(Value t);      // N x C -> N x N Euclidean, zero diagonal

  // ---- grids (rows = channels, cols = flattened h*w grid) ----
  Value bilinear_upsample(Value a, int src_h, int src_w, int dst_h, int dst_w);
  // x: (h*w) x Cin rows = pixels; weight: (9*Cin) x Cout; zero padding, stride 1.
  Value conv3x3(Value x, int h, int w, Value weight, Value bias);

  // ---- losses ----
  // logits: K x P (channels x pixels); labels: size P with values in [0,K) or
  // ignore_label. Mean CE over counted pixels.
  Value softmax_cross_entropy(Value logits, const std::vector<int>& labels, int ignore_label = -1);
  // Columns of p and q are distributions; q is clamped to >= eps before the
  // log; zero p entries contribute zero. Mean over columns.
  Value kl_divergence_cols(Value p, Value q, double eps = 1e-8);

  // Seeds d(root)/d(root) = seed and runs all closures in reverse order.
  void backward(Value root, double seed = 1.0);

  // Adds each bound node's gradient (times scale) into its Param::grad.
  void accumulate_param_grads(double scale = 1.0);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat val;
    Mat grad;
    std::function<void(Tape&)> back;  // empty for leaves / no-grad tapes
  };

  int check(Value v) const;
  Value push(Mat val, std::function<void(Tape&)> back = {});
  Mat& grad_ref(int id) { return nodes_[id].grad; }

  std::vector<Node> nodes_;
  std::vector<std::pair<int, Param*>> bindings_;
  bool grad_enabled_ = true;
};

}  // namespace incseg::ad
