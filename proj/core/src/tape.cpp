#include "incseg/tape.hpp"

#include <cmath>
#include <stdexcept>

namespace incseg::ad {

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

int Tape::check(Value v) const {
  if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
    throw std::invalid_argument("tape: invalid value handle");
  return v.id;
}

Value Tape::push(Mat val, std::function<void(Tape&)> back) {
  Node n;
  n.val = std::move(val);
  if (grad_enabled_) {
    n.grad = Mat::Zero(n.val.rows(), n.val.cols());
    n.back = std::move(back);
  }
  nodes_.push_back(std::move(n));
  return Value{static_cast<int>(nodes_.size()) - 1};
}

Value Tape::constant(Mat v) { return push(std::move(v)); }

Value Tape::scalar(double v) {
  Mat m(1, 1);
  m(0, 0) = v;
  return push(std::move(m));
}

Value Tape::param(Param& p) {
  Value v = push(p.value);
  if (grad_enabled_) bindings_.emplace_back(v.id, &p);
  return v;
}

static void require_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string("tape: shape mismatch in ") + op);
}

Value Tape::add(Value a, Value b) {
  const Mat& va = val(a);
  const Mat& vb = val(b);
  require_same_shape(va, vb, "add");
  int ia = a.id, ib = b.id;
  Value out = push(va + vb);
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, ib, io](Tape& t) {
      const Mat& g = t.nodes_[io].grad;
      t.grad_ref(ia) += g;
      t.grad_ref(ib) += g;
    };
  }
  return out;
}

Value Tape::sub(Value a, Value b) {
  const Mat& va = val(a);
  const Mat& vb = val(b);
  require_same_shape(va, vb, "sub");
  int ia = a.id, ib = b.id;
  Value out = push(va - vb);
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, ib, io](Tape& t) {
      const Mat& g = t.nodes_[io].grad;
      t.grad_ref(ia) += g;
      t.grad_ref(ib) -= g;
    };
  }
  return out;
}

Value Tape::mul(Value a, Value b) {
  const Mat& va = val(a);
  const Mat& vb = val(b);
  require_same_shape(va, vb, "mul");
  int ia = a.id, ib = b.id;
  Value out = push(va.cwiseProduct(vb));
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, ib, io](Tape& t) {
      const Mat& g = t.nodes_[io].grad;
      t.grad_ref(ia) += g.cwiseProduct(t.nodes_[ib].val);
      t.grad_ref(ib) += g.cwiseProduct(t.nodes_[ia].val);
    };
  }
  return out;
}

Value Tape::div(Value a, Value b) {
  const Mat& va = val(a);
  const Mat& vb = val(b);
  require_same_shape(va, vb, "div");
  int ia = a.id, ib = b.id;
  Value out = push(va.cwiseQuotient(vb));
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, ib, io](Tape& t) {
      const Mat& g = t.nodes_[io].grad;
      const Mat& bv = t.nodes_[ib].val;
      const Mat& ov = t.nodes_[io].val;
      t.grad_ref(ia) += g.cwiseQuotient(bv);
      t.grad_ref(ib) -= g.cwiseProduct(ov).cwiseQuotient(bv);
    };
  }
  return out;
}

Value Tape::scale(Value a, double s) {
  int ia = a.id;
  Value out = push(val(a) * s);
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, io, s](Tape& t) { t.grad_ref(ia) += t.nodes_[io].grad * s; };
  }
  return out;
}

Value Tape::add_const(Value a, double c) {
  int ia = a.id;
  Value out = push(val(a).array() + c);
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, io](Tape& t) { t.grad_ref(ia) += t.nodes_[io].grad; };
  }
  return out;
}

Value Tape::sqrt_elem(Value a) {
  int ia = a.id;
  Value out = push(val(a).cwiseSqrt());
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, io](Tape& t) {
      const Mat& g = t.nodes_[io].grad;
      const Mat& ov = t.nodes_[io].val;
      t.grad_ref(ia).array() += g.array() / (2.0 * ov.array());
    };
  }
  return out;
}

Value Tape::square(Value a) {
  int ia = a.id;
  Value out = push(val(a).cwiseProduct(val(a)));
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, io](Tape& t) {
      t.grad_ref(ia) += 2.0 * t.nodes_[io].grad.cwiseProduct(t.nodes_[ia].val);
    };
  }
  return out;
}

Value Tape::gelu(Value a) {
  int ia = a.id;
  const Mat& x = val(a);
  Mat y = x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); });
  Value out = push(std::move(y));
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, io](Tape& t) {
      const Mat& g = t.nodes_[io].grad;
      const Mat& x = t.nodes_[ia].val;
      Mat d = x.unaryExpr([](double v) {
        double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        return cdf + v * pdf;
      });
      t.grad_ref(ia) += g.cwiseProduct(d);
    };
  }
  return out;
}

Value Tape::huber_elem(Value a, Value b, double delta) {
  if (delta <= 0.0) throw std::invalid_argument("huber: delta must be positive");
  const Mat& va = val(a);
  const Mat& vb = val(b);
  require_same_shape(va, vb, "huber_elem");
  Mat d = va - vb;
  Mat y = d.unaryExpr([delta](double v) {
    double ad = std::abs(v);
    return ad <= delta ? 0.5 * v * v : delta * (ad - 0.5 * delta);
  });
  int ia = a.id, ib = b.id;
  Value out = push(std::move(y));
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, ib, io, delta](Tape& t) {
      const Mat& g = t.nodes_[io].grad;
      Mat d = t.nodes_[ia].val - t.nodes_[ib].val;
      Mat dd = d.unaryExpr([delta](double v) {
        return std::abs(v) <= delta ? v : (v > 0 ? delta : -delta);
      });
      t.grad_ref(ia) += g.cwiseProduct(dd);
      t.grad_ref(ib) -= g.cwiseProduct(dd);
    };
  }
  return out;
}

Value Tape::matmul(Value a, Value b) {
  const Mat& va = val(a);
  const Mat& vb = val(b);
  if (va.cols() != vb.rows()) throw std::invalid_argument("tape: matmul inner dimension mismatch");
  int ia = a.id, ib = b.id;
  Value out = push(va * vb);
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, ib, io](Tape& t) {
      const Mat& g = t.nodes_[io].grad;
      t.grad_ref(ia).noalias() += g * t.nodes_[ib].val.transpose();
      t.grad_ref(ib).noalias() += t.nodes_[ia].val.transpose() * g;
    };
  }
  return out;
}

Value Tape::transpose(Value a) {
  int ia = a.id;
  Value out = push(val(a).transpose());
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, io](Tape& t) { t.grad_ref(ia) += t.nodes_[io].grad.transpose(); };
  }
  return out;
}

Value Tape::add_rowvec(Value a, Value row) {
  const Mat& va = val(a);
  const Mat& vr = val(row);
  if (vr.rows() != 1 || vr.cols() != va.cols())
    throw std::invalid_argument("tape: add_rowvec expects 1 x cols(a)");
  int ia = a.id, ir = row.id;
  Mat y = va;
  y.rowwise() += vr.row(0);
  Value out = push(std::move(y));
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, ir, io](Tape& t) {
      const Mat& g = t.nodes_[io].grad;
      t.grad_ref(ia) += g;
      t.grad_ref(ir) += g.colwise().sum();
    };
  }
  return out;
}

Value Tape::concat_rows(std::span<const Value> parts) {
  if (parts.empty()) throw std::invalid_argument("tape: concat_rows of nothing");
  Eigen::Index cols = val(parts[0]).cols(), rows = 0;
  for (Value p : parts) {
    if (val(p).cols() != cols) throw std::invalid_argument("tape: concat_rows column mismatch");
    rows += val(p).rows();
  }
  Mat y(rows, cols);
  Eigen::Index r = 0;
  std::vector<std::pair<int, Eigen::Index>> layout;  // (id, row offset)
  for (Value p : parts) {
    const Mat& v = val(p);
    y.middleRows(r, v.rows()) = v;
    layout.emplace_back(p.id, r);
    r += v.rows();
  }
  Value out = push(std::move(y));
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [layout, io](Tape& t) {
      const Mat& g = t.nodes_[io].grad;
      for (auto [id, off] : layout)
        t.grad_ref(id) += g.middleRows(off, t.nodes_[id].val.rows());
    };
  }
  return out;
}

Value Tape::concat_cols(std::span<const Value> parts) {
  if (parts.empty()) throw std::invalid_argument("tape: concat_cols of nothing");
  Eigen::Index rows = val(parts[0]).rows(), cols = 0;
  for (Value p : parts) {
    if (val(p).rows() != rows) throw std::invalid_argument("tape: concat_cols row mismatch");
    cols += val(p).cols();
  }
  Mat y(rows, cols);
  Eigen::Index c = 0;
  std::vector<std::pair<int, Eigen::Index>> layout;
  for (Value p : parts) {
    const Mat& v = val(p);
    y.middleCols(c, v.cols()) = v;
    layout.emplace_back(p.id, c);
    c += v.cols();
  }
  Value out = push(std::move(y));
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [layout, io](Tape& t) {
      const Mat& g = t.nodes_[io].grad;
      for (auto [id, off] : layout)
        t.grad_ref(id) += g.middleCols(off, t.nodes_[id].val.cols());
    };
  }
  return out;
}

Value Tape::slice_rows(Value a, Eigen::Index r0, Eigen::Index nrows) {
  const Mat& va = val(a);
  if (r0 < 0 || r0 + nrows > va.rows()) throw std::invalid_argument("tape: slice_rows out of range");
  int ia = a.id;
  Value out = push(va.middleRows(r0, nrows));
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, io, r0, nrows](Tape& t) {
      t.grad_ref(ia).middleRows(r0, nrows) += t.nodes_[io].grad;
    };
  }
  return out;
}

Value Tape::slice_cols(Value a, Eigen::Index c0, Eigen::Index ncols) {
  const Mat& va = val(a);
  if (c0 < 0 || c0 + ncols > va.cols()) throw std::invalid_argument("tape: slice_cols out of range");
  int ia = a.id;
  Value out = push(va.middleCols(c0, ncols));
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, io, c0, ncols](Tape& t) {
      t.grad_ref(ia).middleCols(c0, ncols) += t.nodes_[io].grad;
    };
  }
  return out;
}

Value Tape::sum_all(Value a) {
  int ia = a.id;
  Mat y(1, 1);
  y(0, 0) = val(a).sum();
  Value out = push(std::move(y));
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, io](Tape& t) {
      t.grad_ref(ia).array() += t.nodes_[io].grad(0, 0);
    };
  }
  return out;
}

Value Tape::mean_all(Value a) {
  double n = static_cast<double>(val(a).size());
  return scale(sum_all(a), 1.0 / n);
}

Value Tape::mean_rows(Value a) {
  const Mat& va = val(a);
  double n = static_cast<double>(va.rows());
  int ia = a.id;
  Value out = push(va.colwise().mean());
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, io, n](Tape& t) {
      const Mat& g = t.nodes_[io].grad;
      t.grad_ref(ia).rowwise() += (g / n).row(0);
    };
  }
  return out;
}

Value Tape::dot(Value a, Value b) { return sum_all(mul(a, b)); }

Value Tape::add_n(std::span<const Value> parts) {
  if (parts.empty()) throw std::invalid_argument("tape: add_n of nothing");
  const Mat& v0 = val(parts[0]);
  Mat y = v0;
  std::vector<int> ids{parts[0].id};
  for (std::size_t i = 1; i < parts.size(); ++i) {
    require_same_shape(v0, val(parts[i]), "add_n");
    y += val(parts[i]);
    ids.push_back(parts[i].id);
  }
  Value out = push(std::move(y));
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ids, io](Tape& t) {
      const Mat& g = t.nodes_[io].grad;
      for (int id : ids) t.grad_ref(id) += g;
    };
  }
  return out;
}

Value Tape::div_by_scalar(Value a, Value s) {
  if (val(s).size() != 1) throw std::invalid_argument("tape: div_by_scalar needs 1x1 divisor");
  const Mat& va = val(a);
  double sv = val(s)(0, 0);
  int ia = a.id, is = s.id;
  Value out = push(va / sv);
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, is, io](Tape& t) {
      const Mat& g = t.nodes_[io].grad;
      double sv = t.nodes_[is].val(0, 0);
      t.grad_ref(ia) += g / sv;
      t.grad_ref(is)(0, 0) -= g.cwiseProduct(t.nodes_[io].val).sum() / sv;
    };
  }
  return out;
}

Value Tape::softmax_rows(Value a) {
  const Mat& va = val(a);
  Mat y(va.rows(), va.cols());
  for (Eigen::Index r = 0; r < va.rows(); ++r) {
    double m = va.row(r).maxCoeff();
    Eigen::ArrayXd e = (va.row(r).array() - m).exp();
    y.row(r) = (e / e.sum()).matrix();
  }
  int ia = a.id;
  Value out = push(std::move(y));
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, io](Tape& t) {
      const Mat& g = t.nodes_[io].grad;
      const Mat& yv = t.nodes_[io].val;
      Mat& ga = t.grad_ref(ia);
      for (Eigen::Index r = 0; r < yv.rows(); ++r) {
        double s = g.row(r).cwiseProduct(yv.row(r)).sum();
        ga.row(r) += yv.row(r).cwiseProduct(g.row(r) - Mat::Constant(1, yv.cols(), s));
      }
    };
  }
  return out;
}

Value Tape::softmax_cols(Value a) {
  const Mat& va = val(a);
  Mat y(va.rows(), va.cols());
  for (Eigen::Index c = 0; c < va.cols(); ++c) {
    double m = va.col(c).maxCoeff();
    Eigen::ArrayXd e = (va.col(c).array() - m).exp();
    y.col(c) = (e / e.sum()).matrix();
  }
  int ia = a.id;
  Value out = push(std::move(y));
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, io](Tape& t) {
      const Mat& g = t.nodes_[io].grad;
      const Mat& yv = t.nodes_[io].val;
      Mat& ga = t.grad_ref(ia);
      for (Eigen::Index c = 0; c < yv.cols(); ++c) {
        double s = g.col(c).cwiseProduct(yv.col(c)).sum();
        ga.col(c) += yv.col(c).cwiseProduct(g.col(c) - Mat::Constant(yv.rows(), 1, s));
      }
    };
  }
  return out;
}

Value Tape::layer_norm_rows(Value a, Value gain, Value bias, double eps) {
  const Mat& x = val(a);
  const Mat& gn = val(gain);
  const Mat& bs = val(bias);
  if (gn.rows() != 1 || gn.cols() != x.cols() || bs.rows() != 1 || bs.cols() != x.cols())
    throw std::invalid_argument("tape: layer_norm gain/bias must be 1 x cols");
  Eigen::Index R = x.rows(), C = x.cols();
  Mat xhat(R, C);
  Eigen::VectorXd inv_std(R);
  for (Eigen::Index r = 0; r < R; ++r) {
    double mu = x.row(r).mean();
    double var = (x.row(r).array() - mu).square().mean();
    double is = 1.0 / std::sqrt(var + eps);
    inv_std(r) = is;
    xhat.row(r) = ((x.row(r).array() - mu) * is).matrix();
  }
  Mat y = (xhat.array().rowwise() * gn.row(0).array()).matrix();
  y.rowwise() += bs.row(0);
  int ia = a.id, ig = gain.id, ib = bias.id;
  Value out = push(std::move(y));
  if (grad_enabled_) {
    int io = out.id;
    // capture xhat / inv_std by value; recomputing would also be fine
    nodes_[io].back = [ia, ig, ib, io, xhat, inv_std](Tape& t) {
      const Mat& g = t.nodes_[io].grad;
      const Mat& gn = t.nodes_[ig].val;
      Eigen::Index R = g.rows();
      t.grad_ref(ig) += g.cwiseProduct(xhat).colwise().sum();
      t.grad_ref(ib) += g.colwise().sum();
      Mat& ga = t.grad_ref(ia);
      for (Eigen::Index r = 0; r < R; ++r) {
        Eigen::RowVectorXd gh = g.row(r).cwiseProduct(gn.row(0));
        double m1 = gh.mean();
        double m2 = gh.cwiseProduct(xhat.row(r)).mean();
        ga.row(r) += inv_std(r) * (gh.array() - m1 - xhat.row(r).array() * m2).matrix();
      }
    };
  }
  return out;
}

Value Tape::l2_normalize_rows(Value a) {
  const Mat& x = val(a);
  Eigen::Index R = x.rows();
  Mat y(R, x.cols());
  Eigen::VectorXd norms(R);
  for (Eigen::Index r = 0; r < R; ++r) {
    double n = x.row(r).norm();
    if (n == 0.0) throw std::invalid_argument("l2_normalize: zero-norm row");
    norms(r) = n;
    y.row(r) = x.row(r) / n;
  }
  int ia = a.id;
  Value out = push(std::move(y));
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, io, norms](Tape& t) {
      const Mat& g = t.nodes_[io].grad;
      const Mat& yv = t.nodes_[io].val;
      Mat& ga = t.grad_ref(ia);
      for (Eigen::Index r = 0; r < yv.rows(); ++r) {
        double s = g.row(r).dot(yv.row(r));
        ga.row(r) += (g.row(r) - s * yv.row(r)) / norms(r);
      }
    };
  }
  return out;
}

Value Tape::colwise_max(Value a) {
  const Mat& va = val(a);
  if (va.rows() < 1) throw std::invalid_argument("colwise_max: empty input");
  Eigen::Index C = va.cols();
  Mat y(1, C);
  std::vector<int> arg(C);
  for (Eigen::Index c = 0; c < C; ++c) {
    Eigen::Index best = 0;
    double bv = va(0, c);
    for (Eigen::Index r = 1; r < va.rows(); ++r)
      if (va(r, c) > bv) { bv = va(r, c); best = r; }
    y(0, c) = bv;
    arg[c] = static_cast<int>(best);
  }
  int ia = a.id;
  Value out = push(std::move(y));
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, io, arg](Tape& t) {
      const Mat& g = t.nodes_[io].grad;
      Mat& ga = t.grad_ref(ia);
      for (Eigen::Index c = 0; c < g.cols(); ++c) ga(arg[c], c) += g(0, c);
    };
  }
  return out;
}

Value Tape::pairwise_distances(Value t) {
  const Mat& x = val(t);
  Eigen::Index N = x.rows();
  if (N < 2) throw std::invalid_argument("pairwise_distances: need at least 2 points");
  Mat d = Mat::Zero(N, N);
  for (Eigen::Index i = 0; i < N; ++i)
    for (Eigen::Index j = i + 1; j < N; ++j) {
      double v = (x.row(i) - x.row(j)).norm();
      d(i, j) = v;
      d(j, i) = v;
    }
  int ia = t.id;
  Value out = push(std::move(d));
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, io](Tape& tp) {
      const Mat& g = tp.nodes_[io].grad;
      const Mat& x = tp.nodes_[ia].val;
      const Mat& d = tp.nodes_[io].val;
      Mat& ga = tp.grad_ref(ia);
      Eigen::Index N = x.rows();
      for (Eigen::Index i = 0; i < N; ++i)
        for (Eigen::Index j = 0; j < N; ++j) {
          if (i == j || d(i, j) == 0.0) continue;
          double w = g(i, j) / d(i, j);
          if (w == 0.0) continue;
          ga.row(i) += w * (x.row(i) - x.row(j));
          ga.row(j) -= w * (x.row(i) - x.row(j));
        }
    };
  }
  return out;
}

Value Tape::bilinear_upsample(Value a, int src_h, int src_w, int dst_h, int dst_w) {
  const Mat& va = val(a);
  if (va.cols() != static_cast<Eigen::Index>(src_h) * src_w)
    throw std::invalid_argument("bilinear_upsample: cols != src_h*src_w");
  if (dst_h % src_h != 0 || dst_w % src_w != 0)
    throw std::invalid_argument("bilinear_upsample: non-integer scale");
  double sy = static_cast<double>(dst_h) / src_h;
  double sx = static_cast<double>(dst_w) / src_w;
  // pixel-center mapping; taps and weights shared across channels
  struct Tap { int i0, i1; double w00, w01, w10, w11; };
  std::vector<Tap> taps(static_cast<std::size_t>(dst_h) * dst_w);
  std::vector<int> y0s(dst_h), y1s(dst_h), x0s(dst_w), x1s(dst_w);
  std::vector<double> fys(dst_h), fxs(dst_w);
  for (int y = 0; y < dst_h; ++y) {
    double v = (y + 0.5) / sy - 0.5;
    v = std::min(std::max(v, 0.0), static_cast<double>(src_h - 1));
    int y0 = static_cast<int>(std::floor(v));
    y0s[y] = y0;
    y1s[y] = std::min(y0 + 1, src_h - 1);
    fys[y] = v - y0;
  }
  for (int x = 0; x < dst_w; ++x) {
    double v = (x + 0.5) / sx - 0.5;
    v = std::min(std::max(v, 0.0), static_cast<double>(src_w - 1));
    int x0 = static_cast<int>(std::floor(v));
    x0s[x] = x0;
    x1s[x] = std::min(x0 + 1, src_w - 1);
    fxs[x] = v - x0;
  }
  for (int y = 0; y < dst_h; ++y)
    for (int x = 0; x < dst_w; ++x) {
      Tap& tp = taps[static_cast<std::size_t>(y) * dst_w + x];
      tp.i0 = y0s[y] * src_w;
      tp.i1 = y1s[y] * src_w;
      double fy = fys[y], fx = fxs[x];
      tp.w00 = (1 - fy) * (1 - fx);
      tp.w01 = (1 - fy) * fx;
      tp.w10 = fy * (1 - fx);
      tp.w11 = fy * fx;
    }
  Eigen::Index K = va.rows();
  Mat y(K, static_cast<Eigen::Index>(dst_h) * dst_w);
  for (int yy = 0; yy < dst_h; ++yy)
    for (int xx = 0; xx < dst_w; ++xx) {
      const Tap& tp = taps[static_cast<std::size_t>(yy) * dst_w + xx];
      int c00 = tp.i0 + x0s[xx], c01 = tp.i0 + x1s[xx];
      int c10 = tp.i1 + x0s[xx], c11 = tp.i1 + x1s[xx];
      Eigen::Index oc = static_cast<Eigen::Index>(yy) * dst_w + xx;
      y.col(oc) = tp.w00 * va.col(c00) + tp.w01 * va.col(c01) + tp.w10 * va.col(c10) +
                  tp.w11 * va.col(c11);
    }
  int ia = a.id;
  Value out = push(std::move(y));
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ia, io, taps, x0s, x1s, dst_h, dst_w](Tape& t) {
      const Mat& g = t.nodes_[io].grad;
      Mat& ga = t.grad_ref(ia);
      for (int yy = 0; yy < dst_h; ++yy)
        for (int xx = 0; xx < dst_w; ++xx) {
          const Tap& tp = taps[static_cast<std::size_t>(yy) * dst_w + xx];
          Eigen::Index oc = static_cast<Eigen::Index>(yy) * dst_w + xx;
          ga.col(tp.i0 + x0s[xx]) += tp.w00 * g.col(oc);
          ga.col(tp.i0 + x1s[xx]) += tp.w01 * g.col(oc);
          ga.col(tp.i1 + x0s[xx]) += tp.w10 * g.col(oc);
          ga.col(tp.i1 + x1s[xx]) += tp.w11 * g.col(oc);
        }
    };
  }
  return out;
}

Value Tape::conv3x3(Value x, int h, int w, Value weight, Value bias) {
  const Mat& xv = val(x);
  const Mat& wv = val(weight);
  const Mat& bv = val(bias);
  Eigen::Index cin = xv.cols();
  if (xv.rows() != static_cast<Eigen::Index>(h) * w)
    throw std::invalid_argument("conv3x3: rows != h*w");
  if (wv.rows() != 9 * cin) throw std::invalid_argument("conv3x3: weight rows != 9*Cin");
  if (bv.rows() != 1 || bv.cols() != wv.cols())
    throw std::invalid_argument("conv3x3: bias must be 1 x Cout");
  // im2col with zero padding
  Mat cols(static_cast<Eigen::Index>(h) * w, 9 * cin);
  cols.setZero();
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      int k = (dy + 1) * 3 + (dx + 1);
      for (int yy = 0; yy < h; ++yy) {
        int sy = yy + dy;
        if (sy < 0 || sy >= h) continue;
        for (int xx = 0; xx < w; ++xx) {
          int sx = xx + dx;
          if (sx < 0 || sx >= w) continue;
          cols.block(static_cast<Eigen::Index>(yy) * w + xx, static_cast<Eigen::Index>(k) * cin, 1, cin) =
              xv.row(static_cast<Eigen::Index>(sy) * w + sx);
        }
      }
    }
  Mat y = cols * wv;
  y.rowwise() += bv.row(0);
  int ix = x.id, iw = weight.id, ib = bias.id;
  Value out = push(std::move(y));
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ix, iw, ib, io, cols, h, w, cin](Tape& t) {
      const Mat& g = t.nodes_[io].grad;
      const Mat& wv = t.nodes_[iw].val;
      t.grad_ref(iw).noalias() += cols.transpose() * g;
      t.grad_ref(ib) += g.colwise().sum();
      Mat gcols = g * wv.transpose();  // (h*w) x (9*cin)
      Mat& gx = t.grad_ref(ix);
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          int k = (dy + 1) * 3 + (dx + 1);
          for (int yy = 0; yy < h; ++yy) {
            int sy = yy + dy;
            if (sy < 0 || sy >= h) continue;
            for (int xx = 0; xx < w; ++xx) {
              int sx = xx + dx;
              if (sx < 0 || sx >= w) continue;
              gx.row(static_cast<Eigen::Index>(sy) * w + sx) +=
                  gcols.block(static_cast<Eigen::Index>(yy) * w + xx, static_cast<Eigen::Index>(k) * cin, 1, cin);
            }
          }
        }
    };
  }
  return out;
}

Value Tape::softmax_cross_entropy(Value logits, const std::vector<int>& labels, int ignore_label) {
  const Mat& z = val(logits);
  if (static_cast<Eigen::Index>(labels.size()) != z.cols())
    throw std::invalid_argument("softmax_cross_entropy: labels size != pixels");
  Eigen::Index K = z.rows(), P = z.cols();
  double loss = 0.0;
  Eigen::Index counted = 0;
  for (Eigen::Index p = 0; p < P; ++p) {
    int lab = labels[p];
    if (lab == ignore_label) continue;
    if (lab < 0 || lab >= K)
      throw std::invalid_argument("softmax_cross_entropy: label out of range");
    double m = z.col(p).maxCoeff();
    double lse = std::log((z.col(p).array() - m).exp().sum()) + m;
    loss += lse - z(lab, p);
    ++counted;
  }
  if (counted == 0) throw std::invalid_argument("softmax_cross_entropy: all pixels ignored");
  Mat y(1, 1);
  y(0, 0) = loss / counted;
  int il = logits.id;
  Value out = push(std::move(y));
  if (grad_enabled_) {
    int io = out.id;
    auto labs = labels;  // copy for the closure
    double inv = 1.0 / static_cast<double>(counted);
    nodes_[io].back = [il, io, labs, ignore_label, inv](Tape& t) {
      double g = t.nodes_[io].grad(0, 0);
      const Mat& z = t.nodes_[il].val;
      Mat& gz = t.grad_ref(il);
      for (Eigen::Index p = 0; p < z.cols(); ++p) {
        int lab = labs[p];
        if (lab == ignore_label) continue;
        double m = z.col(p).maxCoeff();
        Eigen::ArrayXd e = (z.col(p).array() - m).exp();
        Eigen::ArrayXd sm = e / e.sum();
        gz.col(p) += (g * inv) * sm.matrix();
        gz(lab, p) -= g * inv;
      }
    };
  }
  return out;
}

Value Tape::kl_divergence_cols(Value p, Value q, double eps) {
  const Mat& pv = val(p);
  const Mat& qv = val(q);
  require_same_shape(pv, qv, "kl_divergence_cols");
  Eigen::Index M = pv.cols();
  double total = 0.0;
  for (Eigen::Index c = 0; c < M; ++c)
    for (Eigen::Index r = 0; r < pv.rows(); ++r) {
      double pe = pv(r, c);
      if (pe <= 0.0) continue;  // 0 * log(0/q) := 0
      double qc = std::max(qv(r, c), eps);
      total += pe * std::log(pe / qc);
    }
  Mat y(1, 1);
  y(0, 0) = total / static_cast<double>(M);
  int ip = p.id, iq = q.id;
  Value out = push(std::move(y));
  if (grad_enabled_) {
    int io = out.id;
    nodes_[io].back = [ip, iq, io, eps](Tape& t) {
      double g = t.nodes_[io].grad(0, 0);
      const Mat& pv = t.nodes_[ip].val;
      const Mat& qv = t.nodes_[iq].val;
      double invM = 1.0 / static_cast<double>(pv.cols());
      Mat& gp = t.grad_ref(ip);
      Mat& gq = t.grad_ref(iq);
      for (Eigen::Index c = 0; c < pv.cols(); ++c)
        for (Eigen::Index r = 0; r < pv.rows(); ++r) {
          double pe = pv(r, c);
          if (pe <= 0.0) continue;
          double qc = std::max(qv(r, c), eps);
          gp(r, c) += g * invM * (std::log(pe / qc) + 1.0);
          if (qv(r, c) > eps) gq(r, c) -= g * invM * pe / qc;
        }
    };
  }
  return out;
}

void Tape::backward(Value root, double seed) {
  if (!grad_enabled_) throw std::logic_error("tape: backward on a no-grad tape");
  int ir = check(root);
  if (nodes_[ir].val.size() != 1)
    throw std::invalid_argument("tape: backward root must be a scalar");
  nodes_[ir].grad(0, 0) += seed;
  for (int i = ir; i >= 0; --i)
    if (nodes_[i].back) nodes_[i].back(*this);
}

void Tape::accumulate_param_grads(double scale) {
  for (auto& [id, p] : bindings_) p->grad += nodes_[id].grad * scale;
}

}  // namespace incseg::ad
