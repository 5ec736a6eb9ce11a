#include "otnpar/graph.hpp"

#include <cmath>

namespace otnpar::ad {

namespace {
constexpr double kProbEps = 1e-7;

void check_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string("graph: ") + op + " shape mismatch (" +
                     std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + ")");
}
}  // namespace

Mat layer_norm_rows(const Mat& x, double eps) {
  Mat y(x.rows(), x.cols());
  const auto c = static_cast<double>(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double mean = x.row(r).mean();
    double var = (x.row(r).array() - mean).square().sum() / c;
    y.row(r) = (x.row(r).array() - mean) / std::sqrt(var + eps);
  }
  return y;
}

int Graph::push(Mat value, BackFn back) {
  Node node;
  node.grad = Mat::Zero(value.rows(), value.cols());
  node.value = std::move(value);
  node.back = std::move(back);
  nodes_.push_back(std::move(node));
  return static_cast<int>(nodes_.size()) - 1;
}

int Graph::matmul(int a, int b) {
  const Mat& A = value(a);
  const Mat& B = value(b);
  if (A.cols() != B.rows()) throw ShapeError("graph: matmul inner dimensions disagree");
  const int id = static_cast<int>(nodes_.size());
  return push(A * B, [a, b, id](Graph& g) {
    const Mat& go = g.grad(id);
    g.grad_ref(a).noalias() += go * g.value(b).transpose();
    g.grad_ref(b).noalias() += g.value(a).transpose() * go;
  });
}

int Graph::add(int a, int b) {
  check_same_shape(value(a), value(b), "add");
  const int id = static_cast<int>(nodes_.size());
  return push(value(a) + value(b), [a, b, id](Graph& g) {
    g.grad_ref(a) += g.grad(id);
    g.grad_ref(b) += g.grad(id);
  });
}

int Graph::sub(int a, int b) {
  check_same_shape(value(a), value(b), "sub");
  const int id = static_cast<int>(nodes_.size());
  return push(value(a) - value(b), [a, b, id](Graph& g) {
    g.grad_ref(a) += g.grad(id);
    g.grad_ref(b) -= g.grad(id);
  });
}

int Graph::hadamard(int a, int b) {
  check_same_shape(value(a), value(b), "hadamard");
  const int id = static_cast<int>(nodes_.size());
  return push(value(a).cwiseProduct(value(b)), [a, b, id](Graph& g) {
    g.grad_ref(a) += g.grad(id).cwiseProduct(g.value(b));
    g.grad_ref(b) += g.grad(id).cwiseProduct(g.value(a));
  });
}

int Graph::scale(int a, double s) {
  const int id = static_cast<int>(nodes_.size());
  return push(value(a) * s, [a, s, id](Graph& g) { g.grad_ref(a) += s * g.grad(id); });
}

int Graph::add_row_broadcast(int a, int row) {
  const Mat& A = value(a);
  const Mat& r = value(row);
  if (r.rows() != 1 || r.cols() != A.cols())
    throw ShapeError("graph: add_row_broadcast expects a 1xC row");
  Mat out = A;
  out.rowwise() += r.row(0);
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(out), [a, row, id](Graph& g) {
    g.grad_ref(a) += g.grad(id);
    g.grad_ref(row).row(0) += g.grad(id).colwise().sum();
  });
}

int Graph::tile_rows(int a, int times) {
  const Mat& A = value(a);
  Mat out(A.rows() * times, A.cols());
  for (int t = 0; t < times; ++t) out.middleRows(t * A.rows(), A.rows()) = A;
  const Eigen::Index n = A.rows();
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(out), [a, times, n, id](Graph& g) {
    for (int t = 0; t < times; ++t) g.grad_ref(a) += g.grad(id).middleRows(t * n, n);
  });
}

int Graph::sigmoid(int a) {
  Mat out = value(a).unaryExpr([](double z) { return 1.0 / (1.0 + std::exp(-z)); });
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(out), [a, id](Graph& g) {
    const Mat& y = g.value(id);
    g.grad_ref(a).array() += g.grad(id).array() * y.array() * (1.0 - y.array());
  });
}

int Graph::squared_relu(int a) {
  Mat out = value(a).unaryExpr([](double z) { return z > 0.0 ? z * z : 0.0; });
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(out), [a, id](Graph& g) {
    const Mat& x = g.value(a);
    g.grad_ref(a).array() +=
        g.grad(id).array() * x.unaryExpr([](double z) { return z > 0.0 ? 2.0 * z : 0.0; }).array();
  });
}

namespace {

// Shared LN backward: given normalized rows y, inverse stddev per row, and
// the gradient w.r.t. y, accumulates the gradient w.r.t. x.
void layer_norm_backward(const Mat& y, const std::vector<double>& inv_std, const Mat& gy,
                         Mat& gx) {
  const double c = static_cast<double>(y.cols());
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    double mean_g = gy.row(r).mean();
    double mean_gy = gy.row(r).cwiseProduct(y.row(r)).sum() / c;
    gx.row(r).array() +=
        inv_std[static_cast<size_t>(r)] * (gy.row(r).array() - mean_g - y.row(r).array() * mean_gy);
  }
}

std::vector<double> inverse_stddevs(const Mat& x, double eps) {
  std::vector<double> inv(static_cast<size_t>(x.rows()));
  const double c = static_cast<double>(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double mean = x.row(r).mean();
    double var = (x.row(r).array() - mean).square().sum() / c;
    inv[static_cast<size_t>(r)] = 1.0 / std::sqrt(var + eps);
  }
  return inv;
}

}  // namespace

int Graph::layer_norm(int a, double eps) {
  Mat normed = layer_norm_rows(value(a), eps);
  std::vector<double> inv_std = inverse_stddevs(value(a), eps);
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(normed), [a, id, inv_std = std::move(inv_std)](Graph& g) {
    layer_norm_backward(g.value(id), inv_std, g.grad(id), g.grad_ref(a));
  });
}

int Graph::layer_norm_affine(int a, int gamma, int beta, double eps) {
  const Mat& gm = value(gamma);
  const Mat& bt = value(beta);
  if (gm.rows() != 1 || bt.rows() != 1 || gm.cols() != value(a).cols() ||
      bt.cols() != value(a).cols())
    throw ShapeError("graph: layer_norm_affine expects 1xC scale and bias");
  Mat normed = layer_norm_rows(value(a), eps);
  std::vector<double> inv_std = inverse_stddevs(value(a), eps);
  Mat out = (normed.array().rowwise() * gm.row(0).array()).rowwise() + bt.row(0).array();
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(out),
              [a, gamma, beta, id, normed = std::move(normed), inv_std = std::move(inv_std)](Graph& g) {
                const Mat& go = g.grad(id);
                g.grad_ref(beta).row(0) += go.colwise().sum();
                g.grad_ref(gamma).row(0) += go.cwiseProduct(normed).colwise().sum();
                Mat gnormed = go.array().rowwise() * g.value(gamma).row(0).array();
                layer_norm_backward(normed, inv_std, gnormed, g.grad_ref(a));
              });
}

int Graph::mean_rows(int a) {
  Mat out = value(a).colwise().mean();
  const Eigen::Index m = value(a).rows();
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(out), [a, m, id](Graph& g) {
    g.grad_ref(a).rowwise() += (g.grad(id).row(0) / static_cast<double>(m));
  });
}

int Graph::mean_frames(int a, int frames) {
  const Mat& A = value(a);
  if (frames <= 0 || A.rows() % frames != 0)
    throw ShapeError("graph: mean_frames row count not divisible by frame count");
  const Eigen::Index n = A.rows() / frames;
  Mat out = Mat::Zero(n, A.cols());
  for (int t = 0; t < frames; ++t) out += A.middleRows(t * n, n);
  out /= static_cast<double>(frames);
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(out), [a, frames, n, id](Graph& g) {
    Mat share = g.grad(id) / static_cast<double>(frames);
    for (int t = 0; t < frames; ++t) g.grad_ref(a).middleRows(t * n, n) += share;
  });
}

int Graph::max_frames(int a, int frames) {
  const Mat& A = value(a);
  if (frames <= 0 || A.rows() % frames != 0)
    throw ShapeError("graph: max_frames row count not divisible by frame count");
  const Eigen::Index n = A.rows() / frames;
  Mat out(n, A.cols());
  std::vector<int> argmax(static_cast<size_t>(n * A.cols()));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index c = 0; c < A.cols(); ++c) {
      int best_t = 0;
      double best = A(i, c);
      for (int t = 1; t < frames; ++t) {
        double v = A(t * n + i, c);
        if (v > best) {
          best = v;
          best_t = t;
        }
      }
      out(i, c) = best;
      argmax[static_cast<size_t>(i * A.cols() + c)] = best_t;
    }
  }
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(out), [a, n, id, argmax = std::move(argmax)](Graph& g) {
    const Mat& go = g.grad(id);
    Mat& ga = g.grad_ref(a);
    for (Eigen::Index i = 0; i < go.rows(); ++i)
      for (Eigen::Index c = 0; c < go.cols(); ++c)
        ga(argmax[static_cast<size_t>(i * go.cols() + c)] * n + i, c) += go(i, c);
  });
}

int Graph::gather_rows(int a, std::vector<int> rows) {
  const Mat& A = value(a);
  Mat out(static_cast<Eigen::Index>(rows.size()), A.cols());
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= A.rows())
      throw ShapeError("graph: gather_rows index out of range");
    out.row(static_cast<Eigen::Index>(i)) = A.row(rows[i]);
  }
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(out), [a, id, rows = std::move(rows)](Graph& g) {
    const Mat& go = g.grad(id);
    for (size_t i = 0; i < rows.size(); ++i)
      g.grad_ref(a).row(rows[i]) += go.row(static_cast<Eigen::Index>(i));
  });
}

int Graph::concat_cols(int a, int b) {
  const Mat& A = value(a);
  const Mat& B = value(b);
  if (A.rows() != B.rows()) throw ShapeError("graph: concat_cols row counts disagree");
  Mat out(A.rows(), A.cols() + B.cols());
  out.leftCols(A.cols()) = A;
  out.rightCols(B.cols()) = B;
  const Eigen::Index ca = A.cols(), cb = B.cols();
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(out), [a, b, ca, cb, id](Graph& g) {
    g.grad_ref(a) += g.grad(id).leftCols(ca);
    g.grad_ref(b) += g.grad(id).rightCols(cb);
  });
}

int Graph::sum_all(int a) {
  Mat out(1, 1);
  out(0, 0) = value(a).sum();
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(out), [a, id](Graph& g) {
    g.grad_ref(a).array() += g.grad(id)(0, 0);
  });
}

int Graph::wce_loss(int probs, Mat labels, Mat pos_w, Mat neg_w) {
  const Mat& p = value(probs);
  check_same_shape(p, labels, "wce_loss labels");
  if (pos_w.rows() != 1 || pos_w.cols() != p.cols() || neg_w.rows() != 1 ||
      neg_w.cols() != p.cols())
    throw ShapeError("graph: wce_loss expects 1xM weight rows");
  const double n = static_cast<double>(p.rows());
  double total = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      double pc = std::min(1.0 - kProbEps, std::max(kProbEps, p(i, j)));
      if (labels(i, j) > 0.5)
        total += pos_w(0, j) * std::log(pc);
      else
        total += neg_w(0, j) * std::log(1.0 - pc);
    }
  }
  Mat out(1, 1);
  out(0, 0) = -total / n;
  const int id = static_cast<int>(nodes_.size());
  return push(std::move(out), [probs, id, n, labels = std::move(labels), pos_w = std::move(pos_w),
                               neg_w = std::move(neg_w)](Graph& g) {
    const double go = g.grad(id)(0, 0);
    const Mat& p = g.value(probs);
    Mat& gp = g.grad_ref(probs);
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      for (Eigen::Index j = 0; j < p.cols(); ++j) {
        if (p(i, j) < kProbEps || p(i, j) > 1.0 - kProbEps) continue;  // clamp saturated
        double d = labels(i, j) > 0.5 ? pos_w(0, j) / p(i, j) : -neg_w(0, j) / (1.0 - p(i, j));
        gp(i, j) += go * (-d / n);
      }
    }
  });
}

void Graph::backward(int loss) {
  if (value(loss).rows() != 1 || value(loss).cols() != 1)
    throw ShapeError("graph: backward requires a scalar loss");
  for (Node& node : nodes_) node.grad.setZero();
  nodes_[loss].grad(0, 0) = 1.0;
  for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id)
    if (nodes_[id].back) nodes_[id].back(*this);
}

std::vector<std::pair<std::string, Mat>> collect_gradients(
    const Graph& g, const std::vector<std::pair<std::string, int>>& named_vars) {
  std::vector<std::pair<std::string, Mat>> out;
  out.reserve(named_vars.size());
  for (const auto& [name, var] : named_vars) {
    const Mat& grad = g.grad(var);
    if (!grad.allFinite()) throw NumericError("non-finite gradient for parameter " + name);
    out.emplace_back(name, grad);
  }
  return out;
}

}  // namespace otnpar::ad
