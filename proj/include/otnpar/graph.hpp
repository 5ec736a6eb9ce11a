#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "otnpar/common.hpp"

namespace otnpar::ad {

using Mat = Eigen::MatrixXd;

/// Token layout metadata: `frames` stacked row-major grids of rows x cols
/// tokens. The flattened token axis is frame-major then row-major.
struct Grid {
  int frames = 1;
  int rows = 1;
  int cols = 1;
  int tokens_per_frame() const { return rows * cols; }
  int total() const { return frames * rows * cols; }
};

/// Per-row standardization (mean 0, variance 1 across channels).
Mat layer_norm_rows(const Mat& x, double eps);

/// Eagerly-evaluated reverse-mode tape over dense matrices. Ops compute their
/// value at build time; backward() replays registered closures in reverse.
class Graph {
 public:
  using BackFn = std::function<void(Graph&)>;

  int leaf(Mat value) { return push(std::move(value), nullptr); }

  /// Extension point for ops with bespoke kernels (token shift, WKV).
  int push(Mat value, BackFn back);

  const Mat& value(int id) const { return nodes_[id].value; }
  const Mat& grad(int id) const { return nodes_[id].grad; }
  Mat& grad_ref(int id) { return nodes_[id].grad; }
  size_t size() const { return nodes_.size(); }

  int matmul(int a, int b);
  int add(int a, int b);
  int sub(int a, int b);
  int hadamard(int a, int b);
  int scale(int a, double s);
  int add_row_broadcast(int a, int row);  // (MxC) + (1xC)
  int tile_rows(int a, int times);        // (NxC) -> (times*N x C)
  int sigmoid(int a);
  int squared_relu(int a);
  int layer_norm(int a, double eps);
  int layer_norm_affine(int a, int gamma, int beta, double eps);
  int mean_rows(int a);                       // MxC -> 1xC
  int mean_frames(int a, int frames);         // (T*N)xC -> NxC
  int max_frames(int a, int frames);          // (T*N)xC -> NxC, argmax routing
  int gather_rows(int a, std::vector<int> rows);
  int concat_cols(int a, int b);
  int sum_all(int a);  // -> 1x1

  /// Weighted binary cross-entropy against fixed labels. `probs` is NxM in
  /// (0,1); labels NxM in {0,1}; pos_w/neg_w 1xM. Probabilities are clamped
  /// to [1e-7, 1-1e-7] with zero gradient outside the clamp.
  int wce_loss(int probs, Mat labels, Mat pos_w, Mat neg_w);

  /// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every node.
  /// `loss` must be 1x1.
  void backward(int loss);

 private:
  struct Node {
    Mat value;
    Mat grad;
    BackFn back;
  };
  std::vector<Node> nodes_;
};

/// Extracts gradients for named vars after backward(); any non-finite entry
/// raises NumericError naming the parameter.
std::vector<std::pair<std::string, Mat>> collect_gradients(
    const Graph& g, const std::vector<std::pair<std::string, int>>& named_vars);

}  // namespace otnpar::ad
