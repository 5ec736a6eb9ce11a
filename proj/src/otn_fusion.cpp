#include "otnpar/otn_fusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace otnpar::fusion {

Aggregation parse_aggregation(const std::string& name) {
  if (name == "max") return Aggregation::max;
  if (name == "mean") return Aggregation::mean;
  if (name == "sim") return Aggregation::sim;
  throw ConfigError("unknown aggregation strategy: " + name);
}

std::string aggregation_name(Aggregation a) {
  switch (a) {
    case Aggregation::max: return "max";
    case Aggregation::mean: return "mean";
    case Aggregation::sim: return "sim";
  }
  throw ConfigError("unknown aggregation strategy value");
}

Mat token_similarity(const Mat& tokens) {
  const Eigen::Index m = tokens.rows();
  Eigen::VectorXd norms(m);
  for (Eigen::Index i = 0; i < m; ++i) norms(i) = tokens.row(i).norm() + 1e-8;
  Mat sim = tokens * tokens.transpose();
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) sim(i, j) /= norms(i) * norms(j);
  sim.diagonal().setConstant(1.0);
  return sim;
}

std::pair<Mat, FilterMask> knp_filter(const Mat& tokens, const Mat& sim, double threshold,
                                      int target_count) {
  const int m = static_cast<int>(tokens.rows());
  if (sim.rows() != m || sim.cols() != m)
    throw ShapeError("knp_filter: similarity matrix does not match token count");
  if (target_count < 1 || target_count > m)
    throw ConfigError("knp_filter: bad target count " + std::to_string(target_count) + " for " +
                      std::to_string(m) + " tokens");
  std::vector<int> score(m, 0);
  std::vector<double> mean_sim(m, 0.0);
  for (int j = 0; j < m; ++j) {
    double total = 0.0;
    for (int i = 0; i < m; ++i) {
      if (i == j) continue;
      if (sim(i, j) > threshold) ++score[j];
      total += sim(i, j);
    }
    mean_sim[j] = m > 1 ? total / (m - 1) : 0.0;
  }
  std::vector<int> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (score[a] != score[b]) return score[a] > score[b];
    if (mean_sim[a] != mean_sim[b]) return mean_sim[a] > mean_sim[b];
    return a < b;
  });
  FilterMask mask;
  mask.keep.assign(m, 0);
  mask.target_count = target_count;
  mask.kept_indices.assign(order.begin(), order.begin() + target_count);
  std::sort(mask.kept_indices.begin(), mask.kept_indices.end());
  Mat filtered(target_count, tokens.cols());
  for (int i = 0; i < target_count; ++i) {
    mask.keep[static_cast<size_t>(mask.kept_indices[i])] = 1;
    filtered.row(i) = tokens.row(mask.kept_indices[i]);
  }
  return {std::move(filtered), std::move(mask)};
}

AggregationResult aggregate_event_tokens(const Mat& tokens, int frames, Aggregation strategy,
                                         double threshold, int target_count) {
  if (frames <= 0 || tokens.rows() % frames != 0)
    throw ShapeError("aggregate_event_tokens: row count not divisible by frame count");
  const Eigen::Index n = tokens.rows() / frames;
  AggregationResult result;
  switch (strategy) {
    case Aggregation::max: {
      result.tokens = tokens.topRows(n);
      for (int t = 1; t < frames; ++t)
        result.tokens = result.tokens.cwiseMax(tokens.middleRows(static_cast<Eigen::Index>(t) * n, n));
      return result;
    }
    case Aggregation::mean: {
      result.tokens = Mat::Zero(n, tokens.cols());
      for (int t = 0; t < frames; ++t)
        result.tokens += tokens.middleRows(static_cast<Eigen::Index>(t) * n, n);
      result.tokens /= static_cast<double>(frames);
      return result;
    }
    case Aggregation::sim: {
      auto [filtered, mask] = knp_filter(tokens, token_similarity(tokens), threshold, target_count);
      result.tokens = std::move(filtered);
      result.mask = std::move(mask);
      return result;
    }
  }
  throw ConfigError("unknown aggregation strategy value");
}

Mat decayed_wkv(const Mat& expo, const Mat& val, const Mat& decay, const Mat& bonus_u) {
  if (expo.rows() != val.rows() || expo.cols() != val.cols() || decay.rows() != expo.rows() ||
      decay.cols() != expo.cols())
    throw ShapeError("decayed_wkv: input shapes disagree");
  if (bonus_u.rows() != 1 || bonus_u.cols() != expo.cols())
    throw ShapeError("decayed_wkv: bonus must be 1xC");
  const Eigen::Index m = expo.rows();
  Mat out(m, expo.cols());
  std::vector<double> b(static_cast<size_t>(m));
  for (Eigen::Index c = 0; c < expo.cols(); ++c) {
    for (Eigen::Index t = 0; t < m; ++t) {
      double mx = bonus_u(0, c) + expo(t, c);
      for (Eigen::Index i = 0; i < m; ++i) {
        if (i == t) continue;
        const double dist = static_cast<double>(std::abs(t - i) - 1) / static_cast<double>(m);
        b[static_cast<size_t>(i)] = expo(i, c) - dist * decay(i, c);
        mx = std::max(mx, b[static_cast<size_t>(i)]);
      }
      double num = std::exp(bonus_u(0, c) + expo(t, c) - mx) * val(t, c);
      double den = std::exp(bonus_u(0, c) + expo(t, c) - mx);
      for (Eigen::Index i = 0; i < m; ++i) {
        if (i == t) continue;
        const double wgt = std::exp(b[static_cast<size_t>(i)] - mx);
        num += wgt * val(i, c);
        den += wgt;
      }
      out(t, c) = num / den;
    }
  }
  return out;
}

void decayed_wkv_backward(const Mat& expo, const Mat& val, const Mat& decay, const Mat& bonus_u,
                          const Mat& out, const Mat& gout, Mat& gexpo, Mat& gval, Mat& gdecay,
                          Mat& gu) {
  const Eigen::Index m = expo.rows();
  std::vector<double> wgt(static_cast<size_t>(m));
  for (Eigen::Index c = 0; c < expo.cols(); ++c) {
    for (Eigen::Index t = 0; t < m; ++t) {
      // Recompute the normalized weights for row t.
      double mx = bonus_u(0, c) + expo(t, c);
      for (Eigen::Index i = 0; i < m; ++i) {
        if (i == t) continue;
        const double dist = static_cast<double>(std::abs(t - i) - 1) / static_cast<double>(m);
        wgt[static_cast<size_t>(i)] = expo(i, c) - dist * decay(i, c);
        mx = std::max(mx, wgt[static_cast<size_t>(i)]);
      }
      double den = std::exp(bonus_u(0, c) + expo(t, c) - mx);
      wgt[static_cast<size_t>(t)] = den;
      for (Eigen::Index i = 0; i < m; ++i) {
        if (i == t) continue;
        wgt[static_cast<size_t>(i)] = std::exp(wgt[static_cast<size_t>(i)] - mx);
        den += wgt[static_cast<size_t>(i)];
      }
      const double ct = gout(t, c) / den;
      if (ct == 0.0) continue;
      for (Eigen::Index i = 0; i < m; ++i) {
        const double w = wgt[static_cast<size_t>(i)];
        const double residual = val(i, c) - out(t, c);
        gval(i, c) += ct * w;
        gexpo(i, c) += ct * w * residual;
        if (i == t) {
          gu(0, c) += ct * w * residual;
        } else {
          const double dist = static_cast<double>(std::abs(t - i) - 1) / static_cast<double>(m);
          gdecay(i, c) -= ct * w * residual * dist;
        }
      }
    }
  }
}

Mat fusion_bi_wkv(const Mat& r, const Mat& k, const Mat& v_decay, const Mat& bonus_u,
                  bool literal) {
  if (literal) return decayed_wkv(r, k, v_decay, bonus_u);
  return decayed_wkv(k, v_decay, r, bonus_u);
}

Mat otn_fuse(const Mat& rgb_tokens, const Mat& event_tokens, const FusionParams& params,
             const Grid& grid, double ln_eps, bool literal) {
  if (rgb_tokens.rows() != event_tokens.rows() || rgb_tokens.cols() != event_tokens.cols())
    throw ShapeError("otn_fuse: token counts differ (" + std::to_string(rgb_tokens.rows()) +
                     " rgb vs " + std::to_string(event_tokens.rows()) +
                     " event); filtering must run first");
  const Mat r = rwkv::q_shift_apply(rgb_tokens, params.mix_r, grid) * params.w_r;
  const Mat k = rwkv::q_shift_apply(rgb_tokens, params.mix_k, grid) * params.w_k;
  const Mat v = rwkv::q_shift_apply(event_tokens, params.mix_v, grid) * params.w_v;
  const Mat b = fusion_bi_wkv(r, k, v, params.bonus_u, literal);
  Mat normed = ad::layer_norm_rows(k.cwiseProduct(b), ln_eps);
  normed = (normed.array().rowwise() * params.ln_gamma.row(0).array()).rowwise() +
           params.ln_beta.row(0).array();
  const Mat gate = r.unaryExpr([](double z) { return 1.0 / (1.0 + std::exp(-z)); });
  return gate.cwiseProduct(normed) + event_tokens;
}

FusionVars bind(ad::Graph& g, const FusionParams& p) {
  return {g.leaf(p.w_r),  g.leaf(p.w_k),     g.leaf(p.w_v),      g.leaf(p.mix_r),
          g.leaf(p.mix_k), g.leaf(p.mix_v),  g.leaf(p.bonus_u),  g.leaf(p.ln_gamma),
          g.leaf(p.ln_beta)};
}

int decayed_wkv_node(ad::Graph& g, int expo, int val, int decay, int bonus_u) {
  Mat out = decayed_wkv(g.value(expo), g.value(val), g.value(decay), g.value(bonus_u));
  const int id = static_cast<int>(g.size());
  return g.push(std::move(out), [expo, val, decay, bonus_u, id](ad::Graph& gr) {
    decayed_wkv_backward(gr.value(expo), gr.value(val), gr.value(decay), gr.value(bonus_u),
                         gr.value(id), gr.grad(id), gr.grad_ref(expo), gr.grad_ref(val),
                         gr.grad_ref(decay), gr.grad_ref(bonus_u));
  });
}

int build_otn_fuse(ad::Graph& g, int rgb_tokens, int event_tokens, const FusionVars& vars,
                   const Grid& grid, double ln_eps, bool literal) {
  int r = g.matmul(rwkv::q_shift_node(g, rgb_tokens, vars.mix_r, grid), vars.w_r);
  int k = g.matmul(rwkv::q_shift_node(g, rgb_tokens, vars.mix_k, grid), vars.w_k);
  int v = g.matmul(rwkv::q_shift_node(g, event_tokens, vars.mix_v, grid), vars.w_v);
  int b = literal ? decayed_wkv_node(g, r, k, v, vars.bonus_u)
                  : decayed_wkv_node(g, k, v, r, vars.bonus_u);
  int normed = g.layer_norm_affine(g.hadamard(k, b), vars.ln_gamma, vars.ln_beta, ln_eps);
  return g.add(g.hadamard(g.sigmoid(r), normed), event_tokens);
}

FusionParams init_fusion_params(int embed_dim, Rng& rng) {
  auto tn = [&](Eigen::Index rows, Eigen::Index cols) {
    Mat m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.trunc_normal(0.02, 0.04);
    return m;
  };
  FusionParams p;
  p.w_r = tn(embed_dim, embed_dim);
  p.w_k = tn(embed_dim, embed_dim);
  p.w_v = tn(embed_dim, embed_dim);
  p.mix_r = Mat::Constant(1, embed_dim, 0.5);
  p.mix_k = Mat::Constant(1, embed_dim, 0.5);
  p.mix_v = Mat::Constant(1, embed_dim, 0.5);
  p.bonus_u = Mat::Zero(1, embed_dim);
  p.ln_gamma = Mat::Constant(1, embed_dim, 1.0);
  p.ln_beta = Mat::Zero(1, embed_dim);
  return p;
}

}  // namespace otnpar::fusion
