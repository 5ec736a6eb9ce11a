#include "otnpar/rwkv_core.hpp"

#include <cmath>
#include <limits>

namespace otnpar::rwkv {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Flat source-token index per (token, quadrant), -1 where the neighbour
// falls outside the grid. Quadrants: 0 left, 1 right, 2 up, 3 down.
std::vector<int> neighbor_table(const Grid& grid) {
  std::vector<int> nb(static_cast<size_t>(grid.total()) * 4, -1);
  const int n = grid.tokens_per_frame();
  for (int f = 0; f < grid.frames; ++f) {
    const int base = f * n;
    for (int r = 0; r < grid.rows; ++r) {
      for (int c = 0; c < grid.cols; ++c) {
        const int t = base + r * grid.cols + c;
        if (c > 0) nb[static_cast<size_t>(t) * 4 + 0] = t - 1;
        if (c + 1 < grid.cols) nb[static_cast<size_t>(t) * 4 + 1] = t + 1;
        if (r > 0) nb[static_cast<size_t>(t) * 4 + 2] = t - grid.cols;
        if (r + 1 < grid.rows) nb[static_cast<size_t>(t) * 4 + 3] = t + grid.cols;
      }
    }
  }
  return nb;
}

void check_q_shift_args(const Mat& tokens, const Mat& mix, const Grid& grid) {
  if (tokens.cols() % 4 != 0)
    throw ConfigError("q_shift: channel count " + std::to_string(tokens.cols()) +
                      " must be divisible by 4");
  if (mix.rows() != 1 || mix.cols() != tokens.cols())
    throw ShapeError("q_shift: mix must be 1xC");
  if (tokens.rows() != grid.total())
    throw ShapeError("q_shift: token count does not match grid");
}

Mat shifted_tokens(const Mat& tokens, const Grid& grid) {
  const Eigen::Index q_size = tokens.cols() / 4;
  Mat shifted = Mat::Zero(tokens.rows(), tokens.cols());
  std::vector<int> nb = neighbor_table(grid);
  for (Eigen::Index t = 0; t < tokens.rows(); ++t) {
    for (int q = 0; q < 4; ++q) {
      const int src = nb[static_cast<size_t>(t) * 4 + q];
      if (src >= 0) shifted.block(t, q * q_size, 1, q_size) = tokens.block(src, q * q_size, 1, q_size);
    }
  }
  return shifted;
}

void check_wkv_args(const Mat& k, const Mat& v, const Mat& w, const Mat& u) {
  if (k.rows() != v.rows() || k.cols() != v.cols())
    throw ShapeError("bi_wkv: K and V shapes disagree");
  if (k.rows() < 1) throw ShapeError("bi_wkv: need at least one token");
  if (w.rows() != 1 || w.cols() != k.cols() || u.rows() != 1 || u.cols() != k.cols())
    throw ShapeError("bi_wkv: decay and bonus must be 1xC");
}

}  // namespace

Mat q_shift_apply(const Mat& tokens, const Mat& mix, const Grid& grid) {
  check_q_shift_args(tokens, mix, grid);
  Mat shifted = shifted_tokens(tokens, grid);
  Mat out = tokens.array().rowwise() * (1.0 - mix.row(0).array());
  out.array() += shifted.array().rowwise() * mix.row(0).array();
  return out;
}

void q_shift_backward(const Mat& tokens, const Mat& mix, const Grid& grid, const Mat& gout,
                      Mat& gtokens, Mat& gmix) {
  check_q_shift_args(tokens, mix, grid);
  const Eigen::Index q_size = tokens.cols() / 4;
  std::vector<int> nb = neighbor_table(grid);
  Mat shifted = shifted_tokens(tokens, grid);
  gmix.row(0) += gout.cwiseProduct(shifted - tokens).colwise().sum();
  gtokens.array() += gout.array().rowwise() * (1.0 - mix.row(0).array());
  Mat gmixed = gout.array().rowwise() * mix.row(0).array();
  for (Eigen::Index t = 0; t < tokens.rows(); ++t) {
    for (int q = 0; q < 4; ++q) {
      const int src = nb[static_cast<size_t>(t) * 4 + q];
      if (src >= 0) gtokens.block(src, q * q_size, 1, q_size) += gmixed.block(t, q * q_size, 1, q_size);
    }
  }
}

Mat bi_wkv(const Mat& k, const Mat& v, const Mat& decay_w, const Mat& bonus_u) {
  check_wkv_args(k, v, decay_w, bonus_u);
  const Eigen::Index m = k.rows();
  const Eigen::Index cols = k.cols();
  Mat out(m, cols);
  std::vector<double> pl(m), avl(m), a1l(m), pr(m), avr(m), a1r(m);
  for (Eigen::Index c = 0; c < cols; ++c) {
    const double s = decay_w(0, c) / static_cast<double>(m);
    // Prefix: sums over i < t of e^{k_i - (t-i-1)s} * {v_i, 1}.
    double p = kNegInf, av = 0.0, a1 = 0.0;
    for (Eigen::Index t = 0; t < m; ++t) {
      pl[t] = p;
      avl[t] = av;
      a1l[t] = a1;
      const double kt = k(t, c);
      const double pn = std::max(p - s, kt);
      const double e1 = std::exp(p - s - pn);
      const double e2 = std::exp(kt - pn);
      av = av * e1 + v(t, c) * e2;
      a1 = a1 * e1 + e2;
      p = pn;
    }
    // Suffix: sums over i > t.
    p = kNegInf;
    av = 0.0;
    a1 = 0.0;
    for (Eigen::Index t = m - 1; t >= 0; --t) {
      pr[t] = p;
      avr[t] = av;
      a1r[t] = a1;
      const double kt = k(t, c);
      const double pn = std::max(p - s, kt);
      const double e1 = std::exp(p - s - pn);
      const double e2 = std::exp(kt - pn);
      av = av * e1 + v(t, c) * e2;
      a1 = a1 * e1 + e2;
      p = pn;
    }
    for (Eigen::Index t = 0; t < m; ++t) {
      const double pb = bonus_u(0, c) + k(t, c);
      const double mx = std::max(std::max(pl[t], pr[t]), pb);
      const double el = std::exp(pl[t] - mx);
      const double er = std::exp(pr[t] - mx);
      const double eb = std::exp(pb - mx);
      const double num = el * avl[t] + er * avr[t] + eb * v(t, c);
      const double den = el * a1l[t] + er * a1r[t] + eb;
      out(t, c) = num / den;
    }
  }
  return out;
}

void bi_wkv_backward(const Mat& k, const Mat& v, const Mat& decay_w, const Mat& bonus_u,
                     const Mat& out, const Mat& gout, Mat& gk, Mat& gv, Mat& gw, Mat& gu) {
  check_wkv_args(k, v, decay_w, bonus_u);
  const Eigen::Index m = k.rows();
  const Eigen::Index cols = k.cols();
  std::vector<double> kk(m), ebonus(m), ct(m), dt(m);
  std::vector<double> avl(m), a1l(m), uvl(m), u1l(m);
  std::vector<double> avr(m), a1r(m), uvr(m), u1r(m);
  std::vector<double> qc(m), qd(m), pc(m), pd(m);
  for (Eigen::Index c = 0; c < cols; ++c) {
    const double s = decay_w(0, c) / static_cast<double>(m);
    const double es = std::exp(-s);
    const double km = k.col(c).maxCoeff();
    for (Eigen::Index t = 0; t < m; ++t) {
      kk[t] = k(t, c) - km;
      ebonus[t] = std::exp(bonus_u(0, c) + kk[t]);
    }
    // Plain/index-weighted prefix sums of e^{kk_i - (t-i-1)s} {v_i, 1}.
    double av = 0, a1 = 0, uv = 0, u1 = 0;
    for (Eigen::Index t = 0; t < m; ++t) {
      avl[t] = av;
      a1l[t] = a1;
      uvl[t] = uv;
      u1l[t] = u1;
      uv = (uv + av) * es;
      u1 = (u1 + a1) * es;
      const double ek = std::exp(kk[t]);
      av = av * es + v(t, c) * ek;
      a1 = a1 * es + ek;
    }
    av = a1 = uv = u1 = 0;
    for (Eigen::Index t = m - 1; t >= 0; --t) {
      avr[t] = av;
      a1r[t] = a1;
      uvr[t] = uv;
      u1r[t] = u1;
      uv = (uv + av) * es;
      u1 = (u1 + a1) * es;
      const double ek = std::exp(kk[t]);
      av = av * es + v(t, c) * ek;
      a1 = a1 * es + ek;
    }
    for (Eigen::Index t = 0; t < m; ++t) {
      const double den = a1l[t] + a1r[t] + ebonus[t];
      ct[t] = gout(t, c) / den;
      dt[t] = ct[t] * out(t, c);
      gu(0, c) += ebonus[t] * (ct[t] * v(t, c) - dt[t]);
      gw(0, c) -= (ct[t] * (uvl[t] + uvr[t]) - dt[t] * (u1l[t] + u1r[t])) / static_cast<double>(m);
    }
    // Scans over ct/dt give the per-source sums for grad K and grad V.
    double q1 = 0, q2 = 0;
    for (Eigen::Index j = 0; j < m; ++j) {
      qc[j] = q1;
      qd[j] = q2;
      q1 = q1 * es + ct[j];
      q2 = q2 * es + dt[j];
    }
    q1 = q2 = 0;
    for (Eigen::Index j = m - 1; j >= 0; --j) {
      pc[j] = q1;
      pd[j] = q2;
      q1 = q1 * es + ct[j];
      q2 = q2 * es + dt[j];
    }
    for (Eigen::Index j = 0; j < m; ++j) {
      const double ek = std::exp(kk[j]);
      const double sum_c = ek * (pc[j] + qc[j]) + ct[j] * ebonus[j];
      const double sum_d = ek * (pd[j] + qd[j]) + dt[j] * ebonus[j];
      gv(j, c) += sum_c;
      gk(j, c) += v(j, c) * sum_c - sum_d;
    }
  }
}

TokenSequence patchify(const FrameSequence& frames, const PatchEmbedParams& params,
                       int patch_size) {
  if (patch_size <= 0 || frames.height % patch_size != 0 || frames.width % patch_size != 0)
    throw ConfigError("patchify: patch size " + std::to_string(patch_size) +
                      " does not divide " + std::to_string(frames.height) + "x" +
                      std::to_string(frames.width));
  const int rows = frames.height / patch_size;
  const int cols = frames.width / patch_size;
  const int n = rows * cols;
  const Eigen::Index patch_dim = static_cast<Eigen::Index>(patch_size) * patch_size * 3;
  if (params.projection.rows() != patch_dim)
    throw ShapeError("patchify: projection rows must equal p*p*3");
  if (params.position_embedding.rows() != n ||
      params.position_embedding.cols() != params.projection.cols())
    throw ShapeError("patchify: position embedding must be NxC");

  Mat patches(static_cast<Eigen::Index>(frames.frames) * n, patch_dim);
  for (int t = 0; t < frames.frames; ++t) {
    for (int gr = 0; gr < rows; ++gr) {
      for (int gc = 0; gc < cols; ++gc) {
        const Eigen::Index token = static_cast<Eigen::Index>(t) * n + gr * cols + gc;
        Eigen::Index col = 0;
        for (int dy = 0; dy < patch_size; ++dy)
          for (int dx = 0; dx < patch_size; ++dx)
            for (int ch = 0; ch < 3; ++ch)
              patches(token, col++) =
                  frames.at(t, gr * patch_size + dy, gc * patch_size + dx, ch);
      }
    }
  }
  TokenSequence tokens;
  tokens.grid = Grid{frames.frames, rows, cols};
  tokens.data = patches * params.projection;
  tokens.data.rowwise() += params.bias.row(0);
  for (int t = 0; t < frames.frames; ++t)
    tokens.data.middleRows(static_cast<Eigen::Index>(t) * n, n) += params.position_embedding;
  return tokens;
}

TokenSequence q_shift(const TokenSequence& tokens, const Mat& mix) {
  return {q_shift_apply(tokens.data, mix, tokens.grid), tokens.grid};
}

TokenSequence spatial_mix(const TokenSequence& tokens, const SpatialMixParams& params,
                          double ln_eps) {
  const Mat r = q_shift_apply(tokens.data, params.mix_r, tokens.grid) * params.w_r;
  const Mat kk = q_shift_apply(tokens.data, params.mix_k, tokens.grid) * params.w_k;
  const Mat vv = q_shift_apply(tokens.data, params.mix_v, tokens.grid) * params.w_v;
  const Mat wkv = bi_wkv(kk, vv, params.decay_w, params.bonus_u);
  const Mat gate = r.unaryExpr([](double z) { return 1.0 / (1.0 + std::exp(-z)); });
  Mat out = (gate.cwiseProduct(wkv)) * params.w_o;
  return {ad::layer_norm_rows(out, ln_eps), tokens.grid};
}

TokenSequence channel_mix(const TokenSequence& tokens, const ChannelMixParams& params) {
  const Mat r = q_shift_apply(tokens.data, params.mix_r, tokens.grid) * params.w_r;
  const Mat kk = q_shift_apply(tokens.data, params.mix_k, tokens.grid) * params.w_k;
  const Mat vv = kk.unaryExpr([](double z) { return z > 0.0 ? z * z : 0.0; }) * params.w_v;
  const Mat gate = r.unaryExpr([](double z) { return 1.0 / (1.0 + std::exp(-z)); });
  return {(gate.cwiseProduct(vv)) * params.w_o, tokens.grid};
}

TokenSequence encoder_forward(const TokenSequence& tokens,
                              const std::vector<EncoderBlockParams>& blocks,
                              const EncoderConfig& cfg) {
  if (static_cast<int>(blocks.size()) != cfg.depth)
    throw ShapeError("encoder_forward: block count does not match configured depth");
  TokenSequence x = tokens;
  for (const EncoderBlockParams& block : blocks) {
    TokenSequence normed{ad::layer_norm_rows(x.data, cfg.layer_norm_epsilon), x.grid};
    x.data += spatial_mix(normed, block.spatial, cfg.layer_norm_epsilon).data;
    normed.data = ad::layer_norm_rows(x.data, cfg.layer_norm_epsilon);
    x.data += channel_mix(normed, block.channel).data;
  }
  return x;
}

// ---- graph builders ----

PatchEmbedVars bind(ad::Graph& g, const PatchEmbedParams& p) {
  return {g.leaf(p.projection), g.leaf(p.bias), g.leaf(p.position_embedding)};
}

SpatialMixVars bind(ad::Graph& g, const SpatialMixParams& p) {
  return {g.leaf(p.w_r),   g.leaf(p.w_k),   g.leaf(p.w_v),     g.leaf(p.w_o),
          g.leaf(p.mix_r), g.leaf(p.mix_k), g.leaf(p.mix_v),   g.leaf(p.decay_w),
          g.leaf(p.bonus_u)};
}

ChannelMixVars bind(ad::Graph& g, const ChannelMixParams& p) {
  return {g.leaf(p.w_r), g.leaf(p.w_k), g.leaf(p.w_v), g.leaf(p.w_o), g.leaf(p.mix_r),
          g.leaf(p.mix_k)};
}

EncoderBlockVars bind(ad::Graph& g, const EncoderBlockParams& p) {
  return {bind(g, p.spatial), bind(g, p.channel)};
}

int q_shift_node(ad::Graph& g, int tokens, int mix, const Grid& grid) {
  Mat out = q_shift_apply(g.value(tokens), g.value(mix), grid);
  const int id = static_cast<int>(g.size());
  return g.push(std::move(out), [tokens, mix, grid, id](ad::Graph& gr) {
    q_shift_backward(gr.value(tokens), gr.value(mix), grid, gr.grad(id), gr.grad_ref(tokens),
                     gr.grad_ref(mix));
  });
}

int bi_wkv_node(ad::Graph& g, int k, int v, int decay_w, int bonus_u) {
  Mat out = bi_wkv(g.value(k), g.value(v), g.value(decay_w), g.value(bonus_u));
  const int id = static_cast<int>(g.size());
  return g.push(std::move(out), [k, v, decay_w, bonus_u, id](ad::Graph& gr) {
    bi_wkv_backward(gr.value(k), gr.value(v), gr.value(decay_w), gr.value(bonus_u), gr.value(id),
                    gr.grad(id), gr.grad_ref(k), gr.grad_ref(v), gr.grad_ref(decay_w),
                    gr.grad_ref(bonus_u));
  });
}

int build_patchify(ad::Graph& g, const FrameSequence& frames, const PatchEmbedVars& vars,
                   int patch_size, Grid& out_grid) {
  if (patch_size <= 0 || frames.height % patch_size != 0 || frames.width % patch_size != 0)
    throw ConfigError("patchify: patch size does not divide frame geometry");
  const int rows = frames.height / patch_size;
  const int cols = frames.width / patch_size;
  const int n = rows * cols;
  out_grid = Grid{frames.frames, rows, cols};
  const Eigen::Index patch_dim = static_cast<Eigen::Index>(patch_size) * patch_size * 3;
  Mat patches(static_cast<Eigen::Index>(frames.frames) * n, patch_dim);
  for (int t = 0; t < frames.frames; ++t)
    for (int gr = 0; gr < rows; ++gr)
      for (int gc = 0; gc < cols; ++gc) {
        const Eigen::Index token = static_cast<Eigen::Index>(t) * n + gr * cols + gc;
        Eigen::Index col = 0;
        for (int dy = 0; dy < patch_size; ++dy)
          for (int dx = 0; dx < patch_size; ++dx)
            for (int ch = 0; ch < 3; ++ch)
              patches(token, col++) = frames.at(t, gr * patch_size + dy, gc * patch_size + dx, ch);
      }
  int x = g.matmul(g.leaf(std::move(patches)), vars.projection);
  x = g.add_row_broadcast(x, vars.bias);
  return g.add(x, g.tile_rows(vars.position, frames.frames));
}

int build_spatial_mix(ad::Graph& g, int tokens, const SpatialMixVars& vars, const Grid& grid,
                      double ln_eps) {
  int r = g.matmul(q_shift_node(g, tokens, vars.mix_r, grid), vars.w_r);
  int k = g.matmul(q_shift_node(g, tokens, vars.mix_k, grid), vars.w_k);
  int v = g.matmul(q_shift_node(g, tokens, vars.mix_v, grid), vars.w_v);
  int wkv = bi_wkv_node(g, k, v, vars.decay_w, vars.bonus_u);
  int gated = g.hadamard(g.sigmoid(r), wkv);
  return g.layer_norm(g.matmul(gated, vars.w_o), ln_eps);
}

int build_channel_mix(ad::Graph& g, int tokens, const ChannelMixVars& vars, const Grid& grid) {
  int r = g.matmul(q_shift_node(g, tokens, vars.mix_r, grid), vars.w_r);
  int k = g.matmul(q_shift_node(g, tokens, vars.mix_k, grid), vars.w_k);
  int v = g.matmul(g.squared_relu(k), vars.w_v);
  return g.matmul(g.hadamard(g.sigmoid(r), v), vars.w_o);
}

int build_encoder(ad::Graph& g, int tokens, const std::vector<EncoderBlockVars>& blocks,
                  const Grid& grid, double ln_eps) {
  int x = tokens;
  for (const EncoderBlockVars& block : blocks) {
    x = g.add(x, build_spatial_mix(g, g.layer_norm(x, ln_eps), block.spatial, grid, ln_eps));
    x = g.add(x, build_channel_mix(g, g.layer_norm(x, ln_eps), block.channel, grid));
  }
  return x;
}

// ---- initialization ----

namespace {
Mat trunc_normal_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.trunc_normal(0.02, 0.04);
  return m;
}
}  // namespace

PatchEmbedParams init_patch_embed(int patch_size, int embed_dim, int tokens_per_frame, Rng& rng) {
  PatchEmbedParams p;
  p.projection = trunc_normal_matrix(static_cast<Eigen::Index>(patch_size) * patch_size * 3,
                                     embed_dim, rng);
  p.bias = Mat::Zero(1, embed_dim);
  p.position_embedding = trunc_normal_matrix(tokens_per_frame, embed_dim, rng);
  return p;
}

SpatialMixParams init_spatial_mix(int embed_dim, Rng& rng) {
  SpatialMixParams p;
  p.w_r = trunc_normal_matrix(embed_dim, embed_dim, rng);
  p.w_k = trunc_normal_matrix(embed_dim, embed_dim, rng);
  p.w_v = trunc_normal_matrix(embed_dim, embed_dim, rng);
  p.w_o = trunc_normal_matrix(embed_dim, embed_dim, rng);
  p.mix_r = Mat::Constant(1, embed_dim, 0.5);
  p.mix_k = Mat::Constant(1, embed_dim, 0.5);
  p.mix_v = Mat::Constant(1, embed_dim, 0.5);
  p.decay_w = Mat(1, embed_dim);
  for (int c = 0; c < embed_dim; ++c)
    p.decay_w(0, c) = -5.0 + 4.9 * static_cast<double>(c) / std::max(1, embed_dim - 1);
  p.bonus_u = Mat::Zero(1, embed_dim);
  return p;
}

ChannelMixParams init_channel_mix(int embed_dim, int hidden_dim, Rng& rng) {
  ChannelMixParams p;
  p.w_r = trunc_normal_matrix(embed_dim, embed_dim, rng);
  p.w_k = trunc_normal_matrix(embed_dim, hidden_dim, rng);
  p.w_v = trunc_normal_matrix(hidden_dim, embed_dim, rng);
  p.w_o = trunc_normal_matrix(embed_dim, embed_dim, rng);
  p.mix_r = Mat::Constant(1, embed_dim, 0.5);
  p.mix_k = Mat::Constant(1, embed_dim, 0.5);
  return p;
}

}  // namespace otnpar::rwkv
