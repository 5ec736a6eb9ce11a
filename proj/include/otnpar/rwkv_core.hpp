#pragma once

#include <vector>

#include "otnpar/graph.hpp"
#include "otnpar/image.hpp"

namespace otnpar::rwkv {

using ad::Grid;
using ad::Mat;

/// Patch tokens: (frames * rows * cols) x C, frame-major then row-major.
struct TokenSequence {
  Mat data;
  Grid grid;
};

struct PatchEmbedParams {
  Mat projection;          // (p*p*3) x C
  Mat bias;                // 1 x C
  Mat position_embedding;  // N x C, shared across frames
};

struct SpatialMixParams {
  Mat w_r, w_k, w_v, w_o;        // C x C
  Mat mix_r, mix_k, mix_v;       // 1 x C, token-shift interpolation in [0,1]
  Mat decay_w;                   // 1 x C, distance decay
  Mat bonus_u;                   // 1 x C, current-token bonus
};

struct ChannelMixParams {
  Mat w_r;          // C x C
  Mat w_k;          // C x hidden
  Mat w_v;          // hidden x C
  Mat w_o;          // C x C
  Mat mix_r, mix_k; // 1 x C
};

struct EncoderBlockParams {
  SpatialMixParams spatial;
  ChannelMixParams channel;
};

struct EncoderConfig {
  int depth = 2;
  int embed_dim = 64;
  int patch_size = 16;
  int expansion_ratio = 4;
  double layer_norm_epsilon = 1e-5;
};

// ---- kernels ----

/// Quadrant token shift: channel quadrant 0 takes each token's left
/// neighbour, 1 right, 2 up, 3 down (zero at grid borders, frames shift
/// independently), blended per channel: x*(1-mix) + shifted*mix.
Mat q_shift_apply(const Mat& tokens, const Mat& mix, const Grid& grid);
void q_shift_backward(const Mat& tokens, const Mat& mix, const Grid& grid, const Mat& gout,
                      Mat& gtokens, Mat& gmix);

/// Bidirectional WKV attention with shared per-channel distance decay:
///   out_t = (sum_{i!=t} e^{-(|t-i|-1)/M * w + k_i} v_i + e^{u+k_t} v_t)
///         / (same weights without v)
/// Two-pass recurrence, O(M*C), running-maximum exponent normalization;
/// finite for any finite inputs.
Mat bi_wkv(const Mat& k, const Mat& v, const Mat& decay_w, const Mat& bonus_u);
void bi_wkv_backward(const Mat& k, const Mat& v, const Mat& decay_w, const Mat& bonus_u,
                     const Mat& out, const Mat& gout, Mat& gk, Mat& gv, Mat& gw, Mat& gu);

// ---- module operations (pure forward) ----

/// Non-overlapping p x p x 3 patches per frame, flattened row-major,
/// projected to C, plus bias and per-token-index position embedding.
TokenSequence patchify(const FrameSequence& frames, const PatchEmbedParams& params, int patch_size);

TokenSequence q_shift(const TokenSequence& tokens, const Mat& mix);

TokenSequence spatial_mix(const TokenSequence& tokens, const SpatialMixParams& params,
                          double ln_eps = 1e-5);

TokenSequence channel_mix(const TokenSequence& tokens, const ChannelMixParams& params);

/// Pre-norm residual blocks: x += spatial(LN(x)); x += channel(LN(x)).
TokenSequence encoder_forward(const TokenSequence& tokens,
                              const std::vector<EncoderBlockParams>& blocks,
                              const EncoderConfig& cfg);

// ---- graph builders (differentiable path) ----

struct PatchEmbedVars {
  int projection, bias, position;
};
struct SpatialMixVars {
  int w_r, w_k, w_v, w_o, mix_r, mix_k, mix_v, decay_w, bonus_u;
};
struct ChannelMixVars {
  int w_r, w_k, w_v, w_o, mix_r, mix_k;
};
struct EncoderBlockVars {
  SpatialMixVars spatial;
  ChannelMixVars channel;
};

PatchEmbedVars bind(ad::Graph& g, const PatchEmbedParams& p);
SpatialMixVars bind(ad::Graph& g, const SpatialMixParams& p);
ChannelMixVars bind(ad::Graph& g, const ChannelMixParams& p);
EncoderBlockVars bind(ad::Graph& g, const EncoderBlockParams& p);

int q_shift_node(ad::Graph& g, int tokens, int mix, const Grid& grid);
int bi_wkv_node(ad::Graph& g, int k, int v, int decay_w, int bonus_u);

int build_patchify(ad::Graph& g, const FrameSequence& frames, const PatchEmbedVars& vars,
                   int patch_size, Grid& out_grid);
int build_spatial_mix(ad::Graph& g, int tokens, const SpatialMixVars& vars, const Grid& grid,
                      double ln_eps);
int build_channel_mix(ad::Graph& g, int tokens, const ChannelMixVars& vars, const Grid& grid);
int build_encoder(ad::Graph& g, int tokens, const std::vector<EncoderBlockVars>& blocks,
                  const Grid& grid, double ln_eps);

// ---- initialization ----

PatchEmbedParams init_patch_embed(int patch_size, int embed_dim, int tokens_per_frame, Rng& rng);
SpatialMixParams init_spatial_mix(int embed_dim, Rng& rng);
ChannelMixParams init_channel_mix(int embed_dim, int hidden_dim, Rng& rng);

}  // namespace otnpar::rwkv
