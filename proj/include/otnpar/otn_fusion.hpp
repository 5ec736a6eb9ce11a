#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "otnpar/rwkv_core.hpp"

namespace otnpar::fusion {

using ad::Grid;
using ad::Mat;

/// Subset selection over a token axis; kept_indices ascend, exactly
/// target_count entries are true.
struct FilterMask {
  std::vector<uint8_t> keep;
  int target_count = 0;
  std::vector<int> kept_indices;
};

enum class Aggregation { max, mean, sim };
Aggregation parse_aggregation(const std::string& name);
std::string aggregation_name(Aggregation a);

/// Pairwise cosine similarity with an 1e-8 norm guard; diagonal pinned to 1.
Mat token_similarity(const Mat& tokens);

/// Keeps the target_count most representative tokens: score = number of
/// other tokens with similarity above the threshold, ties broken by mean
/// similarity to the others, then by lower index. Kept tokens stay in
/// original order.
std::pair<Mat, FilterMask> knp_filter(const Mat& tokens, const Mat& sim, double threshold,
                                      int target_count);

/// max/mean reduce across the frame axis; sim flattens all frames and runs
/// knp_filter at the given threshold down to target_count tokens.
struct AggregationResult {
  Mat tokens;
  FilterMask mask;  // populated only for the sim strategy
};
AggregationResult aggregate_event_tokens(const Mat& tokens, int frames, Aggregation strategy,
                                         double threshold, int target_count);

/// Cross-token attention with per-contribution decay:
///   out_t = (sum_{i!=t} e^{-(|t-i|-1)/M * decay_i + expo_i} val_i
///            + e^{u+expo_t} val_t) / (same weights without val)
/// Exact evaluation with per-row exponent normalization.
Mat decayed_wkv(const Mat& expo, const Mat& val, const Mat& decay, const Mat& bonus_u);
void decayed_wkv_backward(const Mat& expo, const Mat& val, const Mat& decay, const Mat& bonus_u,
                          const Mat& out, const Mat& gout, Mat& gexpo, Mat& gval, Mat& gdecay,
                          Mat& gu);

/// Cross-modal kernel. The literal form sends R to the exponent, K to the
/// value slot and V to the decay; the standard form restores the usual
/// k-in-exponent / v-as-value roles with R supplying the decay.
Mat fusion_bi_wkv(const Mat& r, const Mat& k, const Mat& v_decay, const Mat& bonus_u,
                  bool literal = true);

struct FusionParams {
  Mat w_r, w_k, w_v;              // C x C
  Mat mix_r, mix_k;               // 1 x C, RGB-side shift blends
  Mat mix_v;                      // 1 x C, event-side shift blend
  Mat bonus_u;                    // 1 x C
  Mat ln_gamma, ln_beta;          // 1 x C
};

/// Gated cross-modal fusion over aligned token sets:
///   R = shift(rgb)*W_R, K = shift(rgb)*W_K, V = shift(event)*W_V,
///   out = sigmoid(R) .* LN(K .* fusion_bi_wkv(R, K, V, u)) + event
Mat otn_fuse(const Mat& rgb_tokens, const Mat& event_tokens, const FusionParams& params,
             const Grid& grid, double ln_eps = 1e-5, bool literal = true);

// ---- graph builders ----

struct FusionVars {
  int w_r, w_k, w_v, mix_r, mix_k, mix_v, bonus_u, ln_gamma, ln_beta;
};
FusionVars bind(ad::Graph& g, const FusionParams& p);

int decayed_wkv_node(ad::Graph& g, int expo, int val, int decay, int bonus_u);
int build_otn_fuse(ad::Graph& g, int rgb_tokens, int event_tokens, const FusionVars& vars,
                   const Grid& grid, double ln_eps, bool literal);

FusionParams init_fusion_params(int embed_dim, Rng& rng);

}  // namespace otnpar::fusion
