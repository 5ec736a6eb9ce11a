#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "otnpar/data_harness.hpp"
#include "otnpar/event_stream.hpp"
#include "otnpar/otn_fusion.hpp"
#include "otnpar/par_head_metrics.hpp"
#include "otnpar/rwkv_core.hpp"

namespace otnpar::train {

using ad::Mat;

enum class FusionKind { otn, concat, add, conv1x1 };
FusionKind parse_fusion(const std::string& name);
std::string fusion_name(FusionKind f);

struct TrainConfig {
  int rgb_frames = 1;    // frames fed to the RGB branch; 0 disables it
  int event_frames = 5;  // stacked event frames; 0 disables the event branch
  int image_h = 64;
  int image_w = 32;
  int patch_size = 8;
  int depth = 2;      // encoder blocks per branch
  int embed_dim = 64; // token channels, divisible by 4
  int batch_size = 16;
  int epochs = 30;
  double base_lr = 0.02;
  int warmup_epochs = 3;
  double lr_decay_factor = 0.1;
  double filter_threshold = 0.75;
  fusion::Aggregation aggregation = fusion::Aggregation::sim;
  FusionKind fusion = FusionKind::otn;
  bool fusion_eq7_literal = true;
  uint64_t seed = 0;
};

/// Flat key=value config; unknown keys are hard errors.
TrainConfig parse_config_file(const std::string& path);
TrainConfig parse_config_text(const std::string& text);
std::string config_to_text(const TrainConfig& cfg);
void validate_config(const TrainConfig& cfg);

constexpr int kCropPadding = 10;
constexpr int64_t kEventNormCap = 3;
constexpr double kSgdMomentum = 0.9;

struct Model {
  TrainConfig cfg;
  int m_attr = 0;
  std::optional<rwkv::PatchEmbedParams> rgb_embed, event_embed;
  std::vector<rwkv::EncoderBlockParams> rgb_blocks, event_blocks;
  std::optional<fusion::FusionParams> fuse;
  Mat proj_w, proj_b;  // concat / conv1x1 baseline re-projection
  Mat head_w, head_b;

  rwkv::EncoderConfig encoder_cfg() const;
  int grid_rows() const { return cfg.image_h / cfg.patch_size; }
  int grid_cols() const { return cfg.image_w / cfg.patch_size; }
  int tokens_per_frame() const { return grid_rows() * grid_cols(); }
};

Model assemble_model(const TrainConfig& cfg, int m_attr);
size_t parameter_count(const Model& model);

/// Canonical enumeration of every learnable parameter; the same order backs
/// checkpoints, the optimizer and gradient collection.
void visit_params(Model& model, const std::function<void(const std::string&, Mat&)>& fn);
void visit_params(const Model& model,
                  const std::function<void(const std::string&, const Mat&)>& fn);

struct BoundModel {
  std::optional<rwkv::PatchEmbedVars> rgb_embed, event_embed;
  std::vector<rwkv::EncoderBlockVars> rgb_blocks, event_blocks;
  std::optional<fusion::FusionVars> fuse;
  int proj_w = -1, proj_b = -1;
  int head_w = -1, head_b = -1;
  std::vector<std::pair<std::string, int>> named;
};
BoundModel bind_model(ad::Graph& g, const Model& model);

struct SampleTensors {
  FrameSequence rgb;    // rgb_frames frames
  FrameSequence event;  // event_frames stacked frames
  std::vector<int> labels;
};

/// Materializes one record at the configured geometry: RGB frames from disk,
/// the event stream stacked into event_frames windows that evenly subdivide
/// [0, t_last + 1] with counts capped at kEventNormCap.
SampleTensors load_sample(const data::SampleRecord& record, const TrainConfig& cfg);

struct AugDraw {
  bool flip = false;
  int dy = 0;  // crop offsets in [0, 2*kCropPadding]
  int dx = 0;
};
/// Horizontal flip, then reflect-pad by kCropPadding and crop back to the
/// original geometry at the drawn offset. Applied identically to both
/// modalities of a sample.
FrameSequence augment_frames(const FrameSequence& frames, const AugDraw& draw);

struct PipelineProbe {
  int fused_event_token_count = -1;
  fusion::FilterMask event_mask;
};

/// Differentiable forward pass: patchify both modalities, encode each with
/// its own stack, aggregate event tokens to the per-frame count, fuse, and
/// return the 1 x M logits var.
int build_pipeline(ad::Graph& g, const BoundModel& bound, const Model& model,
                   const SampleTensors& sample, PipelineProbe* probe = nullptr);

/// Convenience non-differentiable forward returning the prediction.
par::AttributePrediction forward_pipeline(const Model& model, const SampleTensors& sample,
                                          PipelineProbe* probe = nullptr);

double lr_for_epoch(const TrainConfig& cfg, int epoch);

struct RunReport {
  std::vector<double> loss_trace;  // per-epoch mean batch loss
  std::string final_metrics_json;
  double wall_clock_sec = 0;
  std::string config_text;
  uint64_t seed = 0;
};

struct TrainHooks {
  std::function<void(int epoch, int step, int sample_index, const AugDraw& draw,
                     const SampleTensors& augmented)>
      on_augment;
};

std::pair<data::Checkpoint, RunReport> train(const TrainConfig& cfg,
                                             const data::DatasetManifest& dataset,
                                             const TrainHooks* hooks = nullptr);

Model model_from_checkpoint(const data::Checkpoint& ckpt);
data::Checkpoint checkpoint_from_model(const Model& model, uint64_t epoch);

struct EvalResult {
  par::ConfusionCounts counts;
  std::string json;
};
EvalResult evaluate(const Model& model, const data::DatasetManifest& dataset,
                    const std::function<void(const data::SampleRecord&, const PipelineProbe&)>&
                        probe_cb = nullptr);

/// Grayscale montage of the event frames (stacked vertically) with the
/// patches of filtered-out tokens blacked; kept patches show the frame luma.
std::vector<double> filter_visualization(const Model& model, const SampleTensors& sample,
                                         int& out_h, int& out_w);

std::string run_report_json(const RunReport& report);

}  // namespace otnpar::train
