#include "otnpar/train_eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace otnpar::train {

FusionKind parse_fusion(const std::string& name) {
  if (name == "otn") return FusionKind::otn;
  if (name == "concat") return FusionKind::concat;
  if (name == "add") return FusionKind::add;
  if (name == "conv1x1") return FusionKind::conv1x1;
  throw ConfigError("unknown fusion method: " + name);
}

std::string fusion_name(FusionKind f) {
  switch (f) {
    case FusionKind::otn: return "otn";
    case FusionKind::concat: return "concat";
    case FusionKind::add: return "add";
    case FusionKind::conv1x1: return "conv1x1";
  }
  throw ConfigError("unknown fusion value");
}

namespace {

std::string strip(std::string s) {
  s.erase(0, s.find_first_not_of(" \t"));
  s.erase(s.find_last_not_of(" \t") + 1);
  return s;
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("bad boolean for " + key + ": " + v);
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

TrainConfig parse_config_text(const std::string& text) {
  TrainConfig cfg;
  std::stringstream in(text);
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::string t = strip(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + " is not key = value: " + line);
    const std::string key = strip(t.substr(0, eq));
    const std::string value = strip(t.substr(eq + 1));
    try {
      if (key == "rgb_frames") cfg.rgb_frames = std::stoi(value);
      else if (key == "event_frames") cfg.event_frames = std::stoi(value);
      else if (key == "image_h") cfg.image_h = std::stoi(value);
      else if (key == "image_w") cfg.image_w = std::stoi(value);
      else if (key == "patch_size") cfg.patch_size = std::stoi(value);
      else if (key == "depth") cfg.depth = std::stoi(value);
      else if (key == "embed_dim") cfg.embed_dim = std::stoi(value);
      else if (key == "batch_size") cfg.batch_size = std::stoi(value);
      else if (key == "epochs") cfg.epochs = std::stoi(value);
      else if (key == "base_lr") cfg.base_lr = std::stod(value);
      else if (key == "warmup_epochs") cfg.warmup_epochs = std::stoi(value);
      else if (key == "lr_decay_factor") cfg.lr_decay_factor = std::stod(value);
      else if (key == "filter_threshold") cfg.filter_threshold = std::stod(value);
      else if (key == "aggregation") cfg.aggregation = fusion::parse_aggregation(value);
      else if (key == "fusion") cfg.fusion = parse_fusion(value);
      else if (key == "fusion_eq7_literal") cfg.fusion_eq7_literal = parse_bool(value, key);
      else if (key == "seed") cfg.seed = std::stoull(value);
      else throw ConfigError("unknown config key: " + key);
    } catch (const std::invalid_argument&) {
      throw ConfigError("bad value for config key " + key + ": " + value);
    } catch (const std::out_of_range&) {
      throw ConfigError("bad value for config key " + key + ": " + value);
    }
  }
  validate_config(cfg);
  return cfg;
}

TrainConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

std::string config_to_text(const TrainConfig& cfg) {
  std::stringstream out;
  out << "rgb_frames = " << cfg.rgb_frames << "\n";
  out << "event_frames = " << cfg.event_frames << "\n";
  out << "image_h = " << cfg.image_h << "\n";
  out << "image_w = " << cfg.image_w << "\n";
  out << "patch_size = " << cfg.patch_size << "\n";
  out << "depth = " << cfg.depth << "\n";
  out << "embed_dim = " << cfg.embed_dim << "\n";
  out << "batch_size = " << cfg.batch_size << "\n";
  out << "epochs = " << cfg.epochs << "\n";
  out << "base_lr = " << format_double(cfg.base_lr) << "\n";
  out << "warmup_epochs = " << cfg.warmup_epochs << "\n";
  out << "lr_decay_factor = " << format_double(cfg.lr_decay_factor) << "\n";
  out << "filter_threshold = " << format_double(cfg.filter_threshold) << "\n";
  out << "aggregation = " << fusion::aggregation_name(cfg.aggregation) << "\n";
  out << "fusion = " << fusion_name(cfg.fusion) << "\n";
  out << "fusion_eq7_literal = " << (cfg.fusion_eq7_literal ? "true" : "false") << "\n";
  out << "seed = " << cfg.seed << "\n";
  return out.str();
}

void validate_config(const TrainConfig& cfg) {
  if (cfg.rgb_frames < 0 || cfg.event_frames < 0)
    throw ConfigError("frame counts must be non-negative");
  if (cfg.rgb_frames == 0 && cfg.event_frames == 0)
    throw ConfigError("at least one modality must have frames");
  if (cfg.patch_size < 1) throw ConfigError("patch_size must be positive");
  if (cfg.image_h < cfg.patch_size || cfg.image_w < cfg.patch_size ||
      cfg.image_h % cfg.patch_size != 0 || cfg.image_w % cfg.patch_size != 0)
    throw ConfigError("image geometry " + std::to_string(cfg.image_h) + "x" +
                      std::to_string(cfg.image_w) + " must be a multiple of patch size " +
                      std::to_string(cfg.patch_size));
  if (cfg.depth < 0) throw ConfigError("depth must be non-negative");
  if (cfg.embed_dim < 4 || cfg.embed_dim % 4 != 0)
    throw ConfigError("embed_dim must be a positive multiple of 4 (token shift quadrants)");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be positive");
  if (cfg.epochs < 0) throw ConfigError("epochs must be non-negative");
  if (cfg.base_lr < 0) throw ConfigError("base_lr must be non-negative");
  if (cfg.warmup_epochs < 0) throw ConfigError("warmup_epochs must be non-negative");
  if (cfg.lr_decay_factor <= 0) throw ConfigError("lr_decay_factor must be positive");
  if (cfg.filter_threshold < 0 || cfg.filter_threshold > 1)
    throw ConfigError("filter_threshold must lie in [0,1]");
}

rwkv::EncoderConfig Model::encoder_cfg() const {
  rwkv::EncoderConfig ec;
  ec.depth = cfg.depth;
  ec.embed_dim = cfg.embed_dim;
  ec.patch_size = cfg.patch_size;
  ec.expansion_ratio = 4;
  ec.layer_norm_epsilon = 1e-5;
  return ec;
}

Model assemble_model(const TrainConfig& cfg, int m_attr) {
  validate_config(cfg);
  if (m_attr < 1) throw ConfigError("model needs at least one attribute");
  Model model;
  model.cfg = cfg;
  model.m_attr = m_attr;
  const int c = cfg.embed_dim;
  const int hidden = 4 * c;
  const int n = model.tokens_per_frame();

  auto init_branch = [&](uint64_t tag, std::optional<rwkv::PatchEmbedParams>& embed,
                         std::vector<rwkv::EncoderBlockParams>& blocks) {
    Rng rng(mix_seed(cfg.seed, tag));
    embed = rwkv::init_patch_embed(cfg.patch_size, c, n, rng);
    for (int i = 0; i < cfg.depth; ++i)
      blocks.push_back({rwkv::init_spatial_mix(c, rng), rwkv::init_channel_mix(c, hidden, rng)});
  };
  if (cfg.rgb_frames > 0) init_branch(1, model.rgb_embed, model.rgb_blocks);
  if (cfg.event_frames > 0) init_branch(2, model.event_embed, model.event_blocks);

  if (cfg.rgb_frames > 0 && cfg.event_frames > 0) {
    Rng rng(mix_seed(cfg.seed, 3));
    switch (cfg.fusion) {
      case FusionKind::otn:
        model.fuse = fusion::init_fusion_params(c, rng);
        break;
      case FusionKind::concat: {
        model.proj_w = Mat(2 * c, c);
        for (Eigen::Index i = 0; i < model.proj_w.rows(); ++i)
          for (Eigen::Index j = 0; j < model.proj_w.cols(); ++j)
            model.proj_w(i, j) = rng.trunc_normal(0.02, 0.04);
        model.proj_b = Mat::Zero(1, c);
        break;
      }
      case FusionKind::add:
        break;
      case FusionKind::conv1x1: {
        model.proj_w = Mat(c, c);
        for (Eigen::Index i = 0; i < model.proj_w.rows(); ++i)
          for (Eigen::Index j = 0; j < model.proj_w.cols(); ++j)
            model.proj_w(i, j) = rng.trunc_normal(0.02, 0.04);
        model.proj_b = Mat::Zero(1, c);
        break;
      }
    }
  }

  Rng rng(mix_seed(cfg.seed, 4));
  model.head_w = Mat(c, m_attr);
  for (Eigen::Index i = 0; i < model.head_w.rows(); ++i)
    for (Eigen::Index j = 0; j < model.head_w.cols(); ++j)
      model.head_w(i, j) = rng.trunc_normal(0.02, 0.04);
  model.head_b = Mat::Zero(1, m_attr);
  return model;
}

namespace {

template <typename ModelT, typename Fn>
void visit_impl(ModelT& model, Fn&& fn) {
  auto visit_branch = [&](const std::string& prefix, auto& embed, auto& blocks) {
    if (!embed) return;
    fn(prefix + ".embed.projection", embed->projection);
    fn(prefix + ".embed.bias", embed->bias);
    fn(prefix + ".embed.pos", embed->position_embedding);
    for (size_t i = 0; i < blocks.size(); ++i) {
      const std::string b = prefix + ".block" + std::to_string(i);
      auto& s = blocks[i].spatial;
      fn(b + ".spatial.w_r", s.w_r);
      fn(b + ".spatial.w_k", s.w_k);
      fn(b + ".spatial.w_v", s.w_v);
      fn(b + ".spatial.w_o", s.w_o);
      fn(b + ".spatial.mix_r", s.mix_r);
      fn(b + ".spatial.mix_k", s.mix_k);
      fn(b + ".spatial.mix_v", s.mix_v);
      fn(b + ".spatial.decay_w", s.decay_w);
      fn(b + ".spatial.bonus_u", s.bonus_u);
      auto& ch = blocks[i].channel;
      fn(b + ".channel.w_r", ch.w_r);
      fn(b + ".channel.w_k", ch.w_k);
      fn(b + ".channel.w_v", ch.w_v);
      fn(b + ".channel.w_o", ch.w_o);
      fn(b + ".channel.mix_r", ch.mix_r);
      fn(b + ".channel.mix_k", ch.mix_k);
    }
  };
  visit_branch("rgb", model.rgb_embed, model.rgb_blocks);
  visit_branch("event", model.event_embed, model.event_blocks);
  if (model.fuse) {
    auto& f = *model.fuse;
    fn("fusion.w_r", f.w_r);
    fn("fusion.w_k", f.w_k);
    fn("fusion.w_v", f.w_v);
    fn("fusion.mix_r", f.mix_r);
    fn("fusion.mix_k", f.mix_k);
    fn("fusion.mix_v", f.mix_v);
    fn("fusion.bonus_u", f.bonus_u);
    fn("fusion.ln_gamma", f.ln_gamma);
    fn("fusion.ln_beta", f.ln_beta);
  }
  if (model.proj_w.size() > 0) {
    fn("fusion.proj_w", model.proj_w);
    fn("fusion.proj_b", model.proj_b);
  }
  fn("head.weight", model.head_w);
  fn("head.bias", model.head_b);
}

}  // namespace

void visit_params(Model& model, const std::function<void(const std::string&, Mat&)>& fn) {
  visit_impl(model, fn);
}

void visit_params(const Model& model,
                  const std::function<void(const std::string&, const Mat&)>& fn) {
  visit_impl(model, fn);
}

size_t parameter_count(const Model& model) {
  size_t count = 0;
  visit_params(model, [&](const std::string&, const Mat& m) { count += m.size(); });
  return count;
}

BoundModel bind_model(ad::Graph& g, const Model& model) {
  BoundModel bound;
  visit_params(model, [&](const std::string& name, const Mat& m) {
    bound.named.emplace_back(name, g.leaf(m));
  });
  size_t i = 0;
  auto next = [&]() { return bound.named[i++].second; };
  auto take_branch = [&](const auto& embed, const auto& blocks,
                         std::optional<rwkv::PatchEmbedVars>& embed_vars,
                         std::vector<rwkv::EncoderBlockVars>& block_vars) {
    if (!embed) return;
    embed_vars = rwkv::PatchEmbedVars{next(), next(), next()};
    for (size_t b = 0; b < blocks.size(); ++b) {
      rwkv::EncoderBlockVars v;
      v.spatial = {next(), next(), next(), next(), next(), next(), next(), next(), next()};
      v.channel = {next(), next(), next(), next(), next(), next()};
      block_vars.push_back(v);
    }
  };
  take_branch(model.rgb_embed, model.rgb_blocks, bound.rgb_embed, bound.rgb_blocks);
  take_branch(model.event_embed, model.event_blocks, bound.event_embed, bound.event_blocks);
  if (model.fuse)
    bound.fuse = fusion::FusionVars{next(), next(), next(), next(), next(),
                                    next(), next(), next(), next()};
  if (model.proj_w.size() > 0) {
    bound.proj_w = next();
    bound.proj_b = next();
  }
  bound.head_w = next();
  bound.head_b = next();
  if (i != bound.named.size())
    throw ShapeError("bind_model: parameter enumeration mismatch");
  return bound;
}

namespace {

FrameSequence stack_stream(const events::EventStream& stream, int t_e) {
  FrameSequence empty(t_e, stream.sensor_height, stream.sensor_width, FrameKind::event);
  if (stream.events.empty()) return empty;
  int64_t span = stream.events.back().t + 1;
  if (span < t_e) span = t_e;
  std::vector<events::ExposureWindow> windows;
  windows.reserve(static_cast<size_t>(t_e));
  for (int i = 0; i < t_e; ++i)
    windows.push_back({span * i / t_e, span * (i + 1) / t_e});
  return events::stack_events(stream, windows, kEventNormCap);
}

}  // namespace

SampleTensors load_sample(const data::SampleRecord& record, const TrainConfig& cfg) {
  SampleTensors sample;
  sample.labels = record.labels;
  if (cfg.rgb_frames > 0) {
    if (static_cast<int>(record.rgb_paths.size()) < cfg.rgb_frames)
      throw DataError("sample " + record.sample_id + " has " +
                      std::to_string(record.rgb_paths.size()) + " rgb frames, config needs " +
                      std::to_string(cfg.rgb_frames));
    sample.rgb = FrameSequence(cfg.rgb_frames, cfg.image_h, cfg.image_w, FrameKind::rgb);
    for (int t = 0; t < cfg.rgb_frames; ++t) {
      int h = 0, w = 0;
      ppm_geometry(record.rgb_paths[t], h, w);
      if (h != cfg.image_h || w != cfg.image_w)
        throw DataError("geometry mismatch for sample " + record.sample_id + ": frame is " +
                        std::to_string(h) + "x" + std::to_string(w) + ", config expects " +
                        std::to_string(cfg.image_h) + "x" + std::to_string(cfg.image_w));
      read_ppm_into(record.rgb_paths[t], sample.rgb, t);
    }
  }
  if (cfg.event_frames > 0) {
    if (!record.events_csv.empty()) {
      events::EventStream stream =
          events::parse_event_csv(record.events_csv, cfg.image_h, cfg.image_w);
      sample.event = stack_stream(stream, cfg.event_frames);
    } else {
      if (static_cast<int>(record.event_frame_paths.size()) < cfg.event_frames)
        throw DataError("sample " + record.sample_id + " has " +
                        std::to_string(record.event_frame_paths.size()) +
                        " event frames, config needs " + std::to_string(cfg.event_frames));
      sample.event = FrameSequence(cfg.event_frames, cfg.image_h, cfg.image_w, FrameKind::event);
      for (int t = 0; t < cfg.event_frames; ++t) {
        int h = 0, w = 0;
        ppm_geometry(record.event_frame_paths[t], h, w);
        if (h != cfg.image_h || w != cfg.image_w)
          throw DataError("geometry mismatch for sample " + record.sample_id);
        read_ppm_into(record.event_frame_paths[t], sample.event, t);
      }
    }
  }
  return sample;
}

namespace {
int reflect101(int r, int n) {
  while (r < 0 || r >= n) {
    if (r < 0) r = -r;
    if (r >= n) r = 2 * n - 2 - r;
  }
  return r;
}
}  // namespace

FrameSequence augment_frames(const FrameSequence& frames, const AugDraw& draw) {
  if (frames.frames == 0) return frames;
  FrameSequence out(frames.frames, frames.height, frames.width, frames.kind);
  const int pad = kCropPadding;
  for (int t = 0; t < frames.frames; ++t)
    for (int y = 0; y < frames.height; ++y)
      for (int x = 0; x < frames.width; ++x) {
        int sy = reflect101(y + draw.dy - pad, frames.height);
        int sx = reflect101(x + draw.dx - pad, frames.width);
        if (draw.flip) sx = frames.width - 1 - sx;
        for (int c = 0; c < 3; ++c) out.at(t, y, x, c) = frames.at(t, sy, sx, c);
      }
  return out;
}

int build_pipeline(ad::Graph& g, const BoundModel& bound, const Model& model,
                   const SampleTensors& sample, PipelineProbe* probe) {
  const TrainConfig& cfg = model.cfg;
  const double eps = model.encoder_cfg().layer_norm_epsilon;
  const ad::Grid frame_grid{1, model.grid_rows(), model.grid_cols()};
  const int n = model.tokens_per_frame();

  int rgb_tokens = -1;
  if (cfg.rgb_frames > 0) {
    if (sample.rgb.frames != cfg.rgb_frames)
      throw ShapeError("pipeline: sample rgb frame count does not match config");
    ad::Grid grid;
    int x = rwkv::build_patchify(g, sample.rgb, *bound.rgb_embed, cfg.patch_size, grid);
    x = rwkv::build_encoder(g, x, bound.rgb_blocks, grid, eps);
    rgb_tokens = cfg.rgb_frames > 1 ? g.mean_frames(x, cfg.rgb_frames) : x;
  }

  int event_tokens = -1;
  if (cfg.event_frames > 0) {
    if (sample.event.frames != cfg.event_frames)
      throw ShapeError("pipeline: sample event frame count does not match config");
    ad::Grid grid;
    int x = rwkv::build_patchify(g, sample.event, *bound.event_embed, cfg.patch_size, grid);
    x = rwkv::build_encoder(g, x, bound.event_blocks, grid, eps);
    switch (cfg.aggregation) {
      case fusion::Aggregation::max:
        event_tokens = g.max_frames(x, cfg.event_frames);
        break;
      case fusion::Aggregation::mean:
        event_tokens = g.mean_frames(x, cfg.event_frames);
        break;
      case fusion::Aggregation::sim: {
        fusion::AggregationResult agg = fusion::aggregate_event_tokens(
            g.value(x), cfg.event_frames, fusion::Aggregation::sim, cfg.filter_threshold, n);
        event_tokens = g.gather_rows(x, agg.mask.kept_indices);
        if (probe) probe->event_mask = agg.mask;
        break;
      }
    }
    if (probe) probe->fused_event_token_count = static_cast<int>(g.value(event_tokens).rows());
  }

  int fused = -1;
  if (rgb_tokens >= 0 && event_tokens >= 0) {
    switch (cfg.fusion) {
      case FusionKind::otn:
        fused = fusion::build_otn_fuse(g, rgb_tokens, event_tokens, *bound.fuse, frame_grid, eps,
                                       cfg.fusion_eq7_literal);
        break;
      case FusionKind::concat:
        fused = g.add_row_broadcast(
            g.matmul(g.concat_cols(rgb_tokens, event_tokens), bound.proj_w), bound.proj_b);
        break;
      case FusionKind::add:
        fused = g.add(rgb_tokens, event_tokens);
        break;
      case FusionKind::conv1x1:
        fused = g.add_row_broadcast(g.matmul(g.add(rgb_tokens, event_tokens), bound.proj_w),
                                    bound.proj_b);
        break;
    }
  } else {
    fused = rgb_tokens >= 0 ? rgb_tokens : event_tokens;
  }
  return g.add_row_broadcast(g.matmul(g.mean_rows(fused), bound.head_w), bound.head_b);
}

par::AttributePrediction forward_pipeline(const Model& model, const SampleTensors& sample,
                                          PipelineProbe* probe) {
  ad::Graph g;
  BoundModel bound = bind_model(g, model);
  int logits = build_pipeline(g, bound, model, sample, probe);
  par::AttributePrediction pred;
  pred.logits = g.value(logits);
  pred.probabilities =
      pred.logits.unaryExpr([](double z) { return 1.0 / (1.0 + std::exp(-z)); });
  pred.binary.resize(pred.logits.rows(), pred.logits.cols());
  for (Eigen::Index i = 0; i < pred.logits.rows(); ++i)
    for (Eigen::Index j = 0; j < pred.logits.cols(); ++j)
      pred.binary(i, j) = pred.probabilities(i, j) >= 0.5 ? 1 : 0;
  return pred;
}

double lr_for_epoch(const TrainConfig& cfg, int epoch) {
  if (cfg.warmup_epochs > 0 && epoch < cfg.warmup_epochs)
    return cfg.base_lr * static_cast<double>(epoch + 1) / cfg.warmup_epochs;
  // Single step-decay milestone at two thirds of the run.
  const int milestone = (2 * cfg.epochs) / 3;
  double lr = cfg.base_lr;
  if (cfg.epochs > 0 && epoch >= milestone && milestone > 0) lr *= cfg.lr_decay_factor;
  return lr;
}

namespace {

AugDraw draw_augment(Rng& rng) {
  AugDraw d;
  d.flip = rng.bernoulli(0.5);
  d.dy = static_cast<int>(rng.uniform_int(0, 2 * kCropPadding));
  d.dx = static_cast<int>(rng.uniform_int(0, 2 * kCropPadding));
  return d;
}

}  // namespace

std::pair<data::Checkpoint, RunReport> train(const TrainConfig& cfg,
                                             const data::DatasetManifest& dataset,
                                             const TrainHooks* hooks) {
  const auto t_start = std::chrono::steady_clock::now();
  validate_config(cfg);
  if (dataset.records.empty()) throw DataError("train: dataset has no samples");
  const int m_attr = static_cast<int>(dataset.attribute_names.size());

  std::vector<SampleTensors> samples;
  samples.reserve(dataset.records.size());
  for (const data::SampleRecord& rec : dataset.records) samples.push_back(load_sample(rec, cfg));

  par::LabelMatrix labels(static_cast<Eigen::Index>(samples.size()), m_attr);
  for (size_t i = 0; i < samples.size(); ++i)
    for (int j = 0; j < m_attr; ++j) labels(static_cast<Eigen::Index>(i), j) = samples[i].labels[j];
  const par::AttributeWeights weights = par::attribute_weights(labels);

  Model model = assemble_model(cfg, m_attr);

  std::vector<std::string> names;
  std::vector<Mat*> params;
  visit_params(model, [&](const std::string& name, Mat& m) {
    names.push_back(name);
    params.push_back(&m);
  });
  std::vector<Mat> momentum;
  momentum.reserve(params.size());
  for (Mat* p : params) momentum.push_back(Mat::Zero(p->rows(), p->cols()));

  RunReport report;
  report.seed = cfg.seed;
  report.config_text = config_to_text(cfg);

  const int sample_count = static_cast<int>(samples.size());
  int global_step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_for_epoch(cfg, epoch);
    std::vector<int> order(sample_count);
    for (int i = 0; i < sample_count; ++i) order[i] = i;
    Rng shuffle_rng(mix_seed(cfg.seed, 0x51, static_cast<uint64_t>(epoch)));
    for (int i = sample_count - 1; i > 0; --i) {
      const int j = static_cast<int>(shuffle_rng.uniform_int(0, i));
      std::swap(order[i], order[j]);
    }

    double epoch_loss = 0.0;
    int batches = 0;
    for (int start = 0; start < sample_count; start += cfg.batch_size) {
      const int batch_n = std::min(cfg.batch_size, sample_count - start);
      std::vector<Mat> grad_sum;
      grad_sum.reserve(params.size());
      for (Mat* p : params) grad_sum.push_back(Mat::Zero(p->rows(), p->cols()));
      double batch_loss = 0.0;

      for (int slot = 0; slot < batch_n; ++slot) {
        const int idx = order[start + slot];
        Rng aug_rng(mix_seed(cfg.seed, 0xA6, static_cast<uint64_t>(global_step),
                             static_cast<uint64_t>(slot)));
        const AugDraw draw = draw_augment(aug_rng);
        SampleTensors aug;
        aug.labels = samples[idx].labels;
        aug.rgb = augment_frames(samples[idx].rgb, draw);
        aug.event = augment_frames(samples[idx].event, draw);
        if (hooks && hooks->on_augment) hooks->on_augment(epoch, global_step, idx, draw, aug);

        ad::Graph g;
        BoundModel bound = bind_model(g, model);
        const int logits = build_pipeline(g, bound, model, aug);
        const int probs = g.sigmoid(logits);
        Mat label_row(1, m_attr);
        for (int j = 0; j < m_attr; ++j) label_row(0, j) = aug.labels[j];
        const int loss = g.wce_loss(probs, label_row, weights.pos_w, weights.neg_w);
        const double loss_value = g.value(loss)(0, 0);
        if (!std::isfinite(loss_value))
          throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batches) + ", sample " + std::to_string(idx));
        batch_loss += loss_value;
        g.backward(loss);
        auto grads = ad::collect_gradients(g, bound.named);
        for (size_t p = 0; p < grads.size(); ++p) grad_sum[p] += grads[p].second;
      }

      batch_loss /= batch_n;
      for (size_t p = 0; p < params.size(); ++p) {
        const Mat grad = grad_sum[p] / static_cast<double>(batch_n);
        momentum[p] = kSgdMomentum * momentum[p] + grad;
        *params[p] -= lr * momentum[p];
        if (names[p].find(".mix_") != std::string::npos)
          *params[p] = params[p]->cwiseMax(0.0).cwiseMin(1.0);
      }
      epoch_loss += batch_loss;
      ++batches;
      ++global_step;
    }
    report.loss_trace.push_back(epoch_loss / batches);
  }

  data::Checkpoint ckpt = checkpoint_from_model(model, static_cast<uint64_t>(cfg.epochs));
  for (size_t p = 0; p < params.size(); ++p) ckpt.optimizer.emplace_back(names[p], momentum[p]);

  report.final_metrics_json = evaluate(model, dataset).json;
  report.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return {std::move(ckpt), std::move(report)};
}

data::Checkpoint checkpoint_from_model(const Model& model, uint64_t epoch) {
  data::Checkpoint ckpt;
  ckpt.config_text = config_to_text(model.cfg);
  ckpt.epoch = epoch;
  ckpt.seed = model.cfg.seed;
  visit_params(model, [&](const std::string& name, const Mat& m) {
    ckpt.params.emplace_back(name, m);
  });
  return ckpt;
}

Model model_from_checkpoint(const data::Checkpoint& ckpt) {
  const TrainConfig cfg = parse_config_text(ckpt.config_text);
  int m_attr = -1;
  for (const auto& [name, m] : ckpt.params)
    if (name == "head.bias") m_attr = static_cast<int>(m.cols());
  if (m_attr < 1) throw DataError("checkpoint lacks a head.bias parameter");
  Model model = assemble_model(cfg, m_attr);
  std::map<std::string, const Mat*> stored;
  for (const auto& [name, m] : ckpt.params) stored[name] = &m;
  size_t matched = 0;
  visit_params(model, [&](const std::string& name, Mat& m) {
    auto it = stored.find(name);
    if (it == stored.end()) throw DataError("checkpoint is missing parameter " + name);
    if (it->second->rows() != m.rows() || it->second->cols() != m.cols())
      throw DataError("checkpoint parameter " + name + " has unexpected shape");
    m = *it->second;
    ++matched;
  });
  if (matched != ckpt.params.size())
    throw DataError("checkpoint has " + std::to_string(ckpt.params.size()) +
                    " parameters, model expects " + std::to_string(matched));
  return model;
}

EvalResult evaluate(const Model& model, const data::DatasetManifest& dataset,
                    const std::function<void(const data::SampleRecord&, const PipelineProbe&)>&
                        probe_cb) {
  if (static_cast<int>(dataset.attribute_names.size()) != model.m_attr)
    throw DataError("geometry mismatch: dataset has " +
                    std::to_string(dataset.attribute_names.size()) +
                    " attributes, model expects " + std::to_string(model.m_attr));
  if (dataset.records.empty()) throw DataError("empty evaluation: no samples");
  const int n = static_cast<int>(dataset.records.size());
  par::BinaryMatrix predictions(n, model.m_attr);
  par::LabelMatrix labels(n, model.m_attr);
  for (int i = 0; i < n; ++i) {
    SampleTensors sample = load_sample(dataset.records[i], model.cfg);
    PipelineProbe probe;
    par::AttributePrediction pred = forward_pipeline(model, sample, &probe);
    for (int j = 0; j < model.m_attr; ++j) {
      predictions(i, j) = pred.binary(0, j);
      labels(i, j) = sample.labels[j];
    }
    if (probe_cb) probe_cb(dataset.records[i], probe);
  }
  EvalResult result;
  result.counts = par::confusion(predictions, labels);
  result.json = par::metrics_json(result.counts, dataset.attribute_names);
  return result;
}

std::vector<double> filter_visualization(const Model& model, const SampleTensors& sample,
                                         int& out_h, int& out_w) {
  const TrainConfig& cfg = model.cfg;
  if (cfg.event_frames <= 0)
    throw ConfigError("filter visualization needs an event branch (event_frames > 0)");
  rwkv::TokenSequence tokens = rwkv::patchify(sample.event, *model.event_embed, cfg.patch_size);
  tokens = rwkv::encoder_forward(tokens, model.event_blocks, model.encoder_cfg());
  const int n = model.tokens_per_frame();
  std::vector<uint8_t> keep(static_cast<size_t>(tokens.data.rows()), 1);
  if (cfg.aggregation == fusion::Aggregation::sim) {
    fusion::AggregationResult agg = fusion::aggregate_event_tokens(
        tokens.data, cfg.event_frames, fusion::Aggregation::sim, cfg.filter_threshold, n);
    keep = agg.mask.keep;
  }
  out_h = cfg.event_frames * cfg.image_h;
  out_w = cfg.image_w;
  std::vector<double> gray(static_cast<size_t>(out_h) * out_w, 0.0);
  const int cols = model.grid_cols();
  for (int t = 0; t < cfg.event_frames; ++t)
    for (int y = 0; y < cfg.image_h; ++y)
      for (int x = 0; x < cfg.image_w; ++x) {
        const int token = t * n + (y / cfg.patch_size) * cols + (x / cfg.patch_size);
        if (!keep[static_cast<size_t>(token)]) continue;  // filtered patches stay black
        gray[static_cast<size_t>(t * cfg.image_h + y) * out_w + x] = sample.event.luma(t, y, x);
      }
  return gray;
}

std::string run_report_json(const RunReport& report) {
  nlohmann::ordered_json j;
  j["seed"] = report.seed;
  j["epochs"] = report.loss_trace.size();
  j["wall_clock_sec"] = report.wall_clock_sec;
  j["loss_trace"] = report.loss_trace;
  nlohmann::ordered_json cfg_obj;
  std::stringstream ss(report.config_text);
  std::string line;
  while (std::getline(ss, line)) {
    const size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    cfg_obj[strip(line.substr(0, eq))] = strip(line.substr(eq + 1));
  }
  j["config"] = cfg_obj;
  if (!report.final_metrics_json.empty())
    j["final_metrics"] = nlohmann::ordered_json::parse(report.final_metrics_json);
  return j.dump(2);
}

}  // namespace otnpar::train
