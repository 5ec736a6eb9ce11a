#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "otnpar/train_eval.hpp"
#include "testing.hpp"

using namespace otnpar;
using namespace otnpar::train;
using ad::Mat;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.rgb_frames = 1;
  cfg.event_frames = 2;
  cfg.image_h = 32;
  cfg.image_w = 32;
  cfg.patch_size = 8;
  cfg.depth = 1;
  cfg.embed_dim = 8;
  cfg.batch_size = 4;
  cfg.epochs = 2;
  cfg.base_lr = 0.05;
  cfg.warmup_epochs = 1;
  cfg.aggregation = fusion::Aggregation::mean;
  cfg.seed = 7;
  return cfg;
}

std::string tiny_dataset(const std::string& name, int train_count, int attrs, uint64_t seed,
                         int test_count = 0) {
  const fs::path root = fresh_dir(name);
  data::GeneratorConfig gen;
  gen.train_samples = train_count;
  gen.test_samples = test_count;
  gen.attributes = attrs;
  gen.image_h = 32;
  gen.image_w = 32;
  gen.cue_visibility.clear();
  for (int j = 0; j < attrs; ++j)
    gen.cue_visibility.push_back(j % 2 == 0 ? data::CueVisibility::both
                                            : data::CueVisibility::rgb_only);
  data::generate_synthetic_dataset(gen, seed, root.string());
  return root.string();
}

}  // namespace

TEST_CASE("config parsing") {
  SUBCASE("defaults survive a serialize/parse round trip") {
    TrainConfig cfg;
    cfg.base_lr = 0.008;
    cfg.seed = 12345;
    TrainConfig back = parse_config_text(config_to_text(cfg));
    CHECK(back.base_lr == cfg.base_lr);
    CHECK(back.seed == cfg.seed);
    CHECK(back.event_frames == cfg.event_frames);
    CHECK(config_to_text(back) == config_to_text(cfg));
  }

  SUBCASE("unknown keys are hard errors") {
    CHECK_THROWS_WITH_AS(parse_config_text("learning_rate = 0.1\n"),
                         doctest::Contains("unknown config key"), ConfigError);
  }

  SUBCASE("bad values are rejected") {
    CHECK_THROWS_AS(parse_config_text("epochs = banana\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("fusion = transformer\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("filter_threshold = 1.5\n"), ConfigError);
  }

  SUBCASE("comments and blank lines are ignored") {
    TrainConfig cfg = parse_config_text("# comment\n\nepochs = 5\n");
    CHECK(cfg.epochs == 5);
  }
}

TEST_CASE("model assembly") {
  SUBCASE("desk profile parameter count matches the closed-form shape sum") {
    TrainConfig cfg;  // desk defaults: 64x32, p=8, L=2, C=64, otn fusion
    const int m_attr = 8;
    Model model = assemble_model(cfg, m_attr);
    const size_t c = 64, n = 32, p = 8, hidden = 4 * c;
    const size_t embed = p * p * 3 * c + c + n * c;
    const size_t spatial = 4 * c * c + 5 * c;
    const size_t channel = 2 * c * c + c * hidden + hidden * c + 2 * c;
    const size_t branch = embed + 2 * (spatial + channel);
    const size_t fusion_params = 3 * c * c + 6 * c;
    const size_t head = c * m_attr + m_attr;
    CHECK(parameter_count(model) == 2 * branch + fusion_params + head);
  }

  SUBCASE("an embed dim off the quadrant grid is rejected") {
    TrainConfig cfg;
    cfg.embed_dim = 30;
    CHECK_THROWS_AS(assemble_model(cfg, 4), ConfigError);
  }

  SUBCASE("depth zero is legal plumbing") {
    TrainConfig cfg = tiny_config();
    cfg.depth = 0;
    Model model = assemble_model(cfg, 2);
    CHECK(model.rgb_blocks.empty());
    data::GeneratorConfig gen;
    gen.train_samples = 1;
    gen.attributes = 2;
    gen.image_h = 32;
    gen.image_w = 32;
    gen.cue_visibility = {data::CueVisibility::both, data::CueVisibility::rgb_only};
    const fs::path root = fresh_dir("ds_depth0");
    data::generate_synthetic_dataset(gen, 3, root.string());
    auto manifest = data::load_dataset(root.string(), "train");
    SampleTensors sample = load_sample(manifest.records[0], cfg);
    par::AttributePrediction pred = forward_pipeline(model, sample);
    CHECK(pred.logits.allFinite());
  }

  SUBCASE("binding enumerates exactly the visited parameters in order") {
    TrainConfig cfg = tiny_config();
    Model model = assemble_model(cfg, 3);
    std::vector<std::string> visit_names;
    visit_params(model, [&](const std::string& name, const Mat&) { visit_names.push_back(name); });
    ad::Graph g;
    BoundModel bound = bind_model(g, model);
    REQUIRE(bound.named.size() == visit_names.size());
    for (size_t i = 0; i < visit_names.size(); ++i) CHECK(bound.named[i].first == visit_names[i]);
    CHECK(parameter_count(model) > 0);
  }
}

TEST_CASE("learning rate schedule") {
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.base_lr = 0.008;
  cfg.warmup_epochs = 10;
  cfg.lr_decay_factor = 0.1;
  for (int e = 0; e < 10; ++e)
    CHECK(lr_for_epoch(cfg, e) == 0.008 * static_cast<double>(e + 1) / 10.0);
  CHECK(lr_for_epoch(cfg, 10) == 0.008);
  CHECK(lr_for_epoch(cfg, 19) == 0.008);
  CHECK(lr_for_epoch(cfg, 20) == doctest::Approx(0.0008));  // milestone at 2/3
  CHECK(lr_for_epoch(cfg, 29) == doctest::Approx(0.0008));
}

TEST_CASE("training edge cases") {
  const std::string root = tiny_dataset("ds_edge", 6, 2, 21);
  auto manifest = data::load_dataset(root, "train");

  SUBCASE("zero epochs returns the initialized model and an empty trace") {
    TrainConfig cfg = tiny_config();
    cfg.epochs = 0;
    auto [ckpt, report] = train(cfg, manifest);
    CHECK(report.loss_trace.empty());
    CHECK(ckpt.epoch == 0);
    Model init = assemble_model(cfg, 2);
    Model trained = model_from_checkpoint(ckpt);
    bool all_equal = true;
    visit_params(init, [&](const std::string& name, const Mat& m) {
      visit_params(trained, [&](const std::string& other, const Mat& o) {
        if (name == other && !m.isApprox(o, 0.0)) all_equal = false;
      });
    });
    CHECK(all_equal);
  }

  SUBCASE("zero learning rate leaves parameters unchanged") {
    TrainConfig cfg = tiny_config();
    cfg.base_lr = 0.0;
    cfg.epochs = 2;
    auto [ckpt, report] = train(cfg, manifest);
    CHECK(report.loss_trace.size() == 2);
    Model init = assemble_model(cfg, 2);
    Model trained = model_from_checkpoint(ckpt);
    std::vector<const Mat*> a, b;
    visit_params(init, [&](const std::string&, const Mat& m) { a.push_back(&m); });
    visit_params(trained, [&](const std::string&, const Mat& m) { b.push_back(&m); });
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i]->isApprox(*b[i], 0.0));
  }

  SUBCASE("training on an empty dataset is a data error") {
    data::DatasetManifest empty;
    empty.attribute_names = {"a", "b"};
    CHECK_THROWS_AS(train(tiny_config(), empty), DataError);
  }
}

TEST_CASE("additive fusion with silenced event branch equals the rgb-only path") {
  const std::string root = tiny_dataset("ds_addzero", 3, 2, 31);
  auto manifest = data::load_dataset(root, "train");

  TrainConfig cfg_add = tiny_config();
  cfg_add.fusion = FusionKind::add;
  Model dual = assemble_model(cfg_add, 2);
  visit_params(dual, [&](const std::string& name, Mat& m) {
    if (name.rfind("event.", 0) == 0) m.setZero();
  });

  TrainConfig cfg_rgb = cfg_add;
  cfg_rgb.event_frames = 0;
  Model rgb_only = assemble_model(cfg_rgb, 2);
  visit_params(rgb_only, [&](const std::string& name, Mat& m) {
    visit_params(dual, [&](const std::string& other, const Mat& o) {
      if (name == other) m = o;
    });
  });

  for (const auto& rec : manifest.records) {
    SampleTensors dual_sample = load_sample(rec, cfg_add);
    SampleTensors rgb_sample = load_sample(rec, cfg_rgb);
    par::AttributePrediction a = forward_pipeline(dual, dual_sample);
    par::AttributePrediction b = forward_pipeline(rgb_only, rgb_sample);
    CHECK(a.logits.isApprox(b.logits, 0.0));
  }
}

TEST_CASE("concat and add fusions differ on the same input") {
  const std::string root = tiny_dataset("ds_catadd", 2, 2, 41);
  auto manifest = data::load_dataset(root, "train");
  TrainConfig cfg = tiny_config();
  cfg.fusion = FusionKind::concat;
  Model concat_model = assemble_model(cfg, 2);
  cfg.fusion = FusionKind::add;
  Model add_model = assemble_model(cfg, 2);
  SampleTensors sample = load_sample(manifest.records[0], cfg);
  par::AttributePrediction a = forward_pipeline(concat_model, sample);
  par::AttributePrediction b = forward_pipeline(add_model, sample);
  CHECK(!a.logits.isApprox(b.logits, 1e-9));
}

TEST_CASE("similarity aggregation aligns event tokens to the rgb count") {
  const std::string root = tiny_dataset("ds_align", 4, 2, 51);
  auto manifest = data::load_dataset(root, "train");
  TrainConfig cfg = tiny_config();
  cfg.event_frames = 5;
  cfg.aggregation = fusion::Aggregation::sim;
  cfg.filter_threshold = 0.75;
  Model model = assemble_model(cfg, 2);
  const int n = model.tokens_per_frame();
  for (const auto& rec : manifest.records) {
    SampleTensors sample = load_sample(rec, cfg);
    PipelineProbe probe;
    forward_pipeline(model, sample, &probe);
    CHECK(probe.fused_event_token_count == n);
    CHECK(static_cast<int>(probe.event_mask.kept_indices.size()) == n);
  }
}

TEST_CASE("augmentation applies the same draw to both modalities") {
  const std::string root = tiny_dataset("ds_aug", 6, 2, 61);
  auto manifest = data::load_dataset(root, "train");
  TrainConfig cfg = tiny_config();
  cfg.epochs = 1;

  std::vector<SampleTensors> originals;
  for (const auto& rec : manifest.records) originals.push_back(load_sample(rec, cfg));

  int calls = 0;
  bool saw_flip = false, saw_shift = false;
  TrainHooks hooks;
  hooks.on_augment = [&](int, int, int idx, const AugDraw& draw, const SampleTensors& aug) {
    ++calls;
    saw_flip |= draw.flip;
    saw_shift |= draw.dy != kCropPadding || draw.dx != kCropPadding;
    FrameSequence rgb = augment_frames(originals[static_cast<size_t>(idx)].rgb, draw);
    FrameSequence event = augment_frames(originals[static_cast<size_t>(idx)].event, draw);
    CHECK(rgb.data == aug.rgb.data);
    CHECK(event.data == aug.event.data);
  };
  train(cfg, manifest, &hooks);
  CHECK(calls == 6);
  CHECK(saw_shift);
}

TEST_CASE("augmented frames mirror and crop deterministically") {
  FrameSequence frames(1, 4, 4, FrameKind::rgb);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      for (int c = 0; c < 3; ++c) frames.at(0, y, x, c) = y * 4 + x;
  AugDraw centered{false, kCropPadding, kCropPadding};
  FrameSequence same = augment_frames(frames, centered);
  CHECK(same.data == frames.data);

  AugDraw flipped{true, kCropPadding, kCropPadding};
  FrameSequence mirrored = augment_frames(frames, flipped);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) CHECK(mirrored.at(0, y, x, 0) == frames.at(0, y, 3 - x, 0));
}

TEST_CASE("identical runs are deterministic and persistence round-trips") {
  const std::string root = tiny_dataset("ds_det", 8, 2, 71);
  auto manifest = data::load_dataset(root, "train");
  TrainConfig cfg = tiny_config();
  cfg.epochs = 2;

  auto [ckpt_a, report_a] = train(cfg, manifest);
  auto [ckpt_b, report_b] = train(cfg, manifest);
  REQUIRE(report_a.loss_trace.size() == report_b.loss_trace.size());
  for (size_t i = 0; i < report_a.loss_trace.size(); ++i)
    CHECK(std::abs(report_a.loss_trace[i] - report_b.loss_trace[i]) <= 1e-7);
  CHECK(report_a.final_metrics_json == report_b.final_metrics_json);

  const fs::path dir = fresh_dir("ckpt_roundtrip");
  const std::string p1 = (dir / "a.bin").string();
  const std::string p2 = (dir / "b.bin").string();
  data::save_checkpoint(ckpt_a, p1);
  data::Checkpoint loaded = data::load_checkpoint(p1);
  data::save_checkpoint(loaded, p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string bytes1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string bytes2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(bytes1 == bytes2);

  Model restored = model_from_checkpoint(loaded);
  std::string json_a = evaluate(restored, manifest).json;
  std::string json_b = evaluate(restored, manifest).json;
  CHECK(json_a == json_b);
  CHECK(json_a == report_a.final_metrics_json);
}

TEST_CASE("an untrained model scores in the chance band on balanced labels") {
  const std::string root = tiny_dataset("ds_chance", 50, 4, 81);
  auto manifest = data::load_dataset(root, "train");
  TrainConfig cfg = tiny_config();
  cfg.seed = 5;
  Model model = assemble_model(cfg, 4);
  EvalResult result = evaluate(model, manifest);
  par::Metrics m = par::compute_metrics(result.counts);
  CHECK(m.mA >= 0.4);
  CHECK(m.mA <= 0.6);
}

TEST_CASE("evaluation rejects a dataset with mismatched attributes") {
  const std::string root = tiny_dataset("ds_mismatch", 2, 3, 91);
  auto manifest = data::load_dataset(root, "train");
  Model model = assemble_model(tiny_config(), 5);
  CHECK_THROWS_WITH_AS(evaluate(model, manifest), doctest::Contains("geometry"), DataError);
}

TEST_CASE("filter visualization blacks out dropped patches") {
  const std::string root = tiny_dataset("ds_vis", 1, 2, 95);
  auto manifest = data::load_dataset(root, "train");
  TrainConfig cfg = tiny_config();
  cfg.event_frames = 4;
  cfg.aggregation = fusion::Aggregation::sim;
  Model model = assemble_model(cfg, 2);
  SampleTensors sample = load_sample(manifest.records[0], cfg);
  int h = 0, w = 0;
  std::vector<double> gray = filter_visualization(model, sample, h, w);
  CHECK(h == cfg.event_frames * cfg.image_h);
  CHECK(w == cfg.image_w);
  // 3 of 4 frames worth of tokens are filtered away; most pixels are black.
  int black = 0;
  for (double v : gray) black += v == 0.0;
  CHECK(black >= static_cast<int>(gray.size()) / 2);
}

TEST_CASE("run report serializes the config echo and loss trace") {
  RunReport report;
  report.seed = 9;
  report.loss_trace = {1.5, 0.7};
  report.config_text = "epochs = 2\nseed = 9\n";
  report.final_metrics_json = "{\"mA\": 0.5}";
  const std::string json = run_report_json(report);
  CHECK(json.find("\"loss_trace\"") != std::string::npos);
  CHECK(json.find("\"epochs\": \"2\"") != std::string::npos);
  CHECK(json.find("\"mA\"") != std::string::npos);
}
