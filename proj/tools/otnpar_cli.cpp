#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "otnpar/data_harness.hpp"
#include "otnpar/event_stream.hpp"
#include "otnpar/train_eval.hpp"

namespace fs = std::filesystem;
using namespace otnpar;

namespace {

std::vector<int64_t> read_timestamps(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open timestamps file: " + path);
  std::vector<int64_t> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    try {
      out.push_back(std::stoll(line));
    } catch (const std::exception&) {
      throw DataError("bad timestamp line in " + path + ": " + line);
    }
  }
  if (out.empty()) throw DataError("timestamps file is empty: " + path);
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"RGB-event pedestrian attribute recognition toolkit"};
  app.require_subcommand(1);

  // train
  auto* cmd_train = app.add_subcommand("train", "train a model on a dataset");
  std::string train_config, train_data, train_out;
  cmd_train->add_option("--config", train_config, "key = value config file")->required();
  cmd_train->add_option("--data", train_data, "dataset root")->required();
  cmd_train->add_option("--out", train_out, "output directory")->required();

  // eval
  auto* cmd_eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt, eval_data, eval_split = "test", eval_json;
  cmd_eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  cmd_eval->add_option("--data", eval_data, "dataset root")->required();
  cmd_eval->add_option("--split", eval_split, "dataset split (default test)");
  cmd_eval->add_option("--json", eval_json, "metrics JSON output path");

  // encode-events
  auto* cmd_encode = app.add_subcommand("encode-events", "stack an event CSV into frames");
  std::string enc_events, enc_timestamps, enc_out;
  int enc_h = 64, enc_w = 32;
  int64_t enc_exposure = 0, enc_cap = train::kEventNormCap;
  cmd_encode->add_option("--events", enc_events, "events.csv path")->required();
  cmd_encode->add_option("--timestamps", enc_timestamps, "one frame timestamp (us) per line")
      ->required();
  cmd_encode->add_option("--out", enc_out, "output directory for event frames")->required();
  cmd_encode->add_option("--height", enc_h, "sensor height (default 64)");
  cmd_encode->add_option("--width", enc_w, "sensor width (default 32)");
  cmd_encode->add_option("--exposure-us", enc_exposure,
                         "exposure per frame; defaults to the smallest inter-frame gap");
  cmd_encode->add_option("--norm-cap", enc_cap, "per-pixel count cap (default 3)");

  // simulate-events
  auto* cmd_sim = app.add_subcommand("simulate-events", "simulate events from RGB frames");
  std::string sim_frames, sim_out;
  double sim_threshold = 0.15;
  cmd_sim->add_option("--frames", sim_frames, "directory of rgb_NNN.ppm frames")->required();
  cmd_sim->add_option("--threshold", sim_threshold, "contrast threshold (default 0.15)");
  cmd_sim->add_option("--out", sim_out, "output events.csv")->required();

  // gen-synthetic
  auto* cmd_gen = app.add_subcommand("gen-synthetic", "generate a synthetic paired dataset");
  std::string gen_config, gen_out;
  uint64_t gen_seed = 0;
  cmd_gen->add_option("--config", gen_config, "generator config file")->required();
  cmd_gen->add_option("--seed", gen_seed, "generation seed")->required();
  cmd_gen->add_option("--out", gen_out, "output dataset root")->required();

  // visualize-filter
  auto* cmd_vis = app.add_subcommand("visualize-filter", "render the kept/filtered token mask");
  std::string vis_ckpt, vis_sample, vis_out;
  cmd_vis->add_option("--checkpoint", vis_ckpt, "checkpoint file")->required();
  cmd_vis->add_option("--sample", vis_sample, "sample directory")->required();
  cmd_vis->add_option("--out", vis_out, "output PGM image")->required();

  CLI11_PARSE(app, argc, argv);

  if (cmd_train->parsed()) {
    train::TrainConfig cfg = train::parse_config_file(train_config);
    data::DatasetManifest dataset = data::load_dataset(train_data, "train");
    auto [ckpt, report] = train::train(cfg, dataset);
    fs::create_directories(train_out);
    data::save_checkpoint(ckpt, (fs::path(train_out) / "checkpoint.bin").string());
    std::ofstream rep(fs::path(train_out) / "report.json");
    rep << train::run_report_json(report) << "\n";
    std::cout << "trained " << report.loss_trace.size() << " epochs";
    if (!report.loss_trace.empty()) std::cout << ", final loss " << report.loss_trace.back();
    std::cout << "\ncheckpoint: " << (fs::path(train_out) / "checkpoint.bin").string() << "\n";
    return 0;
  }

  if (cmd_eval->parsed()) {
    train::Model model = train::model_from_checkpoint(data::load_checkpoint(eval_ckpt));
    data::DatasetManifest dataset = data::load_dataset(eval_data, eval_split);
    train::EvalResult result = train::evaluate(model, dataset);
    if (!eval_json.empty()) {
      std::ofstream out(eval_json);
      out << result.json << "\n";
    }
    std::cout << result.json << "\n";
    return 0;
  }

  if (cmd_encode->parsed()) {
    events::EventStream stream = events::parse_event_csv(enc_events, enc_h, enc_w);
    std::vector<int64_t> timestamps = read_timestamps(enc_timestamps);
    if (enc_exposure <= 0) {
      enc_exposure = std::numeric_limits<int64_t>::max();
      for (size_t i = 1; i < timestamps.size(); ++i)
        enc_exposure = std::min(enc_exposure, timestamps[i] - timestamps[i - 1]);
      if (timestamps.size() == 1) enc_exposure = 10000;
    }
    auto windows = events::make_exposure_windows(timestamps, enc_exposure);
    FrameSequence frames = events::stack_events(stream, windows, enc_cap);
    save_frame_dir(enc_out, "event", frames);
    std::cout << "wrote " << frames.frames << " event frames to " << enc_out << "\n";
    return 0;
  }

  if (cmd_sim->parsed()) {
    FrameSequence frames = load_frame_dir(sim_frames, "rgb", FrameKind::rgb);
    events::EventStream stream = events::simulate_events(frames, sim_threshold);
    events::write_event_csv(sim_out, stream);
    std::cout << "simulated " << stream.events.size() << " events from " << frames.frames
              << " frames\n";
    return 0;
  }

  if (cmd_gen->parsed()) {
    data::GeneratorConfig cfg = data::load_generator_config(gen_config);
    data::generate_synthetic_dataset(cfg, gen_seed, gen_out);
    std::cout << "generated " << cfg.train_samples << " train / " << cfg.test_samples
              << " test samples under " << gen_out << "\n";
    return 0;
  }

  if (cmd_vis->parsed()) {
    train::Model model = train::model_from_checkpoint(data::load_checkpoint(vis_ckpt));
    data::SampleRecord record;
    record.dir = vis_sample;
    record.sample_id = fs::path(vis_sample).filename().string();
    const fs::path events_path = fs::path(vis_sample) / "events.csv";
    if (fs::exists(events_path)) record.events_csv = events_path.string();
    for (const auto& entry : fs::directory_iterator(vis_sample)) {
      const std::string name = entry.path().filename().string();
      if (name.rfind("rgb_", 0) == 0) record.rgb_paths.push_back(entry.path().string());
      if (name.rfind("event_", 0) == 0) record.event_frame_paths.push_back(entry.path().string());
    }
    std::sort(record.rgb_paths.begin(), record.rgb_paths.end());
    std::sort(record.event_frame_paths.begin(), record.event_frame_paths.end());
    record.labels.assign(static_cast<size_t>(model.m_attr), 0);
    train::SampleTensors sample = train::load_sample(record, model.cfg);
    int h = 0, w = 0;
    std::vector<double> gray = train::filter_visualization(model, sample, h, w);
    write_pgm(vis_out, gray, h, w);
    std::cout << "wrote " << h << "x" << w << " mask image to " << vis_out << "\n";
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  }
}
