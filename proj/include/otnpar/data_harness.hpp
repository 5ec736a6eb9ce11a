#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "otnpar/graph.hpp"
#include "otnpar/image.hpp"

namespace otnpar::data {

struct SampleRecord {
  std::string sample_id;
  std::string dir;
  std::vector<std::string> rgb_paths;          // ordered rgb_NNN.ppm
  std::string events_csv;                      // empty when event frames are given
  std::vector<std::string> event_frame_paths;  // ordered event_NNN.ppm, may be empty
  std::vector<int> labels;
};

struct DatasetManifest {
  std::string root;
  std::string split;
  std::vector<std::string> attribute_names;
  std::vector<SampleRecord> records;
};

/// Loads root/{attributes.txt, <split>/} with one directory per sample
/// containing rgb_NNN.ppm frames, events.csv (or event_NNN.ppm frames) and
/// labels.json. Records come back sorted by sample_id.
DatasetManifest load_dataset(const std::string& root, const std::string& split);

enum class CueVisibility { rgb_only, event_only, both };
CueVisibility parse_visibility(const std::string& name);
std::string visibility_name(CueVisibility v);

struct GeneratorConfig {
  int train_samples = 64;
  int test_samples = 0;
  int attributes = 8;
  int image_h = 64;
  int image_w = 32;
  int hidden_frames = 6;       // frames behind the simulated event stream
  int rgb_frames = 1;          // leading hidden frames saved as RGB
  double sim_threshold = 0.025;
  std::vector<CueVisibility> cue_visibility;  // one entry per attribute
};

/// Parses a flat key=value generator config; unknown keys are errors.
GeneratorConfig load_generator_config(const std::string& path);

/// Writes a synthetic paired RGB-event dataset. Each attribute owns a canvas
/// region and a cue whose visibility decides which modality carries it:
///   rgb_only   - static stripes, visible in RGB, silent in the event stream
///   event_only - a low-contrast blob present in every sample; it moves only
///                when the label is 1, so the RGB appearance carries no label
///                signal while motion events do
///   both       - a high-contrast moving block, visible in both modalities
/// Generation is a pure function of (cfg, seed).
void generate_synthetic_dataset(const GeneratorConfig& cfg, uint64_t seed,
                                const std::string& out_root);

struct Checkpoint {
  uint32_t format_version = 1;
  std::string config_text;  // canonical key=value snapshot
  uint64_t epoch = 0;
  uint64_t seed = 0;
  std::vector<std::pair<std::string, ad::Mat>> params;
  std::vector<std::pair<std::string, ad::Mat>> optimizer;  // momentum buffers
};

/// Single-file container: 4-byte magic, version, sized payload, FNV-1a
/// content hash. save -> load -> save round-trips byte-identically.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace otnpar::data
