#include "otnpar/data_harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "otnpar/event_stream.hpp"

namespace fs = std::filesystem;

namespace otnpar::data {

namespace {

std::vector<std::string> sorted_matching(const std::string& dir, const std::string& prefix) {
  std::vector<std::string> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind(prefix + "_", 0) == 0 && name.size() > 4 &&
        name.substr(name.size() - 4) == ".ppm")
      out.push_back(entry.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

DatasetManifest load_dataset(const std::string& root, const std::string& split) {
  DatasetManifest manifest;
  manifest.root = root;
  manifest.split = split;

  const fs::path attr_path = fs::path(root) / "attributes.txt";
  if (!fs::exists(attr_path))
    throw DataError("missing attribute file: " + attr_path.string());
  std::ifstream attr_in(attr_path);
  std::string line;
  while (std::getline(attr_in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) manifest.attribute_names.push_back(line);
  }
  if (manifest.attribute_names.empty())
    throw DataError("attribute file has no attributes: " + attr_path.string());

  const fs::path split_dir = fs::path(root) / split;
  if (!fs::is_directory(split_dir))
    throw DataError("missing split directory: " + split_dir.string());

  std::vector<std::string> sample_dirs;
  for (const auto& entry : fs::directory_iterator(split_dir))
    if (entry.is_directory()) sample_dirs.push_back(entry.path().string());
  std::sort(sample_dirs.begin(), sample_dirs.end());

  for (const std::string& dir : sample_dirs) {
    SampleRecord rec;
    rec.dir = dir;
    rec.sample_id = fs::path(dir).filename().string();

    const fs::path labels_path = fs::path(dir) / "labels.json";
    if (!fs::exists(labels_path))
      throw DataError("missing sample asset: " + labels_path.string());
    std::ifstream labels_in(labels_path);
    nlohmann::json j;
    try {
      labels_in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw DataError("bad labels.json for sample " + rec.sample_id + ": " + e.what());
    }
    if (!j.contains("labels") || !j["labels"].is_array())
      throw DataError("labels.json for sample " + rec.sample_id + " lacks a \"labels\" array");
    for (const auto& v : j["labels"]) rec.labels.push_back(v.get<int>());
    if (rec.labels.size() != manifest.attribute_names.size())
      throw DataError("label length mismatch for sample " + rec.sample_id + ": got " +
                      std::to_string(rec.labels.size()) + ", expected " +
                      std::to_string(manifest.attribute_names.size()));

    rec.rgb_paths = sorted_matching(dir, "rgb");
    const fs::path events_path = fs::path(dir) / "events.csv";
    if (fs::exists(events_path))
      rec.events_csv = events_path.string();
    else
      rec.event_frame_paths = sorted_matching(dir, "event");
    if (rec.rgb_paths.empty() && rec.events_csv.empty() && rec.event_frame_paths.empty())
      throw DataError("missing sample asset: no frames or events for sample " + rec.sample_id);
    manifest.records.push_back(std::move(rec));
  }
  return manifest;
}

CueVisibility parse_visibility(const std::string& name) {
  if (name == "rgb_only") return CueVisibility::rgb_only;
  if (name == "event_only") return CueVisibility::event_only;
  if (name == "both") return CueVisibility::both;
  throw ConfigError("unknown cue visibility: " + name);
}

std::string visibility_name(CueVisibility v) {
  switch (v) {
    case CueVisibility::rgb_only: return "rgb_only";
    case CueVisibility::event_only: return "event_only";
    case CueVisibility::both: return "both";
  }
  throw ConfigError("unknown cue visibility value");
}

GeneratorConfig load_generator_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open generator config: " + path);
  GeneratorConfig cfg;
  bool have_visibility = false;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::string trimmed = line;
    trimmed.erase(0, trimmed.find_first_not_of(" \t"));
    if (trimmed.empty() || trimmed[0] == '#') continue;
    const size_t eq = trimmed.find('=');
    if (eq == std::string::npos)
      throw ConfigError("generator config line " + std::to_string(line_no) + " is not key = value");
    auto strip = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t") + 1);
      return s;
    };
    const std::string key = strip(trimmed.substr(0, eq));
    const std::string value = strip(trimmed.substr(eq + 1));
    try {
      if (key == "train_samples") cfg.train_samples = std::stoi(value);
      else if (key == "test_samples") cfg.test_samples = std::stoi(value);
      else if (key == "attributes") cfg.attributes = std::stoi(value);
      else if (key == "image_h") cfg.image_h = std::stoi(value);
      else if (key == "image_w") cfg.image_w = std::stoi(value);
      else if (key == "hidden_frames") cfg.hidden_frames = std::stoi(value);
      else if (key == "rgb_frames") cfg.rgb_frames = std::stoi(value);
      else if (key == "sim_threshold") cfg.sim_threshold = std::stod(value);
      else if (key == "cue_visibility") {
        cfg.cue_visibility.clear();
        std::stringstream ss(value);
        std::string item;
        while (std::getline(ss, item, ',')) cfg.cue_visibility.push_back(parse_visibility(strip(item)));
        have_visibility = true;
      } else {
        throw ConfigError("unknown generator config key: " + key);
      }
    } catch (const std::invalid_argument&) {
      throw ConfigError("bad value for generator config key " + key + ": " + value);
    }
  }
  if (!have_visibility) {
    static const CueVisibility cycle[3] = {CueVisibility::rgb_only, CueVisibility::event_only,
                                           CueVisibility::both};
    for (int j = 0; j < cfg.attributes; ++j) cfg.cue_visibility.push_back(cycle[j % 3]);
  }
  if (static_cast<int>(cfg.cue_visibility.size()) != cfg.attributes)
    throw ConfigError("cue_visibility must list exactly one entry per attribute");
  if (cfg.train_samples < 0 || cfg.test_samples < 0 || cfg.attributes < 1 ||
      cfg.image_h < 16 || cfg.image_w < 16 || cfg.hidden_frames < 2 || cfg.rgb_frames < 1 ||
      cfg.rgb_frames > cfg.hidden_frames || cfg.sim_threshold <= 0.0)
    throw ConfigError("generator config out of range");
  return cfg;
}

namespace {

struct Region {
  int y0, x0, h, w;
};

std::vector<Region> attribute_regions(int m, int height, int width) {
  int cols = std::max(1, static_cast<int>(std::lround(
                             std::sqrt(static_cast<double>(m) * width / height))));
  cols = std::min(cols, m);
  int rows = (m + cols - 1) / cols;
  std::vector<Region> regions;
  const int rh = height / rows;
  const int rw = width / cols;
  if (rh < 8 || rw < 8)
    throw ConfigError("image too small for " + std::to_string(m) + " attribute regions");
  for (int j = 0; j < m; ++j) {
    const int r = j / cols;
    const int c = j % cols;
    regions.push_back({r * rh, c * rw, rh, rw});
  }
  return regions;
}

void add_block(FrameSequence& frames, int t, int y0, int x0, int h, int w, double delta) {
  for (int y = y0; y < y0 + h; ++y)
    for (int x = x0; x < x0 + w; ++x)
      for (int c = 0; c < 3; ++c) {
        double& v = frames.at(t, y, x, c);
        v = std::min(1.0, std::max(0.0, v + delta));
      }
}

void render_sample(const GeneratorConfig& cfg, const std::vector<Region>& regions,
                   const std::vector<int>& labels, Rng& rng, FrameSequence& hidden) {
  // Static per-sample texture; identical in every frame so it emits nothing.
  std::vector<double> noise(static_cast<size_t>(cfg.image_h) * cfg.image_w);
  for (double& n : noise) n = rng.uniform(-0.08, 0.08);
  for (int t = 0; t < cfg.hidden_frames; ++t)
    for (int y = 0; y < cfg.image_h; ++y)
      for (int x = 0; x < cfg.image_w; ++x)
        for (int c = 0; c < 3; ++c)
          hidden.at(t, y, x, c) = 0.5 + noise[static_cast<size_t>(y) * cfg.image_w + x];

  for (size_t j = 0; j < regions.size(); ++j) {
    const Region& reg = regions[j];
    switch (cfg.cue_visibility[j]) {
      case CueVisibility::rgb_only: {
        // Static stripes when present: strong in RGB, zero frame difference.
        if (labels[j] != 1) break;
        for (int t = 0; t < cfg.hidden_frames; ++t)
          for (int y = reg.y0; y < reg.y0 + reg.h; ++y) {
            if (((y - reg.y0) / 2) % 2 != 0) continue;
            for (int x = reg.x0; x < reg.x0 + reg.w; ++x)
              for (int c = 0; c < 3; ++c) {
                double& v = hidden.at(t, y, x, c);
                v = std::min(1.0, v + 0.35);
              }
          }
        break;
      }
      case CueVisibility::event_only: {
        // A low-contrast blob exists in every sample, so a single RGB frame
        // carries no label signal; only its motion (label = 1) makes events.
        const int bh = 3, bw = 4;
        const double delta = rng.bernoulli(0.5) ? 0.06 : -0.06;
        int by = static_cast<int>(rng.uniform_int(reg.y0, reg.y0 + reg.h - bh));
        int bx = static_cast<int>(rng.uniform_int(reg.x0, reg.x0 + reg.w - bw));
        for (int t = 0; t < cfg.hidden_frames; ++t) {
          add_block(hidden, t, by, bx, bh, bw, delta);
          if (labels[j] == 1) {
            by = std::min(reg.y0 + reg.h - bh,
                          std::max(reg.y0, by + static_cast<int>(rng.uniform_int(-3, 3))));
            bx = std::min(reg.x0 + reg.w - bw,
                          std::max(reg.x0, bx + static_cast<int>(rng.uniform_int(-3, 3))));
          }
        }
        break;
      }
      case CueVisibility::both: {
        // High-contrast moving block: strong in RGB and in the event stream.
        if (labels[j] != 1) break;
        const int bh = 4, bw = 5;
        int by = static_cast<int>(rng.uniform_int(reg.y0, reg.y0 + reg.h - bh));
        int bx = static_cast<int>(rng.uniform_int(reg.x0, reg.x0 + reg.w - bw));
        for (int t = 0; t < cfg.hidden_frames; ++t) {
          add_block(hidden, t, by, bx, bh, bw, 0.35);
          by = std::min(reg.y0 + reg.h - bh,
                        std::max(reg.y0, by + static_cast<int>(rng.uniform_int(-3, 3))));
          bx = std::min(reg.x0 + reg.w - bw,
                        std::max(reg.x0, bx + static_cast<int>(rng.uniform_int(-3, 3))));
        }
        break;
      }
    }
  }
}

void write_split(const GeneratorConfig& cfg, const std::vector<Region>& regions,
                 const std::string& split_dir, int count, uint64_t seed, int split_index) {
  fs::create_directories(split_dir);
  for (int i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, static_cast<uint64_t>(split_index), static_cast<uint64_t>(i)));
    std::vector<int> labels(cfg.attributes);
    for (int j = 0; j < cfg.attributes; ++j) labels[j] = rng.bernoulli(0.5) ? 1 : 0;

    FrameSequence hidden(cfg.hidden_frames, cfg.image_h, cfg.image_w, FrameKind::rgb);
    render_sample(cfg, regions, labels, rng, hidden);

    char name[32];
    std::snprintf(name, sizeof(name), "sample_%04d", i);
    const fs::path dir = fs::path(split_dir) / name;
    fs::create_directories(dir);

    char frame_name[32];
    for (int t = 0; t < cfg.rgb_frames; ++t) {
      std::snprintf(frame_name, sizeof(frame_name), "rgb_%03d.ppm", t);
      write_ppm((dir / frame_name).string(), hidden, t);
    }
    events::EventStream stream = events::simulate_events(hidden, cfg.sim_threshold);
    events::write_event_csv((dir / "events.csv").string(), stream);

    nlohmann::ordered_json j;
    j["labels"] = labels;
    std::ofstream labels_out(dir / "labels.json");
    labels_out << j.dump() << "\n";
  }
}

}  // namespace

void generate_synthetic_dataset(const GeneratorConfig& cfg, uint64_t seed,
                                const std::string& out_root) {
  const std::vector<Region> regions = attribute_regions(cfg.attributes, cfg.image_h, cfg.image_w);
  fs::create_directories(out_root);
  std::ofstream attrs(fs::path(out_root) / "attributes.txt");
  for (int j = 0; j < cfg.attributes; ++j) {
    char name[48];
    std::snprintf(name, sizeof(name), "%s_%02d", visibility_name(cfg.cue_visibility[j]).c_str(), j);
    attrs << name << "\n";
  }
  attrs.close();
  write_split(cfg, regions, (fs::path(out_root) / "train").string(), cfg.train_samples, seed, 0);
  write_split(cfg, regions, (fs::path(out_root) / "test").string(), cfg.test_samples, seed, 1);
}

// ---- checkpoint container ----

namespace {

constexpr char kMagic[4] = {'O', 'P', 'A', 'R'};
constexpr uint32_t kFormatVersion = 1;

void put_u32(std::string& out, uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string& out, uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }

void put_string(std::string& out, const std::string& s) {
  put_u32(out, static_cast<uint32_t>(s.size()));
  out.append(s);
}

void put_mat(std::string& out, const ad::Mat& m) {
  put_u64(out, static_cast<uint64_t>(m.rows()));
  put_u64(out, static_cast<uint64_t>(m.cols()));
  out.append(reinterpret_cast<const char*>(m.data()), sizeof(double) * m.size());
}

class Reader {
 public:
  Reader(const std::string& buf, const std::string& path) : buf_(buf), path_(path) {}
  uint32_t u32() {
    uint32_t v;
    take(&v, 4);
    return v;
  }
  uint64_t u64() {
    uint64_t v;
    take(&v, 8);
    return v;
  }
  std::string str() {
    uint32_t n = u32();
    check(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  ad::Mat mat() {
    uint64_t rows = u64();
    uint64_t cols = u64();
    const size_t bytes = sizeof(double) * rows * cols;
    check(bytes);
    ad::Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    std::memcpy(m.data(), buf_.data() + pos_, bytes);
    pos_ += bytes;
    return m;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void check(size_t n) const {
    if (pos_ + n > buf_.size()) throw DataError("corrupt checkpoint (truncated payload): " + path_);
  }
  void take(void* dst, size_t n) {
    check(n);
    std::memcpy(dst, buf_.data() + pos_, n);
    pos_ += n;
  }
  const std::string& buf_;
  std::string path_;
  size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::string payload;
  put_string(payload, ckpt.config_text);
  put_u64(payload, ckpt.epoch);
  put_u64(payload, ckpt.seed);
  put_u32(payload, static_cast<uint32_t>(ckpt.params.size()));
  for (const auto& [name, m] : ckpt.params) {
    put_string(payload, name);
    put_mat(payload, m);
  }
  put_u32(payload, static_cast<uint32_t>(ckpt.optimizer.size()));
  for (const auto& [name, m] : ckpt.optimizer) {
    put_string(payload, name);
    put_mat(payload, m);
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path);
  out.write(kMagic, 4);
  uint32_t version = kFormatVersion;
  out.write(reinterpret_cast<const char*>(&version), 4);
  uint64_t size = payload.size();
  out.write(reinterpret_cast<const char*>(&size), 8);
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  uint64_t hash = fnv1a64(payload.data(), payload.size());
  out.write(reinterpret_cast<const char*>(&hash), 8);
  if (!out) throw DataError("short write for checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0)
    throw DataError("corrupt checkpoint (bad magic): " + path);
  uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  if (in.gcount() != 4) throw DataError("corrupt checkpoint (truncated header): " + path);
  if (version != kFormatVersion)
    throw DataError("checkpoint format version mismatch: file has " + std::to_string(version) +
                    ", supported is " + std::to_string(kFormatVersion));
  uint64_t size = 0;
  in.read(reinterpret_cast<char*>(&size), 8);
  if (in.gcount() != 8) throw DataError("corrupt checkpoint (truncated header): " + path);
  std::string payload(size, '\0');
  in.read(payload.data(), static_cast<std::streamsize>(size));
  if (static_cast<uint64_t>(in.gcount()) != size)
    throw DataError("corrupt checkpoint (truncated payload): " + path);
  uint64_t stored_hash = 0;
  in.read(reinterpret_cast<char*>(&stored_hash), 8);
  if (in.gcount() != 8) throw DataError("corrupt checkpoint (missing hash): " + path);
  if (fnv1a64(payload.data(), payload.size()) != stored_hash)
    throw DataError("corrupt checkpoint (content hash mismatch): " + path);

  Checkpoint ckpt;
  ckpt.format_version = version;
  Reader r(payload, path);
  ckpt.config_text = r.str();
  ckpt.epoch = r.u64();
  ckpt.seed = r.u64();
  uint32_t nparams = r.u32();
  for (uint32_t i = 0; i < nparams; ++i) {
    std::string name = r.str();
    ckpt.params.emplace_back(std::move(name), r.mat());
  }
  uint32_t nopt = r.u32();
  for (uint32_t i = 0; i < nopt; ++i) {
    std::string name = r.str();
    ckpt.optimizer.emplace_back(std::move(name), r.mat());
  }
  if (!r.done()) throw DataError("corrupt checkpoint (trailing bytes): " + path);
  return ckpt;
}

}  // namespace otnpar::data
