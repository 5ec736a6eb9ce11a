#include "otnpar/event_stream.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace otnpar::events {

namespace {

bool parse_int64(const std::string& field, int64_t& out) {
  if (field.empty()) return false;
  size_t pos = 0;
  try {
    out = std::stoll(field, &pos);
  } catch (const std::exception&) {
    return false;
  }
  return pos == field.size();
}

}  // namespace

EventStream parse_event_csv(const std::string& path, int sensor_h, int sensor_w) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open events file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty events file (missing header): " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "x,y,t_us,p")
    throw DataError("bad events header in " + path + ": expected \"x,y,t_us,p\", got \"" + line + "\"");

  EventStream stream;
  stream.sensor_height = sensor_h;
  stream.sensor_width = sensor_w;
  size_t line_no = 1;
  bool sorted = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    int64_t values[4];
    int n = 0;
    while (std::getline(ss, field, ',')) {
      if (n >= 4) { n = 5; break; }
      if (!parse_int64(field, values[n]))
        throw DataError("malformed row " + std::to_string(line_no) + " in " + path +
                        ": cannot parse \"" + field + "\"");
      ++n;
    }
    if (n != 4)
      throw DataError("malformed row " + std::to_string(line_no) + " in " + path +
                      ": expected 4 fields");
    EventPoint ev{static_cast<int>(values[0]), static_cast<int>(values[1]), values[2],
                  static_cast<int>(values[3])};
    if (ev.x < 0 || ev.x >= sensor_w || ev.y < 0 || ev.y >= sensor_h)
      throw DataError("event out of bounds at row " + std::to_string(line_no) + " in " + path +
                      ": (" + std::to_string(ev.x) + "," + std::to_string(ev.y) + ") on " +
                      std::to_string(sensor_w) + "x" + std::to_string(sensor_h) + " sensor");
    if (ev.t < 0 || (ev.p != 0 && ev.p != 1))
      throw DataError("malformed row " + std::to_string(line_no) + " in " + path +
                      ": t must be >= 0 and p in {0,1}");
    if (!stream.events.empty() && ev.t < stream.events.back().t) sorted = false;
    stream.events.push_back(ev);
  }
  if (!sorted)
    std::stable_sort(stream.events.begin(), stream.events.end(),
                     [](const EventPoint& a, const EventPoint& b) { return a.t < b.t; });
  return stream;
}

void write_event_csv(const std::string& path, const EventStream& stream) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << "x,y,t_us,p\n";
  for (const EventPoint& ev : stream.events)
    out << ev.x << "," << ev.y << "," << ev.t << "," << ev.p << "\n";
}

std::vector<ExposureWindow> make_exposure_windows(const std::vector<int64_t>& frame_timestamps,
                                                  int64_t exposure_us) {
  if (exposure_us <= 0) throw DataError("exposure must be positive");
  std::vector<ExposureWindow> windows;
  windows.reserve(frame_timestamps.size());
  for (size_t i = 0; i < frame_timestamps.size(); ++i) {
    if (i > 0) {
      int64_t gap = frame_timestamps[i] - frame_timestamps[i - 1];
      if (gap <= 0) throw DataError("frame timestamps must be strictly increasing");
      if (exposure_us > gap)
        throw DataError("overlapping windows: exposure " + std::to_string(exposure_us) +
                        "us exceeds inter-frame gap " + std::to_string(gap) + "us");
    }
    windows.push_back({frame_timestamps[i], frame_timestamps[i] + exposure_us});
  }
  return windows;
}

FrameSequence stack_events(const EventStream& stream, const std::vector<ExposureWindow>& windows,
                           int64_t norm_cap) {
  if (norm_cap <= 0) throw ConfigError("stack_events: norm_cap must be positive");
  const int t_count = static_cast<int>(windows.size());
  FrameSequence frames(t_count, stream.sensor_height, stream.sensor_width, FrameKind::event);
  // Raw counts first; windows are disjoint and ordered, events sorted.
  size_t w = 0;
  for (const EventPoint& ev : stream.events) {
    while (w < windows.size() && ev.t >= windows[w].t_end) ++w;
    if (w == windows.size()) break;
    if (ev.t < windows[w].t_start) continue;  // between exposures: dropped
    int channel = ev.p == 1 ? 0 : 1;
    frames.at(static_cast<int>(w), ev.y, ev.x, channel) += 1.0;
  }
  const double cap = static_cast<double>(norm_cap);
  for (double& v : frames.data) v = std::min(v, cap) / cap;
  return frames;
}

EventStream simulate_events(const FrameSequence& rgb, double contrast_threshold,
                            int64_t interframe_us, double log_eps) {
  if (rgb.frames < 2) throw DataError("simulate_events: need at least 2 frames");
  if (contrast_threshold <= 0.0) throw ConfigError("simulate_events: threshold must be positive");
  EventStream stream;
  stream.sensor_height = rgb.height;
  stream.sensor_width = rgb.width;
  for (int k = 0; k + 1 < rgb.frames; ++k) {
    const int64_t t0 = static_cast<int64_t>(k) * interframe_us;
    for (int y = 0; y < rgb.height; ++y) {
      for (int x = 0; x < rgb.width; ++x) {
        double d = std::log(rgb.luma(k + 1, y, x) + log_eps) - std::log(rgb.luma(k, y, x) + log_eps);
        int64_t n = static_cast<int64_t>(std::floor(std::abs(d) / contrast_threshold));
        if (n == 0) continue;
        int polarity = d > 0.0 ? 1 : 0;
        for (int64_t j = 0; j < n; ++j) {
          int64_t t = t0 + (j + 1) * interframe_us / (n + 1);
          stream.events.push_back({x, y, t, polarity});
        }
      }
    }
  }
  std::stable_sort(stream.events.begin(), stream.events.end(),
                   [](const EventPoint& a, const EventPoint& b) { return a.t < b.t; });
  return stream;
}

}  // namespace otnpar::events
