#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "otnpar/image.hpp"

namespace otnpar::events {

/// One sensor event: pixel, microsecond timestamp, polarity (1 = brighter).
struct EventPoint {
  int x = 0;
  int y = 0;
  int64_t t = 0;
  int p = 0;
};

struct EventStream {
  std::vector<EventPoint> events;  // sorted by t, non-decreasing
  int sensor_height = 0;
  int sensor_width = 0;
};

/// Half-open accumulation interval [t_start, t_end).
struct ExposureWindow {
  int64_t t_start = 0;
  int64_t t_end = 0;
};

/// Parses a "x,y,t_us,p" CSV. Rows out of sensor bounds or unparseable rows
/// raise DataError; out-of-order timestamps are repaired by a stable sort.
EventStream parse_event_csv(const std::string& path, int sensor_h, int sensor_w);

void write_event_csv(const std::string& path, const EventStream& stream);

/// Window i covers [timestamps[i], timestamps[i] + exposure_us). Timestamps
/// must be strictly increasing and the exposure must not exceed any
/// inter-frame gap, otherwise windows would overlap.
std::vector<ExposureWindow> make_exposure_windows(const std::vector<int64_t>& frame_timestamps,
                                                  int64_t exposure_us);

/// Accumulates events into per-window count frames. Channel 0 holds positive
/// polarity counts, channel 1 negative, channel 2 stays zero. Counts are
/// clipped at norm_cap and divided by it, so values land in [0, 1]. Events
/// outside every window are dropped.
FrameSequence stack_events(const EventStream& stream, const std::vector<ExposureWindow>& windows,
                           int64_t norm_cap);

/// Frame-difference event simulation on the luma channel: each consecutive
/// frame pair emits floor(|log(I1+eps) - log(I0+eps)| / threshold) events per
/// pixel with the sign of the change, timestamps spread uniformly inside the
/// inter-frame interval. Frame k sits at time k * interframe_us.
EventStream simulate_events(const FrameSequence& rgb, double contrast_threshold,
                            int64_t interframe_us = 10000, double log_eps = 1e-3);

}  // namespace otnpar::events
