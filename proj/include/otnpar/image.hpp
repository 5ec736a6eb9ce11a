#pragma once

#include <string>
#include <vector>

#include "otnpar/common.hpp"

namespace otnpar {

enum class FrameKind { rgb, event };

/// Dense T x H x W x 3 frame stack with values in [0, 1].
struct FrameSequence {
  int frames = 0;
  int height = 0;
  int width = 0;
  FrameKind kind = FrameKind::rgb;
  std::vector<double> data;  // ((t*H + y)*W + x)*3 + c

  FrameSequence() = default;
  FrameSequence(int t, int h, int w, FrameKind k)
      : frames(t), height(h), width(w), kind(k),
        data(static_cast<size_t>(t) * h * w * 3, 0.0) {}

  double& at(int t, int y, int x, int c) {
    return data[((static_cast<size_t>(t) * height + y) * width + x) * 3 + c];
  }
  double at(int t, int y, int x, int c) const {
    return data[((static_cast<size_t>(t) * height + y) * width + x) * 3 + c];
  }
  /// Rec.601 luma of one pixel.
  double luma(int t, int y, int x) const {
    return 0.299 * at(t, y, x, 0) + 0.587 * at(t, y, x, 1) + 0.114 * at(t, y, x, 2);
  }
  size_t size() const { return data.size(); }
};

/// Binary PPM (P6, 8-bit). One frame per file.
void write_ppm(const std::string& path, const FrameSequence& frames, int frame_index);
void read_ppm_into(const std::string& path, FrameSequence& frames, int frame_index);
/// Reads sensor geometry without decoding pixel data.
void ppm_geometry(const std::string& path, int& height, int& width);

/// Binary PGM (P5, 8-bit) grayscale image, values in [0, 1].
void write_pgm(const std::string& path, const std::vector<double>& gray, int height, int width);

/// Loads every `<prefix>_NNN.ppm` under `dir` in ascending index order.
FrameSequence load_frame_dir(const std::string& dir, const std::string& prefix, FrameKind kind);

/// Writes frame t of `frames` to `<dir>/<prefix>_NNN.ppm` for every t.
void save_frame_dir(const std::string& dir, const std::string& prefix, const FrameSequence& frames);

}  // namespace otnpar
