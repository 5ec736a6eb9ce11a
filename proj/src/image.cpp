#include "otnpar/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace otnpar {

namespace {

int next_pnm_int(std::istream& in) {
  // Skips whitespace and '#' comments per the netpbm grammar.
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      c = in.get();
    } else {
      break;
    }
  }
  if (c == EOF) throw DataError("unexpected end of PNM header");
  int value = 0;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    c = in.get();
  }
  return value;
}

unsigned char quantize(double v) {
  double clipped = std::min(1.0, std::max(0.0, v));
  return static_cast<unsigned char>(std::lround(clipped * 255.0));
}

}  // namespace

void write_ppm(const std::string& path, const FrameSequence& frames, int frame_index) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << "P6\n" << frames.width << " " << frames.height << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(frames.width) * 3);
  for (int y = 0; y < frames.height; ++y) {
    for (int x = 0; x < frames.width; ++x)
      for (int c = 0; c < 3; ++c)
        row[static_cast<size_t>(x) * 3 + c] = quantize(frames.at(frame_index, y, x, c));
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw DataError("short write: " + path);
}

void ppm_geometry(const std::string& path, int& height, int& width) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path);
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || m1 != '6') throw DataError("not a binary PPM (P6): " + path);
  width = next_pnm_int(in);
  height = next_pnm_int(in);
}

void read_ppm_into(const std::string& path, FrameSequence& frames, int frame_index) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path);
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || m1 != '6') throw DataError("not a binary PPM (P6): " + path);
  int w = next_pnm_int(in);
  int h = next_pnm_int(in);
  int maxval = next_pnm_int(in);
  if (maxval != 255) throw DataError("unsupported PPM maxval in " + path);
  if (w != frames.width || h != frames.height)
    throw DataError("frame geometry mismatch in " + path);
  std::vector<unsigned char> buf(static_cast<size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size()))
    throw DataError("truncated PPM: " + path);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        frames.at(frame_index, y, x, c) =
            buf[(static_cast<size_t>(y) * w + x) * 3 + c] / 255.0;
}

void write_pgm(const std::string& path, const std::vector<double>& gray, int height, int width) {
  if (gray.size() != static_cast<size_t>(height) * width)
    throw ShapeError("write_pgm: buffer does not match geometry");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << "P5\n" << width << " " << height << "\n255\n";
  std::vector<unsigned char> row(width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) row[x] = quantize(gray[static_cast<size_t>(y) * width + x]);
    out.write(reinterpret_cast<const char*>(row.data()), width);
  }
}

FrameSequence load_frame_dir(const std::string& dir, const std::string& prefix, FrameKind kind) {
  std::vector<std::string> paths;
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir);
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind(prefix + "_", 0) == 0 && name.size() > 4 &&
        name.substr(name.size() - 4) == ".ppm")
      paths.push_back(entry.path().string());
  }
  if (paths.empty()) throw DataError("no " + prefix + "_*.ppm frames under " + dir);
  std::sort(paths.begin(), paths.end());
  int h = 0, w = 0;
  ppm_geometry(paths[0], h, w);
  FrameSequence frames(static_cast<int>(paths.size()), h, w, kind);
  for (size_t i = 0; i < paths.size(); ++i) read_ppm_into(paths[i], frames, static_cast<int>(i));
  return frames;
}

void save_frame_dir(const std::string& dir, const std::string& prefix, const FrameSequence& frames) {
  fs::create_directories(dir);
  char name[64];
  for (int t = 0; t < frames.frames; ++t) {
    std::snprintf(name, sizeof(name), "%s_%03d.ppm", prefix.c_str(), t);
    write_ppm((fs::path(dir) / name).string(), frames, t);
  }
}

}  // namespace otnpar
