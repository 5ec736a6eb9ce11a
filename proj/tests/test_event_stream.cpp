#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "otnpar/event_stream.hpp"
#include "testing.hpp"

using namespace otnpar;
using namespace otnpar::events;
namespace fs = std::filesystem;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
  const fs::path p = fs::temp_directory_path() / name;
  std::ofstream out(p);
  out << content;
  return p.string();
}

}  // namespace

TEST_CASE("csv parsing handles empty, single and shuffled inputs") {
  const std::string empty = write_temp("ev_empty.csv", "x,y,t_us,p\n");
  EventStream s0 = parse_event_csv(empty, 4, 4);
  CHECK(s0.events.empty());
  CHECK(s0.sensor_height == 4);

  const std::string single = write_temp("ev_single.csv", "x,y,t_us,p\n3,2,100,1\n");
  EventStream s1 = parse_event_csv(single, 4, 4);
  REQUIRE(s1.events.size() == 1);
  CHECK(s1.events[0].x == 3);
  CHECK(s1.events[0].y == 2);
  CHECK(s1.events[0].t == 100);
  CHECK(s1.events[0].p == 1);

  // 1000 shuffled timestamps come back sorted; compare against an
  // independently sorted copy of the raw timestamps.
  Rng rng(99);
  std::vector<int64_t> ts;
  std::string body = "x,y,t_us,p\n";
  for (int i = 0; i < 1000; ++i) {
    int64_t t = rng.uniform_int(0, 1000000);
    ts.push_back(t);
    body += std::to_string(rng.uniform_int(0, 7)) + "," + std::to_string(rng.uniform_int(0, 7)) +
            "," + std::to_string(t) + "," + std::to_string(rng.uniform_int(0, 1)) + "\n";
  }
  const std::string shuffled = write_temp("ev_shuffled.csv", body);
  EventStream s2 = parse_event_csv(shuffled, 8, 8);
  REQUIRE(s2.events.size() == 1000);
  std::sort(ts.begin(), ts.end());
  for (size_t i = 0; i < ts.size(); ++i) CHECK(s2.events[i].t == ts[i]);
}

TEST_CASE("csv parsing rejects malformed and out-of-bounds rows") {
  const std::string bad_header = write_temp("ev_h.csv", "x,y,t,p\n");
  CHECK_THROWS_AS(parse_event_csv(bad_header, 4, 4), DataError);

  const std::string bad_fields = write_temp("ev_f.csv", "x,y,t_us,p\n1,2,3\n");
  CHECK_THROWS_AS(parse_event_csv(bad_fields, 4, 4), DataError);

  const std::string bad_parse = write_temp("ev_p.csv", "x,y,t_us,p\n1,2,zzz,1\n");
  CHECK_THROWS_AS(parse_event_csv(bad_parse, 4, 4), DataError);

  const std::string oob = write_temp("ev_o.csv", "x,y,t_us,p\n4,0,10,1\n");
  CHECK_THROWS_AS(parse_event_csv(oob, 4, 4), DataError);

  const std::string bad_pol = write_temp("ev_pol.csv", "x,y,t_us,p\n1,1,10,2\n");
  CHECK_THROWS_AS(parse_event_csv(bad_pol, 4, 4), DataError);
}

TEST_CASE("exposure windows follow the frame timestamps") {
  auto w1 = make_exposure_windows({0}, 1000);
  REQUIRE(w1.size() == 1);
  CHECK(w1[0].t_start == 0);
  CHECK(w1[0].t_end == 1000);

  auto w3 = make_exposure_windows({0, 5000, 10000}, 5000);
  REQUIRE(w3.size() == 3);
  CHECK(w3[0].t_end == w3[1].t_start);
  CHECK(w3[1].t_end == w3[2].t_start);

  CHECK_THROWS_AS(make_exposure_windows({0, 4000}, 5000), DataError);
  CHECK_THROWS_AS(make_exposure_windows({4000, 0}, 100), DataError);
}

TEST_CASE("stacking splits polarity per channel and normalizes by the cap") {
  EventStream empty;
  empty.sensor_height = 4;
  empty.sensor_width = 4;
  auto windows = make_exposure_windows({0, 100, 200, 300, 400}, 100);
  FrameSequence zero = stack_events(empty, windows, 3);
  CHECK(zero.frames == 5);
  for (double v : zero.data) CHECK(v == 0.0);

  EventStream one;
  one.sensor_height = 4;
  one.sensor_width = 4;
  one.events.push_back({3, 2, 50, 1});
  FrameSequence f = stack_events(one, windows, 1);
  CHECK(f.at(0, 2, 3, 0) == 1.0);
  double total = 0;
  for (double v : f.data) total += v;
  CHECK(total == 1.0);
}

TEST_CASE("stacked event mass is conserved against a direct tally") {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    EventStream s;
    s.sensor_height = 6;
    s.sensor_width = 5;
    const int64_t horizon = 10000;
    for (int i = 0; i < 10000; ++i)
      s.events.push_back({static_cast<int>(rng.uniform_int(0, 4)),
                          static_cast<int>(rng.uniform_int(0, 5)), rng.uniform_int(0, horizon),
                          static_cast<int>(rng.uniform_int(0, 1))});
    std::stable_sort(s.events.begin(), s.events.end(),
                     [](const EventPoint& a, const EventPoint& b) { return a.t < b.t; });
    // Windows with gaps: events between exposures must be dropped.
    std::vector<ExposureWindow> windows = {{0, 2000}, {3000, 5000}, {6000, 8000}};
    const int64_t cap = 1000000000;
    FrameSequence frames = stack_events(s, windows, cap);

    int64_t in_window = 0;
    int64_t positives = 0;
    for (const EventPoint& ev : s.events) {
      int owners = 0;
      for (const auto& w : windows)
        if (ev.t >= w.t_start && ev.t < w.t_end) ++owners;
      CHECK(owners <= 1);  // windows partition their union
      if (owners == 1) {
        ++in_window;
        if (ev.p == 1) ++positives;
      }
    }
    double mass = 0, pos_mass = 0;
    for (int t = 0; t < frames.frames; ++t)
      for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 5; ++x) {
          mass += frames.at(t, y, x, 0) + frames.at(t, y, x, 1);
          pos_mass += frames.at(t, y, x, 0);
          CHECK(frames.at(t, y, x, 2) == 0.0);  // spare channel stays empty
        }
    CHECK(std::llround(mass * static_cast<double>(cap)) == in_window);
    CHECK(std::llround(pos_mass * static_cast<double>(cap)) == positives);
  }
}

TEST_CASE("simulator emits nothing for identical frames") {
  FrameSequence frames(2, 4, 4, FrameKind::rgb);
  for (double& v : frames.data) v = 0.4;
  EventStream s = simulate_events(frames, 0.1);
  CHECK(s.events.empty());
}

TEST_CASE("simulator count matches the log-contrast rule") {
  // One pixel rises from luma 0.1 to 0.28, slightly over one natural-log
  // unit including the 1e-3 offset; threshold 0.5 gives exactly 2 events.
  FrameSequence frames(2, 3, 3, FrameKind::rgb);
  for (int t = 0; t < 2; ++t)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x)
        for (int c = 0; c < 3; ++c) frames.at(t, y, x, c) = 0.1;
  for (int c = 0; c < 3; ++c) frames.at(1, 1, 2, c) = 0.28;
  const double expected_delta = std::log(0.28 + 1e-3) - std::log(0.1 + 1e-3);
  const int expected = static_cast<int>(std::floor(std::abs(expected_delta) / 0.5));
  CHECK(expected == 2);

  EventStream s = simulate_events(frames, 0.5);
  REQUIRE(static_cast<int>(s.events.size()) == expected);
  for (const EventPoint& ev : s.events) {
    CHECK(ev.x == 2);
    CHECK(ev.y == 1);
    CHECK(ev.p == 1);
    CHECK(ev.t > 0);
    CHECK(ev.t < 10000);
  }

  // Reversed frame order: same count, complemented polarity.
  FrameSequence reversed(2, 3, 3, FrameKind::rgb);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x)
      for (int c = 0; c < 3; ++c) {
        reversed.at(0, y, x, c) = frames.at(1, y, x, c);
        reversed.at(1, y, x, c) = frames.at(0, y, x, c);
      }
  EventStream r = simulate_events(reversed, 0.5);
  REQUIRE(r.events.size() == s.events.size());
  CHECK(r.events[0].p == 0);
}

TEST_CASE("simulator antisymmetry holds on random frame pairs") {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    FrameSequence fwd(2, 5, 4, FrameKind::rgb);
    for (double& v : fwd.data) v = rng.uniform(0.05, 0.95);
    FrameSequence bwd(2, 5, 4, FrameKind::rgb);
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 4; ++x)
        for (int c = 0; c < 3; ++c) {
          bwd.at(0, y, x, c) = fwd.at(1, y, x, c);
          bwd.at(1, y, x, c) = fwd.at(0, y, x, c);
        }
    EventStream a = simulate_events(fwd, 0.2);
    EventStream b = simulate_events(bwd, 0.2);
    REQUIRE(a.events.size() == b.events.size());
    // Same pixels and counts, polarity complemented: compare multisets.
    auto key = [](const EventPoint& e, bool flip) {
      return std::tuple<int, int, int>(e.x, e.y, flip ? 1 - e.p : e.p);
    };
    std::vector<std::tuple<int, int, int>> ka, kb;
    for (const auto& e : a.events) ka.push_back(key(e, false));
    for (const auto& e : b.events) kb.push_back(key(e, true));
    std::sort(ka.begin(), ka.end());
    std::sort(kb.begin(), kb.end());
    CHECK(ka == kb);
  }
}

TEST_CASE("simulator rejects a single frame") {
  FrameSequence frames(1, 4, 4, FrameKind::rgb);
  CHECK_THROWS_AS(simulate_events(frames, 0.1), DataError);
}

TEST_CASE("simulated events are time-sorted") {
  Rng rng(5);
  FrameSequence frames(4, 6, 6, FrameKind::rgb);
  for (double& v : frames.data) v = rng.uniform(0.05, 0.95);
  EventStream s = simulate_events(frames, 0.3);
  for (size_t i = 1; i < s.events.size(); ++i) CHECK(s.events[i - 1].t <= s.events[i].t);
}
