#include <gtest/gtest.h>

#include <filesystem>
#include <set>
#include <sstream>

#include "test_util.hpp"

namespace {

using namespace skelnet;

KeypointSequence make_sequence(std::size_t frames, int fps = 25, int width = 1280,
                               int height = 720, Label label = Label::Chorea) {
  KeypointSequence s;
  s.video_id = "v";
  s.label = label;
  s.fps = fps;
  s.width = width;
  s.height = height;
  s.frames.resize(frames);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t k = 0; k < kNumKeypoints; ++k)
      s.frames[t][k] = Keypoint{static_cast<double>((t * 7 + k * 13) % width),
                                static_cast<double>((t * 3 + k * 29) % height), 0.9, true};
  return s;
}

std::string serialize(const KeypointSequence& s) {
  std::ostringstream out;
  write_sequence(out, s);
  return out.str();
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

SkeletonClip clip_of(Label label, const std::string& video, std::size_t start = 0) {
  SkeletonClip c;
  c.matrix = Tensor(Shape{kClipRows, kClipFrames}, 0.5);
  c.label = label;
  c.source = {video, start, 25};
  return c;
}

TEST(ParseSequence, RoundTripsWellFormedFile) {
  auto s = make_sequence(3);
  std::istringstream in(serialize(s));
  auto p = parse_sequence(in);
  ASSERT_EQ(p.frames.size(), 3u);
  EXPECT_EQ(p.fps, 25);
  EXPECT_EQ(p.width, 1280);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t k = 0; k < kNumKeypoints; ++k) {
      EXPECT_EQ(p.frames[t][k].x, s.frames[t][k].x);
      EXPECT_EQ(p.frames[t][k].confidence, s.frames[t][k].confidence);
    }
}

TEST(ParseSequence, HeaderMetadataPassesThrough) {
  std::istringstream in(serialize(make_sequence(200, 25)));
  auto p = parse_sequence(in);
  EXPECT_EQ(p.fps, 25);
  EXPECT_EQ(p.frames.size(), 200u);
}

TEST(ParseSequence, ShortFrameNamesItsIndex) {
  auto text = serialize(make_sequence(3));
  // Drop the last keypoint of frame 1 (line 3).
  std::istringstream lines(text);
  std::string line, edited;
  for (int i = 0; std::getline(lines, line); ++i) {
    if (i == 2) {
      auto rec = nlohmann::json::parse(line);
      rec["kp"].erase(24);
      line = rec.dump();
    }
    edited += line + "\n";
  }
  std::istringstream in(edited);
  const auto msg = error_of([&] { parse_sequence(in, "f.ndjson"); });
  EXPECT_NE(msg.find("frame 1 has 24 keypoints"), std::string::npos) << msg;
  EXPECT_NE(msg.find("f.ndjson:3"), std::string::npos) << msg;
}

TEST(ParseSequence, RejectsMissingHeaderAndMalformedLines) {
  std::istringstream no_header(R"({"t": 0, "kp": []})" "\n");
  EXPECT_NE(error_of([&] { parse_sequence(no_header); }).find("missing metadata header"),
            std::string::npos);
  auto text = serialize(make_sequence(2)) + "{not json\n";
  std::istringstream bad(text);
  EXPECT_NE(error_of([&] { parse_sequence(bad, "x"); }).find("x:4: malformed record"),
            std::string::npos);
  EXPECT_THROW(parse_sequence(std::filesystem::path("/nonexistent/file.ndjson")), DataError);
}

TEST(FilterConfidence, HighConfidenceIsNoOp) {
  auto s = make_sequence(10);
  auto f = filter_confidence(s, 0.05);
  for (std::size_t t = 0; t < 10; ++t)
    for (std::size_t k = 0; k < kNumKeypoints; ++k) {
      EXPECT_EQ(f.frames[t][k].x, s.frames[t][k].x);
      EXPECT_TRUE(f.frames[t][k].valid);
    }
}

TEST(FilterConfidence, HoldsLastAndBackfillsFirst) {
  auto s = make_sequence(5);
  s.frames[3][4].confidence = 0.01;
  s.frames[0][9].confidence = 0.05;  // at the threshold counts as invalid
  auto f = filter_confidence(s, 0.05);
  EXPECT_FALSE(f.frames[3][4].valid);
  EXPECT_EQ(f.frames[3][4].x, s.frames[2][4].x);
  EXPECT_EQ(f.frames[3][4].y, s.frames[2][4].y);
  EXPECT_EQ(f.frames[0][9].x, s.frames[1][9].x);
}

TEST(FilterConfidence, NeverValidKeypointsAreListed) {
  auto s = make_sequence(4);
  for (auto& fr : s.frames) fr[7].confidence = 0.0;
  EXPECT_EQ(error_of([&] { filter_confidence(s); }), "keypoint 7 never valid");
  for (auto& fr : s.frames) fr[2].confidence = 0.0;
  EXPECT_EQ(error_of([&] { filter_confidence(s); }), "keypoints 2, 7 never valid");
}

TEST(NormalizeResolution, MapsCornersAndMidpoint) {
  auto s = make_sequence(1);
  s.frames[0][0] = {640, 360, 1, true};
  s.frames[0][1] = {0, 0, 1, true};
  s.frames[0][2] = {1280, 720, 1, true};
  auto n = normalize_resolution(s);
  EXPECT_EQ(n.frames[0][0].x, 0.5);
  EXPECT_EQ(n.frames[0][0].y, 0.5);
  EXPECT_EQ(n.frames[0][1].x, 0.0);
  EXPECT_EQ(n.frames[0][2].x, 1.0);
  EXPECT_EQ(n.frames[0][2].y, 1.0);
  s.frames[0][3] = {1281.5, 10, 1, true};
  EXPECT_THROW(normalize_resolution(s), DataError);
  s.frames[0][3] = {1280.5, 10, 1, true};
  EXPECT_EQ(normalize_resolution(s).frames[0][3].x, 1.0);
}

TEST(Downsample, TwentyFiveToTenKeepsEvenlySpacedFrames) {
  EXPECT_EQ(retained_block_indices(25, 10),
            (std::vector<std::size_t>{0, 2, 5, 7, 10, 12, 15, 17, 20, 22}));
  auto s = make_sequence(50);
  auto d = downsample(s, 10);
  EXPECT_EQ(d.fps, 10);
  ASSERT_EQ(d.frames.size(), 20u);
  EXPECT_EQ(d.frames[11][0].x, s.frames[27][0].x);
}

TEST(Downsample, RetainsTargetCountPerBlockForAllPairs) {
  const int rates[] = {5, 10, 15, 20, 25};
  for (int src : rates)
    for (int dst : rates) {
      if (dst > src) {
        EXPECT_THROW(downsample(make_sequence(10, src), dst), ConfigError);
        continue;
      }
      const auto idx = retained_block_indices(src, dst);
      EXPECT_EQ(idx.size(), static_cast<std::size_t>(dst));
      EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), idx.size());
      EXPECT_LT(idx.back(), static_cast<std::size_t>(src));
      EXPECT_EQ(downsample(make_sequence(3 * src, src), dst).frames.size(),
                static_cast<std::size_t>(3 * dst));
    }
  auto s = make_sequence(40);
  auto same = downsample(s, 25);
  for (std::size_t t = 0; t < 40; ++t) EXPECT_EQ(same.frames[t][3].x, s.frames[t][3].x);
}

TEST(Downsample, CommutesWithNormalization) {
  auto s = make_sequence(60, 25);
  auto a = window_clips(downsample(normalize_resolution(s), 15), 20, 20);
  auto b = window_clips(normalize_resolution(downsample(s, 15)), 20, 20);
  ASSERT_EQ(a.clips.size(), b.clips.size());
  for (std::size_t i = 0; i < a.clips.size(); ++i) EXPECT_EQ(a.clips[i].matrix, b.clips[i].matrix);
}

TEST(WindowClips, CountsAndShapes) {
  auto n = normalize_resolution(make_sequence(160));
  auto w = window_clips(n);
  ASSERT_EQ(w.clips.size(), 2u);
  EXPECT_EQ(w.clips[0].source.start_frame, 0u);
  EXPECT_EQ(w.clips[1].source.start_frame, 75u);
  EXPECT_EQ(w.clips[1].x(3, 0), n.frames[75][3].x);
  EXPECT_EQ(w.clips[1].y(3, 0), n.frames[75][3].y);

  auto short_seq = window_clips(normalize_resolution(make_sequence(74)));
  EXPECT_TRUE(short_seq.clips.empty());
  EXPECT_TRUE(short_seq.skipped);
  EXPECT_FALSE(short_seq.notice.empty());

  auto exact = window_clips(normalize_resolution(make_sequence(75)));
  ASSERT_EQ(exact.clips.size(), 1u);
  EXPECT_EQ(exact.clips[0].matrix.shape(), (Shape{50, 75}));

  for (std::size_t frames : {75u, 100u, 149u, 150u, 151u, 301u})
    for (std::size_t stride : {10u, 37u, 75u}) {
      auto r = window_clips(normalize_resolution(make_sequence(frames)), 75, stride);
      EXPECT_EQ(r.clips.size(), (frames - 75) / stride + 1);
    }
}

TEST(PartitionParts, SizesOrderAndRoundTrip) {
  auto clip = window_clips(normalize_resolution(make_sequence(75))).clips[0];
  auto parts = partition_parts(clip);
  EXPECT_EQ(parts.part_sizes[static_cast<std::size_t>(Part::RightArm)], 3u);
  EXPECT_EQ(parts.part_sizes[static_cast<std::size_t>(Part::LeftArm)], 3u);
  EXPECT_EQ(parts.part_sizes[static_cast<std::size_t>(Part::RightLeg)], 6u);
  EXPECT_EQ(parts.part_sizes[static_cast<std::size_t>(Part::LeftLeg)], 6u);
  EXPECT_EQ(parts.part_sizes[static_cast<std::size_t>(Part::Torso)], 7u);
  std::size_t total = 0;
  for (auto k : parts.part_sizes) total += k;
  EXPECT_EQ(total, 25u);

  EXPECT_EQ(part_keypoints(Part::RightArm).back(), 4u);
  EXPECT_EQ(parts.block(Part::RightArm).at(4, 10), clip.x(4, 10));
  EXPECT_EQ(unpartition(parts), clip.matrix);

  auto rows = partition_row_order();
  std::set<std::size_t> unique(rows.begin(), rows.end());
  EXPECT_EQ(unique.size(), 50u);

  const std::set<std::size_t> right_leg(part_keypoints(Part::RightLeg).begin(),
                                        part_keypoints(Part::RightLeg).end());
  EXPECT_EQ(right_leg, (std::set<std::size_t>{9, 10, 11, 22, 23, 24}));
  const std::set<std::size_t> torso(part_keypoints(Part::Torso).begin(),
                                    part_keypoints(Part::Torso).end());
  EXPECT_EQ(torso, (std::set<std::size_t>{0, 1, 8, 15, 16, 17, 18}));
}

TEST(FlipHorizontal, InvolutionAndMirrorMap) {
  auto clip = window_clips(normalize_resolution(make_sequence(75))).clips[0];
  auto twice = flip_horizontal(flip_horizontal(clip));
  EXPECT_EQ(twice.matrix, clip.matrix);
  EXPECT_EQ(twice.label, clip.label);

  clip.matrix.at(0, 0) = 0.5;  // nose x
  clip.matrix.at(1, 0) = 0.3;
  clip.matrix.at(8, 0) = 0.2;  // right wrist x
  clip.matrix.at(9, 0) = 0.4;
  auto f = flip_horizontal(clip);
  EXPECT_EQ(f.x(0, 0), 0.5);
  EXPECT_EQ(f.y(0, 0), 0.3);
  EXPECT_NEAR(f.x(7, 0), 0.8, 1e-12);
  EXPECT_EQ(f.y(7, 0), 0.4);
  EXPECT_EQ(f.matrix.shape(), clip.matrix.shape());

  const std::pair<std::size_t, std::size_t> pairs[] = {{2, 5},   {3, 6},   {4, 7},   {9, 12},
                                                       {10, 13}, {11, 14}, {15, 16}, {17, 18},
                                                       {19, 22}, {20, 23}, {21, 24}};
  for (auto [a, b] : pairs) {
    EXPECT_EQ(mirror_keypoint(a), b);
    EXPECT_EQ(mirror_keypoint(b), a);
  }
  for (std::size_t k : {0u, 1u, 8u}) EXPECT_EQ(mirror_keypoint(k), k);
}

TEST(StratifiedSplit, LargestRemainderExample) {
  std::vector<SkeletonClip> clips;
  for (int i = 0; i < 6; ++i) clips.push_back(clip_of(Label::Chorea, "c" + std::to_string(i)));
  for (int i = 0; i < 4; ++i) clips.push_back(clip_of(Label::Dystonia, "d" + std::to_string(i)));
  auto s = stratified_split(clips, {0.8, 0.1, 0.1}, 3407);
  auto cc = class_counts(s.train);
  EXPECT_EQ(cc[0], 5u);
  EXPECT_EQ(cc[1], 3u);
  EXPECT_EQ(s.train.size() + s.validation.size() + s.test.size(), 10u);

  auto again = stratified_split(clips, {0.8, 0.1, 0.1}, 3407);
  EXPECT_EQ(again.train, s.train);
  EXPECT_EQ(again.test, s.test);

  auto all = stratified_split(clips, {1.0, 0.0, 0.0}, 1);
  EXPECT_EQ(all.train.size(), 10u);
  EXPECT_TRUE(all.validation.empty() && all.test.empty());
}

TEST(StratifiedSplit, DisjointExhaustiveAndProportional) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n0 = 1 + rng() % 60, n1 = 1 + rng() % 60;
    std::vector<SkeletonClip> clips;
    for (std::size_t i = 0; i < n0; ++i) clips.push_back(clip_of(Label::Chorea, "c" + std::to_string(i)));
    for (std::size_t i = 0; i < n1; ++i) clips.push_back(clip_of(Label::Dystonia, "d" + std::to_string(i)));
    const std::array<double, 3> ratios{0.8, 0.1, 0.1};
    auto idx = stratified_split_indices(clips, ratios, trial, false);
    std::set<std::size_t> seen;
    for (const auto& subset : idx)
      for (std::size_t i : subset) EXPECT_TRUE(seen.insert(i).second);
    EXPECT_EQ(seen.size(), clips.size());
    for (std::size_t s = 0; s < 3; ++s) {
      std::array<double, 2> count{};
      for (std::size_t i : idx[s]) count[static_cast<std::size_t>(to_int(clips[i].label))] += 1;
      EXPECT_LE(std::abs(count[0] - ratios[s] * n0), 1.0);
      EXPECT_LE(std::abs(count[1] - ratios[s] * n1), 1.0);
    }
  }
}

TEST(StratifiedSplit, GroupsKeepVideosTogether) {
  std::vector<SkeletonClip> clips;
  for (int v = 0; v < 20; ++v)
    for (int w = 0; w < 3; ++w)
      clips.push_back(clip_of(v % 2 ? Label::Dystonia : Label::Chorea, "v" + std::to_string(v), 75 * w));
  auto idx = stratified_split_indices(clips, {0.8, 0.1, 0.1}, 5, true);
  std::map<std::string, std::size_t> subset_of;
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t i : idx[s]) {
      auto [it, ins] = subset_of.try_emplace(clips[i].source.video_id, s);
      EXPECT_EQ(it->second, s);
    }
}

TEST(StratifiedSplit, MissingClassIsAnError) {
  std::vector<SkeletonClip> clips{clip_of(Label::Chorea, "a"), clip_of(Label::Chorea, "b")};
  EXPECT_THROW(stratified_split(clips, {0.8, 0.1, 0.1}, 1), DataError);
  EXPECT_THROW(stratified_split(clips, {0.8, 0.1, 0.2}, 1), ConfigError);
}

TEST(BootstrapOversample, BalancesFromMinorityPool) {
  std::vector<SkeletonClip> clips;
  for (int i = 0; i < 31; ++i) clips.push_back(clip_of(Label::Chorea, "c" + std::to_string(i)));
  for (int i = 0; i < 19; ++i) clips.push_back(clip_of(Label::Dystonia, "d" + std::to_string(i)));
  auto out = bootstrap_oversample(clips, 3407);
  auto cc = class_counts(out);
  EXPECT_EQ(cc[0], 31u);
  EXPECT_EQ(cc[1], 31u);
  std::set<std::string> minority;
  for (const auto& c : clips)
    if (c.label == Label::Dystonia) minority.insert(c.source.video_id);
  std::multiset<std::string> majority_out;
  for (const auto& c : out) {
    if (c.label == Label::Dystonia) EXPECT_TRUE(minority.count(c.source.video_id));
    else majority_out.insert(c.source.video_id);
  }
  EXPECT_EQ(majority_out.size(), 31u);
  EXPECT_EQ(std::set<std::string>(majority_out.begin(), majority_out.end()).size(), 31u);
  EXPECT_EQ(bootstrap_oversample(clips, 3407), out);

  std::vector<SkeletonClip> balanced(clips.begin() + 12, clips.end());  // 19 + 19
  auto perm = bootstrap_oversample(balanced, 1);
  ASSERT_EQ(perm.size(), balanced.size());
  std::multiset<std::string> a, b;
  for (const auto& c : balanced) a.insert(c.source.video_id);
  for (const auto& c : perm) b.insert(c.source.video_id);
  EXPECT_EQ(a, b);

  std::vector<SkeletonClip> single{clip_of(Label::Chorea, "x")};
  EXPECT_THROW(bootstrap_oversample(single, 1), DataError);
}

TEST(ClipArchive, RoundTripAndValidation) {
  const auto dir = std::filesystem::temp_directory_path() / "skelnet_test_archive";
  std::filesystem::create_directories(dir);
  auto clips = window_clips(normalize_resolution(make_sequence(160))).clips;
  write_clip_archive(dir / "clips.ndjson", clips);
  EXPECT_EQ(read_clip_archive(dir / "clips.ndjson"), clips);

  std::ofstream(dir / "bad.ndjson") << R"({"source":{"video_id":"a","start_frame":0,"fps":25},"label":0,"matrix":[2.0]})"
                                    << "\n";
  EXPECT_THROW(read_clip_archive(dir / "bad.ndjson"), DataError);
  std::filesystem::remove_all(dir);
}

TEST(Preprocess, FullChainAtFifteenFps) {
  auto s = make_sequence(250, 25);
  PreprocessOptions opt;
  opt.target_fps = 15;
  auto r = preprocess(s, opt);
  ASSERT_EQ(r.clips.size(), 2u);  // 150 frames at 15 fps
  EXPECT_EQ(r.clips[0].source.fps, 15);
  for (double v : r.clips[0].matrix.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

}  // namespace
