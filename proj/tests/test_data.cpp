#include <gtest/gtest.h>

#include <map>
#include <numeric>
#include <set>

#include "support.hpp"

using namespace cer;
using cer::testing::TempDir;

TEST(LabelSpace, CompoundOrder) {
  const auto& s = LabelSpace::compound();
  const std::vector<std::string> expected{"Angrily Surprised", "Disgustedly Surprised", "Fearfully Surprised",
                                          "Happily Surprised", "Sadly Angry",           "Sadly Fearful",
                                          "Sadly Surprised"};
  ASSERT_EQ(s.size(), 7u);
  for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(s.name(i), expected[i]);
}

TEST(LabelSpace, SingleOrder) {
  const auto& s = LabelSpace::single();
  const std::vector<std::string> expected{"Anger",     "Contempt", "Disgust", "Fear",
                                          "Happiness", "Neutral",  "Sadness", "Surprise"};
  ASSERT_EQ(s.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(s.name(i), expected[i]);
}

TEST(LabelSpace, NameIndexRoundTrip) {
  for (const LabelSpace* s : {&LabelSpace::compound(), &LabelSpace::single()}) {
    for (std::size_t i = 0; i < s->size(); ++i) EXPECT_EQ(s->index(s->name(i)), i);
  }
  EXPECT_THROW(LabelSpace::single().name(8), IndexError);
  EXPECT_THROW(LabelSpace::single().index("Boredom"), ValidationError);
  EXPECT_THROW(LabelSpace("dup", {"a", "a"}), ValidationError);
}

TEST(Manifest, LoadsTwoRecordsWithTaxonomyIndices) {
  TempDir dir;
  write_text_file(dir / "m.csv", "a.jpg,Anger\nb.jpg,Surprise\n");
  const auto m = load_manifest(dir / "m.csv", LabelSpace::single(), Split::train);
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m.records[0].label_index, 0u);
  EXPECT_EQ(m.records[1].label_index, 7u);
  EXPECT_EQ(m.records[0].image_path, (dir.path() / "a.jpg").lexically_normal().string());
  EXPECT_EQ(m.records[0].source, "m");
}

TEST(Manifest, UnknownLabelNamesLine) {
  TempDir dir;
  write_text_file(dir / "m.csv", "image_path,label_name\n# comment\na.jpg,Anger\nc.jpg,Boredom\n");
  try {
    load_manifest(dir / "m.csv", LabelSpace::single(), Split::train);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_STREQ(e.what(), "unknown label 'Boredom' at line 4");
  }
}

TEST(Manifest, MissingAndEmptyFiles) {
  TempDir dir;
  EXPECT_THROW(load_manifest(dir / "none.csv", LabelSpace::single(), Split::train), IoError);
  write_text_file(dir / "e.csv", "image_path,label_name\n");
  EXPECT_THROW(load_manifest(dir / "e.csv", LabelSpace::single(), Split::train), ValidationError);
}

TEST(Manifest, QuotedFieldsAndBom) {
  TempDir dir;
  write_text_file(dir / "m.csv", "\xEF\xBB\xBFimage_path,label_name,source\n\"x, y.png\",\"Sadly Angry\",raf\n");
  const auto m = load_manifest(dir / "m.csv", LabelSpace::compound(), Split::val);
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(fs::path(m.records[0].image_path).filename(), "x, y.png");
  EXPECT_EQ(m.records[0].label_index, 4u);
  EXPECT_EQ(m.records[0].source, "raf");
}

TEST(Manifest, HundredLineRoundTrip) {
  TempDir dir;
  Rng rng(3);
  DatasetManifest m{{}, Split::train, LabelSpace::single()};
  for (int i = 0; i < 100; ++i) {
    m.records.push_back({(dir.path() / "img" / ("f" + std::to_string(i) + ".jpg")).string(),
                         static_cast<std::size_t>(uniform01(rng) * 8), i % 2 ? "affectnet" : "rafdb"});
  }
  write_manifest(m, dir / "out" / "m.csv");
  const auto back = load_manifest(dir / "out" / "m.csv", LabelSpace::single(), Split::train);
  EXPECT_EQ(back.records, m.records);
}

TEST(Manifest, DetectsTaxonomy) {
  TempDir dir;
  write_text_file(dir / "a.csv", "a.jpg,Anger\n");
  write_text_file(dir / "b.csv", "a.jpg,Sadly Angry\n");
  write_text_file(dir / "c.csv", "a.jpg,Sadly Angry\nb.jpg,Anger\n");
  EXPECT_EQ(detect_label_space(dir / "a.csv").id(), "single");
  EXPECT_EQ(detect_label_space(dir / "b.csv").id(), "compound");
  EXPECT_THROW(detect_label_space(dir / "c.csv"), ValidationError);
}

namespace {

DatasetManifest toy_manifest(const std::string& tag, std::size_t n) {
  DatasetManifest m{{}, Split::train, LabelSpace::single()};
  for (std::size_t i = 0; i < n; ++i) m.records.push_back({"/d/" + tag + std::to_string(i) + ".jpg", i % 8, tag});
  return m;
}

}  // namespace

TEST(MergeUnity, SplitsTwentyIntoSixteenAndFour) {
  const auto [train, val] = merge_unity({toy_manifest("a", 10), toy_manifest("b", 10)}, 0.2, 42);
  EXPECT_EQ(train.size(), 16u);
  EXPECT_EQ(val.size(), 4u);
  std::set<std::string> seen;
  for (const auto& r : train.records) seen.insert(r.image_path);
  for (const auto& r : val.records) EXPECT_FALSE(seen.count(r.image_path)) << r.image_path;
  for (const auto& r : val.records) EXPECT_EQ(r.source, r.image_path.substr(3, 1));
}

TEST(MergeUnity, SameSeedSameOutput) {
  const auto a = merge_unity({toy_manifest("a", 30), toy_manifest("b", 7)}, 0.3, 9);
  const auto b = merge_unity({toy_manifest("a", 30), toy_manifest("b", 7)}, 0.3, 9);
  EXPECT_EQ(a.first.records, b.first.records);
  EXPECT_EQ(a.second.records, b.second.records);
  EXPECT_EQ(manifest_csv(a.first, "/"), manifest_csv(b.first, "/"));
}

TEST(MergeUnity, FullScaleProportion) {
  const double fraction = 7067.0 / 306989.0;
  const auto [train, val] = merge_unity({toy_manifest("a", 306989)}, fraction, 1);
  EXPECT_EQ(val.size(), 7067u);
  EXPECT_EQ(train.size(), 299922u);
}

TEST(MergeUnity, MixedTaxonomiesRejected) {
  DatasetManifest c{{{"/x.jpg", 0, "raf"}}, Split::train, LabelSpace::compound()};
  EXPECT_THROW(merge_unity({toy_manifest("a", 3), c}, 0.1, 0), ValidationError);
}

TEST(Images, ConstantGrayStaysConstant) {
  TempDir dir;
  cv::imwrite((dir / "g.png").string(), cv::Mat(448, 448, CV_8UC3, cv::Scalar(128, 128, 128)));
  const auto raw = load_image_raw<double>((dir / "g.png").string(), 224);
  ASSERT_EQ(raw.size(), 3u * 224 * 224);
  for (double v : raw) ASSERT_EQ(v, 128.0 / 255.0);
}

TEST(Images, NonSquareResizedDirectly) {
  TempDir dir;
  cv::imwrite((dir / "r.png").string(), cv::Mat(100, 200, CV_8UC3, cv::Scalar(255, 255, 255)));
  const auto raw = load_image_raw<double>((dir / "r.png").string(), 224);
  ASSERT_EQ(raw.size(), 3u * 224 * 224);
  for (double v : raw) ASSERT_EQ(v, 1.0);
}

TEST(Images, ChannelOrderIsRgbAndNormalised) {
  TempDir dir;
  cv::imwrite((dir / "c.png").string(), cv::Mat(8, 8, CV_8UC3, cv::Scalar(0, 0, 255)));  // pure red in BGR
  ImageOptions opts;
  opts.image_size = 8;
  const auto img = load_image<double>({(dir / "c.png").string(), 0, ""}, opts);
  EXPECT_DOUBLE_EQ(img[0], (1.0 - 0.485) / 0.229);
  EXPECT_DOUBLE_EQ(img[64], (0.0 - 0.456) / 0.224);
  EXPECT_DOUBLE_EQ(img[128], (0.0 - 0.406) / 0.225);
}

TEST(Images, UndecodableFileCarriesPath) {
  TempDir dir;
  write_text_file(dir / "bad.png", "not an image");
  try {
    load_image_raw<double>((dir / "bad.png").string(), 16);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.png"), std::string::npos);
  }
}

TEST(Images, DeterministicDecode) {
  TempDir dir;
  Rng rng(1);
  cv::imwrite((dir / "n.png").string(), cer::testing::synthetic_image(3, 50, rng));
  EXPECT_EQ(load_image_raw<float>((dir / "n.png").string(), 224), load_image_raw<float>((dir / "n.png").string(), 224));
}

TEST(Batches, WorkerCountDoesNotChangeBatch) {
  TempDir dir;
  const auto set = cer::testing::make_synthetic(dir.path(), "s", 2, 5);
  const auto m = load_manifest(set.manifest, LabelSpace::compound(), Split::train);
  ImageOptions opts;
  opts.image_size = 32;
  std::vector<std::size_t> idx(m.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto one = load_batch<double>(m, idx, opts, 1);
  const auto four = load_batch<double>(m, idx, opts, 4);
  EXPECT_TRUE(std::equal(one.pixels.data().begin(), one.pixels.data().end(), four.pixels.data().begin()));
  EXPECT_EQ(one.labels, m.labels());
}

TEST(Batches, TenRecordsBatchFour) {
  const auto m = toy_manifest("a", 10);
  const auto b = make_batches(m, 4, false, 0);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0], (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(b[2], (std::vector<std::size_t>{8, 9}));
  EXPECT_EQ(make_batches(m, 4, true, 7), make_batches(m, 4, true, 7));
  EXPECT_THROW(make_batches(m, 0, false, 0), ConfigError);
}

TEST(Batches, EpochCoverageForAnyBatchSize) {
  const auto m = toy_manifest("a", 23);
  for (std::size_t bs = 1; bs <= 25; ++bs) {
    std::multiset<std::size_t> seen;
    for (const auto& batch : make_batches(m, bs, true, bs)) seen.insert(batch.begin(), batch.end());
    std::multiset<std::size_t> all;
    for (std::size_t i = 0; i < 23; ++i) all.insert(i);
    EXPECT_EQ(seen, all) << bs;
  }
}

TEST(Augment, NoFlipAndFlip) {
  Rng rng(2);
  std::vector<double> v(2 * 3 * 2 * 5);
  std::iota(v.begin(), v.end(), 0.0);
  ImageBatch<double> batch{Tensor<double>({2, 3, 2, 5}, v), {1, 2}, {0, 1}};
  Rng r0(0);
  const auto same = augment(batch, r0, 0.0);
  EXPECT_TRUE(std::equal(same.pixels.data().begin(), same.pixels.data().end(), v.begin()));
  const auto flipped = augment(batch, r0, 1.0);
  for (std::size_t row = 0; row < 2 * 3 * 2; ++row)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(flipped.pixels.data()[row * 5 + j], v[row * 5 + 4 - j]);
  EXPECT_EQ(flipped.labels, batch.labels);
  // the input batch is untouched
  EXPECT_TRUE(std::equal(batch.pixels.data().begin(), batch.pixels.data().end(), v.begin()));
}

TEST(Augment, FlipRateNearHalf) {
  Rng rng(11);
  const auto flips = draw_flips(10000, 0.5, rng);
  const double rate = static_cast<double>(std::count(flips.begin(), flips.end(), true)) / 10000.0;
  EXPECT_NEAR(rate, 0.5, 0.02);
}

TEST(Frames, NaturalOrder) {
  TempDir dir;
  for (const char* n : {"frame10.png", "frame2.png", "frame1.png", "notes.txt"}) write_text_file(dir / n, "x");
  const auto frames = list_frames(dir.path());
  ASSERT_EQ(frames.size(), 3u);
  EXPECT_EQ(frames[0].filename(), "frame1.png");
  EXPECT_EQ(frames[1].filename(), "frame2.png");
  EXPECT_EQ(frames[2].filename(), "frame10.png");
}
