#include <gtest/gtest.h>

#include <fstream>

#include "scanflow/core.hpp"
#include "util.hpp"

using namespace scanflow;
using testutil::TempDir;

namespace {

RawScanpath pixel_raw(std::vector<Fixation> f) {
    RawScanpath r;
    r.stimulus_id = "img";
    r.space = CoordinateSpace::Pixel;
    r.fixations = std::move(f);
    return r;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

} // namespace

TEST(Normalize, CenterMapsToHalf) {
    StimulusImage img("img", 1920, 1080);
    auto p = normalize_scanpath(pixel_raw({{960, 540, 0.2}}), img);
    EXPECT_DOUBLE_EQ(p[0].x, 0.5);
    EXPECT_DOUBLE_EQ(p[0].y, 0.5);
    EXPECT_DOUBLE_EQ(p[0].t, 0.2);
}

TEST(Normalize, CornerMapsToOne) {
    StimulusImage img("img", 1920, 1080);
    auto p = normalize_scanpath(pixel_raw({{1920, 1080, 0.2}}), img);
    EXPECT_DOUBLE_EQ(p[0].x, 1.0);
    EXPECT_DOUBLE_EQ(p[0].y, 1.0);
}

TEST(Normalize, OvershootBeyondToleranceRejected) {
    StimulusImage img("img", 1920, 1080);
    EXPECT_THROW(normalize_scanpath(pixel_raw({{2000, 540, 0.2}}), img), ValidationError);
    // 1% overshoot is clamped
    auto p = normalize_scanpath(pixel_raw({{1939, 540, 0.2}}), img);
    EXPECT_DOUBLE_EQ(p[0].x, 1.0);
}

TEST(Normalize, MillisecondsConverted) {
    StimulusImage img("img", 100, 100);
    auto raw = pixel_raw({{10, 10, 250}});
    raw.unit = DurationUnit::Milliseconds;
    EXPECT_DOUBLE_EQ(normalize_scanpath(raw, img)[0].t, 0.25);
}

TEST(Normalize, NonPositiveDurationRejected) {
    StimulusImage img("img", 100, 100);
    EXPECT_THROW(normalize_scanpath(pixel_raw({{10, 10, 0}}), img), ValidationError);
    EXPECT_THROW(normalize_scanpath(pixel_raw({{10, 10, -1}}), img), ValidationError);
}

TEST(Normalize, Idempotent) {
    StimulusImage img("img", 640, 480);
    auto once = normalize_scanpath(pixel_raw({{5, 470, 0.1}, {639, 1, 0.3}}), img);
    auto twice = normalize_scanpath(to_raw(once), img);
    ASSERT_EQ(once.size(), twice.size());
    for (std::size_t i = 0; i < once.size(); ++i) {
        EXPECT_EQ(once[i].x, twice[i].x);
        EXPECT_EQ(once[i].y, twice[i].y);
        EXPECT_EQ(once[i].t, twice[i].t);
    }
}

TEST(Truncate, Rules) {
    Scanpath p{"s", std::nullopt, {}};
    for (int i = 0; i < 20; ++i) p.fixations.push_back({0.1, 0.1, 0.1 + i});
    auto r = truncate_or_reject(p, 15);
    EXPECT_EQ(r.path.size(), 15u);
    EXPECT_FALSE(r.short_path);
    EXPECT_DOUBLE_EQ(r.path[14].t, 14.1);

    p.fixations.resize(15);
    r = truncate_or_reject(p, 15);
    EXPECT_EQ(r.path.size(), 15u);
    EXPECT_FALSE(r.short_path);

    p.fixations.resize(9);
    r = truncate_or_reject(p, 15);
    EXPECT_EQ(r.path.size(), 9u);
    EXPECT_TRUE(r.short_path);
}

TEST(Records, RoundTrip) {
    Scanpath p{"abc", std::string("v1"), {{0.25, 0.5, 0.125}, {1.0, 0.0, 2.5}}};
    const auto line = serialize_record(p);
    StimulusImage img("abc", 10, 10);
    auto back = normalize_scanpath(parse_record(line), img);
    EXPECT_EQ(serialize_record(back), line);
}

TEST(Records, MalformedThrowsFormatError) {
    EXPECT_THROW(parse_record(std::string("{not json")), FormatError);
    EXPECT_THROW(parse_record(std::string(R"({"stimulus":"a","fixations":[[1,2]]})")), FormatError);
    EXPECT_THROW(parse_record(std::string(R"({"fixations":[]})")), FormatError);
}

TEST(LoadDataset, CountsAndRejection) {
    TempDir dir;
    fs::create_directories(dir / "images");
    write_ppm(StimulusImage("a", 8, 6), dir.path() / "images" / "a.ppm");
    write_ppm(StimulusImage("b", 8, 6), dir.path() / "images" / "b.ppm");
    write_text(dir / "scanpaths.jsonl",
               R"({"stimulus":"a","viewer":"v1","fixations":[[0.1,0.2,0.3]]}
{"stimulus":"a","viewer":"v2","fixations":[[0.5,0.5,0.2],[0.6,0.6,0.1]]}
{"stimulus":"b","viewer":"v1","space":"pixel","unit":"ms","fixations":[[4,3,200]]}
{"stimulus":"b","viewer":"v2","fixations":[[0.3,0.3,0.4]]}
{"stimulus":"b","viewer":"v2","fixations":[[0.3,0.3,0]]}
)");
    LoadReport rep;
    auto ds = load_dataset(dir.path(), &rep);
    EXPECT_EQ(ds.stimuli.size(), 2u);
    EXPECT_EQ(ds.scanpaths.size(), 4u);
    EXPECT_EQ(rep.records_read, 5u);
    EXPECT_EQ(rep.records_accepted, 4u);
    ASSERT_EQ(rep.rejected.size(), 1u);
    EXPECT_EQ(rep.rejected[0].line, 5u);
    EXPECT_DOUBLE_EQ(ds.scanpaths[2][0].x, 0.5);
    EXPECT_DOUBLE_EQ(ds.scanpaths[2][0].t, 0.2);
}

TEST(LoadDataset, UnknownStimulusIsStructuralError) {
    TempDir dir;
    fs::create_directories(dir / "images");
    write_ppm(StimulusImage("a", 4, 4), dir.path() / "images" / "a.ppm");
    write_text(dir / "scanpaths.jsonl", R"({"stimulus":"zzz","fixations":[[0.1,0.2,0.3]]})" "\n");
    EXPECT_THROW(load_dataset(dir.path()), ValidationError);
}

TEST(LoadDataset, SaveLoadRoundTrip) {
    TempDir dir;
    Dataset ds;
    ds.stimuli.emplace("a", StimulusImage("a", 5, 7, 10));
    ds.stimuli.emplace("b", StimulusImage("b", 3, 3, 200));
    ds.scanpaths.push_back({"a", std::string("v1"), {{0.125, 0.5, 0.3}, {0.75, 0.25, 0.1}}});
    ds.scanpaths.push_back({"b", std::string("v2"), {{0.5, 0.5, 1.0}}});
    ds.image_split = {{"a", Split::Train}, {"b", Split::Test}};
    ds.viewer_split = {{"v1", Split::Train}, {"v2", Split::Test}};
    save_dataset(ds, dir / "ds");
    auto back = load_dataset(dir / "ds");
    ASSERT_EQ(back.scanpaths.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(serialize_record(back.scanpaths[i]), serialize_record(ds.scanpaths[i]));
    EXPECT_EQ(back.image_split, ds.image_split);
    EXPECT_EQ(back.viewer_split, ds.viewer_split);
    EXPECT_EQ(back.stimulus("a").pixels, ds.stimulus("a").pixels);
}

TEST(Splits, ManifestCountsMatchLargeCorpusShape) {
    Dataset ds;
    SplitManifest m;
    for (int i = 0; i < 1980; ++i) {
        const std::string id = "img" + std::to_string(i);
        ds.stimuli.emplace(id, StimulusImage(id, 1, 1));
        (i < 1872 ? m.train_images : m.test_images).push_back(id);
    }
    for (int v = 0; v < 62; ++v) {
        const std::string id = "viewer" + std::to_string(v);
        ds.scanpaths.push_back({"img" + std::to_string(v), id, {{0.5, 0.5, 0.2}}});
        (v < 53 ? m.train_viewers : m.test_viewers).push_back(id);
    }
    apply_manifest(ds, m);
    EXPECT_EQ(ds.images(Split::Train).size(), 1872u);
    EXPECT_EQ(ds.images(Split::Test).size(), 108u);
    EXPECT_EQ(ds.viewers(Split::Train).size(), 53u);
    EXPECT_EQ(ds.viewers(Split::Test).size(), 9u);
}

TEST(Splits, OverlapRejected) {
    Dataset ds;
    ds.stimuli.emplace("a", StimulusImage("a", 1, 1));
    SplitManifest m;
    m.train_images = {"a"};
    m.test_images = {"a"};
    EXPECT_THROW(apply_manifest(ds, m), ValidationError);
}

TEST(Splits, RandomSplitIsDisjointAndSeeded) {
    Dataset ds;
    for (int i = 0; i < 30; ++i) {
        const std::string id = "s" + std::to_string(i);
        ds.stimuli.emplace(id, StimulusImage(id, 1, 1));
    }
    apply_random_split(ds, 0.2, 5);
    auto first = ds.image_split;
    EXPECT_EQ(ds.images(Split::Test).size(), 6u);
    EXPECT_EQ(ds.images(Split::Train).size() + ds.images(Split::Test).size(), 30u);
    apply_random_split(ds, 0.2, 5);
    EXPECT_EQ(first, ds.image_split);
}

TEST(Display, ViewingGeometryGivesPositiveExtent) {
    auto d = DisplayConfig::from_viewing_geometry(1920, 1080, 60, 37.8);
    EXPECT_NO_THROW(d.validate());
    EXPECT_GT(d.m_display, 0.0);
    // 2 degrees at 60 cm: 2 * 60 * tan(1 deg) cm
    EXPECT_NEAR(d.m_display, 2 * 60 * std::tan(M_PI / 180.0) * 37.8, 1e-9);
    DisplayConfig bad;
    EXPECT_THROW(bad.validate(), ValidationError);
}

TEST(Images, PpmRoundTripAndResize) {
    TempDir dir;
    StimulusImage img("x", 4, 2);
    img.fill_rect(0, 0, 2, 2, 255, 0, 0);
    write_ppm(img, dir / "x.ppm");
    auto back = read_ppm(dir / "x.ppm");
    EXPECT_EQ(back.id, "x");
    EXPECT_EQ(back.pixels, img.pixels);
    auto r = resize_rgb(img, 2, 1);
    ASSERT_EQ(r.size(), 6u);
    EXPECT_GT(r[0], r[3]);  // left half is red
}
