#pragma once

// Scripted toy corpora: L-shaped strokes with scanpaths that trace them, and
// block layouts viewed by two archetype scanners (row-major vs column-major).

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "scanflow/core.hpp"

namespace scanflow::synth {

namespace detail {

inline std::string numbered(const std::string& prefix, int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%03d", i);
    return prefix + buf;
}

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// Point at arc-length fraction `s` along a polyline.
inline std::array<double, 2> along(const std::vector<std::array<double, 2>>& pts, double s) {
    double total = 0.0;
    std::vector<double> seg;
    for (std::size_t i = 1; i < pts.size(); ++i) {
        seg.push_back(std::hypot(pts[i][0] - pts[i - 1][0], pts[i][1] - pts[i - 1][1]));
        total += seg.back();
    }
    double d = s * total;
    for (std::size_t i = 0; i < seg.size(); ++i) {
        if (d <= seg[i] || i + 1 == seg.size()) {
            const double u = seg[i] > 0 ? std::min(1.0, d / seg[i]) : 0.0;
            return {pts[i][0] + u * (pts[i + 1][0] - pts[i][0]), pts[i][1] + u * (pts[i + 1][1] - pts[i][1])};
        }
        d -= seg[i];
    }
    return pts.back();
}

inline StimulusImage blank(const std::string& id, int size, std::uint8_t grey = 96) {
    StimulusImage img;
    img.id = id;
    img.width = img.height = size;
    img.pixels.assign(static_cast<std::size_t>(size) * size * 3, grey);
    return img;
}

// Fills a rectangle given in normalized coordinates.
inline void fill_norm(StimulusImage& img, double x0, double y0, double x1, double y1, std::array<std::uint8_t, 3> c) {
    auto px = [&](double v, int extent) { return std::clamp(static_cast<int>(std::lround(v * extent)), 0, extent); };
    img.fill_rect(px(x0, img.width), px(y0, img.height), px(x1, img.width), px(y1, img.height), c[0], c[1], c[2]);
}

} // namespace detail

struct LCorpusOptions {
    int images = 20;
    int viewers = 4;
    int T = 8;
    int image_size = 64;
    int test_images = 5;
    double jitter = 0.01;     // per-fixation positional noise, normalized units
    double first_duration = 0.3;
    std::uint64_t seed = 7;
};

// Each image shows an L: a vertical stroke from the top down to a corner,
// then a horizontal stroke to the right. Every viewer starts at the centre
// and then walks the L at even arc-length steps.
inline Dataset make_l_corpus(const LCorpusOptions& o = {}) {
    if (o.T < 2 || o.images < 1 || o.viewers < 1) throw ValidationError("invalid toy corpus options", "T");
    std::mt19937_64 rng(o.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> n(0.0, 1.0);
    Dataset ds;
    for (int i = 0; i < o.images; ++i) {
        const std::string id = detail::numbered("l", i);
        const double cx = 0.15 + 0.3 * u(rng), cy = 0.5 + 0.3 * u(rng);
        const double top = 0.1 + 0.1 * u(rng), right = std::min(0.9, cx + 0.35 + 0.2 * u(rng));
        auto img = detail::blank(id, o.image_size);
        const double w = 0.06;
        detail::fill_norm(img, cx - w / 2, top, cx + w / 2, cy + w / 2, {240, 220, 40});
        detail::fill_norm(img, cx - w / 2, cy - w / 2, right, cy + w / 2, {240, 220, 40});
        const std::vector<std::array<double, 2>> stroke{{cx, top}, {cx, cy}, {right, cy}};
        ds.stimuli.emplace(id, std::move(img));
        ds.image_split[id] = i < o.images - o.test_images ? Split::Train : Split::Test;
        for (int v = 0; v < o.viewers; ++v) {
            Scanpath p{id, detail::numbered("v", v), {}};
            p.fixations.push_back({0.5, 0.5, o.first_duration});
            for (int k = 1; k < o.T; ++k) {
                const auto q = detail::along(stroke, o.T == 2 ? 0.0 : static_cast<double>(k - 1) / (o.T - 2));
                const double t = 0.22 + 0.04 * (k % 3) + 0.01 * std::abs(n(rng));
                p.fixations.push_back({detail::clamp01(q[0] + o.jitter * n(rng)), detail::clamp01(q[1] + o.jitter * n(rng)), t});
            }
            ds.scanpaths.push_back(std::move(p));
        }
    }
    for (int v = 0; v < o.viewers; ++v) ds.viewer_split[detail::numbered("v", v)] = Split::Train;
    return ds;
}

enum class Archetype { RowMajor, ColumnMajor };

inline const char* to_string(Archetype a) { return a == Archetype::RowMajor ? "ltr" : "ttb"; }

struct ArchetypeCorpusOptions {
    int train_images = 40;
    int test_images = 20;
    int train_viewers_per_archetype = 3;
    int held_out_viewers_per_archetype = 1;
    int image_size = 64;
    double jitter = 0.01;
    double block = 0.2;       // block side, normalized
    std::uint64_t seed = 11;
};

// Four coloured blocks roughly on a 2x2 arrangement.
struct BlockScene {
    std::array<std::array<double, 2>, 4> centers;  // TL, TR, BL, BR
};

inline const std::array<std::array<std::uint8_t, 3>, 4>& block_colors() {
    static const std::array<std::array<std::uint8_t, 3>, 4> c{
        {{{230, 60, 50}}, {{50, 180, 70}}, {{60, 90, 230}}, {{230, 200, 40}}}};
    return c;
}

// Visiting order of the four blocks for an archetype.
inline std::array<int, 4> archetype_order(Archetype a) {
    return a == Archetype::RowMajor ? std::array<int, 4>{0, 1, 2, 3} : std::array<int, 4>{0, 2, 1, 3};
}

inline double archetype_duration(Archetype a) { return a == Archetype::RowMajor ? 0.25 : 0.4; }

// Scanpath of an archetype viewer: centre, then the blocks in archetype order.
inline Scanpath archetype_path(const BlockScene& scene, Archetype a, const std::string& stimulus,
                               const std::string& viewer, std::mt19937_64& rng, double jitter) {
    std::normal_distribution<double> n(0.0, 1.0);
    Scanpath p{stimulus, viewer, {}};
    p.fixations.push_back({0.5, 0.5, 0.3});
    for (int b : archetype_order(a)) {
        const auto& c = scene.centers[static_cast<std::size_t>(b)];
        p.fixations.push_back({detail::clamp01(c[0] + jitter * n(rng)), detail::clamp01(c[1] + jitter * n(rng)),
                               archetype_duration(a) + 0.02 * std::abs(n(rng))});
    }
    return p;
}

struct ArchetypeCorpus {
    Dataset dataset;
    std::map<std::string, BlockScene> scenes;
    std::map<std::string, Archetype> archetype_of;  // viewer -> archetype
    std::vector<std::string> held_out_viewers;      // one list, archetypes interleaved
};

// Training viewers see every image; held-out viewers contribute scanpaths
// on training images only (their personalization samples), while their
// behaviour on test images is generated on demand from `scenes`.
inline ArchetypeCorpus make_archetype_corpus(const ArchetypeCorpusOptions& o = {}) {
    std::mt19937_64 rng(o.seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    ArchetypeCorpus c;
    auto& ds = c.dataset;
    std::vector<std::pair<std::string, Archetype>> train_viewers;
    for (Archetype a : {Archetype::RowMajor, Archetype::ColumnMajor}) {
        for (int v = 0; v < o.train_viewers_per_archetype; ++v) {
            const auto id = detail::numbered(std::string(to_string(a)) + "_", v);
            train_viewers.emplace_back(id, a);
            c.archetype_of[id] = a;
            ds.viewer_split[id] = Split::Train;
        }
    }
    for (int v = 0; v < o.held_out_viewers_per_archetype; ++v)
        for (Archetype a : {Archetype::RowMajor, Archetype::ColumnMajor}) {
            const auto id = detail::numbered(std::string(to_string(a)) + "_new_", v);
            c.held_out_viewers.push_back(id);
            c.archetype_of[id] = a;
            ds.viewer_split[id] = Split::Test;
        }
    const int total = o.train_images + o.test_images;
    for (int i = 0; i < total; ++i) {
        const std::string id = detail::numbered("blocks", i);
        BlockScene s;
        const double base[4][2] = {{0.28, 0.28}, {0.72, 0.28}, {0.28, 0.72}, {0.72, 0.72}};
        for (int b = 0; b < 4; ++b) s.centers[static_cast<std::size_t>(b)] = {base[b][0] + 0.08 * u(rng), base[b][1] + 0.08 * u(rng)};
        auto img = detail::blank(id, o.image_size, 200);
        for (int b = 0; b < 4; ++b) {
            const auto& cc = s.centers[static_cast<std::size_t>(b)];
            detail::fill_norm(img, cc[0] - o.block / 2, cc[1] - o.block / 2, cc[0] + o.block / 2, cc[1] + o.block / 2,
                              block_colors()[static_cast<std::size_t>(b)]);
        }
        ds.stimuli.emplace(id, std::move(img));
        const bool train = i < o.train_images;
        ds.image_split[id] = train ? Split::Train : Split::Test;
        for (const auto& [v, a] : train_viewers) ds.scanpaths.push_back(archetype_path(s, a, id, v, rng, o.jitter));
        if (train)
            for (const auto& v : c.held_out_viewers)
                ds.scanpaths.push_back(archetype_path(s, c.archetype_of[v], id, v, rng, o.jitter));
        c.scenes.emplace(id, s);
    }
    return c;
}

} // namespace scanflow::synth
