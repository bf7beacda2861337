#pragma once

// Canonical data model: fixations, scanpaths, stimuli, display geometry and
// datasets, plus the on-disk record format and dataset ingestion.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "scanflow/error.hpp"

namespace scanflow {

namespace fs = std::filesystem;
using json = nlohmann::json;

// One fixation in normalized image coordinates; `t` is the duration in seconds.
struct Fixation {
    double x = 0.0;
    double y = 0.0;
    double t = 0.0;

    friend bool operator==(const Fixation&, const Fixation&) = default;
};

struct Scanpath {
    std::string stimulus_id;
    std::optional<std::string> viewer_id;
    std::vector<Fixation> fixations;

    std::size_t size() const noexcept { return fixations.size(); }
    bool empty() const noexcept { return fixations.empty(); }
    const Fixation& operator[](std::size_t i) const { return fixations[i]; }

    friend bool operator==(const Scanpath&, const Scanpath&) = default;
};

inline bool is_valid_fixation(const Fixation& f) {
    return std::isfinite(f.x) && std::isfinite(f.y) && std::isfinite(f.t) && f.x >= 0.0 &&
           f.x <= 1.0 && f.y >= 0.0 && f.y <= 1.0 && f.t > 0.0;
}

inline void validate_scanpath(const Scanpath& path) {
    if (path.empty()) throw ValidationError("scanpath has no fixations", "fixations");
    for (std::size_t i = 0; i < path.size(); ++i) {
        if (!is_valid_fixation(path[i]))
            throw ValidationError("fixation " + std::to_string(i) + " outside [0,1]^2 or t <= 0",
                                  "fixations");
    }
}

// ---------------------------------------------------------------------------
// Stimulus images

// 8-bit RGB raster, row-major, 3 bytes per pixel.
struct StimulusImage {
    std::string id;
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;

    StimulusImage() = default;
    StimulusImage(std::string id_, int w, int h, std::uint8_t fill = 128)
        : id(std::move(id_)), width(w), height(h),
          pixels(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3, fill) {
        if (w <= 0 || h <= 0) throw ValidationError("image dimensions must be positive", "image");
    }

    std::uint8_t* at(int x, int y) {
        return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3;
    }
    const std::uint8_t* at(int x, int y) const {
        return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3;
    }

    void fill_rect(int x0, int y0, int x1, int y1, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
        x0 = std::clamp(x0, 0, width);
        x1 = std::clamp(x1, 0, width);
        y0 = std::clamp(y0, 0, height);
        y1 = std::clamp(y1, 0, height);
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) {
                auto* p = at(x, y);
                p[0] = r;
                p[1] = g;
                p[2] = b;
            }
    }

    friend bool operator==(const StimulusImage&, const StimulusImage&) = default;
};

inline void validate_image(const StimulusImage& img) {
    if (img.width <= 0 || img.height <= 0)
        throw ValidationError("image '" + img.id + "' has non-positive dimensions", "image");
    if (img.pixels.size() != static_cast<std::size_t>(img.width) * img.height * 3)
        throw ValidationError("image '" + img.id + "' pixel buffer does not match its dimensions",
                              "image");
}

namespace detail {

inline void skip_pnm_space(std::istream& in) {
    for (;;) {
        int c = in.peek();
        if (c == '#') {
            std::string discard;
            std::getline(in, discard);
        } else if (c != EOF && std::isspace(c)) {
            in.get();
        } else {
            return;
        }
    }
}

inline int read_pnm_int(std::istream& in, const std::string& path) {
    skip_pnm_space(in);
    int v = -1;
    if (!(in >> v) || v < 0) throw FormatError("bad PNM header in " + path);
    return v;
}

} // namespace detail

// Reads binary (P6) or ASCII (P3) PPM files with maxval <= 255.
inline StimulusImage read_ppm(const fs::path& path, std::string id = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open image " + path.string());
    std::string magic(2, '\0');
    in.read(magic.data(), 2);
    if (magic != "P6" && magic != "P3") throw FormatError("not a PPM image: " + path.string());
    const int w = detail::read_pnm_int(in, path.string());
    const int h = detail::read_pnm_int(in, path.string());
    const int maxval = detail::read_pnm_int(in, path.string());
    if (w == 0 || h == 0 || maxval == 0 || maxval > 255)
        throw FormatError("unsupported PPM dimensions or depth in " + path.string());
    StimulusImage img(id.empty() ? path.stem().string() : std::move(id), w, h);
    if (magic == "P6") {
        in.get();
        in.read(reinterpret_cast<char*>(img.pixels.data()),
                static_cast<std::streamsize>(img.pixels.size()));
        if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
            throw FormatError("truncated PPM data in " + path.string());
    } else {
        for (auto& px : img.pixels) {
            const int v = detail::read_pnm_int(in, path.string());
            px = static_cast<std::uint8_t>(std::min(v, maxval) * 255 / maxval);
        }
    }
    return img;
}

inline void write_ppm(const StimulusImage& img, const fs::path& path) {
    validate_image(img);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write image " + path.string());
    out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
}

// Area-averaged resample to `w` x `h`, returned as row-major RGB doubles in [0,1].
inline std::vector<double> resize_rgb(const StimulusImage& img, int w, int h) {
    validate_image(img);
    if (w <= 0 || h <= 0) throw ValidationError("resize target must be positive", "w_inp");
    std::vector<double> out(static_cast<std::size_t>(w) * h * 3, 0.0);
    const double sx = static_cast<double>(img.width) / w;
    const double sy = static_cast<double>(img.height) / h;
    for (int oy = 0; oy < h; ++oy) {
        const double y0 = oy * sy, y1 = (oy + 1) * sy;
        for (int ox = 0; ox < w; ++ox) {
            const double x0 = ox * sx, x1 = (ox + 1) * sx;
            double acc[3] = {0, 0, 0};
            double area = 0.0;
            for (int iy = static_cast<int>(y0); iy < std::min(img.height, static_cast<int>(std::ceil(y1))); ++iy) {
                const double wy = std::min<double>(iy + 1, y1) - std::max<double>(iy, y0);
                if (wy <= 0) continue;
                for (int ix = static_cast<int>(x0); ix < std::min(img.width, static_cast<int>(std::ceil(x1))); ++ix) {
                    const double wx = std::min<double>(ix + 1, x1) - std::max<double>(ix, x0);
                    if (wx <= 0) continue;
                    const auto* p = img.at(ix, iy);
                    for (int c = 0; c < 3; ++c) acc[c] += wx * wy * p[c];
                    area += wx * wy;
                }
            }
            for (int c = 0; c < 3; ++c)
                out[(static_cast<std::size_t>(oy) * w + ox) * 3 + c] = acc[c] / (area * 255.0);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Display geometry

struct DisplayConfig {
    double width_px = 1920.0;
    double height_px = 1080.0;
    double m_display = 0.0;  // inhibition diameter on the display, px
    double visual_angle_deg = 2.0;
    std::optional<double> viewing_distance_cm;
    std::optional<double> px_per_cm;

    // Size on screen, in px, of an object subtending `angle_deg` at `distance_cm`.
    static double angle_to_px(double angle_deg, double distance_cm, double px_per_cm) {
        constexpr double pi = 3.14159265358979323846;
        return 2.0 * distance_cm * std::tan(angle_deg * pi / 360.0) * px_per_cm;
    }

    static DisplayConfig from_viewing_geometry(double w, double h, double distance_cm,
                                               double px_per_cm, double angle_deg = 2.0) {
        DisplayConfig d;
        d.width_px = w;
        d.height_px = h;
        d.visual_angle_deg = angle_deg;
        d.viewing_distance_cm = distance_cm;
        d.px_per_cm = px_per_cm;
        d.m_display = angle_to_px(angle_deg, distance_cm, px_per_cm);
        return d;
    }

    // Pixels per degree of visual angle, when the viewing geometry is known;
    // otherwise derived from m_display and the angle it encodes.
    double px_per_degree() const {
        if (viewing_distance_cm && px_per_cm) return angle_to_px(1.0, *viewing_distance_cm, *px_per_cm);
        return m_display / visual_angle_deg;
    }

    void validate() const {
        if (!(width_px > 0) || !(height_px > 0))
            throw ValidationError("display dimensions must be positive", "display");
        if (!(m_display > 0)) throw ValidationError("m_display must be positive", "m_display");
        if (!(visual_angle_deg > 0))
            throw ValidationError("visual angle must be positive", "visual_angle_deg");
        if (viewing_distance_cm && px_per_cm) {
            const double expect = angle_to_px(visual_angle_deg, *viewing_distance_cm, *px_per_cm);
            if (std::abs(expect - m_display) > 0.5)
                throw ValidationError("m_display disagrees with viewing geometry", "m_display");
        }
    }
};

inline void to_json(json& j, const DisplayConfig& d) {
    j = json{{"width_px", d.width_px},
             {"height_px", d.height_px},
             {"m_display", d.m_display},
             {"visual_angle_deg", d.visual_angle_deg}};
    if (d.viewing_distance_cm) j["viewing_distance_cm"] = *d.viewing_distance_cm;
    if (d.px_per_cm) j["px_per_cm"] = *d.px_per_cm;
}

inline void from_json(const json& j, DisplayConfig& d) {
    d.width_px = j.value("width_px", 1920.0);
    d.height_px = j.value("height_px", 1080.0);
    d.visual_angle_deg = j.value("visual_angle_deg", 2.0);
    if (j.contains("viewing_distance_cm")) d.viewing_distance_cm = j.at("viewing_distance_cm").get<double>();
    if (j.contains("px_per_cm")) d.px_per_cm = j.at("px_per_cm").get<double>();
    if (j.contains("m_display")) {
        d.m_display = j.at("m_display").get<double>();
    } else if (d.viewing_distance_cm && d.px_per_cm) {
        d.m_display = DisplayConfig::angle_to_px(d.visual_angle_deg, *d.viewing_distance_cm, *d.px_per_cm);
    }
}

// ---------------------------------------------------------------------------
// Scanpath records

enum class CoordinateSpace { Pixel, Normalized };
enum class DurationUnit { Seconds, Milliseconds };

// A scanpath as it appears in a record file, before normalization.
struct RawScanpath {
    std::string stimulus_id;
    std::optional<std::string> viewer_id;
    CoordinateSpace space = CoordinateSpace::Normalized;
    DurationUnit unit = DurationUnit::Seconds;
    std::vector<Fixation> fixations;
};

// Fraction of the image extent a coordinate may overshoot before the record is rejected.
inline constexpr double kOvershootTolerance = 0.02;

namespace detail {

inline double normalize_coord(double v, double extent, const char* field) {
    const double n = v / extent;
    if (!std::isfinite(n) || n < -kOvershootTolerance || n > 1.0 + kOvershootTolerance)
        throw ValidationError(std::string("coordinate outside image bounds by more than 2%"), field);
    return std::clamp(n, 0.0, 1.0);
}

} // namespace detail

// Converts pixel coordinates to [0,1] and durations to seconds. Already
// normalized input only goes through the clamp, so the map is idempotent.
inline Scanpath normalize_scanpath(const RawScanpath& raw, const StimulusImage& image) {
    validate_image(image);
    if (raw.fixations.empty()) throw ValidationError("scanpath has no fixations", "fixations");
    Scanpath out{raw.stimulus_id, raw.viewer_id, {}};
    out.fixations.reserve(raw.fixations.size());
    const double wx = raw.space == CoordinateSpace::Pixel ? image.width : 1.0;
    const double hy = raw.space == CoordinateSpace::Pixel ? image.height : 1.0;
    for (const auto& f : raw.fixations) {
        const double t = raw.unit == DurationUnit::Milliseconds ? f.t / 1000.0 : f.t;
        if (!std::isfinite(t) || t <= 0.0) throw ValidationError("fixation duration must be > 0", "t");
        out.fixations.push_back({detail::normalize_coord(f.x, wx, "x"), detail::normalize_coord(f.y, hy, "y"), t});
    }
    return out;
}

inline RawScanpath to_raw(const Scanpath& p) {
    return {p.stimulus_id, p.viewer_id, CoordinateSpace::Normalized, DurationUnit::Seconds, p.fixations};
}

struct TruncationResult {
    Scanpath path;
    bool short_path = false;  // fewer than T fixations: kept for evaluation, excluded from training
};

inline TruncationResult truncate_or_reject(const Scanpath& path, std::size_t T) {
    if (T < 1) throw ValidationError("target length must be >= 1", "T");
    TruncationResult r{path, path.size() < T};
    if (path.size() > T) r.path.fixations.resize(T);
    return r;
}

inline RawScanpath parse_record(const json& j) {
    if (!j.is_object()) throw FormatError("record is not a JSON object");
    RawScanpath r;
    if (!j.contains("stimulus") || !j["stimulus"].is_string())
        throw FormatError("record missing string field 'stimulus'");
    r.stimulus_id = j["stimulus"].get<std::string>();
    if (j.contains("viewer") && !j["viewer"].is_null()) {
        if (!j["viewer"].is_string()) throw FormatError("field 'viewer' must be a string");
        r.viewer_id = j["viewer"].get<std::string>();
    }
    const std::string unit = j.value("unit", "s");
    if (unit == "s") r.unit = DurationUnit::Seconds;
    else if (unit == "ms") r.unit = DurationUnit::Milliseconds;
    else throw FormatError("field 'unit' must be \"s\" or \"ms\"");
    const std::string space = j.value("space", "normalized");
    if (space == "pixel") r.space = CoordinateSpace::Pixel;
    else if (space == "normalized") r.space = CoordinateSpace::Normalized;
    else throw FormatError("field 'space' must be \"pixel\" or \"normalized\"");
    if (!j.contains("fixations") || !j["fixations"].is_array())
        throw FormatError("record missing array field 'fixations'");
    for (const auto& f : j["fixations"]) {
        if (!f.is_array() || f.size() != 3 || !f[0].is_number() || !f[1].is_number() || !f[2].is_number())
            throw FormatError("each fixation must be [x, y, t]");
        r.fixations.push_back({f[0].get<double>(), f[1].get<double>(), f[2].get<double>()});
    }
    return r;
}

inline RawScanpath parse_record(const std::string& line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("malformed JSON: ") + e.what());
    }
    return parse_record(j);
}

inline json record_json(const Scanpath& p) {
    json fx = json::array();
    for (const auto& f : p.fixations) fx.push_back({f.x, f.y, f.t});
    return json{{"stimulus", p.stimulus_id},
                {"viewer", p.viewer_id ? json(*p.viewer_id) : json(nullptr)},
                {"unit", "s"},
                {"space", "normalized"},
                {"fixations", std::move(fx)}};
}

// Canonical single-line record: normalized coordinates, seconds, sorted keys.
inline std::string serialize_record(const Scanpath& p) { return record_json(p).dump(); }

// ---------------------------------------------------------------------------
// Dataset

enum class Split { Train, Test };

inline const char* to_string(Split s) { return s == Split::Train ? "train" : "test"; }

struct SplitManifest {
    std::vector<std::string> train_images, test_images, train_viewers, test_viewers;
};

inline SplitManifest parse_manifest(const json& j) {
    SplitManifest m;
    auto list = [&](const char* key, std::vector<std::string>& out) {
        if (!j.contains(key)) return;
        if (!j[key].is_array()) throw FormatError(std::string("manifest field '") + key + "' must be an array");
        for (const auto& v : j[key]) out.push_back(v.get<std::string>());
    };
    list("train_images", m.train_images);
    list("test_images", m.test_images);
    list("train_viewers", m.train_viewers);
    list("test_viewers", m.test_viewers);
    return m;
}

struct Dataset {
    std::map<std::string, StimulusImage> stimuli;
    std::vector<Scanpath> scanpaths;
    std::map<std::string, Split> image_split;
    std::map<std::string, Split> viewer_split;

    const StimulusImage& stimulus(const std::string& id) const {
        auto it = stimuli.find(id);
        if (it == stimuli.end()) throw ValidationError("unknown stimulus '" + id + "'", "stimulus");
        return it->second;
    }

    bool has_stimulus(const std::string& id) const { return stimuli.count(id) != 0; }

    Split split_of_image(const std::string& id) const {
        auto it = image_split.find(id);
        return it == image_split.end() ? Split::Train : it->second;
    }

    Split split_of_viewer(const std::optional<std::string>& v) const {
        if (!v) return Split::Train;
        auto it = viewer_split.find(*v);
        return it == viewer_split.end() ? Split::Train : it->second;
    }

    std::vector<std::string> images(Split s) const {
        std::vector<std::string> out;
        for (const auto& [id, _] : stimuli)
            if (split_of_image(id) == s) out.push_back(id);
        return out;
    }

    std::vector<std::string> viewers(std::optional<Split> s = std::nullopt) const {
        std::set<std::string> ids;
        for (const auto& p : scanpaths)
            if (p.viewer_id && (!s || split_of_viewer(p.viewer_id) == *s)) ids.insert(*p.viewer_id);
        return {ids.begin(), ids.end()};
    }

    std::vector<const Scanpath*> paths_for(const std::string& stimulus_id) const {
        std::vector<const Scanpath*> out;
        for (const auto& p : scanpaths)
            if (p.stimulus_id == stimulus_id) out.push_back(&p);
        return out;
    }

    // Scanpaths on `image_split` images viewed by `viewer_split` viewers.
    std::vector<const Scanpath*> select(std::optional<Split> image_s, std::optional<Split> viewer_s) const {
        std::vector<const Scanpath*> out;
        for (const auto& p : scanpaths) {
            if (image_s && split_of_image(p.stimulus_id) != *image_s) continue;
            if (viewer_s && split_of_viewer(p.viewer_id) != *viewer_s) continue;
            out.push_back(&p);
        }
        return out;
    }

    void validate() const {
        for (const auto& p : scanpaths) {
            if (!has_stimulus(p.stimulus_id))
                throw ValidationError("scanpath references missing stimulus '" + p.stimulus_id + "'", "stimulus");
            validate_scanpath(p);
        }
    }
};

// Assigns splits from a manifest. Every stimulus must be listed exactly once;
// viewers named in the manifest but absent from the data are ignored.
inline void apply_manifest(Dataset& ds, const SplitManifest& m) {
    ds.image_split.clear();
    ds.viewer_split.clear();
    auto assign = [](std::map<std::string, Split>& dst, const std::vector<std::string>& ids, Split s,
                     const char* field) {
        for (const auto& id : ids) {
            auto [it, inserted] = dst.emplace(id, s);
            if (!inserted && it->second != s)
                throw ValidationError("'" + id + "' listed in both train and test", field);
        }
    };
    assign(ds.image_split, m.train_images, Split::Train, "train_images");
    assign(ds.image_split, m.test_images, Split::Test, "test_images");
    assign(ds.viewer_split, m.train_viewers, Split::Train, "train_viewers");
    assign(ds.viewer_split, m.test_viewers, Split::Test, "test_viewers");
    for (const auto& [id, _] : ds.stimuli)
        if (!ds.image_split.count(id))
            throw ValidationError("stimulus '" + id + "' missing from split manifest", "train_images");
    for (auto it = ds.image_split.begin(); it != ds.image_split.end();)
        it = ds.stimuli.count(it->first) ? std::next(it) : ds.image_split.erase(it);
    for (const auto& v : ds.viewers())
        if (!ds.viewer_split.count(v))
            throw ValidationError("viewer '" + v + "' missing from split manifest", "train_viewers");
}

// Seeded split used when no manifest is supplied. At least one item stays in train.
inline void apply_random_split(Dataset& ds, double test_fraction, std::uint64_t seed,
                               double viewer_test_fraction = 0.0) {
    auto split = [&](std::vector<std::string> ids, double frac, std::map<std::string, Split>& dst) {
        dst.clear();
        std::mt19937_64 rng(seed);
        std::shuffle(ids.begin(), ids.end(), rng);
        std::size_t n_test = static_cast<std::size_t>(std::ceil(frac * static_cast<double>(ids.size())));
        if (!ids.empty()) n_test = std::min(n_test, ids.size() - 1);
        for (std::size_t i = 0; i < ids.size(); ++i) dst[ids[i]] = i < n_test ? Split::Test : Split::Train;
    };
    std::vector<std::string> images;
    for (const auto& [id, _] : ds.stimuli) images.push_back(id);
    split(images, test_fraction, ds.image_split);
    split(ds.viewers(), viewer_test_fraction, ds.viewer_split);
}

inline json manifest_json(const Dataset& ds) {
    json j{{"train_images", json::array()}, {"test_images", json::array()},
           {"train_viewers", json::array()}, {"test_viewers", json::array()}};
    for (const auto& [id, s] : ds.image_split) j[s == Split::Train ? "train_images" : "test_images"].push_back(id);
    for (const auto& [id, s] : ds.viewer_split) j[s == Split::Train ? "train_viewers" : "test_viewers"].push_back(id);
    return j;
}

struct RejectedRecord {
    std::size_t line = 0;
    std::string reason;
};

struct LoadReport {
    std::size_t records_read = 0;
    std::size_t records_accepted = 0;
    std::vector<RejectedRecord> rejected;
};

struct LoadOptions {
    std::string records_file = "scanpaths.jsonl";
    std::string images_dir = "images";
    std::string manifest_file = "split.json";
    double default_test_fraction = 0.1;
    double default_viewer_test_fraction = 0.0;
    std::uint64_t split_seed = 0;
};

// Loads `root/images/*.ppm`, `root/scanpaths.jsonl` and the optional
// `root/split.json`. Records failing validation are rejected and listed in
// the report; structural problems (unparseable lines, missing images) throw.
inline Dataset load_dataset(const fs::path& root, LoadReport* report = nullptr, const LoadOptions& opt = {}) {
    Dataset ds;
    LoadReport local;
    LoadReport& rep = report ? *report : local;
    rep = {};

    const fs::path img_dir = root / opt.images_dir;
    if (!fs::is_directory(img_dir)) throw ValidationError("missing image directory " + img_dir.string(), "images");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(img_dir))
        if (e.is_regular_file() && (e.path().extension() == ".ppm" || e.path().extension() == ".pnm"))
            files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        auto img = read_ppm(f);
        ds.stimuli.emplace(img.id, std::move(img));
    }

    const fs::path rec_path = root / opt.records_file;
    std::ifstream in(rec_path);
    if (!in) throw ValidationError("missing scanpath record file " + rec_path.string(), "scanpaths");
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        RawScanpath raw;
        try {
            raw = parse_record(line);
        } catch (const FormatError& e) {
            throw FormatError(rec_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
        ++rep.records_read;
        auto it = ds.stimuli.find(raw.stimulus_id);
        if (it == ds.stimuli.end())
            throw ValidationError(rec_path.string() + ":" + std::to_string(line_no) + ": no image for stimulus '" +
                                      raw.stimulus_id + "'",
                                  "stimulus");
        try {
            ds.scanpaths.push_back(normalize_scanpath(raw, it->second));
            ++rep.records_accepted;
        } catch (const ValidationError& e) {
            rep.rejected.push_back({line_no, std::string(e.what()) + " (" + e.field() + ")"});
        }
    }

    const fs::path man_path = root / opt.manifest_file;
    if (fs::exists(man_path)) {
        std::ifstream mf(man_path);
        json j;
        try {
            j = json::parse(mf);
        } catch (const json::parse_error& e) {
            throw FormatError("malformed split manifest: " + std::string(e.what()));
        }
        apply_manifest(ds, parse_manifest(j));
    } else {
        apply_random_split(ds, opt.default_test_fraction, opt.split_seed, opt.default_viewer_test_fraction);
    }
    return ds;
}

inline void write_records(const std::vector<Scanpath>& paths, const fs::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw Error("cannot write " + file.string());
    for (const auto& p : paths) out << serialize_record(p) << '\n';
}

inline void save_dataset(const Dataset& ds, const fs::path& root) {
    fs::create_directories(root / "images");
    for (const auto& [id, img] : ds.stimuli) write_ppm(img, root / "images" / (id + ".ppm"));
    write_records(ds.scanpaths, root / "scanpaths.jsonl");
    std::ofstream(root / "split.json") << manifest_json(ds).dump(2) << '\n';
}

// Median first-fixation duration over the given paths; 0.3 s when there are none.
inline double median_first_duration(const std::vector<const Scanpath*>& paths) {
    std::vector<double> d;
    for (const auto* p : paths)
        if (!p->empty()) d.push_back(p->fixations.front().t);
    if (d.empty()) return 0.3;
    std::sort(d.begin(), d.end());
    const std::size_t n = d.size();
    return n % 2 ? d[n / 2] : 0.5 * (d[n / 2 - 1] + d[n / 2]);
}

} // namespace scanflow
