#pragma once

// Reward environment: empirical saliency maps, inhibition-of-return geometry
// and masking, salient-value lookup, and per-episode reward assembly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "scanflow/core.hpp"
#include "scanflow/metrics.hpp"

namespace scanflow {

// Ellipse, in input-resolution px, inside which the saliency is suppressed.
struct Inhibition {
    double cx = 0, cy = 0;
    double m_w = 0, m_h = 0;

    bool contains(double px, double py) const {
        const double dx = px - cx, dy = py - cy;
        return dx * dx / (m_w * m_w) + dy * dy / (m_h * m_h) <= 1.0;
    }
};

// Non-negative grid at the model input resolution, row-major. Cell (c, r)
// is centred at normalized ((c + 0.5) / width, (r + 0.5) / height).
struct SaliencyMap {
    int width = 0;
    int height = 0;
    std::vector<double> values;
    std::vector<Inhibition> inhibitions;  // masks applied so far

    SaliencyMap() = default;
    SaliencyMap(int w, int h) : width(w), height(h), values(static_cast<std::size_t>(w) * h, 0.0) {
        if (w <= 0 || h <= 0) throw ValidationError("saliency grid dimensions must be positive", "saliency");
    }

    double& at(int c, int r) { return values[static_cast<std::size_t>(r) * width + c]; }
    double at(int c, int r) const { return values[static_cast<std::size_t>(r) * width + c]; }

    double max_value() const { return values.empty() ? 0.0 : *std::max_element(values.begin(), values.end()); }

    void normalize_max() {
        const double m = max_value();
        if (m > 0)
            for (auto& v : values) v /= m;
    }

    void validate() const {
        if (width <= 0 || height <= 0 || values.size() != static_cast<std::size_t>(width) * height)
            throw ValidationError("saliency grid shape mismatch", "saliency");
        for (double v : values)
            if (!std::isfinite(v) || v < 0) throw ValidationError("saliency values must be finite and >= 0", "saliency");
    }
};

// Isotropic Gaussian splat (sigma in grid cells) at every fixation, summed and
// scaled to a maximum of 1.
inline SaliencyMap build_empirical_saliency(std::span<const Fixation> fixations, int w_inp, int h_inp, double sigma) {
    if (fixations.empty()) throw ValidationError("no fixations for saliency", "fixations");
    if (!(sigma > 0)) throw ValidationError("sigma must be positive", "sigma");
    SaliencyMap map(w_inp, h_inp);
    const int reach = static_cast<int>(std::ceil(4.0 * sigma));
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for (const auto& f : fixations) {
        const double fx = f.x * w_inp, fy = f.y * h_inp;
        const int c0 = std::max(0, static_cast<int>(std::floor(fx)) - reach);
        const int c1 = std::min(w_inp - 1, static_cast<int>(std::floor(fx)) + reach);
        const int r0 = std::max(0, static_cast<int>(std::floor(fy)) - reach);
        const int r1 = std::min(h_inp - 1, static_cast<int>(std::floor(fy)) + reach);
        for (int r = r0; r <= r1; ++r) {
            const double dy = r + 0.5 - fy;
            for (int c = c0; c <= c1; ++c) {
                const double dx = c + 0.5 - fx;
                map.at(c, r) += std::exp(-(dx * dx + dy * dy) * inv2s2);
            }
        }
    }
    map.normalize_max();
    return map;
}

// ---------------------------------------------------------------------------
// Inhibition-of-return geometry

struct IorGeometry {
    double m_orig = 0;  // inhibition extent in original-image px
    double m_w = 0;     // horizontal semi-axis, input px
    double m_h = 0;     // vertical semi-axis, input px
    int w_inp = 0, h_inp = 0;
};

// Carries the display-space inhibition extent to the image, then to the
// (possibly anisotropic) model input resolution.
inline IorGeometry ior_geometry(double m_display, double display_w, double display_h, double image_w,
                                double image_h, int w_inp, int h_inp) {
    if (!(m_display > 0) || !(display_w > 0) || !(display_h > 0))
        throw ValidationError("display geometry must be positive", "display");
    if (!(image_w > 0) || !(image_h > 0)) throw ValidationError("image dimensions must be positive", "image");
    if (w_inp <= 0 || h_inp <= 0) throw ValidationError("input dimensions must be positive", "w_inp");
    IorGeometry g;
    g.m_orig = m_display / std::min(display_w / image_w, display_h / image_h);
    g.m_w = static_cast<double>(w_inp) / image_w * g.m_orig;
    g.m_h = static_cast<double>(h_inp) / image_h * g.m_orig;
    g.w_inp = w_inp;
    g.h_inp = h_inp;
    return g;
}

inline IorGeometry ior_geometry(const DisplayConfig& display, const StimulusImage& image, int w_inp, int h_inp) {
    display.validate();
    validate_image(image);
    return ior_geometry(display.m_display, display.width_px, display.height_px, image.width, image.height, w_inp,
                        h_inp);
}

// Returns a copy with every cell inside a prior fixation's ellipse set to 0.
inline SaliencyMap apply_ior(const SaliencyMap& map, std::span<const Fixation> prior, const IorGeometry& geom) {
    SaliencyMap out = map;
    for (const auto& f : prior) {
        Inhibition inh{f.x * map.width, f.y * map.height, geom.m_w, geom.m_h};
        const int c0 = std::max(0, static_cast<int>(std::floor(inh.cx - geom.m_w - 1)));
        const int c1 = std::min(map.width - 1, static_cast<int>(std::ceil(inh.cx + geom.m_w + 1)));
        const int r0 = std::max(0, static_cast<int>(std::floor(inh.cy - geom.m_h - 1)));
        const int r1 = std::min(map.height - 1, static_cast<int>(std::ceil(inh.cy + geom.m_h + 1)));
        for (int r = r0; r <= r1; ++r)
            for (int c = c0; c <= c1; ++c)
                if (inh.contains(c + 0.5, r + 0.5)) out.at(c, r) = 0.0;
        out.inhibitions.push_back(inh);
    }
    return out;
}

// Bilinear lookup at a normalized point. Points outside [0,1]^2 and points
// inside any recorded inhibition ellipse score 0.
inline double salient_value(const SaliencyMap& map, double x, double y) {
    if (!(x >= 0.0 && x <= 1.0 && y >= 0.0 && y <= 1.0)) return 0.0;
    const double px = x * map.width, py = y * map.height;
    for (const auto& inh : map.inhibitions)
        if (inh.contains(px, py)) return 0.0;
    const double u = std::clamp(px - 0.5, 0.0, static_cast<double>(map.width - 1));
    const double v = std::clamp(py - 0.5, 0.0, static_cast<double>(map.height - 1));
    const int c0 = static_cast<int>(std::floor(u)), r0 = static_cast<int>(std::floor(v));
    const int c1 = std::min(c0 + 1, map.width - 1), r1 = std::min(r0 + 1, map.height - 1);
    const double fu = u - c0, fv = v - r0;
    const double top = map.at(c0, r0) * (1 - fu) + map.at(c1, r0) * fu;
    const double bot = map.at(c0, r1) * (1 - fu) + map.at(c1, r1) * fu;
    return std::clamp(top * (1 - fv) + bot * fv, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Episode reward

// Reward toggles; each ablation arm flips exactly one of these off.
struct RewardFlags {
    bool use_r_sal = true;
    bool use_r_dtwd = true;
    bool use_ior = true;
    double w_sal = 1.0;
    double w_dtwd = 1.0;
};

struct RewardBreakdown {
    double r_dtwd = 0.0;
    std::vector<double> r_sal_steps;
    double total = 0.0;
};

// total = -w_dtwd * dtwd(predicted, truth) + w_sal * sum_i r_sal(i), where
// step i reads the map masked by predicted fixations 1..i-1.
inline RewardBreakdown episode_reward(const Scanpath& predicted, const Scanpath& ground_truth, const SaliencyMap& map,
                                      const IorGeometry& geom, const RewardFlags& flags = {}) {
    if (predicted.stimulus_id != ground_truth.stimulus_id)
        throw ValidationError("predicted and ground-truth scanpaths refer to different stimuli", "stimulus");
    if (predicted.empty()) throw ValidationError("predicted scanpath is empty", "fixations");
    RewardBreakdown r;
    if (flags.use_r_dtwd) r.r_dtwd = metrics::dtwd(predicted, ground_truth);
    r.r_sal_steps.assign(predicted.size(), 0.0);
    if (flags.use_r_sal) {
        SaliencyMap masked = map;
        for (std::size_t i = 0; i < predicted.size(); ++i) {
            const auto& f = predicted[i];
            r.r_sal_steps[i] = salient_value(masked, f.x, f.y);
            if (flags.use_ior) masked = apply_ior(masked, std::span(&f, 1), geom);
        }
    }
    double sal = 0.0;
    for (double v : r.r_sal_steps) sal += v;
    r.total = -flags.w_dtwd * r.r_dtwd + flags.w_sal * sal;
    return r;
}

// ---------------------------------------------------------------------------
// Saliency grid files: "SALG", u32 width, u32 height (LE), row-major f32 LE.

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("unexpected end of file");
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

inline void put_f32(std::ostream& out, double v) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
}

inline float get_f32(std::istream& in) {
    const std::uint32_t bits = get_u32(in);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

} // namespace detail

inline void write_saliency_grid(const SaliencyMap& map, const fs::path& path) {
    map.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out.write("SALG", 4);
    detail::put_u32(out, static_cast<std::uint32_t>(map.width));
    detail::put_u32(out, static_cast<std::uint32_t>(map.height));
    for (double v : map.values) detail::put_f32(out, v);
}

inline SaliencyMap read_saliency_grid(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "SALG", 4) != 0) throw FormatError("not a SALG file: " + path.string());
    const auto w = detail::get_u32(in), h = detail::get_u32(in);
    if (w == 0 || h == 0 || w > 65536 || h > 65536) throw FormatError("bad SALG dimensions in " + path.string());
    SaliencyMap map(static_cast<int>(w), static_cast<int>(h));
    for (auto& v : map.values) v = detail::get_f32(in);
    map.validate();
    return map;
}

// ---------------------------------------------------------------------------
// Environment providers

// Everything the reward needs for one stimulus.
struct StimulusEnv {
    SaliencyMap saliency;
    IorGeometry geometry;
};

class SaliencyProvider {
public:
    virtual ~SaliencyProvider() = default;
    virtual StimulusEnv env(const std::string& stimulus_id) const = 0;
};

// Sigma, in input grid cells, equivalent to `deg` degrees of visual angle,
// carried through the same display->image->input scaling as the IOR extent.
inline double saliency_sigma_cells(const DisplayConfig& display, const StimulusImage& image, int w_inp, int h_inp,
                                   double deg = 1.0) {
    const double px = display.px_per_degree() * deg;
    const auto g = ior_geometry(px, display.width_px, display.height_px, image.width, image.height, w_inp, h_inp);
    return std::sqrt(g.m_w * g.m_h);
}

// Fixation-density saliency built from training viewers' scanpaths.
class EmpiricalSaliencyProvider : public SaliencyProvider {
public:
    EmpiricalSaliencyProvider(const Dataset& ds, DisplayConfig display, int w_inp, int h_inp, double sigma_deg = 1.0)
        : display_(display), w_inp_(w_inp), h_inp_(h_inp) {
        display_.validate();
        std::map<std::string, std::vector<Fixation>> fixations;
        for (const auto& p : ds.scanpaths) {
            if (ds.split_of_viewer(p.viewer_id) != Split::Train) continue;
            auto& v = fixations[p.stimulus_id];
            v.insert(v.end(), p.fixations.begin(), p.fixations.end());
        }
        for (const auto& [id, img] : ds.stimuli) {
            const auto geom = ior_geometry(display_, img, w_inp_, h_inp_);
            const double sigma = saliency_sigma_cells(display_, img, w_inp_, h_inp_, sigma_deg);
            auto it = fixations.find(id);
            SaliencyMap map = it == fixations.end() ? uniform_map() : build_empirical_saliency(it->second, w_inp_, h_inp_, sigma);
            envs_.emplace(id, StimulusEnv{std::move(map), geom});
        }
    }

    StimulusEnv env(const std::string& stimulus_id) const override {
        auto it = envs_.find(stimulus_id);
        if (it == envs_.end()) throw ValidationError("no saliency for stimulus '" + stimulus_id + "'", "stimulus");
        return it->second;
    }

    void add(const std::string& id, StimulusEnv env) { envs_[id] = std::move(env); }

private:
    SaliencyMap uniform_map() const {
        SaliencyMap m(w_inp_, h_inp_);
        std::fill(m.values.begin(), m.values.end(), 1.0);
        return m;
    }

    DisplayConfig display_;
    int w_inp_, h_inp_;
    std::map<std::string, StimulusEnv> envs_;
};

// Reads `<dir>/<stimulus>.salg` grids; geometry from the display config.
class FileSaliencyProvider : public SaliencyProvider {
public:
    FileSaliencyProvider(fs::path dir, const Dataset& ds, DisplayConfig display, int w_inp, int h_inp)
        : dir_(std::move(dir)), ds_(&ds), display_(display), w_inp_(w_inp), h_inp_(h_inp) {}

    StimulusEnv env(const std::string& stimulus_id) const override {
        auto map = read_saliency_grid(dir_ / (stimulus_id + ".salg"));
        if (map.width != w_inp_ || map.height != h_inp_)
            throw ValidationError("saliency grid for '" + stimulus_id + "' does not match the input resolution",
                                  "saliency");
        return {std::move(map), ior_geometry(display_, ds_->stimulus(stimulus_id), w_inp_, h_inp_)};
    }

private:
    fs::path dir_;
    const Dataset* ds_;
    DisplayConfig display_;
    int w_inp_, h_inp_;
};

} // namespace scanflow
