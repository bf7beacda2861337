#pragma once

// Visual-flow layout optimization: grid enumeration of candidate layouts,
// fixation-order checking on predicted scanpaths, and duration maximization.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "scanflow/core.hpp"
#include "scanflow/model.hpp"

namespace scanflow::layout {

using nlohmann::json;

struct Rect {
    double x = 0, y = 0, w = 0, h = 0;

    double cx() const { return x + w / 2; }
    double cy() const { return y + h / 2; }
    bool contains(double px, double py) const { return px >= x && px <= x + w && py >= y && py <= y + h; }
    friend bool operator==(const Rect&, const Rect&) = default;
};

inline constexpr double kEps = 1e-12;

// Interiors intersect (shared edges do not count).
inline bool overlaps(const Rect& a, const Rect& b) {
    return a.x < b.x + b.w - kEps && b.x < a.x + a.w - kEps && a.y < b.y + b.h - kEps && b.y < a.y + a.h - kEps;
}

struct Span {
    int cols = 1, rows = 1;
    friend bool operator==(const Span&, const Span&) = default;
};

struct Cell {
    int row = 0, col = 0;
    friend bool operator==(const Cell&, const Cell&) = default;
};

struct LayoutElement {
    std::string id;
    Rect rect;                          // current/initial placement, normalized
    std::vector<Span> size_classes;     // allowed grid spans; empty: 1x1
    bool fixed = false;
    std::vector<Cell> allowed_cells;    // allowed top-left anchors; empty: any
    std::string image;                  // optional PPM crop rendered into the rect
    std::optional<std::array<std::uint8_t, 3>> color;
};

struct LayoutSpec {
    int canvas_w = 512, canvas_h = 512;
    int rows = 2, cols = 2;
    std::vector<LayoutElement> elements;
    std::vector<std::string> order;     // designer's priority order, may be empty
    std::size_t cap = 10000;            // maximum candidate count

    const LayoutElement* find(const std::string& id) const {
        for (const auto& e : elements)
            if (e.id == id) return &e;
        return nullptr;
    }
};

// Element geometry must be on-canvas, positive, with unique ids and no
// overlapping interiors.
inline void validate_layout(const LayoutSpec& s) {
    if (s.canvas_w <= 0 || s.canvas_h <= 0) throw ValidationError("canvas dimensions must be positive", "canvas");
    if (s.rows <= 0 || s.cols <= 0) throw ValidationError("grid dimensions must be positive", "grid");
    std::set<std::string> ids;
    for (const auto& e : s.elements) {
        if (e.id.empty()) throw ValidationError("element id must not be empty", "elements");
        if (!ids.insert(e.id).second) throw ValidationError("duplicate element id '" + e.id + "'", "elements");
        const auto& r = e.rect;
        if (!(r.w > 0) || !(r.h > 0)) throw ValidationError("element '" + e.id + "' has empty rect", "elements");
        if (r.x < -kEps || r.y < -kEps || r.x + r.w > 1 + 1e-9 || r.y + r.h > 1 + 1e-9)
            throw ValidationError("element '" + e.id + "' lies outside the canvas", "elements");
        for (const auto& sc : e.size_classes)
            if (sc.cols < 1 || sc.rows < 1 || sc.cols > s.cols || sc.rows > s.rows)
                throw ValidationError("element '" + e.id + "' has an invalid size class", "elements");
    }
    for (std::size_t i = 0; i < s.elements.size(); ++i)
        for (std::size_t j = i + 1; j < s.elements.size(); ++j)
            if (overlaps(s.elements[i].rect, s.elements[j].rect))
                throw ValidationError("elements '" + s.elements[i].id + "' and '" + s.elements[j].id + "' overlap",
                                      "elements");
}

inline void validate_order(const LayoutSpec& s, const std::vector<std::string>& order) {
    if (order.empty()) throw ValidationError("order requirement is empty", "order");
    std::set<std::string> seen;
    for (const auto& id : order) {
        if (!s.find(id)) throw ValidationError("order references unknown element '" + id + "'", "order");
        if (!seen.insert(id).second) throw ValidationError("order repeats element '" + id + "'", "order");
    }
}

// Element under the fixation; on shared edges the lexicographically lowest id wins.
inline std::optional<std::string> element_hit_test(const Fixation& f, const LayoutSpec& layout) {
    validate_layout(layout);
    std::optional<std::string> hit;
    for (const auto& e : layout.elements)
        if (e.rect.contains(f.x, f.y) && (!hit || e.id < *hit)) hit = e.id;
    return hit;
}

struct OrderCheck {
    bool satisfied = false;
    std::size_t start = 0;  // 1-based index of the first fixation of the run, 0 if none
    std::size_t M = 0;      // 1-based index of the last fixation of the qualifying run
    std::vector<std::optional<std::string>> hits;
};

// Leading background fixations are skipped; once the run has started, a
// background fixation ends it. Consecutive repeats collapse, and the
// requirement must be a prefix of the collapsed sequence.
inline OrderCheck check_order_constraint(const Scanpath& path, const LayoutSpec& layout,
                                         const std::vector<std::string>& req) {
    OrderCheck c;
    for (const auto& f : path.fixations) c.hits.push_back(element_hit_test(f, layout));
    if (req.empty()) return c;
    std::size_t i = 0;
    while (i < c.hits.size() && !c.hits[i]) ++i;
    if (i == c.hits.size()) return c;
    c.start = i + 1;
    std::size_t matched = 0;  // req elements matched so far
    std::optional<std::string> prev;
    for (; i < c.hits.size() && c.hits[i]; ++i) {
        const auto& h = *c.hits[i];
        if (prev && h == *prev) {
            if (matched == req.size() && h == req.back()) c.M = i + 1;
            continue;
        }
        if (matched == req.size()) break;
        if (h != req[matched]) break;
        ++matched;
        prev = h;
        if (matched == req.size()) c.M = i + 1;
    }
    c.satisfied = matched == req.size();
    if (!c.satisfied) {
        c.M = 0;
        c.start = 0;
    }
    return c;
}

// Summed duration of the qualifying run's fixations.
inline double duration_objective(const Scanpath& path, const LayoutSpec& layout, const std::vector<std::string>& req) {
    const auto c = check_order_constraint(path, layout, req);
    if (!c.satisfied) throw ValidationError("scanpath does not satisfy the order requirement", "order");
    double s = 0.0;
    for (std::size_t m = c.start; m <= c.M; ++m) s += path.fixations[m - 1].t;
    return s;
}

// ---------------------------------------------------------------------------
// Enumeration

inline Rect cell_rect(const LayoutSpec& s, int row, int col, const Span& span) {
    return {static_cast<double>(col) / s.cols, static_cast<double>(row) / s.rows,
            static_cast<double>(span.cols) / s.cols, static_cast<double>(span.rows) / s.rows};
}

namespace detail {

inline std::vector<Rect> options_for(const LayoutSpec& s, const LayoutElement& e) {
    std::vector<Rect> out;
    const std::vector<Span> spans = e.size_classes.empty() ? std::vector<Span>{Span{}} : e.size_classes;
    for (const auto& sp : spans)
        for (int r = 0; r + sp.rows <= s.rows; ++r)
            for (int c = 0; c + sp.cols <= s.cols; ++c) {
                if (!e.allowed_cells.empty() &&
                    std::find(e.allowed_cells.begin(), e.allowed_cells.end(), Cell{r, c}) == e.allowed_cells.end())
                    continue;
                out.push_back(cell_rect(s, r, c, sp));
            }
    return out;
}

// Depth-first over movable elements in spec order; `visit` returns false to stop.
template <class Visit>
bool enumerate(const LayoutSpec& s, const std::vector<std::size_t>& movable,
               const std::vector<std::vector<Rect>>& options, std::size_t depth, LayoutSpec& cur, Visit&& visit) {
    if (depth == movable.size()) return visit(cur);
    auto& e = cur.elements[movable[depth]];
    for (const auto& r : options[depth]) {
        bool ok = true;
        for (std::size_t i = 0; i < cur.elements.size() && ok; ++i) {
            if (i == movable[depth]) continue;
            const bool placed = s.elements[i].fixed ||
                                std::find(movable.begin(), movable.begin() + static_cast<long>(depth), i) !=
                                    movable.begin() + static_cast<long>(depth);
            if (placed && overlaps(r, cur.elements[i].rect)) ok = false;
        }
        if (!ok) continue;
        e.rect = r;
        if (!enumerate(s, movable, options, depth + 1, cur, visit)) return false;
    }
    return true;
}

} // namespace detail

// Calls `visit(layout)` for every candidate in deterministic order.
template <class Visit>
void for_each_layout(const LayoutSpec& spec, Visit&& visit) {
    std::vector<std::size_t> movable;
    std::vector<std::vector<Rect>> options;
    for (std::size_t i = 0; i < spec.elements.size(); ++i)
        if (!spec.elements[i].fixed) {
            movable.push_back(i);
            options.push_back(detail::options_for(spec, spec.elements[i]));
        }
    LayoutSpec cur = spec;
    detail::enumerate(spec, movable, options, 0, cur, visit);
}

// Candidate count, stopping once it passes `limit`.
inline std::size_t count_layouts(const LayoutSpec& spec, std::size_t limit) {
    std::size_t n = 0;
    for_each_layout(spec, [&](const LayoutSpec&) { return ++n <= limit; });
    return n;
}

inline std::vector<LayoutSpec> enumerate_layouts(const LayoutSpec& spec) {
    if (spec.rows <= 0 || spec.cols <= 0) throw ValidationError("grid dimensions must be positive", "grid");
    for (const auto& e : spec.elements)
        if (e.fixed) {
            for (const auto& o : spec.elements)
                if (&o != &e && o.fixed && overlaps(o.rect, e.rect))
                    throw ValidationError("fixed elements '" + e.id + "' and '" + o.id + "' overlap", "elements");
        }
    const std::size_t n = count_layouts(spec, spec.cap);
    if (n > spec.cap)
        throw ValidationError("more than " + std::to_string(spec.cap) +
                                  " candidate layouts; pin elements or restrict size classes/cells",
                              "cap");
    std::vector<LayoutSpec> out;
    out.reserve(n);
    for_each_layout(spec, [&](const LayoutSpec& l) {
        out.push_back(l);
        return true;
    });
    return out;
}

// ---------------------------------------------------------------------------
// Rendering

inline std::array<std::uint8_t, 3> palette(std::size_t i) {
    static const std::array<std::array<std::uint8_t, 3>, 8> p{{{{230, 60, 50}},
                                                               {{50, 180, 70}},
                                                               {{60, 90, 230}},
                                                               {{230, 200, 40}},
                                                               {{160, 70, 200}},
                                                               {{40, 190, 200}},
                                                               {{240, 140, 40}},
                                                               {{120, 120, 120}}}};
    return p[i % p.size()];
}

// Composites element crops (or flat placeholder blocks) onto a neutral canvas.
inline StimulusImage render_layout(const LayoutSpec& layout, const std::string& id = "layout") {
    StimulusImage img;
    img.id = id;
    img.width = layout.canvas_w;
    img.height = layout.canvas_h;
    img.pixels.assign(static_cast<std::size_t>(img.width) * img.height * 3, 200);
    for (std::size_t i = 0; i < layout.elements.size(); ++i) {
        const auto& e = layout.elements[i];
        const int x0 = static_cast<int>(std::lround(e.rect.x * img.width));
        const int y0 = static_cast<int>(std::lround(e.rect.y * img.height));
        const int x1 = static_cast<int>(std::lround((e.rect.x + e.rect.w) * img.width));
        const int y1 = static_cast<int>(std::lround((e.rect.y + e.rect.h) * img.height));
        if (!e.image.empty()) {
            const auto crop = read_ppm(e.image);
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x) {
                    const int sx = std::min(crop.width - 1, (x - x0) * crop.width / std::max(1, x1 - x0));
                    const int sy = std::min(crop.height - 1, (y - y0) * crop.height / std::max(1, y1 - y0));
                    std::copy_n(crop.at(sx, sy), 3, img.at(x, y));
                }
            continue;
        }
        const auto c = e.color.value_or(palette(i));
        // inset by one pixel so adjacent blocks stay distinguishable
        img.fill_rect(x0 + 1, y0 + 1, x1 - 1, y1 - 1, c[0], c[1], c[2]);
    }
    return img;
}

// ---------------------------------------------------------------------------
// Predictors

class ScanpathPredictor {
public:
    virtual ~ScanpathPredictor() = default;
    // One or more predicted scanpaths for a rendered candidate.
    virtual std::vector<Scanpath> predict(const LayoutSpec& layout, const StimulusImage& rendered,
                                          const std::optional<std::string>& viewer) const = 0;
    // Viewers the population scope aggregates over; empty means one
    // population-level prediction.
    virtual std::vector<std::string> viewers() const { return {}; }
};

struct ModelPredictorOptions {
    RolloutMode mode = RolloutMode::Greedy;
    int samples = 8;          // ensemble size in sample mode
    std::uint64_t seed = 0;
};

class ModelPredictor : public ScanpathPredictor {
public:
    ModelPredictor(const PolicyModel& model, ModelPredictorOptions opt = {}) : model_(&model), opt_(opt) {}

    std::vector<Scanpath> predict(const LayoutSpec&, const StimulusImage& rendered,
                                  const std::optional<std::string>& viewer) const override {
        const auto patches = model_->patchify(rendered);
        if (opt_.mode == RolloutMode::Greedy)
            return {model_->rollout_patches(patches, rendered.id, viewer, RolloutMode::Greedy, 0).path};
        std::vector<Scanpath> out;
        for (int k = 0; k < opt_.samples; ++k)
            out.push_back(model_->rollout_patches(patches, rendered.id, viewer, RolloutMode::Sample,
                                                  opt_.seed + static_cast<std::uint64_t>(k))
                              .path);
        return out;
    }

    std::vector<std::string> viewers() const override {
        return model_->mode() == Mode::Individual ? model_->viewer_ids() : std::vector<std::string>{};
    }

private:
    const PolicyModel* model_;
    ModelPredictorOptions opt_;
};

enum class ScanOrder { RowMajor, ColumnMajor };

// Deterministic reader: starts at the canvas centre, then visits element
// centres in reading order. Durations grow with element area.
class ScriptedPredictor : public ScanpathPredictor {
public:
    explicit ScriptedPredictor(ScanOrder order = ScanOrder::RowMajor) : default_(order) {}
    explicit ScriptedPredictor(std::map<std::string, ScanOrder> viewers) : viewers_(std::move(viewers)) {}

    static double duration_for(const Rect& r) { return 0.15 + 0.8 * r.w * r.h + 0.05 * r.y; }

    static Scanpath scan(const LayoutSpec& layout, ScanOrder order, const std::string& stimulus) {
        std::vector<const LayoutElement*> els;
        for (const auto& e : layout.elements) els.push_back(&e);
        std::sort(els.begin(), els.end(), [&](const LayoutElement* a, const LayoutElement* b) {
            const auto ka = order == ScanOrder::RowMajor ? std::tuple(a->rect.y, a->rect.x, a->id)
                                                         : std::tuple(a->rect.x, a->rect.y, a->id);
            const auto kb = order == ScanOrder::RowMajor ? std::tuple(b->rect.y, b->rect.x, b->id)
                                                         : std::tuple(b->rect.x, b->rect.y, b->id);
            return ka < kb;
        });
        Scanpath p{stimulus, std::nullopt, {{0.5, 0.5, 0.3}}};
        for (const auto* e : els) p.fixations.push_back({e->rect.cx(), e->rect.cy(), duration_for(e->rect)});
        return p;
    }

    std::vector<Scanpath> predict(const LayoutSpec& layout, const StimulusImage& rendered,
                                  const std::optional<std::string>& viewer) const override {
        ScanOrder order = default_;
        if (viewer) {
            auto it = viewers_.find(*viewer);
            if (it == viewers_.end()) throw ValidationError("unknown viewer '" + *viewer + "'", "viewer");
            order = it->second;
        }
        auto p = scan(layout, order, rendered.id);
        p.viewer_id = viewer;
        return {p};
    }

    std::vector<std::string> viewers() const override {
        std::vector<std::string> ids;
        for (const auto& [id, _] : viewers_) ids.push_back(id);
        return ids;
    }

private:
    ScanOrder default_ = ScanOrder::RowMajor;
    std::map<std::string, ScanOrder> viewers_;
};

// ---------------------------------------------------------------------------
// Optimization

struct ViewerOutcome {
    std::optional<std::string> viewer;
    bool satisfied = false;
    double objective = 0.0;      // mean over passing predictions
    std::size_t M = 0;           // of the first passing prediction
    double pass_fraction = 0.0;  // passing predictions / predictions
    Scanpath path;               // first prediction
};

struct OptimizationResult {
    LayoutSpec layout;
    bool constraint_satisfied = false;
    double objective = 0.0;          // mean over passing viewers
    std::size_t M = 0;
    std::size_t pass_count = 0;      // viewers following the order
    std::size_t viewer_count = 0;
    std::size_t candidates = 0;
    std::vector<ViewerOutcome> per_viewer;
};

struct OptimizeOptions {
    double vote_threshold = 0.5;     // share of passing predictions (or viewers) that counts as satisfied
    std::optional<std::string> viewer;  // scope: one viewer; nullopt is population
    std::function<void(double)> on_progress;
};

inline ViewerOutcome evaluate_viewer(const LayoutSpec& layout, const StimulusImage& rendered,
                                     const std::vector<std::string>& req, const ScanpathPredictor& pred,
                                     const std::optional<std::string>& viewer, double threshold) {
    ViewerOutcome o;
    o.viewer = viewer;
    const auto paths = pred.predict(layout, rendered, viewer);
    if (paths.empty()) throw Error("predictor returned no scanpaths");
    o.path = paths.front();
    std::size_t pass = 0;
    double obj = 0.0;
    for (const auto& p : paths) {
        const auto c = check_order_constraint(p, layout, req);
        if (!c.satisfied) continue;
        if (pass == 0) o.M = c.M;
        ++pass;
        obj += duration_objective(p, layout, req);
    }
    o.pass_fraction = static_cast<double>(pass) / paths.size();
    o.satisfied = pass > 0 && o.pass_fraction >= threshold;
    o.objective = pass ? obj / pass : 0.0;
    if (!o.satisfied) o.M = 0;
    return o;
}

// Scores one candidate for the scope's viewers.
inline OptimizationResult evaluate_layout(const LayoutSpec& layout, const std::vector<std::string>& req,
                                          const ScanpathPredictor& pred, const OptimizeOptions& opt) {
    OptimizationResult r;
    r.layout = layout;
    std::vector<std::optional<std::string>> scope;
    if (opt.viewer) scope.push_back(opt.viewer);
    else {
        for (const auto& v : pred.viewers()) scope.emplace_back(v);
        if (scope.empty()) scope.emplace_back(std::nullopt);
    }
    const auto rendered = render_layout(layout);
    double obj = 0.0;
    for (const auto& v : scope) {
        auto o = evaluate_viewer(layout, rendered, req, pred, v, opt.vote_threshold);
        if (o.satisfied) {
            if (r.pass_count == 0) r.M = o.M;
            ++r.pass_count;
            obj += o.objective;
        }
        r.per_viewer.push_back(std::move(o));
    }
    r.viewer_count = scope.size();
    r.objective = r.pass_count ? obj / r.pass_count : 0.0;
    r.constraint_satisfied =
        r.pass_count > 0 && static_cast<double>(r.pass_count) / r.viewer_count >= opt.vote_threshold;
    return r;
}

// Exhaustive search: the best candidate maximizes the number of viewers
// following the order, then the mean duration objective. Ties keep the
// earliest candidate in enumeration order.
inline OptimizationResult optimize(const LayoutSpec& spec, const std::vector<std::string>& req,
                                   const ScanpathPredictor& pred, const OptimizeOptions& opt = {}) {
    validate_layout(spec);
    validate_order(spec, req);
    if (opt.viewer) {
        const auto vs = pred.viewers();
        if (std::find(vs.begin(), vs.end(), *opt.viewer) == vs.end())
            throw ValidationError("no personalized embedding for viewer '" + *opt.viewer + "'", "scope");
    }
    const auto candidates = enumerate_layouts(spec);
    std::optional<OptimizationResult> best;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        auto r = evaluate_layout(candidates[i], req, pred, opt);
        const bool better = !best || r.pass_count > best->pass_count ||
                            (r.pass_count == best->pass_count && r.objective > best->objective);
        if (better) best = std::move(r);
        if (opt.on_progress) opt.on_progress(static_cast<double>(i + 1) / candidates.size());
    }
    best->candidates = candidates.size();
    return *best;
}

// ---------------------------------------------------------------------------
// JSON

inline void to_json(json& j, const Rect& r) { j = json::array({r.x, r.y, r.w, r.h}); }

inline void from_json(const json& j, Rect& r) {
    if (j.is_array()) {
        if (j.size() != 4) throw ValidationError("rect must have four numbers", "rect");
        r = {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
    } else {
        r = {j.at("x").get<double>(), j.at("y").get<double>(), j.at("w").get<double>(), j.at("h").get<double>()};
    }
}

inline json element_json(const LayoutElement& e) {
    json sc = json::array();
    for (const auto& s : e.size_classes) sc.push_back({s.cols, s.rows});
    json j{{"id", e.id}, {"rect", e.rect}, {"size_class", sc}, {"fixed", e.fixed}};
    if (!e.allowed_cells.empty()) {
        json cells = json::array();
        for (const auto& c : e.allowed_cells) cells.push_back({c.row, c.col});
        j["allowed_cells"] = cells;
    }
    if (!e.image.empty()) j["image"] = e.image;
    if (e.color) j["color"] = {(*e.color)[0], (*e.color)[1], (*e.color)[2]};
    return j;
}

inline json spec_json(const LayoutSpec& s) {
    json els = json::array();
    for (const auto& e : s.elements) els.push_back(element_json(e));
    return {{"canvas", {{"w", s.canvas_w}, {"h", s.canvas_h}}},
            {"grid", {{"rows", s.rows}, {"cols", s.cols}}},
            {"elements", els},
            {"order", s.order},
            {"cap", s.cap}};
}

inline LayoutSpec parse_spec(const json& j) {
    LayoutSpec s;
    try {
        if (!j.is_object()) throw ValidationError("layout spec must be a JSON object", "layout_spec");
        if (j.contains("canvas")) {
            s.canvas_w = j["canvas"].at("w").get<int>();
            s.canvas_h = j["canvas"].at("h").get<int>();
        }
        if (j.contains("grid")) {
            s.rows = j["grid"].at("rows").get<int>();
            s.cols = j["grid"].at("cols").get<int>();
        }
        if (!j.contains("elements") || !j["elements"].is_array())
            throw ValidationError("layout spec needs an 'elements' array", "elements");
        for (const auto& ej : j["elements"]) {
            LayoutElement e;
            e.id = ej.at("id").get<std::string>();
            e.rect = ej.at("rect").get<Rect>();
            if (ej.contains("size_class"))
                for (const auto& sc : ej["size_class"]) {
                    if (!sc.is_array() || sc.size() != 2) throw ValidationError("size_class entries are [cols, rows]", "size_class");
                    e.size_classes.push_back({sc[0].get<int>(), sc[1].get<int>()});
                }
            e.fixed = ej.value("fixed", false);
            if (ej.contains("allowed_cells"))
                for (const auto& c : ej["allowed_cells"]) e.allowed_cells.push_back({c.at(0).get<int>(), c.at(1).get<int>()});
            e.image = ej.value("image", std::string());
            if (ej.contains("color"))
                e.color = std::array<std::uint8_t, 3>{ej["color"].at(0).get<std::uint8_t>(),
                                                      ej["color"].at(1).get<std::uint8_t>(),
                                                      ej["color"].at(2).get<std::uint8_t>()};
            s.elements.push_back(std::move(e));
        }
        if (j.contains("order")) s.order = j["order"].get<std::vector<std::string>>();
        s.cap = j.value("cap", s.cap);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed layout spec: ") + e.what(), "layout_spec");
    }
    validate_layout(s);
    return s;
}

inline LayoutSpec load_spec(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open layout spec " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw FormatError("malformed layout spec " + path.string() + ": " + e.what());
    }
    return parse_spec(j);
}

inline json result_json(const OptimizationResult& r) {
    json pv = json::array();
    for (const auto& o : r.per_viewer)
        pv.push_back({{"viewer", o.viewer ? json(*o.viewer) : json(nullptr)},
                      {"satisfied", o.satisfied},
                      {"objective", o.objective},
                      {"M", o.M},
                      {"pass_fraction", o.pass_fraction},
                      {"scanpath", record_json(o.path)}});
    return {{"layout", spec_json(r.layout)},
            {"constraint_satisfied", r.constraint_satisfied},
            {"objective", r.objective},
            {"M", r.M},
            {"pass_count", r.pass_count},
            {"viewer_count", r.viewer_count},
            {"candidates", r.candidates},
            {"per_viewer", pv}};
}

} // namespace scanflow::layout
