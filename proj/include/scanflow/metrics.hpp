#pragma once

// Scanpath similarity metrics: DTW, DTW with duration, time-delay embedding,
// Eyenalysis, MultiMatch and recurrence laminarity, plus paired evaluation.

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "scanflow/core.hpp"

namespace scanflow::metrics {

using json = nlohmann::json;

inline double distance_xy(const Fixation& a, const Fixation& b) { return std::hypot(a.x - b.x, a.y - b.y); }

inline double distance_xyt(const Fixation& a, const Fixation& b) {
    const double dx = a.x - b.x, dy = a.y - b.y, dt = a.t - b.t;
    return std::sqrt(dx * dx + dy * dy + dt * dt);
}

// Zero-based (i, j) index pairs from (0,0) to (|A|-1, |B|-1).
struct AlignmentPath {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
};

struct DtwResult {
    double cost = 0.0;
    AlignmentPath path;
};

namespace detail {

inline void require_nonempty(const Scanpath& a, const Scanpath& b) {
    if (a.empty() || b.empty()) throw ValidationError("scanpath must be non-empty", "fixations");
}

template <class Cost>
DtwResult dtw_align(std::size_t n, std::size_t m, Cost&& cost) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> acc((n + 1) * (m + 1), inf);
    auto D = [&](std::size_t i, std::size_t j) -> double& { return acc[i * (m + 1) + j]; };
    D(0, 0) = 0.0;
    for (std::size_t i = 1; i <= n; ++i)
        for (std::size_t j = 1; j <= m; ++j)
            D(i, j) = cost(i - 1, j - 1) + std::min({D(i - 1, j - 1), D(i - 1, j), D(i, j - 1)});

    // Backtrack; ties prefer the diagonal, then advancing A, then B.
    DtwResult r{D(n, m), {}};
    std::size_t i = n, j = m;
    while (i > 0 && j > 0) {
        r.path.pairs.emplace_back(i - 1, j - 1);
        if (i == 1 && j == 1) break;
        const double diag = D(i - 1, j - 1), up = D(i - 1, j), left = D(i, j - 1);
        if (diag <= up && diag <= left) {
            --i;
            --j;
        } else if (up <= left) {
            --i;
        } else {
            --j;
        }
    }
    std::reverse(r.path.pairs.begin(), r.path.pairs.end());
    return r;
}

} // namespace detail

// Minimum-cost monotone alignment on (x, y) positions.
inline DtwResult dtw_alignment(const Scanpath& a, const Scanpath& b) {
    detail::require_nonempty(a, b);
    return detail::dtw_align(a.size(), b.size(),
                             [&](std::size_t i, std::size_t j) { return distance_xy(a[i], b[j]); });
}

inline double dtw(const Scanpath& a, const Scanpath& b) { return dtw_alignment(a, b).cost; }

// Aligns on position only, then sums (x, y, t) distances along that alignment.
inline double dtwd(const Scanpath& a, const Scanpath& b) {
    const auto align = dtw_alignment(a, b);
    double total = 0.0;
    for (auto [i, j] : align.path.pairs) {
        if (!(a[i].t > 0) || !(b[j].t > 0)) throw ValidationError("dtwd requires fixation durations", "t");
        total += distance_xyt(a[i], b[j]);
    }
    return total;
}

// Time-delay embedding distance with window length `k`, averaged in both directions.
inline double tde(const Scanpath& a, const Scanpath& b, std::size_t k = 3) {
    if (k < 1) throw ValidationError("embedding length must be >= 1", "k");
    if (a.size() < k || b.size() < k) throw ValidationError("scanpath shorter than embedding length", "k");
    auto directed = [k](const Scanpath& p, const Scanpath& q) {
        double sum = 0.0;
        const std::size_t np = p.size() - k + 1, nq = q.size() - k + 1;
        for (std::size_t s = 0; s < np; ++s) {
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t u = 0; u < nq; ++u) {
                double d = 0.0;
                for (std::size_t o = 0; o < k; ++o) d += distance_xy(p[s + o], q[u + o]);
                best = std::min(best, d / static_cast<double>(k));
            }
            sum += best;
        }
        return sum / static_cast<double>(np);
    };
    return 0.5 * (directed(a, b) + directed(b, a));
}

inline double eyenalysis(const Scanpath& a, const Scanpath& b) {
    detail::require_nonempty(a, b);
    auto nearest_sum = [](const Scanpath& p, const Scanpath& q) {
        double s = 0.0;
        for (const auto& f : p.fixations) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& g : q.fixations) best = std::min(best, distance_xy(f, g));
            s += best;
        }
        return s;
    };
    return (nearest_sum(a, b) + nearest_sum(b, a)) / static_cast<double>(a.size() + b.size());
}

// ---------------------------------------------------------------------------
// MultiMatch

struct MultiMatchScore {
    double shape = 0, direction = 0, length = 0, position = 0, duration = 0, mean = 0;
};

struct MultiMatchOptions {
    bool simplify = false;
    double amplitude_threshold = 0.1;   // normalized units
    double direction_threshold = 45.0;  // degrees
    double duration_threshold = 0.3;    // seconds
    // Screen extent the normalized coordinates span; the diagonal scales all spatial terms.
    double screen_w = 1.0, screen_h = 1.0;
};

namespace detail {

struct Saccade {
    double x = 0, y = 0;   // start fixation
    double dx = 0, dy = 0;
    double duration = 0;   // duration of the start fixation
    double length() const { return std::hypot(dx, dy); }
    double angle_deg() const { return std::atan2(dy, dx) * 180.0 / 3.14159265358979323846; }
};

inline double angle_between_deg(double dx1, double dy1, double dx2, double dy2) {
    double d = std::abs(std::atan2(dy1, dx1) - std::atan2(dy2, dx2)) * 180.0 / 3.14159265358979323846;
    return d > 180.0 ? 360.0 - d : d;
}

inline std::vector<Fixation> simplify_fixations(std::vector<Fixation> f, const MultiMatchOptions& o) {
    bool changed = true;
    while (changed && f.size() > 2) {
        changed = false;
        for (std::size_t i = 1; i + 1 < f.size(); ++i) {
            const double dx1 = f[i].x - f[i - 1].x, dy1 = f[i].y - f[i - 1].y;
            const double dx2 = f[i + 1].x - f[i].x, dy2 = f[i + 1].y - f[i].y;
            const bool short_pair = std::hypot(dx1, dy1) < o.amplitude_threshold &&
                                    std::hypot(dx2, dy2) < o.amplitude_threshold;
            const bool collinear = angle_between_deg(dx1, dy1, dx2, dy2) < o.direction_threshold &&
                                   f[i].t < o.duration_threshold;
            if (short_pair || collinear) {
                f[i - 1].t += f[i].t;
                f.erase(f.begin() + static_cast<std::ptrdiff_t>(i));
                changed = true;
                break;
            }
        }
    }
    return f;
}

inline std::vector<Saccade> saccades(const std::vector<Fixation>& f) {
    std::vector<Saccade> s;
    for (std::size_t i = 0; i + 1 < f.size(); ++i)
        s.push_back({f[i].x, f[i].y, f[i + 1].x - f[i].x, f[i + 1].y - f[i].y, f[i].t});
    return s;
}

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace detail

// Saccade-vector MultiMatch: align on vector differences, then score the five
// aspects on the aligned pairs (median difference, normalized to [0,1]).
inline MultiMatchScore multimatch(const Scanpath& a, const Scanpath& b, const MultiMatchOptions& opt = {}) {
    if (a.size() < 2 || b.size() < 2)
        throw ValidationError("multimatch needs at least 2 fixations per scanpath", "fixations");
    auto fa = opt.simplify ? detail::simplify_fixations(a.fixations, opt) : a.fixations;
    auto fb = opt.simplify ? detail::simplify_fixations(b.fixations, opt) : b.fixations;
    const auto sa = detail::saccades(fa), sb = detail::saccades(fb);

    const auto align = detail::dtw_align(sa.size(), sb.size(), [&](std::size_t i, std::size_t j) {
        return std::hypot(sa[i].dx - sb[j].dx, sa[i].dy - sb[j].dy);
    });

    const double diag = std::hypot(opt.screen_w, opt.screen_h);
    std::vector<double> vec, dir, len, pos, dur;
    for (auto [i, j] : align.path.pairs) {
        const auto& p = sa[i];
        const auto& q = sb[j];
        vec.push_back(std::hypot(p.dx - q.dx, p.dy - q.dy));
        dir.push_back(detail::angle_between_deg(p.dx, p.dy, q.dx, q.dy));
        len.push_back(std::abs(p.length() - q.length()));
        pos.push_back(std::hypot(p.x - q.x, p.y - q.y));
        const double mx = std::max(p.duration, q.duration);
        dur.push_back(mx > 0 ? std::abs(p.duration - q.duration) / mx : 0.0);
    }
    auto unit = [](double v) { return std::clamp(v, 0.0, 1.0); };
    MultiMatchScore s;
    s.shape = unit(1.0 - detail::median(vec) / (2.0 * diag));
    s.direction = unit(1.0 - detail::median(dir) / 180.0);
    s.length = unit(1.0 - detail::median(len) / diag);
    s.position = unit(1.0 - detail::median(pos) / diag);
    s.duration = unit(1.0 - detail::median(dur));
    s.mean = (s.shape + s.direction + s.length + s.position + s.duration) / 5.0;
    return s;
}

// ---------------------------------------------------------------------------
// Laminarity

// Percentage of recurrent fixation pairs (upper triangle, distance <= radius)
// that lie on a horizontal or vertical run of length >= 2 in the recurrence
// matrix. 0 when nothing recurs.
inline double laminarity(const Scanpath& path, double radius) {
    if (!(radius > 0)) throw ValidationError("recurrence radius must be positive", "radius");
    if (path.empty()) throw ValidationError("scanpath must be non-empty", "fixations");
    const std::size_t n = path.size();
    std::vector<char> rec(n * n, 0);
    std::size_t total = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (distance_xy(path[i], path[j]) <= radius) {
                rec[i * n + j] = 1;
                ++total;
            }
    if (total == 0) return 0.0;
    std::vector<char> on_line(n * n, 0);
    auto mark_runs = [&](bool horizontal) {
        for (std::size_t a = 0; a < n; ++a) {
            std::size_t b = 0;
            while (b < n) {
                auto idx = [&](std::size_t k) { return horizontal ? a * n + k : k * n + a; };
                if (!rec[idx(b)]) {
                    ++b;
                    continue;
                }
                std::size_t e = b;
                while (e < n && rec[idx(e)]) ++e;
                if (e - b >= 2)
                    for (std::size_t k = b; k < e; ++k) on_line[idx(k)] = 1;
                b = e;
            }
        }
    };
    mark_runs(true);
    mark_runs(false);
    std::size_t laminar = 0;
    for (std::size_t k = 0; k < n * n; ++k) laminar += on_line[k];
    return 100.0 * static_cast<double>(laminar) / static_cast<double>(total);
}

inline double laminarity(std::span<const Scanpath> paths, double radius = 0.05) {
    if (!(radius > 0)) throw ValidationError("recurrence radius must be positive", "radius");
    if (paths.empty()) throw ValidationError("no scanpaths given", "paths");
    double s = 0.0;
    for (const auto& p : paths) s += laminarity(p, radius);
    return s / static_cast<double>(paths.size());
}

// ---------------------------------------------------------------------------
// Paired evaluation

enum class Pairing {
    PoolAll,      // prediction vs every ground truth of its stimulus
    SameViewer,   // prediction vs ground truths of the prediction's viewer only
};

inline const char* to_string(Pairing p) { return p == Pairing::PoolAll ? "pool_all" : "same_viewer"; }

inline const std::array<const char*, 10>& metric_columns() {
    static const std::array<const char*, 10> cols = {"DTW",      "TDE",       "Eyenalysis", "DTWD",     "Shape",
                                                     "Direction", "Length",   "Position",   "Duration", "Mean"};
    return cols;
}

struct MetricStat {
    double mean = 0.0;
    double sd = 0.0;
    std::size_t n = 0;
};

struct MetricReport {
    Pairing pairing = Pairing::PoolAll;
    std::size_t pairs = 0;
    std::array<MetricStat, 10> stats{};

    const MetricStat& operator[](const std::string& name) const {
        const auto& cols = metric_columns();
        for (std::size_t i = 0; i < cols.size(); ++i)
            if (name == cols[i]) return stats[i];
        throw ValidationError("unknown metric '" + name + "'", "metric");
    }
};

struct EvaluateOptions {
    Pairing pairing = Pairing::PoolAll;
    std::size_t tde_k = 3;
    MultiMatchOptions multimatch;
};

namespace detail {

struct Accumulator {
    std::vector<double> values;
    MetricStat finish() const {
        MetricStat s;
        s.n = values.size();
        if (s.n == 0) return s;
        double sum = 0.0;
        for (double v : values) sum += v;
        s.mean = sum / static_cast<double>(s.n);
        double ss = 0.0;
        for (double v : values) ss += (v - s.mean) * (v - s.mean);
        s.sd = std::sqrt(ss / static_cast<double>(s.n));
        return s;
    }
};

} // namespace detail

// Scores every (prediction, ground truth) pair selected by the pairing policy
// and reports the mean and population SD per metric. TDE and MultiMatch skip
// pairs too short for them, so their `n` can be smaller than `pairs`.
inline MetricReport evaluate(std::span<const Scanpath> predictions, const Dataset& ground_truth,
                             const EvaluateOptions& opt = {}) {
    if (predictions.empty()) throw ValidationError("no predictions to evaluate", "predictions");
    std::array<detail::Accumulator, 10> acc;
    MetricReport rep;
    rep.pairing = opt.pairing;
    for (const auto& pred : predictions) {
        if (!ground_truth.has_stimulus(pred.stimulus_id))
            throw ValidationError("prediction for unknown stimulus '" + pred.stimulus_id + "'", "stimulus");
        for (const auto* gt : ground_truth.paths_for(pred.stimulus_id)) {
            if (opt.pairing == Pairing::SameViewer && gt->viewer_id != pred.viewer_id) continue;
            ++rep.pairs;
            acc[0].values.push_back(dtw(pred, *gt));
            if (pred.size() >= opt.tde_k && gt->size() >= opt.tde_k)
                acc[1].values.push_back(tde(pred, *gt, opt.tde_k));
            acc[2].values.push_back(eyenalysis(pred, *gt));
            acc[3].values.push_back(dtwd(pred, *gt));
            if (pred.size() >= 2 && gt->size() >= 2) {
                const auto mm = multimatch(pred, *gt, opt.multimatch);
                for (std::size_t k = 0; k < 6; ++k)
                    acc[4 + k].values.push_back(std::array{mm.shape, mm.direction, mm.length, mm.position,
                                                           mm.duration, mm.mean}[k]);
            }
        }
    }
    for (std::size_t i = 0; i < acc.size(); ++i) rep.stats[i] = acc[i].finish();
    return rep;
}

inline json report_json(const MetricReport& r) {
    json j;
    const auto& cols = metric_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) {
        const std::string key = i >= 4 ? std::string("MultiMatch.") + cols[i] : cols[i];
        j[key] = {{"mean", r.stats[i].mean}, {"sd", r.stats[i].sd}, {"n", r.stats[i].n}};
    }
    j["pairing"] = to_string(r.pairing);
    j["pairs"] = r.pairs;
    return j;
}

// Column-aligned table: distances as "mean ± sd", MultiMatch components as means.
inline std::string report_table(const MetricReport& r, const std::string& model_name = "Model") {
    const auto& cols = metric_columns();
    std::ostringstream os;
    const int name_w = std::max<int>(8, static_cast<int>(model_name.size()) + 2);
    os << std::left << std::setw(name_w) << "" << std::right;
    for (std::size_t i = 0; i < 4; ++i) os << std::setw(18) << cols[i];
    os << "  |" << std::setw(60) << "MultiMatch" << '\n';
    os << std::left << std::setw(name_w) << "Model" << std::right;
    for (std::size_t i = 0; i < 4; ++i) os << std::setw(18) << "";
    os << "  |";
    for (std::size_t i = 4; i < cols.size(); ++i) os << std::setw(10) << cols[i];
    os << '\n';
    os << std::left << std::setw(name_w) << model_name << std::right << std::fixed << std::setprecision(3);
    for (std::size_t i = 0; i < 4; ++i) {
        std::ostringstream cell;
        cell << std::fixed << std::setprecision(3) << r.stats[i].mean << " ± " << r.stats[i].sd;
        os << std::setw(19) << cell.str();  // '±' is two bytes in UTF-8
    }
    os << "  |";
    for (std::size_t i = 4; i < cols.size(); ++i) os << std::setw(10) << r.stats[i].mean;
    os << '\n';
    return os.str();
}

} // namespace scanflow::metrics
