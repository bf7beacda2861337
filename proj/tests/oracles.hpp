#pragma once

// Independent reference implementations used to check the library: brute
// force where the search space is small, straight-line code elsewhere. None
// of these call into the code they check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "scanflow/core.hpp"
#include "scanflow/layout.hpp"

namespace oracle {

using scanflow::Fixation;
using scanflow::Scanpath;

inline double dxy(const Fixation& a, const Fixation& b) { return std::hypot(a.x - b.x, a.y - b.y); }

inline double dxyt(const Fixation& a, const Fixation& b) {
    return std::sqrt((a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y) + (a.t - b.t) * (a.t - b.t));
}

// Minimum summed xy distance over every monotone alignment, enumerated
// path by path.
inline double exhaustive_dtw(const std::vector<Fixation>& a, const std::vector<Fixation>& b) {
    double best = std::numeric_limits<double>::infinity();
    std::function<void(std::size_t, std::size_t, double)> walk = [&](std::size_t i, std::size_t j, double acc) {
        acc += dxy(a[i], b[j]);
        if (i + 1 == a.size() && j + 1 == b.size()) {
            best = std::min(best, acc);
            return;
        }
        if (i + 1 < a.size()) walk(i + 1, j, acc);
        if (j + 1 < b.size()) walk(i, j + 1, acc);
        if (i + 1 < a.size() && j + 1 < b.size()) walk(i + 1, j + 1, acc);
    };
    walk(0, 0, 0.0);
    return best;
}

// Number of monotone alignments (Delannoy number), for sanity checks.
inline std::size_t alignment_count(std::size_t n, std::size_t m) {
    std::size_t count = 0;
    std::function<void(std::size_t, std::size_t)> walk = [&](std::size_t i, std::size_t j) {
        if (i + 1 == n && j + 1 == m) {
            ++count;
            return;
        }
        if (i + 1 < n) walk(i + 1, j);
        if (j + 1 < m) walk(i, j + 1);
        if (i + 1 < n && j + 1 < m) walk(i + 1, j + 1);
    };
    walk(0, 0);
    return count;
}

// Duration-aware DTW: path chosen on xy cost (ties prefer diagonal, then
// advancing a, then advancing b, when backtracking from the end), cost
// summed in xyt along it.
inline double straight_dtwd(const std::vector<Fixation>& a, const std::vector<Fixation>& b) {
    const std::size_t n = a.size(), m = b.size();
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> D(n + 1, std::vector<double>(m + 1, inf));
    D[0][0] = 0.0;
    for (std::size_t i = 1; i <= n; ++i)
        for (std::size_t j = 1; j <= m; ++j)
            D[i][j] = dxy(a[i - 1], b[j - 1]) + std::min({D[i - 1][j - 1], D[i - 1][j], D[i][j - 1]});
    std::size_t i = n, j = m;
    double cost = dxyt(a[i - 1], b[j - 1]);
    while (i > 1 || j > 1) {
        const double diag = D[i - 1][j - 1], up = D[i - 1][j], left = D[i][j - 1];
        if (diag <= up && diag <= left) {
            --i;
            --j;
        } else if (up <= left) {
            --i;
        } else {
            --j;
        }
        cost += dxyt(a[i - 1], b[j - 1]);
    }
    return cost;
}

inline double brute_tde(const std::vector<Fixation>& a, const std::vector<Fixation>& b, std::size_t k) {
    auto direction = [&](const std::vector<Fixation>& p, const std::vector<Fixation>& q) {
        double total = 0.0;
        std::size_t count = 0;
        for (std::size_t s = 0; s + k <= p.size(); ++s) {
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t r = 0; r + k <= q.size(); ++r) {
                double d = 0.0;
                for (std::size_t u = 0; u < k; ++u) d += dxy(p[s + u], q[r + u]);
                best = std::min(best, d / static_cast<double>(k));
            }
            total += best;
            ++count;
        }
        return total / static_cast<double>(count);
    };
    return 0.5 * (direction(a, b) + direction(b, a));
}

inline double brute_eyenalysis(const std::vector<Fixation>& a, const std::vector<Fixation>& b) {
    double s = 0.0;
    for (const auto& p : a) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : b) best = std::min(best, dxy(p, q));
        s += best;
    }
    for (const auto& q : b) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& p : a) best = std::min(best, dxy(p, q));
        s += best;
    }
    return s / static_cast<double>(a.size() + b.size());
}

// Episode reward written out longhand: per step, zero every grid cell whose
// centre falls in the ellipse of any earlier predicted fixation, read the
// bilinear value (0 inside an earlier ellipse or off-image), then combine
// with the DTWD distance.
inline double straight_reward(const std::vector<Fixation>& pred, const std::vector<Fixation>& truth,
                              const std::vector<double>& grid, int w, int h, double m_w, double m_h, bool use_sal,
                              bool use_dtwd, bool use_ior) {
    auto inside = [&](double px, double py, const Fixation& f) {
        const double ex = (px - f.x * w) / m_w, ey = (py - f.y * h) / m_h;
        return ex * ex + ey * ey <= 1.0;
    };
    double sal = 0.0;
    if (use_sal) {
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const auto& f = pred[i];
            if (f.x < 0 || f.x > 1 || f.y < 0 || f.y > 1) continue;
            const std::size_t priors = use_ior ? i : 0;
            auto cell = [&](int c, int r) {
                for (std::size_t k = 0; k < priors; ++k)
                    if (inside(c + 0.5, r + 0.5, pred[k])) return 0.0;
                return grid[static_cast<std::size_t>(r) * w + c];
            };
            bool masked = false;
            for (std::size_t k = 0; k < priors; ++k) masked = masked || inside(f.x * w, f.y * h, pred[k]);
            if (masked) continue;
            double u = f.x * w - 0.5, v = f.y * h - 0.5;
            u = std::min(std::max(u, 0.0), w - 1.0);
            v = std::min(std::max(v, 0.0), h - 1.0);
            const int c0 = static_cast<int>(u), r0 = static_cast<int>(v);
            const int c1 = std::min(c0 + 1, w - 1), r1 = std::min(r0 + 1, h - 1);
            const double fu = u - c0, fv = v - r0;
            const double val = (1 - fv) * ((1 - fu) * cell(c0, r0) + fu * cell(c1, r0)) +
                               fv * ((1 - fu) * cell(c0, r1) + fu * cell(c1, r1));
            sal += std::min(1.0, std::max(0.0, val));
        }
    }
    return (use_dtwd ? -straight_dtwd(pred, truth) : 0.0) + sal;
}

inline std::vector<Fixation> random_fixations(std::mt19937_64& rng, std::size_t n) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Fixation> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back({u(rng), u(rng), 0.05 + u(rng)});
    return out;
}

inline Scanpath random_path(std::mt19937_64& rng, std::size_t n, const std::string& stim = "s") {
    return {stim, std::nullopt, random_fixations(rng, n)};
}

// ---------------------------------------------------------------------------
// Layout search by brute force. Uses the spec only as plain data.

struct Box {
    double x, y, w, h;
    bool operator==(const Box&) const = default;
};

enum class Reader { Rows, Columns };

// Centre start, then element centres in reading order; duration from area
// and height on the page.
inline std::vector<Fixation> scripted_reading(const std::vector<std::string>& ids, const std::vector<Box>& boxes,
                                              Reader reader) {
    std::vector<std::size_t> idx(ids.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        const auto& A = boxes[a];
        const auto& B = boxes[b];
        const double a1 = reader == Reader::Rows ? A.y : A.x, b1 = reader == Reader::Rows ? B.y : B.x;
        const double a2 = reader == Reader::Rows ? A.x : A.y, b2 = reader == Reader::Rows ? B.x : B.y;
        if (a1 != b1) return a1 < b1;
        if (a2 != b2) return a2 < b2;
        return ids[a] < ids[b];
    });
    std::vector<Fixation> out{{0.5, 0.5, 0.3}};
    for (auto i : idx) {
        const auto& b = boxes[i];
        out.push_back({b.x + b.w / 2, b.y + b.h / 2, 0.15 + 0.8 * b.w * b.h + 0.05 * b.y});
    }
    return out;
}

// (satisfied, summed duration of the qualifying run).
inline std::pair<bool, double> order_score(const std::vector<Fixation>& path, const std::vector<std::string>& ids,
                                           const std::vector<Box>& boxes, const std::vector<std::string>& req) {
    std::vector<std::string> hit;  // "" for background
    for (const auto& f : path) {
        std::string h;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const auto& b = boxes[i];
            const bool in = f.x >= b.x && f.x <= b.x + b.w && f.y >= b.y && f.y <= b.y + b.h;
            if (in && (h.empty() || ids[i] < h)) h = ids[i];
        }
        hit.push_back(h);
    }
    std::size_t i = 0;
    while (i < hit.size() && hit[i].empty()) ++i;
    // collapse the run into (element, total duration) groups
    std::vector<std::pair<std::string, double>> groups;
    for (; i < hit.size() && !hit[i].empty(); ++i) {
        if (!groups.empty() && groups.back().first == hit[i]) groups.back().second += path[i].t;
        else groups.emplace_back(hit[i], path[i].t);
    }
    if (groups.size() < req.size()) return {false, 0.0};
    double total = 0.0;
    for (std::size_t k = 0; k < req.size(); ++k) {
        if (groups[k].first != req[k]) return {false, 0.0};
        total += groups[k].second;
    }
    return {true, total};
}

struct LayoutOracleResult {
    std::size_t candidates = 0;
    std::size_t best_pass = 0;
    double best_objective = 0.0;
    std::vector<std::vector<Box>> argmax;  // every candidate achieving the best score
};

// Places movable elements in every legal way (own recursion over grid
// anchors), scores each candidate for each reader, and keeps the best
// (viewers passing, mean duration among passing viewers). A single viewer
// counts as satisfied when its one scripted path passes.
inline LayoutOracleResult brute_force_layout(const scanflow::layout::LayoutSpec& spec,
                                             const std::vector<std::string>& req, const std::vector<Reader>& readers,
                                             double tol = 1e-12) {
    const std::size_t n = spec.elements.size();
    std::vector<std::string> ids;
    std::vector<Box> boxes;
    for (const auto& e : spec.elements) {
        ids.push_back(e.id);
        boxes.push_back({e.rect.x, e.rect.y, e.rect.w, e.rect.h});
    }
    // cell occupancy grid
    std::vector<int> occ(static_cast<std::size_t>(spec.rows * spec.cols), 0);
    auto cells_of = [&](const Box& b) {
        std::vector<int> c;
        const int c0 = static_cast<int>(std::lround(b.x * spec.cols)), r0 = static_cast<int>(std::lround(b.y * spec.rows));
        const int cw = static_cast<int>(std::lround(b.w * spec.cols)), rh = static_cast<int>(std::lround(b.h * spec.rows));
        for (int r = r0; r < r0 + rh; ++r)
            for (int cc = c0; cc < c0 + cw; ++cc) c.push_back(r * spec.cols + cc);
        return c;
    };
    for (std::size_t i = 0; i < n; ++i)
        if (spec.elements[i].fixed)
            for (int c : cells_of(boxes[i])) ++occ[static_cast<std::size_t>(c)];

    LayoutOracleResult res;
    bool have = false;
    std::function<void(std::size_t)> place = [&](std::size_t k) {
        if (k == n) {
            ++res.candidates;
            std::size_t pass = 0;
            double obj = 0.0;
            for (auto rd : readers) {
                auto [ok, d] = order_score(scripted_reading(ids, boxes, rd), ids, boxes, req);
                if (ok) {
                    ++pass;
                    obj += d;
                }
            }
            const double mean = pass ? obj / pass : 0.0;
            if (!have || pass > res.best_pass || (pass == res.best_pass && mean > res.best_objective + tol)) {
                have = true;
                res.best_pass = pass;
                res.best_objective = mean;
                res.argmax = {boxes};
            } else if (pass == res.best_pass && std::abs(mean - res.best_objective) <= tol) {
                res.argmax.push_back(boxes);
            }
            return;
        }
        const auto& e = spec.elements[k];
        if (e.fixed) return place(k + 1);
        std::vector<std::pair<int, int>> spans;
        for (const auto& s : e.size_classes) spans.emplace_back(s.cols, s.rows);
        if (spans.empty()) spans.emplace_back(1, 1);
        for (auto [sc, sr] : spans)
            for (int r = 0; r + sr <= spec.rows; ++r)
                for (int c = 0; c + sc <= spec.cols; ++c) {
                    if (!e.allowed_cells.empty()) {
                        bool allowed = false;
                        for (const auto& a : e.allowed_cells) allowed = allowed || (a.row == r && a.col == c);
                        if (!allowed) continue;
                    }
                    const Box b{double(c) / spec.cols, double(r) / spec.rows, double(sc) / spec.cols,
                                double(sr) / spec.rows};
                    const auto cells = cells_of(b);
                    bool free = true;
                    for (int x : cells) free = free && occ[static_cast<std::size_t>(x)] == 0;
                    if (!free) continue;
                    for (int x : cells) ++occ[static_cast<std::size_t>(x)];
                    const Box saved = boxes[k];
                    boxes[k] = b;
                    place(k + 1);
                    boxes[k] = saved;
                    for (int x : cells) --occ[static_cast<std::size_t>(x)];
                }
    };
    place(0);
    return res;
}

// Seeded toy spec: small grid, a handful of elements with random spans, some
// pinned, and a three-element order requirement.
inline std::pair<scanflow::layout::LayoutSpec, std::vector<std::string>> random_layout_spec(std::uint64_t seed) {
    using namespace scanflow::layout;
    std::mt19937_64 rng(seed);
    auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
    LayoutSpec s;
    s.rows = pick(2, 3);
    s.cols = pick(2, 3);
    const int n = pick(3, std::min(5, s.rows * s.cols));
    std::vector<int> occupied(static_cast<std::size_t>(s.rows * s.cols), 0);
    int placed = 0;
    for (int i = 0; i < n; ++i) {
        LayoutElement e;
        e.id = std::string("e") + char('1' + i);
        e.fixed = placed >= 3 && pick(0, 2) == 0;
        if (!e.fixed && pick(0, 3) == 0) e.size_classes = {{1, 1}, {pick(1, 2), 1}};
        // initial rect: first free cell scanning rows
        for (int c = 0; c < s.rows * s.cols; ++c)
            if (!occupied[static_cast<std::size_t>(c)]) {
                occupied[static_cast<std::size_t>(c)] = 1;
                e.rect = cell_rect(s, c / s.cols, c % s.cols, {1, 1});
                break;
            }
        s.elements.push_back(e);
        ++placed;
    }
    std::vector<std::string> ids;
    for (const auto& e : s.elements) ids.push_back(e.id);
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(3);
    return {s, ids};
}

} // namespace oracle
