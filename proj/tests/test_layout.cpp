#include <gtest/gtest.h>

#include "oracles.hpp"
#include "scanflow/layout.hpp"
#include "scanflow/svg.hpp"
#include "util.hpp"

using namespace scanflow;
using namespace scanflow::layout;

namespace {

LayoutSpec three_in_a_row() {
    LayoutSpec s;
    s.rows = 2;
    s.cols = 4;
    for (int i = 0; i < 4; ++i) {
        LayoutElement e;
        e.id = "e" + std::to_string(i + 1);
        e.rect = cell_rect(s, 0, i, {1, 1});
        e.fixed = true;
        s.elements.push_back(e);
    }
    return s;
}

Scanpath hits_path(const LayoutSpec& s, const std::vector<std::string>& ids, std::vector<double> t = {}) {
    Scanpath p{"layout", std::nullopt, {}};
    for (std::size_t i = 0; i < ids.size(); ++i) {
        Fixation f{0.5, 0.99, t.empty() ? 0.2 : t[i]};
        if (!ids[i].empty()) {
            const auto& r = s.find(ids[i])->rect;
            f.x = r.cx();
            f.y = r.cy();
        }
        p.fixations.push_back(f);
    }
    return p;
}

LayoutSpec movable_grid(int n_movable, int n_fixed) {
    LayoutSpec s;
    int k = 0;
    for (int i = 0; i < n_fixed + n_movable; ++i) {
        LayoutElement e;
        e.id = "e" + std::to_string(i + 1);
        e.rect = cell_rect(s, k / 2, k % 2, {1, 1});
        e.fixed = i < n_fixed;
        ++k;
        s.elements.push_back(e);
    }
    return s;
}

} // namespace

TEST(HitTest, CentreBackgroundAndSharedEdge) {
    auto s = three_in_a_row();
    s.rows = 2;
    s.elements[0].rect = {0, 0, 0.25, 0.5};
    s.elements[1].rect = {0.25, 0, 0.25, 0.5};
    s.elements[2].rect = {0.5, 0, 0.25, 0.5};
    s.elements[3].rect = {0.75, 0, 0.25, 0.5};
    EXPECT_EQ(element_hit_test({0.125, 0.25, 0.2}, s), "e1");
    EXPECT_EQ(element_hit_test({0.5, 0.8, 0.2}, s), std::nullopt);
    EXPECT_EQ(element_hit_test({0.25, 0.25, 0.2}, s), "e1");
    EXPECT_EQ(element_hit_test({0.5, 0.25, 0.2}, s), "e2");
}

TEST(OrderConstraint, WorkedInstances) {
    const auto s = three_in_a_row();
    const std::vector<std::string> req{"e1", "e2", "e3"};
    auto c = check_order_constraint(hits_path(s, {"e1", "e1", "e2", "e3", "e4"}), s, req);
    EXPECT_TRUE(c.satisfied);
    EXPECT_EQ(c.M, 4u);
    EXPECT_FALSE(check_order_constraint(hits_path(s, {"e2", "e1", "e3"}), s, req).satisfied);
    EXPECT_FALSE(check_order_constraint(hits_path(s, {"e1", "e2"}), s, req).satisfied);
}

TEST(OrderConstraint, BackgroundRules) {
    const auto s = three_in_a_row();
    const std::vector<std::string> req{"e1", "e2", "e3"};
    auto c = check_order_constraint(hits_path(s, {"", "e1", "e2", "e3"}), s, req);
    EXPECT_TRUE(c.satisfied);
    EXPECT_EQ(c.start, 2u);
    EXPECT_EQ(c.M, 4u);
    EXPECT_FALSE(check_order_constraint(hits_path(s, {"e1", "", "e2", "e3"}), s, req).satisfied);
    c = check_order_constraint(hits_path(s, {"e1", "e2", "e3", "e3", "e1"}), s, req);
    EXPECT_EQ(c.M, 4u);
}

TEST(Objective, SumsQualifyingRun) {
    const auto s = three_in_a_row();
    const std::vector<std::string> req{"e1", "e2", "e3"};
    EXPECT_NEAR(duration_objective(hits_path(s, {"e1", "e2", "e2", "e3"}, {0.4, 0.3, 0.5, 0.2}), s, req), 1.4, 1e-12);
    EXPECT_THROW(duration_objective(hits_path(s, {"e2", "e1", "e3"}), s, req), ValidationError);
    // satisfied implies M >= |req|
    const auto c = check_order_constraint(hits_path(s, {"e1", "e2", "e3"}), s, req);
    EXPECT_GE(c.M, req.size());
}

TEST(Enumerate, Counts) {
    EXPECT_EQ(enumerate_layouts(movable_grid(1, 2)).size(), 2u);  // 4 cells minus 2 occupied
    EXPECT_EQ(enumerate_layouts(movable_grid(0, 3)).size(), 1u);
    EXPECT_EQ(enumerate_layouts(movable_grid(3, 0)).size(), 24u);
    auto s = movable_grid(1, 0);
    EXPECT_EQ(enumerate_layouts(s).size(), 4u);
    for (const auto& l : enumerate_layouts(movable_grid(3, 0))) EXPECT_NO_THROW(validate_layout(l));
}

TEST(Enumerate, CapEnforced) {
    auto s = movable_grid(3, 0);
    s.cap = 10;
    try {
        enumerate_layouts(s);
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_EQ(e.field(), "cap");
    }
}

TEST(Optimize, UnknownOrderElementRejected) {
    ScriptedPredictor pred;
    EXPECT_THROW(optimize(movable_grid(3, 0), {"e1", "e2", "nope"}, pred), ValidationError);
    EXPECT_THROW(optimize(movable_grid(3, 0), {"e1", "e2", "e2"}, pred), ValidationError);
}

TEST(Optimize, UnreachableOrderReportsUnsatisfied) {
    // the scan starts on the shared corner, which resolves to e1
    ScriptedPredictor pred;
    const auto r = optimize(movable_grid(3, 0), {"e3", "e1", "e2"}, pred);
    EXPECT_EQ(oracle::brute_force_layout(movable_grid(3, 0), {"e3", "e1", "e2"}, {oracle::Reader::Rows}).best_pass, 0u);
    EXPECT_FALSE(r.constraint_satisfied);
    EXPECT_EQ(r.pass_count, 0u);
}

TEST(Optimize, ToyGridMatchesBruteForce) {
    const auto spec = movable_grid(3, 0);
    const std::vector<std::string> req{"e1", "e3", "e2"};
    ScriptedPredictor pred;
    const auto r = optimize(spec, req, pred);
    const auto o = oracle::brute_force_layout(spec, req, {oracle::Reader::Rows});
    EXPECT_EQ(r.candidates, o.candidates);
    EXPECT_EQ(r.pass_count, o.best_pass);
    EXPECT_NEAR(r.objective, o.best_objective, 1e-12);
    std::vector<oracle::Box> got;
    for (const auto& e : r.layout.elements) got.push_back({e.rect.x, e.rect.y, e.rect.w, e.rect.h});
    EXPECT_NE(std::find(o.argmax.begin(), o.argmax.end(), got), o.argmax.end());
    EXPECT_TRUE(r.constraint_satisfied);
}

TEST(Optimize, SeededSpecsMatchBruteForce) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        auto [spec, req] = oracle::random_layout_spec(seed);
        ScriptedPredictor pred({{"rows", ScanOrder::RowMajor}, {"cols", ScanOrder::ColumnMajor}});
        const auto r = optimize(spec, req, pred);
        const auto o = oracle::brute_force_layout(spec, req, {oracle::Reader::Columns, oracle::Reader::Rows});
        EXPECT_EQ(r.candidates, o.candidates) << seed;
        EXPECT_EQ(r.pass_count, o.best_pass) << seed;
        EXPECT_NEAR(r.objective, o.best_objective, 1e-12) << seed;
        std::vector<oracle::Box> got;
        for (const auto& e : r.layout.elements) got.push_back({e.rect.x, e.rect.y, e.rect.w, e.rect.h});
        EXPECT_NE(std::find(o.argmax.begin(), o.argmax.end(), got), o.argmax.end()) << seed;
    }
}

TEST(Optimize, PersonalizedPassRateAtLeastPopulation) {
    const auto spec = movable_grid(4, 0);
    const std::vector<std::string> req{"e2", "e3", "e4"};
    ScriptedPredictor pred({{"a", ScanOrder::RowMajor}, {"b", ScanOrder::ColumnMajor}});
    const auto pop = optimize(spec, req, pred);
    std::size_t personal = 0;
    for (const auto& v : pred.viewers()) {
        OptimizeOptions o;
        o.viewer = v;
        personal += optimize(spec, req, pred, o).pass_count;
    }
    EXPECT_GE(personal, pop.pass_count);
    OptimizeOptions bad;
    bad.viewer = "nobody";
    EXPECT_THROW(optimize(spec, req, pred, bad), ValidationError);
}

TEST(SpecJson, RoundTripAndErrors) {
    auto s = movable_grid(2, 1);
    s.elements[1].size_classes = {{1, 1}, {2, 1}};
    s.elements[2].allowed_cells = {{1, 0}, {1, 1}};
    s.elements[0].color = std::array<std::uint8_t, 3>{1, 2, 3};
    s.order = {"e1", "e2"};
    const auto j = spec_json(s);
    EXPECT_EQ(spec_json(parse_spec(j)), j);
    auto bad = j;
    bad["elements"][1]["rect"] = {0, 0, 0.5, 0.5};  // overlaps e1
    EXPECT_THROW(parse_spec(bad), ValidationError);
    EXPECT_THROW(parse_spec(nlohmann::json{{"grid", {{"rows", 2}}}}), ValidationError);
}

TEST(Render, BlocksAndSvg) {
    auto s = movable_grid(0, 2);
    const auto img = render_layout(s);
    EXPECT_EQ(img.width, 512);
    Scanpath p{"layout", std::nullopt, {{0.5, 0.5, 0.3}, {0.25, 0.25, 0.6}, {0.75, 0.25, 0.1}}};
    const auto svg_text = svg::render(p, 512, 512, &s);
    std::size_t circles = 0, lines = 0;
    for (std::size_t pos = 0; (pos = svg_text.find("<circle", pos)) != std::string::npos; ++pos) ++circles;
    for (std::size_t pos = 0; (pos = svg_text.find("<line", pos)) != std::string::npos; ++pos) ++lines;
    EXPECT_EQ(circles, 3u);
    EXPECT_EQ(lines, 2u);
    EXPECT_NE(svg_text.find("r=\"18.432\""), std::string::npos);  // 0.06 * 512 * 0.6
    EXPECT_EQ(svg::gradient_color(0), "#00c800");
    EXPECT_EQ(svg::gradient_color(1), "#0000dc");
}
