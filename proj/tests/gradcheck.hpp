#pragma once

// Central finite-difference check of analytic parameter gradients along
// random directions restricted to random slices of one tensor at a time.

#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "scanflow/model.hpp"

namespace gradcheck {

using scanflow::PolicyModel;
using scanflow::ad::Parameter;

struct GroupResult {
    std::string group;
    int slices = 0;
    double max_rel_err = 0.0;
};

// Parameter groups: image encoder, viewer encoder, decoder, heads, viewer
// embedding table.
inline std::map<std::string, std::vector<Parameter*>> groups(PolicyModel& m) {
    std::map<std::string, std::vector<Parameter*>> g;
    for (auto& [name, p] : m.params()) g[name.substr(0, name.find('/'))].push_back(&p);
    for (auto& [_, p] : m.viewers()) g["viewer_emb"].push_back(&p);
    return g;
}

// `value` evaluates the scalar at the current parameters; `gradient` fills
// Parameter::grad for every parameter (after zeroing).
inline std::vector<GroupResult> run(PolicyModel& model, const std::function<double()>& value,
                                    const std::function<void()>& gradient, int slices_per_group, std::uint64_t seed,
                                    double h = 1e-5) {
    auto g = groups(model);
    for (auto& [_, ps] : g)
        for (auto* p : ps) p->zero_grad();
    gradient();
    // central-difference rounding noise grows with |f|, so the floor does too
    const double floor = 1e-6 * std::max(1.0, std::abs(value()));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    std::vector<GroupResult> out;
    for (auto& [name, ps] : g) {
        GroupResult r{name, 0, 0.0};
        for (int s = 0; s < slices_per_group; ++s) {
            Parameter* p = ps[std::uniform_int_distribution<std::size_t>(0, ps.size() - 1)(rng)];
            const auto n = static_cast<std::size_t>(p->value.size());
            const std::size_t len = std::min<std::size_t>(n, 16);
            const std::size_t start = std::uniform_int_distribution<std::size_t>(0, n - len)(rng);
            std::vector<double> dir(len);
            double norm = 0.0;
            for (auto& d : dir) {
                d = normal(rng);
                norm += d * d;
            }
            norm = std::sqrt(norm);
            double analytic = 0.0;
            for (std::size_t i = 0; i < len; ++i) {
                dir[i] /= norm;
                analytic += p->grad.data()[start + i] * dir[i];
            }
            const std::vector<double> saved(p->value.data() + start, p->value.data() + start + len);
            auto shift = [&](double eps) {
                for (std::size_t i = 0; i < len; ++i) p->value.data()[start + i] = saved[i] + eps * dir[i];
            };
            shift(h);
            const double fp = value();
            shift(-h);
            const double fm = value();
            shift(0.0);
            const double numeric = (fp - fm) / (2 * h);
            const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
            r.max_rel_err = std::max(r.max_rel_err, std::abs(analytic - numeric) / denom);
            ++r.slices;
        }
        out.push_back(r);
    }
    return out;
}

} // namespace gradcheck
